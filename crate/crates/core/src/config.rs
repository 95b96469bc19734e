//! Declarative pipeline configuration, read from a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::GenerativeParams;
use crate::policy::model::{OptimizerConfig, PolicyArch};
use crate::policy::{SyntheticSceneConfig, TrainConfig};
use crate::rcl::{Pooling, RclConfig, DEFAULT_TEMPERATURE, DEFAULT_WEIGHT};
use crate::region_match::{
    ExtractParams, MatchParams, DEFAULT_BOX_THRESHOLD, DEFAULT_DELTA_THRESHOLD, DEFAULT_SIMILARITY_FLOOR,
    DEFAULT_TEXT_THRESHOLD,
};

pub const DETECTORS: [&str; 1] = ["oracle"];
pub const EMBEDDERS: [&str; 1] = ["mean-color"];
pub const TRACKERS: [&str; 2] = ["translation", "static"];
pub const BACKGROUNDS: [&str; 2] = ["procedural", "checkerboard"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Expert dataset root (the `generate` command writes here).
    pub dataset: PathBuf,
    /// Root for all stage outputs.
    pub output: PathBuf,
    /// Reference-frame labels; defaults to `<dataset>/reference.json`.
    pub reference: Option<PathBuf>,
    /// Box records used by the oracle detector and as detection ground
    /// truth; defaults to `<dataset>/boxes.csv`.
    pub boxes: Option<PathBuf>,
    /// External detections to score instead of running the detector.
    pub detections: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            reference: None,
            boxes: None,
            detections: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub detector: String,
    pub embedder: String,
    pub tracker: String,
    pub background: String,
    /// Score the oracle detector assigns to every box.
    pub detector_score: f64,
    /// Deterministic box jitter of the oracle detector, in pixels.
    pub detector_jitter_px: f64,
    pub embedding_dim: usize,
    pub tracker_search_radius: i32,
    pub checkerboard_cell: u32,
    pub generative: GenerativeParams,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            detector: "oracle".into(),
            embedder: "mean-color".into(),
            tracker: "translation".into(),
            background: "procedural".into(),
            detector_score: 0.5,
            detector_jitter_px: 0.0,
            embedding_dim: 16,
            tracker_search_radius: 12,
            checkerboard_cell: 4,
            generative: GenerativeParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub delta_threshold: f64,
    pub similarity_floor: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            box_threshold: DEFAULT_BOX_THRESHOLD,
            text_threshold: DEFAULT_TEXT_THRESHOLD,
            delta_threshold: DEFAULT_DELTA_THRESHOLD,
            similarity_floor: DEFAULT_SIMILARITY_FLOOR,
        }
    }
}

impl ExtractConfig {
    pub fn params(&self) -> ExtractParams {
        ExtractParams {
            box_threshold: self.box_threshold,
            text_threshold: self.text_threshold,
            matching: self.matching(),
        }
    }

    pub fn matching(&self) -> MatchParams {
        MatchParams {
            delta_threshold: self.delta_threshold,
            similarity_floor: self.similarity_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ratio: usize,
    pub per_frame_backgrounds: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ratio: 5,
            per_frame_backgrounds: false,
        }
    }
}

/// Synthetic reach scene; geometry scales with `side`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub side: u32,
    pub train_textures: usize,
    pub test_textures: usize,
    pub episode_length: usize,
    pub ood_distractors: usize,
    /// Expert trajectories written by `generate`.
    pub trajectories: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            side: 32,
            train_textures: 2,
            test_textures: 8,
            episode_length: 12,
            ood_distractors: 0,
            trajectories: 2,
        }
    }
}

impl SceneSection {
    pub fn build(&self, seed: u64) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            episode_length: self.episode_length,
            ood_distractors: self.ood_distractors,
            ..SyntheticSceneConfig::at_size(self.side, self.train_textures, self.test_textures, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RclSection {
    pub enabled: bool,
    pub temperature: f64,
    pub weight: f64,
}

impl Default for RclSection {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: DEFAULT_TEMPERATURE,
            weight: DEFAULT_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub channels: usize,
    pub grid: usize,
    pub hidden: usize,
    pub rcl: RclSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let a = PolicyArch::default();
        Self {
            steps: o.steps,
            batch_size: o.batch_size,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            channels: a.channels,
            grid: a.grid,
            hidden: a.hidden,
            rcl: RclSection::default(),
        }
    }
}

impl TrainSection {
    pub fn build(&self, image_size: (u32, u32), seed: u64) -> TrainConfig {
        TrainConfig {
            arch: PolicyArch {
                image_size,
                channels: self.channels,
                grid: self.grid,
                hidden: self.hidden,
                ..PolicyArch::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                steps: self.steps,
                ..OptimizerConfig::default()
            },
            rcl: RclConfig {
                enabled: self.rcl.enabled,
                temperature: self.rcl.temperature,
                weight: self.rcl.weight,
                pooling: Pooling::SpatialMean,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
    pub trajectories: usize,
    pub episodes: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: crate::policy::sweep::DEFAULT_RATIOS.to_vec(),
            seeds: vec![0, 1, 2],
            trajectories: 8,
            episodes: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub iou_threshold: f64,
    pub nms_iou: f64,
    /// Also score detections re-labelled through reference matching.
    pub reclassify: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            nms_iou: 0.5,
            reclassify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; each stage derives its own seed from it by name.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub backends: BackendsConfig,
    pub extract: ExtractConfig,
    pub augment: AugmentConfig,
    pub scene: SceneSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub detect: DetectSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            paths: PathsConfig::default(),
            backends: BackendsConfig::default(),
            extract: ExtractConfig::default(),
            augment: AugmentConfig::default(),
            scene: SceneSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            detect: DetectSection::default(),
        }
    }
}

fn check_unit(key: &str, v: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(key, format!("{v} outside [0, 1]")));
    }
    Ok(())
}

fn check_registered(key: &str, name: &str, known: &[&str]) -> Result<(), ConfigError> {
    if !known.contains(&name) {
        return Err(invalid(key, format!("unknown backend `{name}` (known: {})", known.join(", "))));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.resolve_against(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.backends;
        check_registered("backends.detector", &b.detector, &DETECTORS)?;
        check_registered("backends.embedder", &b.embedder, &EMBEDDERS)?;
        check_registered("backends.tracker", &b.tracker, &TRACKERS)?;
        check_registered("backends.background", &b.background, &BACKGROUNDS)?;
        check_unit("backends.detector_score", b.detector_score)?;
        if !(b.detector_jitter_px >= 0.0) {
            return Err(invalid("backends.detector_jitter_px", "must be non-negative"));
        }
        if b.embedding_dim < 3 {
            return Err(invalid("backends.embedding_dim", "must be at least 3"));
        }
        if b.tracker_search_radius < 0 {
            return Err(invalid("backends.tracker_search_radius", "must be non-negative"));
        }
        if b.checkerboard_cell == 0 {
            return Err(invalid("backends.checkerboard_cell", "must be positive"));
        }
        let e = &self.extract;
        check_unit("extract.box_threshold", e.box_threshold)?;
        check_unit("extract.text_threshold", e.text_threshold)?;
        check_unit("extract.delta_threshold", e.delta_threshold)?;
        if !(-1.0..=1.0).contains(&e.similarity_floor) {
            return Err(invalid("extract.similarity_floor", "outside [-1, 1]"));
        }
        let s = &self.scene;
        if s.side < 16 || s.side % 16 != 0 {
            return Err(invalid("scene.side", "must be a positive multiple of 16"));
        }
        if s.train_textures == 0 || s.test_textures == 0 || s.trajectories == 0 {
            return Err(invalid("scene", "texture banks and trajectory count must be positive"));
        }
        self.scene.build(0).validate().map_err(|e| invalid("scene", e.to_string()))?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(invalid("train", "steps and batch_size must be positive"));
        }
        if !(t.learning_rate > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(invalid("train", "learning_rate must be positive and weight_decay non-negative"));
        }
        if !(t.rcl.temperature > 0.0) {
            return Err(invalid("train.rcl.temperature", "must be positive"));
        }
        if !(t.rcl.weight >= 0.0) {
            return Err(invalid("train.rcl.weight", "must be non-negative"));
        }
        self.train
            .build((s.side, s.side), 0)
            .arch
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        if self.eval.episodes == 0 || self.sweep.episodes == 0 {
            return Err(invalid("eval.episodes", "must be positive"));
        }
        if !self.sweep.ratios.contains(&0) {
            return Err(invalid("sweep.ratios", "must include 0"));
        }
        if self.sweep.seeds.is_empty() || self.sweep.trajectories == 0 {
            return Err(invalid("sweep", "needs at least one seed and one trajectory"));
        }
        let d = &self.detect;
        if !(d.iou_threshold > 0.0 && d.iou_threshold <= 1.0) {
            return Err(invalid("detect.iou_threshold", "outside (0, 1]"));
        }
        check_unit("detect.nms_iou", d.nms_iou)?;
        Ok(())
    }

    pub fn reference_path(&self) -> PathBuf {
        self.paths
            .reference
            .clone()
            .unwrap_or_else(|| self.paths.dataset.join("reference.json"))
    }

    pub fn boxes_path(&self) -> PathBuf {
        self.paths.boxes.clone().unwrap_or_else(|| self.paths.dataset.join("boxes.csv"))
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output);
        for p in [&mut self.reference, &mut self.boxes, &mut self.detections].into_iter().flatten() {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn documented_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.extract.box_threshold, 0.15);
        assert_eq!(cfg.extract.text_threshold, 0.15);
        assert_eq!(cfg.extract.delta_threshold, 0.7);
        assert_eq!(cfg.extract.similarity_floor, 0.3);
        assert_eq!(cfg.augment.ratio, 5);
        assert_eq!((cfg.train.rcl.temperature, cfg.train.rcl.weight), (0.07, 0.5));
        assert_eq!(cfg.sweep.ratios, vec![0, 1, 3, 5, 8, 15, 20]);
    }

    #[test]
    fn partial_documents_and_errors() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[augment]\nratio = 3\n").unwrap();
        assert_eq!((cfg.seed, cfg.augment.ratio), (7, 3));
        assert!(matches!(PipelineConfig::from_toml("seed = "), Err(ConfigError::Syntax(_))));
        assert!(matches!(PipelineConfig::from_toml("sed = 1"), Err(ConfigError::Syntax(_))));
        let err = PipelineConfig::from_toml("[backends]\ntracker = \"optical-flow\"\n").unwrap_err();
        assert!(err.to_string().contains("backends.tracker"));
        assert!(PipelineConfig::from_toml("[extract]\nbox_threshold = 1.5\n").is_err());
        assert!(PipelineConfig::from_toml("[sweep]\nratios = [1, 5]\n").is_err());
        assert!(PipelineConfig::from_toml("[scene]\nside = 20\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\ndataset = \"d\"\noutput = \"/abs/out\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.dataset, dir.path().join("d"));
        assert_eq!(cfg.paths.output, PathBuf::from("/abs/out"));
        assert_eq!(cfg.reference_path(), dir.path().join("d").join("reference.json"));
    }
}
