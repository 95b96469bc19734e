//! Pipeline stages over a [`PipelineConfig`]: synthetic fixture generation,
//! region extraction, augmentation, training, evaluation, the ratio sweep
//! and detection scoring.
//!
//! Every stage writes into its own directory under the output root:
//!
//! * `run.json`: stage name, seeds, versions, input hashes and the full
//!   effective config;
//! * `config.toml`: the effective config, loadable as-is to repeat the run;
//! * `timing.json`: wallclock only, excluded from [`tree_hash`];
//! * `.complete`: written last, holds the stage key (config plus input
//!   hashes). A stage whose marker matches the current key is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{
    augment_trajectory, AugmentError, AugmentationPlan, BackgroundProvider, CheckerboardProvider, ProceduralProvider,
    PromptLibrary,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::dataset::{Dataset, DatasetError, Source, Trajectory, MANIFEST_FILE};
use crate::detect_eval::{
    default_prompts, detections_to_string, ensemble_prompts, evaluate_detections, parse_detections,
    parse_ground_truth, reclassify_with_matching, DetectEvalError, DetectionSet, EvalReport,
};
use crate::imaging::BBox;
use crate::mask_prop::{propagate, PropagationError, PropagationResult, StaticTracker, TrackerBackend, TranslationTracker};
use crate::policy::model::ToyPolicy;
use crate::policy::sweep::SweepConfig;
use crate::policy::{evaluate, generate_reach_dataset, ratio_sweep, train_policy, PolicyError, Split};
use crate::region_match::{
    build_reference_set, extract_anchor_annotations, MatchError, MeanColorEmbedder, OracleDetector, ReferenceSet,
};
use crate::seed::derive_seed;

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TIMING_FILE: &str = "timing.json";
pub const MARKER_FILE: &str = ".complete";
pub const DATASET_DIR: &str = "dataset";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Detect(#[from] DetectEvalError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_to_string(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    pub dir: PathBuf,
    /// The output was already complete for this config and inputs.
    pub skipped: bool,
    /// Items needing review; non-empty means partial completion.
    pub review: Vec<String>,
    pub summary: Vec<String>,
}

impl StageReport {
    /// 0 on success, 3 on partial completion.
    pub fn exit_code(&self) -> i32 {
        if self.review.is_empty() {
            0
        } else {
            3
        }
    }
}

/// Files whose content does not count towards [`tree_hash`].
pub const UNHASHED_FILES: [&str; 1] = [TIMING_FILE];

/// SHA-256 over every file below `root` (relative path, length, bytes), in
/// sorted path order.
pub fn tree_hash(root: &Path) -> Result<String, PipelineError> {
    fn walk(dir: &Path, rel: &str, out: &mut Vec<(String, PathBuf)>) -> Result<(), PipelineError> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            let path = e.path();
            let rel = if rel.is_empty() { name.clone() } else { format!("{rel}/{name}") };
            if path.is_dir() {
                walk(&path, &rel, out)?;
            } else if !UNHASHED_FILES.contains(&name.as_str()) {
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, "", &mut files)?;
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    Ok(hex(&Sha256::digest(fs::read(path).map_err(io_err(path))?)))
}

fn input_hash(path: &Path) -> Result<String, PipelineError> {
    if path.is_dir() {
        tree_hash(path)
    } else {
        file_hash(path)
    }
}

struct Stage {
    name: &'static str,
    dir: PathBuf,
    key: String,
    started: Instant,
}

/// Returns `None` when `dir` already holds a complete run with the same
/// key; otherwise clears `dir` and writes the reproducibility record.
fn begin(
    cfg: &PipelineConfig,
    name: &'static str,
    dir: PathBuf,
    inputs: &[(&str, &Path)],
) -> Result<Option<Stage>, PipelineError> {
    cfg.validate()?;
    let mut hashes = BTreeMap::new();
    for (label, path) in inputs {
        hashes.insert(label.to_string(), input_hash(path)?);
    }
    let snapshot = cfg.to_toml();
    let record = json!({
        "stage": name,
        "seeds": {"root": cfg.seed, "stage": derive_seed(cfg.seed, name)},
        "versions": {
            "roboaug-core": env!("CARGO_PKG_VERSION"),
            "manifest": crate::dataset::MANIFEST_VERSION,
        },
        "inputs": hashes,
        "config": serde_json::to_value(cfg)?,
    });
    let key = hex(&Sha256::digest(
        format!("{name}\n{}\n{snapshot}", serde_json::to_string(&record["inputs"])?).as_bytes(),
    ));
    let marker = dir.join(MARKER_FILE);
    if fs::read_to_string(&marker).is_ok_and(|k| k.trim() == key) {
        log::info!("{name}: up to date in {}", dir.display());
        return Ok(None);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    write(&dir.join(CONFIG_SNAPSHOT), snapshot)?;
    Ok(Some(Stage {
        name,
        dir,
        key,
        started: Instant::now(),
    }))
}

impl Stage {
    fn finish(self, review: Vec<String>, summary: Vec<String>) -> Result<StageReport, PipelineError> {
        write(
            &self.dir.join(TIMING_FILE),
            format!("{{\"wallclock_s\": {:.3}}}\n", self.started.elapsed().as_secs_f64()),
        )?;
        if review.is_empty() {
            write(&self.dir.join(MARKER_FILE), format!("{}\n", self.key))?;
        } else {
            write(&self.dir.join("review.txt"), review.join("\n") + "\n")?;
        }
        Ok(StageReport {
            stage: self.name,
            dir: self.dir,
            skipped: false,
            review,
            summary,
        })
    }
}

fn skipped(name: &'static str, dir: PathBuf) -> StageReport {
    StageReport {
        stage: name,
        dir,
        skipped: true,
        review: Vec::new(),
        summary: vec!["already complete for this config; nothing to do".into()],
    }
}

pub fn stage_dir(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    cfg.paths.output.join(stage)
}

fn require(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Usage(format!("{} not found; {hint}", path.display())))
    }
}

fn load_dataset(root: &Path, hint: &str) -> Result<Dataset, PipelineError> {
    require(&root.join(MANIFEST_FILE), hint)?;
    Ok(Dataset::load(root)?)
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("worker pool unavailable ({e}); running serially");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send>(_workers: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Labels of the single reference frame: one box per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLabels {
    pub trajectory: String,
    pub frame: usize,
    pub boxes: Vec<ReferenceBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBox {
    pub category: String,
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: [f64; 4],
}

impl ReferenceLabels {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        require(path, "reference-frame labels are required")?;
        serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))
    }

    fn reference_set(
        &self,
        dataset: &Dataset,
        embedder: &MeanColorEmbedder,
    ) -> Result<ReferenceSet, PipelineError> {
        let traj = dataset
            .trajectories
            .iter()
            .find(|t| t.id == self.trajectory)
            .ok_or_else(|| PipelineError::Usage(format!("reference trajectory `{}` not in dataset", self.trajectory)))?;
        let frame = traj.frames.get(self.frame).ok_or_else(|| {
            PipelineError::Usage(format!("reference frame {} out of range for `{}`", self.frame, self.trajectory))
        })?;
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for b in &self.boxes {
            if !dataset.manifest.category_registry.contains(&b.category) {
                return Err(PipelineError::Usage(format!("reference category `{}` is not registered", b.category)));
            }
            let [x0, y0, x1, y1] = b.bbox;
            boxes.push((b.category.clone(), BBox::new(x0, y0, x1, y1)));
        }
        Ok(build_reference_set(&traj.id, frame, &boxes, embedder)?)
    }
}

fn image_id(trajectory: &str, frame: usize) -> String {
    format!("{trajectory}/{frame}")
}

fn dataset_images(dataset: &Dataset) -> BTreeMap<String, RgbImage> {
    dataset
        .trajectories
        .iter()
        .flat_map(|t| t.frames.iter().map(|f| (image_id(&t.id, f.index), f.image.clone())))
        .collect()
}

fn embedder(cfg: &PipelineConfig) -> MeanColorEmbedder {
    MeanColorEmbedder::new(cfg.backends.embedding_dim)
}

/// Oracle detector answering with the recorded boxes of each image.
fn oracle_detector(
    cfg: &PipelineConfig,
    images: &BTreeMap<String, RgbImage>,
    boxes_text: &str,
    registry: &[String],
) -> Result<OracleDetector, PipelineError> {
    let gts = parse_ground_truth(boxes_text, Some(registry.to_vec()))?;
    let mut by_image: BTreeMap<&str, Vec<(String, BBox)>> = BTreeMap::new();
    for g in gts.boxes() {
        by_image.entry(&g.image_id).or_default().push((g.category.clone(), g.bbox));
    }
    let mut det = OracleDetector::new(cfg.backends.detector_score, cfg.backends.detector_jitter_px);
    for (id, boxes) in by_image {
        if let Some(img) = images.get(id) {
            det.register(img, boxes);
        }
    }
    Ok(det)
}

fn tracker(cfg: &PipelineConfig) -> Box<dyn TrackerBackend + Send + Sync> {
    match cfg.backends.tracker.as_str() {
        "static" => Box::new(StaticTracker),
        _ => Box::new(TranslationTracker {
            search_radius: cfg.backends.tracker_search_radius,
        }),
    }
}

fn background(cfg: &PipelineConfig) -> Box<dyn BackgroundProvider + Send + Sync> {
    match cfg.backends.background.as_str() {
        "checkerboard" => Box::new(CheckerboardProvider {
            cell: cfg.backends.checkerboard_cell,
        }),
        _ => Box::new(ProceduralProvider),
    }
}

fn scene(cfg: &PipelineConfig) -> crate::policy::SyntheticSceneConfig {
    cfg.scene.build(derive_seed(cfg.seed, "scene"))
}

/// Writes the synthetic reach fixture into `paths.dataset`: expert
/// trajectories without annotations, `reference.json` (first frame of the
/// first trajectory) and `boxes.csv` with the exact box of every entity on
/// every frame.
pub fn cmd_generate(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let dir = cfg.paths.dataset.clone();
    if dir.exists() && !dir.join(MARKER_FILE).exists() && fs::read_dir(&dir).map_err(io_err(&dir))?.next().is_some() {
        return Err(PipelineError::Usage(format!(
            "{} exists and was not written by `generate`; refusing to overwrite",
            dir.display()
        )));
    }
    let Some(stage) = begin(cfg, "generate", dir.clone(), &[])? else {
        return Ok(skipped("generate", dir));
    };
    let scene = scene(cfg);
    let reach = generate_reach_dataset(&scene, cfg.scene.trajectories)?;
    let mut rows = Vec::new();
    for (t, m) in reach.trajectories.iter().zip(&reach.masks) {
        for (i, frame) in m.frames.iter().enumerate() {
            for a in frame.iter().filter(|a| !a.mask.is_empty()) {
                rows.push(crate::detect_eval::GroundTruthBox {
                    image_id: image_id(&t.id, t.frames[i].index),
                    category: a.category.clone(),
                    bbox: a.bbox,
                });
            }
        }
    }
    let reference = ReferenceLabels {
        trajectory: reach.trajectories[0].id.clone(),
        frame: 0,
        boxes: reach.masks[0].annotations(0)
            .iter()
            .map(|a| ReferenceBox {
                category: a.category.clone(),
                bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max],
            })
            .collect(),
    };
    let dataset = Dataset::from_trajectories(vec![scene.task()], reach.trajectories, scene.categories())?;
    dataset.save(&dir)?;
    write(&dir.join("reference.json"), serde_json::to_string_pretty(&reference)? + "\n")?;
    let gts = crate::detect_eval::GroundTruthSet::new(rows, scene.categories())?;
    write(&dir.join("boxes.csv"), crate::detect_eval::ground_truth_to_string(&gts))?;
    let summary = vec![format!(
        "{} expert trajectories of {} frames, {} boxes, images {}x{}",
        dataset.trajectories.len(),
        scene.episode_length,
        gts.boxes().len(),
        scene.width(),
        scene.height()
    )];
    stage.finish(Vec::new(), summary)
}

enum Extracted {
    Annotated(Box<Trajectory>, PropagationResult),
    Review(String),
}

/// Anchor-frame matching plus mask propagation for every expert
/// trajectory. Trajectories without any match are kept unannotated and
/// listed for review (partial completion).
pub fn cmd_extract(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let reference_path = cfg.reference_path();
    let boxes_path = cfg.boxes_path();
    let labels = ReferenceLabels::load(&reference_path)?;
    let dataset = load_dataset(&cfg.paths.dataset, "generate or provide an expert dataset first")?;
    let dir = stage_dir(cfg, "extract");
    let mut inputs = vec![("dataset", cfg.paths.dataset.as_path()), ("reference", reference_path.as_path())];
    if boxes_path.exists() {
        inputs.push(("boxes", boxes_path.as_path()));
    }
    let Some(stage) = begin(cfg, "extract", dir.clone(), &inputs)? else {
        return Ok(skipped("extract", dir));
    };
    let embedder = embedder(cfg);
    let refs = labels.reference_set(&dataset, &embedder)?;
    let images = dataset_images(&dataset);
    let boxes_text = if boxes_path.exists() {
        read_to_string(&boxes_path)?
    } else {
        String::new()
    };
    let detector = oracle_detector(cfg, &images, &boxes_text, &dataset.manifest.category_registry)?;
    let tracker = tracker(cfg);
    let params = cfg.extract.params();

    let results = par_map(cfg.workers, &dataset.trajectories, |t| -> Result<Extracted, PipelineError> {
        if t.source != Source::Expert {
            return Ok(Extracted::Review(format!("{}: not an expert trajectory", t.id)));
        }
        match extract_anchor_annotations(t, &refs, &detector, &embedder, params) {
            Err(MatchError::NoMatches(id)) => Ok(Extracted::Review(format!("{id}: no task-relevant region matched"))),
            Err(e) => Err(e.into()),
            Ok(seeds) => {
                let masks = propagate(t, &seeds, tracker.as_ref())?;
                let mut t = t.clone();
                for (i, f) in t.frames.iter_mut().enumerate() {
                    f.annotations = masks.annotations(i);
                }
                Ok(Extracted::Annotated(Box::new(t), masks))
            }
        }
    });

    let mut out = Vec::with_capacity(results.len());
    let mut review = Vec::new();
    let mut coverage = String::from("trajectory\tcategory\tcoverage\n");
    let mut summary = Vec::new();
    for (orig, r) in dataset.trajectories.iter().zip(results) {
        match r? {
            Extracted::Annotated(t, masks) => {
                for (cat, c) in &masks.coverage {
                    coverage.push_str(&format!("{}\t{cat}\t{c:.4}\n", t.id));
                }
                for w in &masks.warnings {
                    summary.push(format!(
                        "{}: `{}` mask empty on {:.0}% of frames",
                        t.id,
                        w.category,
                        100.0 * w.empty_fraction
                    ));
                }
                out.push(*t);
            }
            Extracted::Review(line) => {
                review.push(line);
                out.push(orig.clone());
            }
        }
    }
    let annotated = out.len() - review.len();
    summary.insert(
        0,
        format!(
            "{annotated}/{} trajectories annotated against {} reference categories",
            out.len(),
            refs.len()
        ),
    );
    let result = Dataset::from_trajectories(
        dataset.manifest.tasks.clone(),
        out,
        dataset.manifest.category_registry.clone(),
    )?;
    result.save(&stage.dir.join(DATASET_DIR))?;
    write(&stage.dir.join("coverage.tsv"), coverage)?;
    stage.finish(review, summary)
}

fn has_masks(t: &Trajectory) -> bool {
    t.frames.iter().any(|f| !f.annotations.is_empty())
}

/// `augment.ratio` composited copies of every annotated expert trajectory.
pub fn cmd_augment(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let input = stage_dir(cfg, "extract").join(DATASET_DIR);
    let dataset = load_dataset(&input, "run `extract` first")?;
    let dir = stage_dir(cfg, "augment");
    let Some(stage) = begin(cfg, "augment", dir.clone(), &[("extracted", input.as_path())])? else {
        return Ok(skipped("augment", dir));
    };
    let ratio = cfg.augment.ratio;
    let experts: Vec<&Trajectory> = dataset.experts().collect();
    let mut review = Vec::new();
    let mut all: Vec<Trajectory> = dataset.trajectories.clone();
    if ratio > 0 {
        let provider = background(cfg);
        let ids: Vec<String> = experts.iter().map(|t| t.id.clone()).collect();
        let mut plan = AugmentationPlan::new(
            ratio,
            derive_seed(cfg.seed, "augment"),
            provider.name(),
            &PromptLibrary::default_library(),
            &ids,
        )?;
        plan.per_frame_backgrounds = cfg.augment.per_frame_backgrounds;
        let mut plan_tsv = String::from("trajectory\tcopy\ttemplate\tbackground_seed\tprompt\n");
        for a in &plan.assignments {
            plan_tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                a.trajectory_id, a.copy, a.template_id, a.background_seed, a.prompt
            ));
        }
        write(&stage.dir.join("plan.tsv"), plan_tsv)?;
        let outcomes = par_map(cfg.workers, &experts, |t| -> Result<Option<_>, PipelineError> {
            if !has_masks(t) {
                return Ok(None);
            }
            let masks = PropagationResult::from_annotations(
                &t.id,
                t.frames.iter().map(|f| f.annotations.clone()).collect(),
            );
            Ok(Some(augment_trajectory(t, &masks, &plan, provider.as_ref())?))
        });
        for (t, o) in experts.iter().zip(outcomes) {
            match o? {
                None => review.push(format!("{}: no masks, {ratio} copies missing", t.id)),
                Some(o) => {
                    for (copy, e) in &o.failures {
                        review.push(format!("{} copy {copy}: {e}", t.id));
                    }
                    all.extend(o.trajectories);
                }
            }
        }
    }
    let n_aug = all.len() - dataset.trajectories.len();
    let result = Dataset::from_trajectories(
        dataset.manifest.tasks.clone(),
        all,
        dataset.manifest.category_registry.clone(),
    )?;
    result.save(&stage.dir.join(DATASET_DIR))?;
    let summary = vec![format!(
        "{} expert + {n_aug} augmented trajectories (ratio {ratio})",
        experts.len()
    )];
    stage.finish(review, summary)
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let input = stage_dir(cfg, "augment").join(DATASET_DIR);
    let dataset = load_dataset(&input, "run `augment` first")?;
    let dir = stage_dir(cfg, "train");
    let Some(stage) = begin(cfg, "train", dir.clone(), &[("augmented", input.as_path())])? else {
        return Ok(skipped("train", dir));
    };
    let (w, h) = dataset.trajectories.first().map(|t| t.dims()).unwrap_or((0, 0));
    let train_cfg = cfg.train.build((h, w), derive_seed(cfg.seed, "train"));
    let outcome = train_policy(&dataset, &train_cfg)?;
    write(&stage.dir.join("policy.json"), serde_json::to_string(&outcome.policy.to_json())? + "\n")?;
    write(&stage.dir.join("train_log.jsonl"), outcome.log_jsonl())?;
    let last = outcome.log.last();
    let summary = vec![format!(
        "{} steps on {} trajectories; final l2 {:.6}, rcl {:.6}, total {:.6}",
        outcome.log.len(),
        dataset.trajectories.len(),
        last.map_or(f64::NAN, |r| r.l2),
        last.map_or(f64::NAN, |r| r.rcl),
        last.map_or(f64::NAN, |r| r.total),
    )];
    stage.finish(Vec::new(), summary)
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let checkpoint = stage_dir(cfg, "train").join("policy.json");
    require(&checkpoint, "run `train` first")?;
    let dir = stage_dir(cfg, "eval");
    let Some(stage) = begin(cfg, "eval", dir.clone(), &[("policy", checkpoint.as_path())])? else {
        return Ok(skipped("eval", dir));
    };
    let mut policy = ToyPolicy::from_json(&serde_json::from_str(&read_to_string(&checkpoint)?)?)?;
    let scene = scene(cfg);
    let seed = derive_seed(cfg.seed, "eval");
    let id = evaluate(&mut policy, &scene, Split::Train, cfg.eval.episodes, seed)?;
    let ood = evaluate(&mut policy, &scene, Split::Test, cfg.eval.episodes, seed)?;
    let metrics = json!({"in_distribution": id, "out_of_distribution": ood});
    write(&stage.dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    let summary = vec![
        format!("in-distribution: action MSE {:.6}, success {:.3}", id.action_mse, id.success_rate),
        format!("out-of-distribution: action MSE {:.6}, success {:.3}", ood.action_mse, ood.success_rate),
    ];
    stage.finish(Vec::new(), summary)
}

pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let dir = stage_dir(cfg, "sweep");
    let Some(stage) = begin(cfg, "sweep", dir.clone(), &[])? else {
        return Ok(skipped("sweep", dir));
    };
    let side = cfg.scene.side;
    let sweep_cfg = SweepConfig {
        ratios: cfg.sweep.ratios.clone(),
        seeds: cfg.sweep.seeds.clone(),
        n_trajectories: cfg.sweep.trajectories,
        eval_episodes: cfg.sweep.episodes,
        scene: scene(cfg),
        train: cfg.train.build((side, side), 0),
    };
    let result = run_pooled(cfg.workers, || ratio_sweep(&sweep_cfg))?;
    write(&stage.dir.join("sweep.csv"), result.to_csv()?)?;
    write(&stage.dir.join("sweep.svg"), result.plot_svg())?;
    let review: Vec<String> = result
        .failures
        .iter()
        .map(|f| format!("ratio {} seed {}: {}", f.ratio, f.seed, f.error))
        .collect();
    let summary = result
        .ratios()
        .into_iter()
        .map(|r| {
            format!(
                "ratio {r}: median OOD action MSE {:.6}, median OOD success {:.3}",
                result.median_ood_mse(r).unwrap_or(f64::NAN),
                result.median_ood_success(r).unwrap_or(f64::NAN)
            )
        })
        .collect();
    stage.finish(review, summary)
}

#[cfg(feature = "parallel")]
fn run_pooled<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_pooled<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Scores detections against `boxes.csv`. With `paths.detections` set the
/// given file is scored; otherwise the detector runs over every dataset
/// frame with a five-prompt ensemble per category, and (if enabled) the
/// pooled detections are scored again after re-labelling through the
/// reference set.
pub fn cmd_eval_detect(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let boxes_path = cfg.boxes_path();
    require(&boxes_path, "detection ground truth is required")?;
    let dataset = load_dataset(&cfg.paths.dataset, "generate or provide a dataset first")?;
    let mut inputs = vec![("dataset", cfg.paths.dataset.as_path()), ("boxes", boxes_path.as_path())];
    if let Some(p) = &cfg.paths.detections {
        require(p, "check paths.detections")?;
        inputs.push(("detections", p.as_path()));
    }
    let dir = stage_dir(cfg, "eval-detect");
    let Some(stage) = begin(cfg, "eval-detect", dir.clone(), &inputs)? else {
        return Ok(skipped("eval-detect", dir));
    };
    let registry = dataset.manifest.category_registry.clone();
    let boxes_text = read_to_string(&boxes_path)?;
    let gts = parse_ground_truth(&boxes_text, Some(registry.clone()))?;
    let iou = cfg.detect.iou_threshold;
    let mut reports: Vec<EvalReport> = Vec::new();
    if let Some(p) = &cfg.paths.detections {
        let dets = parse_detections(&read_to_string(p)?)?;
        reports.push(evaluate_detections(&dets, &gts, iou, "external")?);
    } else {
        let images = dataset_images(&dataset);
        let detector = oracle_detector(cfg, &images, &boxes_text, &registry)?;
        let prompts: BTreeMap<String, Vec<String>> =
            registry.iter().map(|c| (c.clone(), default_prompts(c))).collect();
        let mut pooled = Vec::new();
        for (id, img) in &images {
            pooled.extend(ensemble_prompts(
                &detector,
                id,
                img,
                &prompts,
                cfg.extract.box_threshold,
                cfg.extract.text_threshold,
                cfg.detect.nms_iou,
            )?);
        }
        write(&stage.dir.join("detections.csv"), detections_to_string(&pooled))?;
        let dets = DetectionSet::new(pooled)?;
        reports.push(evaluate_detections(&dets, &gts, iou, "prompt-ensemble")?);
        if cfg.detect.reclassify {
            let labels = ReferenceLabels::load(&cfg.reference_path())?;
            let embedder = embedder(cfg);
            let refs = labels.reference_set(&dataset, &embedder)?;
            let relabelled = reclassify_with_matching(&dets, &refs, &embedder, &images, cfg.extract.matching())?;
            reports.push(evaluate_detections(&relabelled, &gts, iou, "prompt-ensemble+matching")?);
        }
    }
    let mut table = String::new();
    let mut summary = Vec::new();
    for r in &reports {
        table.push_str(&format!("# {}\n{}", r.method, r.to_table()));
        write(&stage.dir.join(format!("ap-{}.svg", r.method)), r.bar_chart_svg())?;
        summary.push(format!("{}: mAP@{} = {:.4}", r.method, r.iou_threshold, r.map));
    }
    write(&stage.dir.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    write(&stage.dir.join("table.tsv"), table)?;
    stage.finish(Vec::new(), summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.paths.dataset = dir.join("data");
        cfg.paths.output = dir.join("out");
        cfg.scene.side = 16;
        cfg.scene.episode_length = 10;
        cfg.train.steps = 20;
        cfg.train.batch_size = 4;
        cfg.train.channels = 4;
        cfg.train.grid = 2;
        cfg.train.hidden = 8;
        cfg.augment.ratio = 1;
        cfg.eval.episodes = 2;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn tree_hash_ignores_timing_only() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        let h0 = tree_hash(dir.path()).unwrap();
        fs::write(dir.path().join(TIMING_FILE), "9").unwrap();
        assert_eq!(tree_hash(dir.path()).unwrap(), h0);
        fs::write(dir.path().join("a/x.txt"), "2").unwrap();
        assert_ne!(tree_hash(dir.path()).unwrap(), h0);
    }

    #[test]
    fn stages_chain_and_rerun_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        assert!(matches!(cmd_extract(&cfg), Err(e) if e.exit_code() == 2));
        for cmd in [cmd_generate, cmd_extract, cmd_augment, cmd_train, cmd_eval] {
            let r = cmd(&cfg).unwrap();
            assert_eq!(r.exit_code(), 0, "{r:?}");
            assert!(!r.skipped);
        }
        let before = tree_hash(&cfg.paths.output).unwrap();
        let again = cmd_augment(&cfg).unwrap();
        assert!(again.skipped);
        assert_eq!(tree_hash(&cfg.paths.output).unwrap(), before);
        let augmented = Dataset::load(&stage_dir(&cfg, "augment").join(DATASET_DIR)).unwrap();
        assert_eq!(augmented.trajectories.len(), 4);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        cmd_generate(&cfg).unwrap();
        let r = cmd_eval_detect(&cfg).unwrap();
        let reports: Vec<EvalReport> =
            serde_json::from_str(&fs::read_to_string(r.dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(reports.len(), 2);
        for rep in reports {
            assert_eq!(rep.map, 1.0, "{}", rep.method);
        }
    }
}
