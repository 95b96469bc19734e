//! Synthetic reach benchmark: a red block moves toward a blue marker over a
//! textured table. The marker position is visible only in the image, so a
//! policy has to localize it through the clutter of the table texture.

use std::collections::BTreeMap;
use std::fmt;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, RegionAnnotation, Source, TaskDescriptor, Trajectory};
use crate::imaging::Mask;
use crate::mask_prop::PropagationResult;
use crate::seed::derive_seed;
use crate::texture::{self, Material};

use super::PolicyError;

pub const OBJECT_CATEGORY: &str = "block";
pub const GOAL_CATEGORY: &str = "marker";
pub const TASK_NAME: &str = "reach";
pub const INSTRUCTION: &str = "move the red block onto the blue marker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TextureId {
    pub material: Material,
    pub seed: u64,
}

impl fmt::Display for TextureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.material.as_str(), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub color: [u8; 3],
    pub shape: Shape,
    /// Half side for squares, radius for discs.
    pub half_size: f64,
}

impl ObjectStyle {
    fn covers(&self, center: [f64; 2], x: u32, y: u32) -> bool {
        let dx = f64::from(x) + 0.5 - center[0];
        let dy = f64::from(y) + 0.5 - center[1];
        match self.shape {
            Shape::Square => dx.abs() <= self.half_size && dy.abs() <= self.half_size,
            Shape::Disc => dx * dx + dy * dy <= self.half_size * self.half_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    /// (height, width)
    pub image_size: (u32, u32),
    pub object: ObjectStyle,
    pub goal: ObjectStyle,
    pub train_textures: Vec<TextureId>,
    pub test_textures: Vec<TextureId>,
    pub episode_length: usize,
    /// Success radius around the marker center, in pixels.
    pub goal_radius: f64,
    /// Largest displacement per simulator step, in pixels.
    pub max_step: f64,
    /// Start and marker positions keep this distance from the border.
    pub margin: f64,
    /// Colored clutter squares drawn into held-out scenes only.
    pub ood_distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self::at_size(64, 2, 8, 0)
    }
}

impl SyntheticSceneConfig {
    /// Square scene of `side` pixels with geometry scaled from the 64 px
    /// reference (marker radius 3, step 8, margin 8) and texture banks of
    /// the given sizes drawn from `seed`.
    pub fn at_size(side: u32, n_train_textures: usize, n_test_textures: usize, seed: u64) -> Self {
        let s = f64::from(side) / 64.0;
        Self {
            image_size: (side, side),
            object: ObjectStyle {
                color: [235, 30, 30],
                shape: Shape::Square,
                half_size: 3.0 * s,
            },
            goal: ObjectStyle {
                color: [30, 90, 235],
                shape: Shape::Disc,
                half_size: 3.5 * s,
            },
            train_textures: texture_bank(derive_seed(seed, "train-textures"), n_train_textures, &[Material::Wood]),
            test_textures: texture_bank(derive_seed(seed, "test-textures"), n_test_textures, &Material::ALL),
            episode_length: 12,
            goal_radius: 3.0 * s,
            max_step: 8.0 * s,
            margin: 8.0 * s,
            ood_distractors: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return bad("image_size must be positive".into());
        }
        if self.episode_length < 2 {
            return bad(format!("episode_length must be at least 2, got {}", self.episode_length));
        }
        if self.train_textures.is_empty() || self.test_textures.is_empty() {
            return bad("both texture banks must be non-empty".into());
        }
        if let Some(t) = self.train_textures.iter().find(|t| self.test_textures.contains(t)) {
            return bad(format!("texture {t} is in both the train and test banks"));
        }
        if !(self.max_step > 0.0) || !(self.goal_radius > 0.0) {
            return bad("max_step and goal_radius must be positive".into());
        }
        let span_x = f64::from(w) - 2.0 * self.margin;
        let span_y = f64::from(h) - 2.0 * self.margin;
        if !(span_x > 0.0 && span_y > 0.0) {
            return bad(format!("margin {} leaves no room in a {w}x{h} scene", self.margin));
        }
        let needed = ((span_x * span_x + span_y * span_y).sqrt() / self.max_step).ceil() as usize;
        if needed > self.episode_length - 1 {
            return bad(format!(
                "episode_length {} is too short: the farthest start needs {needed} steps",
                self.episode_length
            ));
        }
        if 2.0 * self.goal_radius >= span_x.hypot(span_y) {
            return bad("goal_radius is too large for the scene".into());
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.image_size.1
    }

    pub fn height(&self) -> u32 {
        self.image_size.0
    }

    pub fn categories(&self) -> Vec<String> {
        vec![OBJECT_CATEGORY.to_string(), GOAL_CATEGORY.to_string()]
    }

    pub fn task(&self) -> TaskDescriptor {
        TaskDescriptor {
            name: TASK_NAME.into(),
            instruction: INSTRUCTION.into(),
        }
    }

    fn textures(&self, split: Split) -> &[TextureId] {
        match split {
            Split::Train => &self.train_textures,
            Split::Test => &self.test_textures,
        }
    }
}

/// `n` texture ids cycling through `materials`, seeded from `seed`.
pub fn texture_bank(seed: u64, n: usize, materials: &[Material]) -> Vec<TextureId> {
    (0..n)
        .map(|i| TextureId {
            material: materials[i % materials.len()],
            seed: derive_seed(seed, &format!("texture-{i}")),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Scripted expert command: `(goal − pos) / max(‖goal − pos‖, max_step)`.
pub fn expert_action(pos: [f64; 2], goal: [f64; 2], max_step: f64) -> [f64; 2] {
    let d = [goal[0] - pos[0], goal[1] - pos[1]];
    let n = d[0].hypot(d[1]).max(max_step);
    [d[0] / n, d[1] / n]
}

/// Simulator transition: the command is clipped to unit norm and scaled by
/// `max_step`.
pub fn step_position(pos: [f64; 2], action: [f64; 2], max_step: f64) -> [f64; 2] {
    let n = action[0].hypot(action[1]);
    let k = if n > 1.0 { 1.0 / n } else { 1.0 };
    [pos[0] + max_step * k * action[0], pos[1] + max_step * k * action[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub center: [f64; 2],
    pub style: ObjectStyle,
}

/// One episode's static layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub texture: TextureId,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub distractors: Vec<Distractor>,
}

const DISTRACTOR_COLORS: [[u8; 3]; 3] = [[40, 200, 60], [230, 210, 40], [200, 60, 200]];

/// Renders scenes and samples episodes; caches texture renders.
pub struct SceneRenderer {
    cfg: SyntheticSceneConfig,
    backgrounds: BTreeMap<TextureId, RgbImage>,
}

impl SceneRenderer {
    pub fn new(cfg: SyntheticSceneConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            backgrounds: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SyntheticSceneConfig {
        &self.cfg
    }

    fn background(&mut self, id: TextureId) -> &RgbImage {
        let (w, h) = (self.cfg.width(), self.cfg.height());
        self.backgrounds
            .entry(id)
            .or_insert_with(|| texture::render(id.material, id.seed, w, h))
    }

    /// Samples a start and marker at least two success radii apart.
    pub fn sample_episode(&self, split: Split, rng: &mut ChaCha8Rng) -> EpisodeSpec {
        let cfg = &self.cfg;
        let bank = cfg.textures(split);
        let texture = bank[rng.random_range(0..bank.len())];
        let (w, h) = (f64::from(cfg.width()), f64::from(cfg.height()));
        let point = |rng: &mut ChaCha8Rng| {
            [
                rng.random_range(cfg.margin..=w - cfg.margin),
                rng.random_range(cfg.margin..=h - cfg.margin),
            ]
        };
        let goal = point(rng);
        let start = loop {
            let p = point(rng);
            if (p[0] - goal[0]).hypot(p[1] - goal[1]) > 2.0 * cfg.goal_radius {
                break p;
            }
        };
        let distractors = match split {
            Split::Test => (0..cfg.ood_distractors)
                .map(|_| Distractor {
                    center: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
                    style: ObjectStyle {
                        color: DISTRACTOR_COLORS[rng.random_range(0..DISTRACTOR_COLORS.len())],
                        shape: Shape::Square,
                        half_size: cfg.object.half_size,
                    },
                })
                .collect(),
            Split::Train => Vec::new(),
        };
        EpisodeSpec {
            texture,
            start,
            goal,
            distractors,
        }
    }

    /// Renders the scene with the block at `pos`. Returns the image and the
    /// visible silhouettes of block and marker (marker drawn first, block on
    /// top).
    pub fn render(&mut self, episode: &EpisodeSpec, pos: [f64; 2]) -> (RgbImage, Mask, Mask) {
        let cfg = self.cfg.clone();
        let (w, h) = (cfg.width(), cfg.height());
        let mut img = self.background(episode.texture).clone();
        for d in &episode.distractors {
            for (x, y, p) in img.enumerate_pixels_mut() {
                if d.style.covers(d.center, x, y) {
                    *p = Rgb(d.style.color);
                }
            }
        }
        let block = Mask::from_fn(w, h, |x, y| cfg.object.covers(pos, x, y));
        let mut marker = Mask::from_fn(w, h, |x, y| cfg.goal.covers(episode.goal, x, y));
        marker.and_not_assign(&block).expect("same dimensions");
        for (x, y, p) in img.enumerate_pixels_mut() {
            if block.get(x, y) {
                *p = Rgb(cfg.object.color);
            } else if marker.get(x, y) {
                *p = Rgb(cfg.goal.color);
            }
        }
        (img, block, marker)
    }

    pub fn proprio(&self, pos: [f64; 2]) -> Vec<f64> {
        vec![pos[0] / f64::from(self.cfg.width()), pos[1] / f64::from(self.cfg.height())]
    }

    /// Expert rollout of an episode: positions visited, one per frame.
    pub fn expert_positions(&self, episode: &EpisodeSpec) -> Vec<[f64; 2]> {
        let mut pos = episode.start;
        let mut out = Vec::with_capacity(self.cfg.episode_length);
        for _ in 0..self.cfg.episode_length {
            out.push(pos);
            pos = step_position(pos, expert_action(pos, episode.goal, self.cfg.max_step), self.cfg.max_step);
        }
        out
    }

    /// Renders an expert trajectory together with its exact per-frame
    /// annotations.
    pub fn expert_trajectory(&mut self, id: &str, episode: &EpisodeSpec) -> (Trajectory, PropagationResult) {
        let max_step = self.cfg.max_step;
        let mut frames = Vec::with_capacity(self.cfg.episode_length);
        let mut truth = Vec::with_capacity(self.cfg.episode_length);
        for (t, pos) in self.expert_positions(episode).into_iter().enumerate() {
            let (image, block, marker) = self.render(episode, pos);
            let anns: Vec<RegionAnnotation> = [(OBJECT_CATEGORY, block), (GOAL_CATEGORY, marker)]
                .into_iter()
                .filter_map(|(c, m)| RegionAnnotation::from_mask(c, m, 1.0))
                .collect();
            frames.push(Frame {
                index: t,
                image,
                proprio: self.proprio(pos),
                action: expert_action(pos, episode.goal, max_step).to_vec(),
                annotations: Vec::new(),
            });
            truth.push(anns);
        }
        let traj = Trajectory {
            id: id.to_string(),
            instruction: INSTRUCTION.to_string(),
            frames,
            source: Source::Expert,
            parent_id: None,
        };
        let truth = PropagationResult::from_annotations(id, truth);
        (traj, truth)
    }
}

/// Expert demonstrations on training textures, with exact masks.
#[derive(Debug, Clone)]
pub struct ReachDataset {
    pub trajectories: Vec<Trajectory>,
    pub masks: Vec<PropagationResult>,
    pub episodes: Vec<EpisodeSpec>,
}

impl ReachDataset {
    /// Copies of the trajectories with the exact annotations attached to
    /// every frame.
    pub fn annotated(&self) -> Vec<Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.masks)
            .map(|(t, m)| {
                let mut t = t.clone();
                for (i, f) in t.frames.iter_mut().enumerate() {
                    f.annotations = m.annotations(i);
                }
                t
            })
            .collect()
    }
}

pub fn trajectory_id(i: usize) -> String {
    format!("reach-{i:03}")
}

/// `n_trajectories` expert demonstrations; fully determined by `cfg.seed`.
pub fn generate_reach_dataset(cfg: &SyntheticSceneConfig, n_trajectories: usize) -> Result<ReachDataset, PolicyError> {
    let mut renderer = SceneRenderer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "reach-episodes"));
    let mut out = ReachDataset {
        trajectories: Vec::with_capacity(n_trajectories),
        masks: Vec::with_capacity(n_trajectories),
        episodes: Vec::with_capacity(n_trajectories),
    };
    for i in 0..n_trajectories {
        let ep = renderer.sample_episode(Split::Train, &mut rng);
        let (t, m) = renderer.expert_trajectory(&trajectory_id(i), &ep);
        out.trajectories.push(t);
        out.masks.push(m);
        out.episodes.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSceneConfig {
        SyntheticSceneConfig::at_size(32, 2, 3, 5)
    }

    #[test]
    fn default_config_is_valid_and_banks_are_disjoint() {
        SyntheticSceneConfig::default().validate().unwrap();
        small().validate().unwrap();
        let mut c = small();
        c.test_textures.push(c.train_textures[0]);
        assert!(matches!(c.validate(), Err(PolicyError::Config(_))));
        let mut c = small();
        c.episode_length = 1;
        assert!(c.validate().is_err());
        let mut c = small();
        c.episode_length = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_short_trajectory() {
        let mut cfg = SyntheticSceneConfig::at_size(32, 1, 1, 9);
        cfg.episode_length = 2;
        cfg.max_step = 40.0;
        let ds = generate_reach_dataset(&cfg, 1).unwrap();
        assert_eq!(ds.trajectories.len(), 1);
        assert_eq!(ds.trajectories[0].frames.len(), 2);
        let img = &ds.trajectories[0].frames[0].image;
        let red = img.pixels().filter(|p| p.0 == cfg.object.color).count();
        let block = ds.masks[0].frames[0].iter().find(|a| a.category == OBJECT_CATEGORY).unwrap();
        assert_eq!(block.mask.area(), red);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_reach_dataset(&small(), 3).unwrap();
        let b = generate_reach_dataset(&small(), 3).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn actions_follow_the_closed_form() {
        let cfg = small();
        let ds = generate_reach_dataset(&cfg, 4).unwrap();
        for (t, ep) in ds.trajectories.iter().zip(&ds.episodes) {
            for f in &t.frames {
                let pos = [f.proprio[0] * 32.0, f.proprio[1] * 32.0];
                let d = [ep.goal[0] - pos[0], ep.goal[1] - pos[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(cfg.max_step);
                assert!((f.action[0] - d[0] / n).abs() < 1e-9);
                assert!((f.action[1] - d[1] / n).abs() < 1e-9);
            }
            let last = t.frames.last().unwrap();
            let pos = [last.proprio[0] * 32.0, last.proprio[1] * 32.0];
            assert!((pos[0] - ep.goal[0]).hypot(pos[1] - ep.goal[1]) < 1e-9);
        }
    }

    #[test]
    fn silhouettes_are_visible_pixels() {
        let cfg = small();
        let ds = generate_reach_dataset(&cfg, 3).unwrap();
        for (t, m) in ds.trajectories.iter().zip(&ds.masks) {
            for (f, anns) in t.frames.iter().zip(&m.frames) {
                for a in anns {
                    let color = if a.category == OBJECT_CATEGORY { cfg.object.color } else { cfg.goal.color };
                    for (x, y, p) in f.image.enumerate_pixels() {
                        if a.mask.get(x, y) {
                            assert_eq!(p.0, color);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distractors_only_in_held_out_scenes() {
        let mut cfg = small();
        cfg.ood_distractors = 2;
        let r = SceneRenderer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(r.sample_episode(Split::Train, &mut rng).distractors.is_empty());
        assert_eq!(r.sample_episode(Split::Test, &mut rng).distractors.len(), 2);
    }
}
