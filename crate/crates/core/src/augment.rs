//! Background-replacement augmentation.
//!
//! Each augmented copy of an expert trajectory gets one sampled prompt, one
//! full-frame background from a [`BackgroundProvider`], and every frame is
//! composited as `mask * frame + (1 - mask) * background` with the per-frame
//! union of task-relevant masks. Actions and proprioception are copied
//! untouched.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, Frame, Source, TaskDescriptor, Trajectory, TrajectoryEntry};
use crate::imaging::{check_dims, AlphaMask, ImagingError, Mask};
use crate::mask_prop::{union_mask, PropagationResult};
use crate::seed::derive_seed;
use crate::texture::{self, Material};

pub const LIBRARY_SIZE: usize = 500;
pub const DEFAULT_WEIGHTS: [(Material, f64); 3] =
    [(Material::Wood, 0.58), (Material::Stone, 0.35), (Material::Composite, 0.07)];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("prompt library is empty")]
    EmptyLibrary,
    #[error("invalid prompt library: {0}")]
    InvalidLibrary(String),
    #[error("background provider failed: {0}")]
    ProviderFailure(String),
    #[error("masks missing for trajectory `{0}`")]
    MissingMasks(String),
    #[error("trajectory `{0}` is not an expert trajectory")]
    NotExpert(String),
    #[error("augmentation ratio must be at least 1")]
    ZeroRatio,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `mask ⊙ image + (1 − mask) ⊙ background`, per channel in f64 and rounded
/// half-to-even. For a binary mask every output pixel is exactly one of the
/// two inputs.
pub fn composite(image: &RgbImage, mask: &AlphaMask, background: &RgbImage) -> Result<RgbImage, AugmentError> {
    check_dims(image.dimensions(), background.dimensions())?;
    check_dims(image.dimensions(), mask.dims())?;
    let alpha = mask.as_raw();
    let mut out = RgbImage::new(image.width(), image.height());
    for (i, ((o, p), b)) in out.pixels_mut().zip(image.pixels()).zip(background.pixels()).enumerate() {
        let m = alpha[i];
        *o = Rgb(std::array::from_fn(|c| {
            let v = m * f64::from(p.0[c]) + (1.0 - m) * f64::from(b.0[c]);
            v.round_ties_even().clamp(0.0, 255.0) as u8
        }));
    }
    Ok(out)
}

/// Binary-mask fast path; bit-identical to [`composite`] on `{0,1}` masks.
pub fn composite_binary(image: &RgbImage, mask: &Mask, background: &RgbImage) -> Result<RgbImage, AugmentError> {
    check_dims(image.dimensions(), background.dimensions())?;
    check_dims(image.dimensions(), mask.dims())?;
    let mut out = background.clone();
    for (i, (o, p)) in out.pixels_mut().zip(image.pixels()).enumerate() {
        if mask.as_raw()[i] != 0 {
            *o = *p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    pub category: Material,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    templates: Vec<PromptTemplate>,
    weights: BTreeMap<Material, f64>,
}

impl PromptLibrary {
    pub fn new(templates: Vec<PromptTemplate>, weights: BTreeMap<Material, f64>) -> Result<Self, AugmentError> {
        if templates.is_empty() {
            return Err(AugmentError::EmptyLibrary);
        }
        if let Some(t) = templates.iter().find(|t| t.text.trim().is_empty()) {
            return Err(AugmentError::InvalidLibrary(format!("template `{}` has empty text", t.id)));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 || weights.values().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(AugmentError::InvalidLibrary(format!("weights sum to {total}, expected 1")));
        }
        for (m, w) in &weights {
            if *w > 0.0 && !templates.iter().any(|t| t.category == *m) {
                return Err(AugmentError::InvalidLibrary(format!(
                    "category {} has weight {w} but no templates",
                    m.as_str()
                )));
            }
        }
        Ok(Self { templates, weights })
    }

    /// The bundled 500-template library split 290/175/35 across
    /// wood/stone/composite, sampled with 0.58/0.35/0.07 weights.
    pub fn default_library() -> Self {
        const SPECIES: [&str; 10] =
            ["oak", "walnut", "maple", "pine", "cherry", "teak", "birch", "mahogany", "ash", "beech"];
        const WOOD_FINISH: [&str; 10] = [
            "matte", "glossy", "oiled", "weathered", "lacquered", "rustic", "polished", "distressed", "whitewashed",
            "natural",
        ];
        const WOOD_LAYOUT: [&str; 3] = ["tabletop", "workbench", "plank surface"];
        const STONES: [&str; 8] =
            ["granite", "marble", "slate", "limestone", "travertine", "basalt", "sandstone", "quartzite"];
        const STONE_FINISH: [&str; 7] = ["honed", "polished", "rough", "flamed", "tumbled", "leathered", "brushed"];
        const STONE_LAYOUT: [&str; 4] = ["countertop", "slab", "tabletop", "tiled surface"];
        const COMPOSITES: [&str; 7] =
            ["laminate", "linoleum", "vinyl", "resin", "terrazzo", "melamine", "fiberboard"];
        const COMPOSITE_PATTERN: [&str; 5] = ["speckled", "plain", "tiled", "textured", "matte"];

        let mut templates: Vec<PromptTemplate> = Vec::with_capacity(LIBRARY_SIZE);
        let push = |templates: &mut Vec<PromptTemplate>, category: Material, text: String| {
            let n = templates.iter().filter(|t| t.category == category).count();
            let id = format!("{}-{n:03}", category.as_str());
            templates.push(PromptTemplate { id, text, category });
        };
        'wood: for layout in WOOD_LAYOUT {
            for finish in WOOD_FINISH {
                for species in SPECIES {
                    if templates.len() == 290 {
                        break 'wood;
                    }
                    push(&mut templates, Material::Wood, format!("a {finish} {species} wood {layout} seen from above, soft daylight"));
                }
            }
        }
        'stone: for layout in STONE_LAYOUT {
            for finish in STONE_FINISH {
                for stone in STONES {
                    if templates.len() == 290 + 175 {
                        break 'stone;
                    }
                    push(&mut templates, Material::Stone, format!("a {finish} {stone} stone {layout}, top-down photo"));
                }
            }
        }
        for pattern in COMPOSITE_PATTERN {
            for material in COMPOSITES {
                push(&mut templates, Material::Composite, format!("a {pattern} {material} composite table surface, overhead view"));
            }
        }
        Self::new(templates, DEFAULT_WEIGHTS.into_iter().collect()).expect("bundled library is valid")
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn weights(&self) -> &BTreeMap<Material, f64> {
        &self.weights
    }

    pub fn with_weights(&self, weights: BTreeMap<Material, f64>) -> Result<Self, AugmentError> {
        Self::new(self.templates.clone(), weights)
    }

    /// One record per line: `id<TAB>category<TAB>text`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.templates {
            let _ = writeln!(s, "{}\t{}\t{}", t.id, t.category.as_str(), t.text);
        }
        s
    }

    /// Parses the TSV form; weights default to the bundled split.
    pub fn from_tsv(text: &str, weights: Option<BTreeMap<Material, f64>>) -> Result<Self, AugmentError> {
        let templates = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                let mut parts = l.splitn(3, '\t');
                let (Some(id), Some(cat), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(AugmentError::InvalidLibrary(format!("line {}: expected 3 fields", n + 1)));
                };
                let category = Material::parse(cat)
                    .ok_or_else(|| AugmentError::InvalidLibrary(format!("line {}: unknown category `{cat}`", n + 1)))?;
                Ok(PromptTemplate {
                    id: id.to_string(),
                    text: text.to_string(),
                    category,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(templates, weights.unwrap_or_else(|| DEFAULT_WEIGHTS.into_iter().collect()))
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        Self::from_tsv(&fs::read_to_string(path)?, None)
    }
}

/// Category by weight, then a uniform template within the category.
pub fn sample_prompt<'a, R: Rng + ?Sized>(library: &'a PromptLibrary, rng: &mut R) -> Result<&'a PromptTemplate, AugmentError> {
    let live: Vec<(Material, f64)> = library.weights.iter().filter(|(_, w)| **w > 0.0).map(|(m, w)| (*m, *w)).collect();
    if library.templates.is_empty() || live.is_empty() {
        return Err(AugmentError::EmptyLibrary);
    }
    let total: f64 = live.iter().map(|(_, w)| w).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = live[live.len() - 1].0;
    for (m, w) in &live {
        acc += w;
        if u < acc {
            chosen = *m;
            break;
        }
    }
    let pool: Vec<&PromptTemplate> = library.templates.iter().filter(|t| t.category == chosen).collect();
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Full-frame background synthesis from a text prompt.
pub trait BackgroundProvider {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str, width: u32, height: u32, seed: u64) -> Result<RgbImage, AugmentError>;
    /// Maximum concurrent `generate` calls the backend tolerates.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Infers the material named by a prompt.
pub fn material_of(prompt: &str) -> Material {
    let p = prompt.to_lowercase();
    const STONE_WORDS: [&str; 9] =
        ["stone", "granite", "marble", "slate", "limestone", "travertine", "basalt", "sandstone", "quartzite"];
    if p.contains("wood") {
        Material::Wood
    } else if STONE_WORDS.iter().any(|w| p.contains(w)) {
        Material::Stone
    } else {
        Material::Composite
    }
}

/// Seeded procedural textures in wood, stone and composite palettes. The
/// prompt picks the material and perturbs the seed.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProceduralProvider;

impl BackgroundProvider for ProceduralProvider {
    fn name(&self) -> &str {
        "procedural"
    }

    fn generate(&self, prompt: &str, width: u32, height: u32, seed: u64) -> Result<RgbImage, AugmentError> {
        if width == 0 || height == 0 {
            return Err(AugmentError::ProviderFailure("zero-sized background requested".into()));
        }
        Ok(texture::render(material_of(prompt), derive_seed(seed, prompt), width, height))
    }
}

/// Checkerboard backgrounds, used as a pixel-exact oracle in tests.
#[derive(Debug, Clone, Copy)]
pub struct CheckerboardProvider {
    pub cell: u32,
}

impl BackgroundProvider for CheckerboardProvider {
    fn name(&self) -> &str {
        "checkerboard"
    }

    fn generate(&self, _prompt: &str, width: u32, height: u32, _seed: u64) -> Result<RgbImage, AugmentError> {
        Ok(texture::checkerboard(width, height, self.cell))
    }
}

/// Parameters forwarded to a diffusion-model adapter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerativeParams {
    pub num_inference_steps: u32,
    pub guidance_scale: f64,
    pub batch_size: u32,
}

impl Default for GenerativeParams {
    fn default() -> Self {
        Self {
            num_inference_steps: 30,
            guidance_scale: 10.0,
            batch_size: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedCopy {
    pub trajectory_id: String,
    pub copy: usize,
    pub template_id: String,
    pub prompt: String,
    pub background_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub ratio: usize,
    pub prompt_seed: u64,
    pub provider: String,
    /// One background per frame instead of one per copy (ablation switch).
    pub per_frame_backgrounds: bool,
    pub assignments: Vec<PlannedCopy>,
}

impl AugmentationPlan {
    /// Samples one prompt and one background seed per (trajectory, copy),
    /// in trajectory order then copy order.
    pub fn new(
        ratio: usize,
        prompt_seed: u64,
        provider: &str,
        library: &PromptLibrary,
        trajectory_ids: &[String],
    ) -> Result<Self, AugmentError> {
        if ratio == 0 {
            return Err(AugmentError::ZeroRatio);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed);
        let mut assignments = Vec::with_capacity(ratio * trajectory_ids.len());
        for id in trajectory_ids {
            for copy in 0..ratio {
                let t = sample_prompt(library, &mut rng)?;
                assignments.push(PlannedCopy {
                    trajectory_id: id.clone(),
                    copy,
                    template_id: t.id.clone(),
                    prompt: t.text.clone(),
                    background_seed: rng.random(),
                });
            }
        }
        Ok(Self {
            ratio,
            prompt_seed,
            provider: provider.to_string(),
            per_frame_backgrounds: false,
            assignments,
        })
    }

    pub fn copies_for<'a>(&'a self, trajectory_id: &'a str) -> impl Iterator<Item = &'a PlannedCopy> + 'a {
        self.assignments.iter().filter(move |a| a.trajectory_id == trajectory_id)
    }
}

pub fn augmented_id(parent: &str, copy: usize) -> String {
    format!("{parent}-aug{copy:03}")
}

#[derive(Debug, Default)]
pub struct AugmentOutcome {
    pub trajectories: Vec<Trajectory>,
    /// Copies that failed; the remaining copies are still returned.
    pub failures: Vec<(usize, AugmentError)>,
}

fn augment_copy(
    traj: &Trajectory,
    masks: &PropagationResult,
    plan: &AugmentationPlan,
    copy: &PlannedCopy,
    provider: &dyn BackgroundProvider,
) -> Result<Trajectory, AugmentError> {
    let (w, h) = traj.dims();
    let shared = if plan.per_frame_backgrounds {
        None
    } else {
        Some(provider.generate(&copy.prompt, w, h, copy.background_seed)?)
    };
    let mut frames = Vec::with_capacity(traj.frames.len());
    for (t, f) in traj.frames.iter().enumerate() {
        let per_frame;
        let bg = match &shared {
            Some(bg) => bg,
            None => {
                per_frame = provider.generate(&copy.prompt, w, h, derive_seed(copy.background_seed, &format!("frame-{t}")))?;
                &per_frame
            }
        };
        if bg.dimensions() != (w, h) {
            return Err(AugmentError::ProviderFailure(format!(
                "background is {:?}, frame is {:?}",
                bg.dimensions(),
                (w, h)
            )));
        }
        let union = union_mask(&masks.frames[t], w, h).map_err(|e| AugmentError::MissingMasks(e.to_string()))?;
        frames.push(Frame {
            index: f.index,
            image: composite_binary(&f.image, &union, bg)?,
            proprio: f.proprio.clone(),
            action: f.action.clone(),
            annotations: masks.annotations(t),
        });
    }
    Ok(Trajectory {
        id: augmented_id(&traj.id, copy.copy),
        instruction: traj.instruction.clone(),
        frames,
        source: Source::Augmented,
        parent_id: Some(traj.id.clone()),
    })
}

/// Produces `plan.ratio` augmented copies of an expert trajectory.
pub fn augment_trajectory(
    traj: &Trajectory,
    masks: &PropagationResult,
    plan: &AugmentationPlan,
    provider: &dyn BackgroundProvider,
) -> Result<AugmentOutcome, AugmentError> {
    if traj.source != Source::Expert {
        return Err(AugmentError::NotExpert(traj.id.clone()));
    }
    if masks.trajectory_id != traj.id || masks.frames.len() != traj.frames.len() {
        return Err(AugmentError::MissingMasks(traj.id.clone()));
    }
    let mut out = AugmentOutcome::default();
    for copy in plan.copies_for(&traj.id) {
        match augment_copy(traj, masks, plan, copy, provider) {
            Ok(t) => out.trajectories.push(t),
            Err(e) => {
                warn!("augmentation of `{}` copy {} failed: {e}", traj.id, copy.copy);
                out.failures.push((copy.copy, e));
            }
        }
    }
    Ok(out)
}

/// Manifest for `expert ∪ augmented`.
pub fn build_final_dataset(
    expert: &[Trajectory],
    augmented: &[Trajectory],
    tasks: Vec<TaskDescriptor>,
    category_registry: Vec<String>,
) -> Result<DatasetManifest, AugmentError> {
    let entries: Vec<TrajectoryEntry> =
        expert.iter().chain(augmented).map(TrajectoryEntry::for_trajectory).collect();
    let manifest = DatasetManifest::new(tasks, entries, category_registry)?;
    for a in augmented {
        let parent = expert
            .iter()
            .find(|e| Some(&e.id) == a.parent_id.as_ref())
            .ok_or_else(|| DatasetError::DanglingParent(a.parent_id.clone().unwrap_or_default()))?;
        a.check_derived_from(parent)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RegionAnnotation;
    use crate::imaging::{fill_box, BBox};

    fn img(v: u8) -> RgbImage {
        RgbImage::from_pixel(2, 2, Rgb([v, v, v]))
    }

    #[test]
    fn composite_examples() {
        let fg = img(10);
        let bg = img(200);
        let ones = AlphaMask::new(2, 2, vec![1.0; 4]).unwrap();
        let zeros = AlphaMask::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(composite(&fg, &ones, &bg).unwrap(), fg);
        assert_eq!(composite(&fg, &zeros, &bg).unwrap(), bg);
        let diag = AlphaMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = composite(&fg, &diag, &bg).unwrap();
        let got: Vec<u8> = out.pixels().map(|p| p.0[0]).collect();
        assert_eq!(got, vec![10, 200, 200, 10]);
    }

    #[test]
    fn soft_masks_round_half_to_even() {
        // 0.5 * 1 + 0.5 * 2 = 1.5 -> 2 ; 0.5 * 2 + 0.5 * 3 = 2.5 -> 2
        let a = RgbImage::from_raw(2, 1, vec![1, 2, 2, 2, 2, 2]).unwrap();
        let b = RgbImage::from_raw(2, 1, vec![2, 3, 3, 3, 3, 3]).unwrap();
        let half = AlphaMask::new(2, 1, vec![0.5, 0.5]).unwrap();
        let out = composite(&a, &half, &b).unwrap();
        assert_eq!(out.as_raw(), &[2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn composite_errors() {
        let m = AlphaMask::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(
            composite(&img(1), &m, &RgbImage::new(3, 2)),
            Err(AugmentError::Imaging(ImagingError::DimMismatch(..)))
        ));
        assert!(matches!(AlphaMask::new(1, 1, vec![-0.1]), Err(ImagingError::MaskRange { .. })));
    }

    #[test]
    fn binary_fast_path_matches_general_form() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = RgbImage::from_fn(13, 7, |_, _| Rgb(rng.random()));
        let b = RgbImage::from_fn(13, 7, |_, _| Rgb(rng.random()));
        let m = Mask::from_fn(13, 7, |x, y| (x * 7 + y * 3) % 5 < 2);
        assert_eq!(composite(&a, &m.to_alpha(), &b).unwrap(), composite_binary(&a, &m, &b).unwrap());
    }

    #[test]
    fn default_library_shape() {
        let lib = PromptLibrary::default_library();
        assert_eq!(lib.templates().len(), 500);
        let count = |m| lib.templates().iter().filter(|t| t.category == m).count();
        assert_eq!((count(Material::Wood), count(Material::Stone), count(Material::Composite)), (290, 175, 35));
        assert_eq!(lib.weights()[&Material::Wood], 0.58);
        assert_eq!(lib.weights()[&Material::Stone], 0.35);
        assert_eq!(lib.weights()[&Material::Composite], 0.07);
        for t in lib.templates() {
            assert_eq!(material_of(&t.text), t.category, "{}", t.text);
        }
        let ids: std::collections::BTreeSet<_> = lib.templates().iter().map(|t| &t.id).collect();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn library_tsv_round_trip_and_validation() {
        let lib = PromptLibrary::default_library();
        assert_eq!(PromptLibrary::from_tsv(&lib.to_tsv(), None).unwrap(), lib);
        assert!(matches!(PromptLibrary::from_tsv("", None), Err(AugmentError::EmptyLibrary)));
        assert!(PromptLibrary::from_tsv("a\twood\tx\n", None).is_err()); // stone weight > 0 without templates
        let bad = lib.with_weights([(Material::Wood, 0.5)].into_iter().collect());
        assert!(matches!(bad, Err(AugmentError::InvalidLibrary(_))));
    }

    #[test]
    fn wood_only_weights_always_sample_wood() {
        let lib = PromptLibrary::default_library()
            .with_weights([(Material::Wood, 1.0), (Material::Stone, 0.0), (Material::Composite, 0.0)].into_iter().collect())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_prompt(&lib, &mut rng).unwrap().category, Material::Wood);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let lib = PromptLibrary::default_library();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_prompt(&lib, &mut rng).unwrap().id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    fn expert(frames: usize) -> (Trajectory, PropagationResult) {
        let (w, h) = (16, 12);
        let b = BBox::new(3.0, 2.0, 9.0, 7.0);
        let mut fs = Vec::new();
        let mut anns = Vec::new();
        for t in 0..frames {
            let mut im = RgbImage::from_pixel(w, h, Rgb([40, 80, 120]));
            fill_box(&mut im, &b, [250, 10, 10]);
            fs.push(Frame {
                index: t,
                image: im,
                proprio: vec![t as f64, 0.5],
                action: vec![0.1 * t as f64, -1.0],
                annotations: vec![],
            });
            anns.push(vec![RegionAnnotation::from_mask("cube", Mask::from_bbox(w, h, &b), 1.0).unwrap()]);
        }
        let t = Trajectory {
            id: "e0".into(),
            instruction: "push".into(),
            frames: fs,
            source: Source::Expert,
            parent_id: None,
        };
        let r = PropagationResult::from_annotations("e0", anns);
        (t, r)
    }

    #[test]
    fn ratio_five_on_fifty_frames() {
        let (t, masks) = expert(50);
        let lib = PromptLibrary::default_library();
        let plan = AugmentationPlan::new(5, 3, "procedural", &lib, &[t.id.clone()]).unwrap();
        let out = augment_trajectory(&t, &masks, &plan, &ProceduralProvider).unwrap();
        assert_eq!(out.trajectories.len(), 5);
        assert!(out.failures.is_empty());
        for a in &out.trajectories {
            assert_eq!(a.frames.len(), 50);
            a.check_derived_from(&t).unwrap();
            assert_eq!(a.parent_id.as_deref(), Some("e0"));
            assert_eq!(a.source, Source::Augmented);
            assert_eq!(a.instruction, t.instruction);
        }
    }

    #[test]
    fn all_ones_masks_reproduce_expert_frames() {
        let (t, _) = expert(4);
        let full: Vec<Vec<RegionAnnotation>> = (0..4)
            .map(|_| vec![RegionAnnotation::from_mask("all", Mask::full(16, 12), 1.0).unwrap()])
            .collect();
        let masks = PropagationResult::from_annotations("e0", full);
        let plan = AugmentationPlan::new(1, 0, "procedural", &PromptLibrary::default_library(), &[t.id.clone()]).unwrap();
        let out = augment_trajectory(&t, &masks, &plan, &ProceduralProvider).unwrap();
        for (a, e) in out.trajectories[0].frames.iter().zip(&t.frames) {
            assert_eq!(a.image, e.image);
        }
    }

    #[test]
    fn checkerboard_background_is_exact() {
        let (t, masks) = expert(3);
        let plan = AugmentationPlan::new(2, 0, "checkerboard", &PromptLibrary::default_library(), &[t.id.clone()]).unwrap();
        let provider = CheckerboardProvider { cell: 3 };
        let out = augment_trajectory(&t, &masks, &plan, &provider).unwrap();
        let oracle = texture::checkerboard(16, 12, 3);
        for a in &out.trajectories {
            for (f, e) in a.frames.iter().zip(&t.frames) {
                let m = &masks.frames[f.index][0].mask;
                for (x, y, p) in f.image.enumerate_pixels() {
                    let expect = if m.get(x, y) { e.image.get_pixel(x, y) } else { oracle.get_pixel(x, y) };
                    assert_eq!(p, expect);
                }
            }
        }
    }

    struct Flaky;
    impl BackgroundProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn generate(&self, _p: &str, w: u32, h: u32, seed: u64) -> Result<RgbImage, AugmentError> {
            if seed % 2 == 0 {
                Err(AugmentError::ProviderFailure("even seed".into()))
            } else {
                Ok(RgbImage::new(w, h))
            }
        }
    }

    #[test]
    fn provider_failure_aborts_only_that_copy() {
        let (t, masks) = expert(2);
        let mut plan = AugmentationPlan::new(4, 0, "flaky", &PromptLibrary::default_library(), &[t.id.clone()]).unwrap();
        for (i, a) in plan.assignments.iter_mut().enumerate() {
            a.background_seed = i as u64;
        }
        let out = augment_trajectory(&t, &masks, &plan, &Flaky).unwrap();
        assert_eq!(out.trajectories.len(), 2);
        assert_eq!(out.failures.iter().map(|f| f.0).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn missing_masks_and_zero_ratio() {
        let (t, masks) = expert(3);
        let short = PropagationResult::from_annotations("e0", masks.frames[..2].to_vec());
        let plan = AugmentationPlan::new(1, 0, "procedural", &PromptLibrary::default_library(), &[t.id.clone()]).unwrap();
        assert!(matches!(
            augment_trajectory(&t, &short, &plan, &ProceduralProvider),
            Err(AugmentError::MissingMasks(_))
        ));
        assert!(matches!(
            AugmentationPlan::new(0, 0, "procedural", &PromptLibrary::default_library(), &[]),
            Err(AugmentError::ZeroRatio)
        ));
    }

    #[test]
    fn per_frame_mode_varies_backgrounds() {
        let (t, masks) = expert(3);
        let mut plan = AugmentationPlan::new(1, 0, "procedural", &PromptLibrary::default_library(), &[t.id.clone()]).unwrap();
        let shared = augment_trajectory(&t, &masks, &plan, &ProceduralProvider).unwrap();
        let f = &shared.trajectories[0].frames;
        assert_eq!(f[0].image, f[1].image);
        plan.per_frame_backgrounds = true;
        let per = augment_trajectory(&t, &masks, &plan, &ProceduralProvider).unwrap();
        let f = &per.trajectories[0].frames;
        assert_ne!(f[0].image, f[1].image);
    }

    #[test]
    fn final_dataset_counts_and_errors() {
        let (t, masks) = expert(2);
        let mut experts = vec![t.clone()];
        let mut augmented = vec![];
        for i in 1..50 {
            let mut e = t.clone();
            e.id = format!("e{i}");
            experts.push(e);
        }
        let ids: Vec<String> = experts.iter().map(|e| e.id.clone()).collect();
        let plan = AugmentationPlan::new(5, 0, "checkerboard", &PromptLibrary::default_library(), &ids).unwrap();
        for e in &experts {
            let m = PropagationResult { trajectory_id: e.id.clone(), ..masks.clone() };
            augmented.extend(augment_trajectory(e, &m, &plan, &CheckerboardProvider { cell: 2 }).unwrap().trajectories);
        }
        let m = build_final_dataset(&experts, &augmented, vec![], vec!["cube".into()]).unwrap();
        assert_eq!(m.trajectories.len(), 300);

        let only = build_final_dataset(&experts, &[], vec![], vec!["cube".into()]).unwrap();
        let expert_only = DatasetManifest::new(
            vec![],
            experts.iter().map(TrajectoryEntry::for_trajectory).collect(),
            vec!["cube".into()],
        )
        .unwrap();
        assert_eq!(only, expert_only);

        let mut dup = augmented[0].clone();
        dup.id = "e0".into();
        assert!(matches!(
            build_final_dataset(&experts, &[dup], vec![], vec![]),
            Err(AugmentError::Dataset(DatasetError::SchemaViolation { .. }))
        ));
        let mut orphan = augmented[0].clone();
        orphan.parent_id = Some("nobody".into());
        assert!(matches!(
            build_final_dataset(&experts, &[orphan], vec![], vec![]),
            Err(AugmentError::Dataset(DatasetError::DanglingParent(_)))
        ));
    }
}
