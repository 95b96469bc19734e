//! Mask propagation: turns anchor-frame seeds into one mask per seeded
//! category on every frame through a pluggable tracker backend.

use std::collections::BTreeMap;

use image::RgbImage;
use thiserror::Error;

use crate::dataset::{RegionAnnotation, Trajectory};
use crate::imaging::{check_dims, BBox, ImagingError, Mask};

/// A category whose mask is empty on more than this fraction of frames is
/// reported in [`PropagationResult::warnings`].
pub const COVERAGE_WARNING_FRACTION: f64 = 0.3;
/// Minimum fraction of the seed box the frame-0 mask must cover.
pub const MIN_SEED_COVERAGE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("tracker backend failure: {0}")]
    BackendFailure(String),
    #[error("seed for `{0}` lies outside the image")]
    SeedOutOfBounds(String),
    #[error("duplicate seed category `{0}`")]
    DuplicateSeed(String),
    #[error("trajectory `{0}` has no frames")]
    EmptyTrajectory(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageWarning {
    pub category: String,
    pub empty_fraction: f64,
}

/// One tracking session over a single trajectory.
pub trait TrackerSession {
    /// Masks for the frame the session was initialised on.
    fn current(&self) -> Vec<(String, Mask)>;
    /// Advances to the next frame.
    fn step(&mut self, frame: &RgbImage) -> Result<Vec<(String, Mask)>, PropagationError>;
}

pub trait TrackerBackend {
    fn name(&self) -> &str;
    fn init(
        &self,
        first_frame: &RgbImage,
        seeds: &[(String, Mask)],
    ) -> Result<Box<dyn TrackerSession>, PropagationError>;
}

/// Optional re-seeding: consulted before each frame `t > 0`; returning
/// annotations restarts the session from that frame.
pub trait ReseedHook {
    fn reseed(&self, frame_index: usize, image: &RgbImage) -> Option<Vec<RegionAnnotation>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub trajectory_id: String,
    /// Per frame, one annotation per seeded category (empty-mask frames keep
    /// the category with the last known box and zero confidence so that
    /// counts stay aligned; see [`PropagationResult::masks_for`]).
    pub frames: Vec<Vec<RegionAnnotation>>,
    pub coverage: BTreeMap<String, f64>,
    pub warnings: Vec<CoverageWarning>,
}

impl PropagationResult {
    /// Non-empty annotations of frame `t`, suitable for storing on a
    /// [`crate::dataset::Frame`].
    pub fn annotations(&self, t: usize) -> Vec<RegionAnnotation> {
        self.frames[t]
            .iter()
            .filter(|a| !a.mask.is_empty())
            .cloned()
            .collect()
    }

    pub fn masks_for(&self, t: usize) -> impl Iterator<Item = &Mask> {
        self.frames[t].iter().map(|a| &a.mask)
    }

    /// Wraps exact per-frame annotations (e.g. rendered ground truth).
    pub fn from_annotations(trajectory_id: &str, frames: Vec<Vec<RegionAnnotation>>) -> Self {
        let coverage = coverage_of(&frames);
        let warnings = warnings_for(&coverage);
        Self {
            trajectory_id: trajectory_id.to_string(),
            frames,
            coverage,
            warnings,
        }
    }
}

fn coverage_of(frames: &[Vec<RegionAnnotation>]) -> BTreeMap<String, f64> {
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    for f in frames {
        for a in f {
            *hits.entry(a.category.clone()).or_default() += usize::from(!a.mask.is_empty());
        }
    }
    let n = frames.len().max(1) as f64;
    hits.into_iter().map(|(c, k)| (c, k as f64 / n)).collect()
}

fn warnings_for(coverage: &BTreeMap<String, f64>) -> Vec<CoverageWarning> {
    coverage
        .iter()
        .filter(|(_, &c)| 1.0 - c > COVERAGE_WARNING_FRACTION)
        .map(|(cat, &c)| CoverageWarning {
            category: cat.clone(),
            empty_fraction: 1.0 - c,
        })
        .collect()
}

/// Seed masks: the annotation's own mask when present, else its box filled
/// and clipped to the image.
fn seed_masks(seeds: &[RegionAnnotation], width: u32, height: u32) -> Result<Vec<(String, Mask)>, PropagationError> {
    let mut out: Vec<(String, Mask)> = Vec::with_capacity(seeds.len());
    for s in seeds {
        if out.iter().any(|(c, _)| *c == s.category) {
            return Err(PropagationError::DuplicateSeed(s.category.clone()));
        }
        if s.bbox.validate().is_err() || s.bbox.clip(width, height).is_none() {
            return Err(PropagationError::SeedOutOfBounds(s.category.clone()));
        }
        let mask = if s.mask.is_empty() {
            Mask::from_bbox(width, height, &s.bbox)
        } else {
            check_dims(s.mask.dims(), (width, height))?;
            s.mask.clone()
        };
        out.push((s.category.clone(), mask));
    }
    Ok(out)
}

fn to_annotations(
    masks: Vec<(String, Mask)>,
    order: &[String],
    last_box: &mut BTreeMap<String, BBox>,
    width: u32,
    height: u32,
) -> Result<Vec<RegionAnnotation>, PropagationError> {
    let mut by_cat: BTreeMap<String, Mask> = masks.into_iter().collect();
    let mut out = Vec::with_capacity(order.len());
    for cat in order {
        let mask = by_cat.remove(cat).ok_or_else(|| {
            PropagationError::BackendFailure(format!("tracker returned no mask for `{cat}`"))
        })?;
        check_dims(mask.dims(), (width, height))?;
        let ann = match mask.tight_bbox() {
            Some(bbox) => {
                last_box.insert(cat.clone(), bbox);
                RegionAnnotation {
                    category: cat.clone(),
                    bbox,
                    mask,
                    confidence: 1.0,
                }
            }
            None => RegionAnnotation {
                category: cat.clone(),
                bbox: last_box[cat],
                mask,
                confidence: 0.0,
            },
        };
        out.push(ann);
    }
    Ok(out)
}

pub fn propagate(
    trajectory: &Trajectory,
    seeds: &[RegionAnnotation],
    backend: &dyn TrackerBackend,
) -> Result<PropagationResult, PropagationError> {
    propagate_with(trajectory, seeds, backend, None)
}

/// Forward propagation from frame 0 to the last frame.
pub fn propagate_with(
    trajectory: &Trajectory,
    seeds: &[RegionAnnotation],
    backend: &dyn TrackerBackend,
    reseed: Option<&dyn ReseedHook>,
) -> Result<PropagationResult, PropagationError> {
    let first = trajectory
        .frames
        .first()
        .ok_or_else(|| PropagationError::EmptyTrajectory(trajectory.id.clone()))?;
    let (w, h) = first.image.dimensions();
    let initial = seed_masks(seeds, w, h)?;
    let order: Vec<String> = initial.iter().map(|(c, _)| c.clone()).collect();
    let mut last_box: BTreeMap<String, BBox> = seeds
        .iter()
        .map(|s| (s.category.clone(), s.bbox.clip(w, h).expect("checked in seed_masks")))
        .collect();

    let mut session = backend.init(&first.image, &initial)?;
    let frame0 = to_annotations(session.current(), &order, &mut last_box, w, h)?;
    for (ann, seed) in frame0.iter().zip(seeds) {
        let clipped = seed.bbox.clip(w, h).expect("checked in seed_masks");
        let covered = ann.mask.area_within(&clipped) as f64;
        if covered < MIN_SEED_COVERAGE * clipped.area() {
            return Err(PropagationError::BackendFailure(format!(
                "frame-0 mask for `{}` covers {:.0}% of its seed box",
                seed.category,
                100.0 * covered / clipped.area()
            )));
        }
    }
    let mut frames = vec![frame0];
    for f in &trajectory.frames[1..] {
        if let Some(new_seeds) = reseed.and_then(|r| r.reseed(f.index, &f.image)) {
            let masks = seed_masks(&new_seeds, w, h)?;
            session = backend.init(&f.image, &masks)?;
            frames.push(to_annotations(session.current(), &order, &mut last_box, w, h)?);
            continue;
        }
        let masks = session.step(&f.image)?;
        frames.push(to_annotations(masks, &order, &mut last_box, w, h)?);
    }
    Ok(PropagationResult::from_annotations(&trajectory.id, frames))
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, PropagationError> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.as_raw().iter().zip(b.as_raw()) {
        inter += usize::from(*x & *y);
        union += usize::from(*x | *y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Elementwise OR over the annotation masks. An empty list needs explicit
/// dimensions, hence the `width`/`height` arguments.
pub fn union_mask(annotations: &[RegionAnnotation], width: u32, height: u32) -> Result<Mask, PropagationError> {
    let mut out = Mask::empty(width, height);
    for a in annotations {
        out.or_assign(&a.mask)?;
    }
    Ok(out)
}

/// Repeats the frame-0 masks on every frame.
#[derive(Debug, Default, Clone, Copy)]
pub struct StaticTracker;

struct StaticSession(Vec<(String, Mask)>);

impl TrackerSession for StaticSession {
    fn current(&self) -> Vec<(String, Mask)> {
        self.0.clone()
    }

    fn step(&mut self, _frame: &RgbImage) -> Result<Vec<(String, Mask)>, PropagationError> {
        Ok(self.0.clone())
    }
}

impl TrackerBackend for StaticTracker {
    fn name(&self) -> &str {
        "static"
    }

    fn init(&self, _first: &RgbImage, seeds: &[(String, Mask)]) -> Result<Box<dyn TrackerSession>, PropagationError> {
        Ok(Box::new(StaticSession(seeds.to_vec())))
    }
}

/// Rigid-translation tracker for synthetic scenes.
///
/// Each category keeps its frame-0 appearance (pixels under the seed mask)
/// as a template. On every step it searches integer shifts within
/// `search_radius` of the previous position and keeps the shift minimising
/// the mean squared color error over the template pixels that stay inside
/// the image. Ties go to the smaller displacement, then to the smaller
/// (dy, dx). On exact translating content it recovers masks pixel-for-pixel.
#[derive(Debug, Clone, Copy)]
pub struct TranslationTracker {
    pub search_radius: i32,
}

impl Default for TranslationTracker {
    fn default() -> Self {
        Self { search_radius: 12 }
    }
}

struct Template {
    category: String,
    /// (x, y, rgb) relative to the frame-0 mask position.
    pixels: Vec<(i32, i32, [u8; 3])>,
    seed: Mask,
    offset: (i32, i32),
}

struct TranslationSession {
    radius: i32,
    templates: Vec<Template>,
}

impl TrackerSession for TranslationSession {
    fn current(&self) -> Vec<(String, Mask)> {
        self.templates
            .iter()
            .map(|t| (t.category.clone(), t.seed.shifted(t.offset.0, t.offset.1)))
            .collect()
    }

    fn step(&mut self, frame: &RgbImage) -> Result<Vec<(String, Mask)>, PropagationError> {
        let (w, h) = (frame.width() as i32, frame.height() as i32);
        for t in &mut self.templates {
            if t.pixels.is_empty() {
                continue;
            }
            let mut best: Option<((f64, i32, i32, i32), (i32, i32))> = None;
            for dy in -self.radius..=self.radius {
                for dx in -self.radius..=self.radius {
                    let (ox, oy) = (t.offset.0 + dx, t.offset.1 + dy);
                    let mut err = 0.0;
                    let mut n = 0usize;
                    for &(x, y, rgb) in &t.pixels {
                        let (px, py) = (x + ox, y + oy);
                        if px < 0 || py < 0 || px >= w || py >= h {
                            continue;
                        }
                        let p = frame.get_pixel(px as u32, py as u32).0;
                        for c in 0..3 {
                            let d = f64::from(p[c]) - f64::from(rgb[c]);
                            err += d * d;
                        }
                        n += 1;
                    }
                    if n == 0 {
                        continue;
                    }
                    let key = (err / n as f64, dx.abs() + dy.abs(), dy, dx);
                    if best.is_none_or(|(b, _)| key.partial_cmp(&b) == Some(std::cmp::Ordering::Less)) {
                        best = Some((key, (ox, oy)));
                    }
                }
            }
            if let Some((_, off)) = best {
                t.offset = off;
            }
        }
        Ok(self.current())
    }
}

impl TrackerBackend for TranslationTracker {
    fn name(&self) -> &str {
        "translation-oracle"
    }

    fn init(&self, first: &RgbImage, seeds: &[(String, Mask)]) -> Result<Box<dyn TrackerSession>, PropagationError> {
        let templates = seeds
            .iter()
            .map(|(cat, mask)| {
                let mut pixels = Vec::new();
                for y in 0..mask.height() {
                    for x in 0..mask.width() {
                        if mask.get(x, y) {
                            pixels.push((x as i32, y as i32, first.get_pixel(x, y).0));
                        }
                    }
                }
                Template {
                    category: cat.clone(),
                    pixels,
                    seed: mask.clone(),
                    offset: (0, 0),
                }
            })
            .collect();
        Ok(Box::new(TranslationSession {
            radius: self.search_radius,
            templates,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, Source};
    use crate::imaging::fill_box;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Analytic fixture: an 8×8 green square moving 2 px/frame to the right
    /// over a fixed noisy background.
    pub(crate) fn moving_square(frames: usize) -> (Trajectory, Vec<Mask>) {
        let (w, h) = (160u32, 48u32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bg = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random_range(0..120), rng.random_range(0..120), 90]));
        let mut fs = Vec::new();
        let mut truth = Vec::new();
        for t in 0..frames {
            let b = BBox::new(4.0 + 2.0 * t as f64, 20.0, 12.0 + 2.0 * t as f64, 28.0);
            let mut img = bg.clone();
            fill_box(&mut img, &b, [20, 230, 40]);
            truth.push(Mask::from_bbox(w, h, &b));
            fs.push(Frame {
                index: t,
                image: img,
                proprio: vec![],
                action: vec![],
                annotations: vec![],
            });
        }
        (
            Trajectory {
                id: "square".into(),
                instruction: String::new(),
                frames: fs,
                source: Source::Expert,
                parent_id: None,
            },
            truth,
        )
    }

    fn seed(cat: &str, b: BBox, w: u32, h: u32) -> RegionAnnotation {
        RegionAnnotation {
            category: cat.into(),
            bbox: b,
            mask: Mask::empty(w, h),
            confidence: 1.0,
        }
    }

    #[test]
    fn static_backend_reproduces_seed_everywhere() {
        let (t, truth) = moving_square(5);
        let s = seed("square", truth[0].tight_bbox().unwrap(), 160, 48);
        let r = propagate(&t, &[s], &StaticTracker).unwrap();
        assert_eq!(r.frames.len(), 5);
        for f in &r.frames {
            assert_eq!(f.len(), 1);
            assert_eq!(f[0].mask, truth[0]);
        }
        // idempotent
        assert_eq!(r, propagate(&t, &[seed("square", truth[0].tight_bbox().unwrap(), 160, 48)], &StaticTracker).unwrap());
    }

    #[test]
    fn translation_tracker_is_exact_on_moving_square() {
        let (t, truth) = moving_square(50);
        let s = seed("square", truth[0].tight_bbox().unwrap(), 160, 48);
        let r = propagate(&t, &[s], &TranslationTracker::default()).unwrap();
        for (f, gt) in r.frames.iter().zip(&truth) {
            assert_eq!(mask_iou(&f[0].mask, gt).unwrap(), 1.0);
            assert_eq!(Some(f[0].bbox), gt.tight_bbox());
        }
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn seed_outside_image_is_rejected() {
        let (t, _) = moving_square(3);
        let s = seed("square", BBox::new(200.0, 0.0, 210.0, 5.0), 160, 48);
        assert!(matches!(
            propagate(&t, &[s], &StaticTracker),
            Err(PropagationError::SeedOutOfBounds(c)) if c == "square"
        ));
    }

    #[test]
    fn coverage_warning_surfaces_disappearing_objects() {
        let (t, truth) = moving_square(10);
        let mut m = vec![];
        for (i, gt) in truth.iter().enumerate() {
            let mask = if i < 5 { gt.clone() } else { Mask::empty(160, 48) };
            m.push(vec![RegionAnnotation {
                category: "square".into(),
                bbox: truth[0].tight_bbox().unwrap(),
                mask,
                confidence: 1.0,
            }]);
        }
        let r = PropagationResult::from_annotations(&t.id, m);
        assert_eq!(r.coverage["square"], 0.5);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.annotations(7).len(), 0);
    }

    struct HalfMaskTracker;
    impl TrackerBackend for HalfMaskTracker {
        fn name(&self) -> &str {
            "half"
        }
        fn init(&self, _f: &RgbImage, seeds: &[(String, Mask)]) -> Result<Box<dyn TrackerSession>, PropagationError> {
            let shrunk = seeds
                .iter()
                .map(|(c, m)| {
                    let b = m.tight_bbox().unwrap();
                    let small = BBox::new(b.x_min, b.y_min, b.x_min + 1.0, b.y_min + 1.0);
                    (c.clone(), Mask::from_bbox(m.width(), m.height(), &small))
                })
                .collect();
            Ok(Box::new(StaticSession(shrunk)))
        }
    }

    #[test]
    fn frame0_mask_must_cover_half_the_seed_box() {
        let (t, truth) = moving_square(3);
        let s = seed("square", truth[0].tight_bbox().unwrap(), 160, 48);
        assert!(matches!(propagate(&t, &[s], &HalfMaskTracker), Err(PropagationError::BackendFailure(_))));
    }

    struct EveryThird(RegionAnnotation);
    impl ReseedHook for EveryThird {
        fn reseed(&self, t: usize, _image: &RgbImage) -> Option<Vec<RegionAnnotation>> {
            (t % 3 == 0).then(|| vec![self.0.clone()])
        }
    }

    #[test]
    fn reseed_hook_restarts_session() {
        let (t, truth) = moving_square(7);
        let s = seed("square", truth[0].tight_bbox().unwrap(), 160, 48);
        let r = propagate_with(&t, &[s.clone()], &StaticTracker, Some(&EveryThird(s))).unwrap();
        assert_eq!(r.frames[3][0].mask, truth[0]);
    }

    #[test]
    fn iou_examples() {
        let a = Mask::from_raw(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = Mask::from_raw(2, 2, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = Mask::from_raw(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::empty(3, 2)).is_err());
    }

    fn ann(m: Mask) -> RegionAnnotation {
        RegionAnnotation {
            category: "x".into(),
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            mask: m,
            confidence: 1.0,
        }
    }

    #[test]
    fn union_examples() {
        let a = Mask::from_raw(2, 2, vec![1, 0, 0, 0]).unwrap();
        let b = Mask::from_raw(2, 2, vec![0, 0, 0, 1]).unwrap();
        assert_eq!(union_mask(&[ann(a.clone())], 2, 2).unwrap(), a);
        assert_eq!(union_mask(&[ann(a.clone()), ann(b.clone())], 2, 2).unwrap().area(), 2);
        assert!(union_mask(&[], 2, 2).unwrap().is_empty());
        assert!(union_mask(&[ann(Mask::empty(3, 3))], 2, 2).is_err());

        // oracle: pixelwise max over three random masks
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ms: Vec<Mask> = (0..3)
            .map(|_| Mask::from_raw(9, 7, (0..63).map(|_| rng.random_range(0..2)).collect()).unwrap())
            .collect();
        let u = union_mask(&ms.iter().cloned().map(ann).collect::<Vec<_>>(), 9, 7).unwrap();
        for i in 0..63 {
            let expect = ms.iter().map(|m| m.as_raw()[i]).max().unwrap();
            assert_eq!(u.as_raw()[i], expect);
        }
    }

    proptest::proptest! {
        #[test]
        fn union_is_commutative_associative_idempotent(seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gen = || ann(Mask::from_raw(6, 5, (0..30).map(|_| rng.random_range(0..2)).collect()).unwrap());
            let (a, b, c) = (gen(), gen(), gen());
            let u = |xs: &[RegionAnnotation]| union_mask(xs, 6, 5).unwrap();
            proptest::prop_assert_eq!(u(&[a.clone(), b.clone()]), u(&[b.clone(), a.clone()]));
            let ab = ann(u(&[a.clone(), b.clone()]));
            let bc = ann(u(&[b.clone(), c.clone()]));
            proptest::prop_assert_eq!(u(&[ab, c.clone()]), u(&[a.clone(), bc]));
            proptest::prop_assert_eq!(u(&[a.clone(), a.clone()]), a.mask.clone());
        }
    }
}
