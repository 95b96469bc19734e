//! One-shot region matching.
//!
//! A single annotated reference frame yields one unit embedding per
//! category. On every anchor frame, detector proposals are embedded and
//! assigned to the most similar reference (cosine argmax), unless the
//! detector itself is confident enough to be trusted directly.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Frame, RegionAnnotation, Trajectory};
use crate::imaging::{self, BBox, Mask};

/// Side of the square crop fed to the embedder.
pub const CROP_SIDE: u32 = 224;
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.15;
pub const DEFAULT_TEXT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.7;
pub const DEFAULT_SIMILARITY_FLOOR: f64 = 0.3;
/// Similarities closer than this count as equal, so exact ties between
/// different reference directions are not decided by rounding.
pub const SIMILARITY_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("degenerate box for `{0}`")]
    DegenerateBox(String),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("duplicate reference category `{0}`")]
    DuplicateCategory(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("no proposal matched a reference category in trajectory `{0}`")]
    NoMatches(String),
    #[error("reference file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Produces an embedding for an image crop. Must be deterministic.
pub trait EmbedderBackend {
    fn dim(&self) -> usize;
    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>, MatchError>;
    /// Whether `embed` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Open-set detector contract: proposals for the given text prompts, all
/// with `score >= box_threshold`.
pub trait DetectorBackend {
    fn detect(
        &self,
        image: &RgbImage,
        prompts: &[String],
        box_threshold: f64,
        text_threshold: f64,
    ) -> Result<Vec<Proposal>, MatchError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub detector_label: Option<String>,
}

/// A proposal together with the embedding of its crop.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedProposal {
    pub proposal: Proposal,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    ConfidenceShortcut,
    SimilarityArgmax,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub proposal: Proposal,
    pub category: Option<String>,
    pub similarity: f64,
    pub route: Route,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    entries: Vec<(String, Vec<f64>)>,
    dim: usize,
    pub source_frame: (String, usize),
}

impl ReferenceSet {
    /// Normalizes and validates the entries (unique categories, shared dim).
    pub fn new(entries: Vec<(String, Vec<f64>)>, source_frame: (String, usize)) -> Result<Self, MatchError> {
        let dim = entries.first().ok_or(MatchError::EmptyReferenceSet)?.1.len();
        let mut out: Vec<(String, Vec<f64>)> = Vec::with_capacity(entries.len());
        for (c, e) in entries {
            if e.len() != dim {
                return Err(MatchError::DimMismatch(dim, e.len()));
            }
            if out.iter().any(|(o, _)| *o == c) {
                return Err(MatchError::DuplicateCategory(c));
            }
            out.push((c, normalized(&e)?));
        }
        Ok(Self {
            entries: out,
            dim,
            source_frame,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    pub fn get(&self, category: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(c, _)| c == category)
            .map(|(_, e)| e.as_slice())
    }

    /// File form: a text header (magic, dim, K, source frame, one category
    /// per line) followed by the row-major little-endian f32 matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "roboaug-refset v1\ndim {}\nk {}\nsource {} {}\n",
            self.dim,
            self.entries.len(),
            self.source_frame.1,
            self.source_frame.0
        );
        for (c, _) in &self.entries {
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("---\n");
        let mut bytes = out.into_bytes();
        for (_, e) in &self.entries {
            for &v in e {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MatchError> {
        let bad = |m: &str| MatchError::Format(m.to_string());
        let sep = b"---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| bad("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("header is not utf-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("roboaug-refset v1") {
            return Err(bad("bad magic"));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String, MatchError> {
            line.and_then(|l| l.strip_prefix(key))
                .map(|s| s.trim_start().to_string())
                .ok_or_else(|| bad(key))
        };
        let dim: usize = field(lines.next(), "dim")?.parse().map_err(|_| bad("dim"))?;
        let k: usize = field(lines.next(), "k")?.parse().map_err(|_| bad("k"))?;
        let src = field(lines.next(), "source")?;
        let (fi, tid) = src.split_once(' ').ok_or_else(|| bad("source"))?;
        let frame_idx: usize = fi.parse().map_err(|_| bad("source frame"))?;
        let cats: Vec<String> = lines.map(str::to_string).collect();
        if cats.len() != k {
            return Err(bad("category count does not match k"));
        }
        let body = &bytes[pos + sep.len()..];
        if body.len() != k * dim * 4 {
            return Err(bad("matrix size does not match header"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let entries = cats
            .into_iter()
            .zip(vals.chunks(dim.max(1)))
            .map(|(c, row)| (c, row.to_vec()))
            .collect();
        Self::new(entries, (tid.to_string(), frame_idx))
    }

    pub fn save(&self, path: &Path) -> Result<(), MatchError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MatchError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, MatchError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(MatchError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::DimMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MatchError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Crops, square-pads, resizes to 224×224, embeds and normalizes one box.
pub fn embed_box(image: &RgbImage, bbox: &BBox, embedder: &dyn EmbedderBackend) -> Result<Vec<f64>, MatchError> {
    let crop = imaging::square_crop_resized(image, bbox, CROP_SIDE)
        .ok_or_else(|| MatchError::DegenerateBox(format!("{bbox:?}")))?;
    let e = embedder.embed(&crop)?;
    if e.len() != embedder.dim() {
        return Err(MatchError::BackendFailure(format!(
            "embedder returned dim {} (declared {})",
            e.len(),
            embedder.dim()
        )));
    }
    normalized(&e)
}

pub fn build_reference_set(
    trajectory_id: &str,
    frame: &Frame,
    boxes: &[(String, BBox)],
    embedder: &dyn EmbedderBackend,
) -> Result<ReferenceSet, MatchError> {
    if boxes.is_empty() {
        return Err(MatchError::EmptyReferenceSet);
    }
    let (w, h) = frame.image.dimensions();
    let mut entries = Vec::with_capacity(boxes.len());
    for (cat, b) in boxes {
        if b.validate().is_err() || b.clip(w, h).is_none_or(|c| c.area() < 1.0) {
            return Err(MatchError::DegenerateBox(cat.clone()));
        }
        entries.push((cat.clone(), embed_box(&frame.image, b, embedder)?));
    }
    ReferenceSet::new(entries, (trajectory_id.to_string(), frame.index))
}

#[derive(Debug, Clone, Copy)]
pub struct MatchParams {
    pub delta_threshold: f64,
    pub similarity_floor: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            delta_threshold: DEFAULT_DELTA_THRESHOLD,
            similarity_floor: DEFAULT_SIMILARITY_FLOOR,
        }
    }
}

fn shortcut_category<'a>(label: Option<&str>, refs: &'a ReferenceSet) -> Option<&'a str> {
    let label = label?.trim().to_lowercase();
    refs.categories().find(|c| c.to_lowercase() == label)
}

/// Assigns a category to every proposal.
///
/// Proposals scoring above `delta_threshold` whose detector label names a
/// registered category keep that label. All others take the cosine argmax
/// over the references, ties going to the lexicographically smallest
/// category, and are rejected when the best similarity is below the floor
/// (or the embedding is degenerate).
pub fn match_candidates(
    proposals: &[EmbeddedProposal],
    refs: &ReferenceSet,
    params: MatchParams,
) -> Result<Vec<Assignment>, MatchError> {
    if refs.is_empty() {
        return Err(MatchError::EmptyReferenceSet);
    }
    for t in [params.delta_threshold, params.similarity_floor] {
        if !(0.0..=1.0).contains(&t) {
            return Err(MatchError::BadThreshold(t));
        }
    }
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        if p.embedding.len() != refs.dim() {
            return Err(MatchError::DimMismatch(refs.dim(), p.embedding.len()));
        }
        let sims: Option<Vec<f64>> = refs
            .entries()
            .iter()
            .map(|(_, r)| cosine_similarity(&p.embedding, r).ok())
            .collect();

        if p.proposal.score > params.delta_threshold {
            if let Some(cat) = shortcut_category(p.proposal.detector_label.as_deref(), refs) {
                let similarity = sims
                    .as_ref()
                    .and_then(|s| refs.categories().position(|c| c == cat).map(|i| s[i]))
                    .unwrap_or(0.0);
                out.push(Assignment {
                    proposal: p.proposal.clone(),
                    category: Some(cat.to_string()),
                    similarity,
                    route: Route::ConfidenceShortcut,
                });
                continue;
            }
        }

        let best = sims.as_ref().and_then(|s| {
            let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            refs.entries()
                .iter()
                .zip(s)
                .filter(|(_, &v)| v >= top - SIMILARITY_TIE_EPS)
                .map(|((c, _), &v)| (c.as_str(), v))
                .min_by(|a, b| a.0.cmp(b.0))
        });
        match best {
            Some((cat, sim)) if sim >= params.similarity_floor - SIMILARITY_TIE_EPS => out.push(Assignment {
                proposal: p.proposal.clone(),
                category: Some(cat.to_string()),
                similarity: sim,
                route: Route::SimilarityArgmax,
            }),
            other => out.push(Assignment {
                proposal: p.proposal.clone(),
                category: None,
                similarity: other.map_or(0.0, |b| b.1),
                route: Route::Rejected,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractParams {
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub matching: MatchParams,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            box_threshold: DEFAULT_BOX_THRESHOLD,
            text_threshold: DEFAULT_TEXT_THRESHOLD,
            matching: MatchParams::default(),
        }
    }
}

/// Runs detection plus matching on the anchor (first) frame and returns one
/// box-only annotation per matched category. Shortcut winners outrank
/// similarity winners; within a route the higher score (shortcut) or
/// similarity (argmax) wins.
pub fn extract_anchor_annotations(
    trajectory: &Trajectory,
    refs: &ReferenceSet,
    detector: &dyn DetectorBackend,
    embedder: &dyn EmbedderBackend,
    params: ExtractParams,
) -> Result<Vec<RegionAnnotation>, MatchError> {
    let anchor = trajectory
        .frames
        .first()
        .ok_or_else(|| MatchError::NoMatches(trajectory.id.clone()))?;
    let (w, h) = anchor.image.dimensions();
    let prompts: Vec<String> = refs.categories().map(str::to_string).collect();
    let proposals = detector.detect(&anchor.image, &prompts, params.box_threshold, params.text_threshold)?;

    let mut embedded = Vec::with_capacity(proposals.len());
    for p in proposals {
        let Some(bbox) = p.bbox.clip(w, h) else { continue };
        // Degenerate crops cannot be embedded; skip them like rejected boxes.
        let Ok(embedding) = embed_box(&anchor.image, &bbox, embedder) else { continue };
        embedded.push(EmbeddedProposal {
            proposal: Proposal { bbox, ..p },
            embedding,
        });
    }
    let assignments = match_candidates(&embedded, refs, params.matching)?;

    let rank = |a: &Assignment| match a.route {
        Route::ConfidenceShortcut => (1u8, a.proposal.score),
        _ => (0u8, a.similarity),
    };
    let mut winners: BTreeMap<String, Assignment> = BTreeMap::new();
    for a in assignments {
        let Some(cat) = a.category.clone() else { continue };
        match winners.get(&cat) {
            Some(cur) if rank(cur).partial_cmp(&rank(&a)) != Some(Ordering::Less) => {}
            _ => {
                winners.insert(cat, a);
            }
        }
    }
    if winners.is_empty() {
        return Err(MatchError::NoMatches(trajectory.id.clone()));
    }
    Ok(winners
        .into_iter()
        .map(|(category, a)| {
            let confidence = match a.route {
                Route::ConfidenceShortcut => a.proposal.score,
                _ => a.similarity,
            }
            .clamp(0.0, 1.0);
            RegionAnnotation {
                category,
                bbox: a.proposal.bbox,
                mask: Mask::empty(w, h),
                confidence,
            }
        })
        .collect())
}

/// Content fingerprint used to key per-image fixtures.
pub fn image_fingerprint(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Synthetic embedder: mean RGB of the crop mixed through a fixed
/// orthonormal basis. With the identity basis a pure red crop embeds to
/// `(1, 0, 0, ...)`.
#[derive(Debug, Clone)]
pub struct MeanColorEmbedder {
    basis: [Vec<f64>; 3],
}

impl MeanColorEmbedder {
    /// Identity basis in `dim >= 3` dimensions.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 3, "mean-color embedder needs at least 3 dimensions");
        let unit = |i: usize| {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            v
        };
        Self {
            basis: [unit(0), unit(1), unit(2)],
        }
    }

    /// Arbitrary basis; columns are orthonormalized (Gram-Schmidt).
    pub fn with_basis(basis: [Vec<f64>; 3]) -> Self {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for v in basis {
            let mut u = v.clone();
            for o in &out {
                let d: f64 = u.iter().zip(o).map(|(a, b)| a * b).sum();
                u.iter_mut().zip(o).for_each(|(a, b)| *a -= d * b);
            }
            out.push(normalized(&u).expect("basis vectors must be independent"));
        }
        let [a, b, c]: [Vec<f64>; 3] = out.try_into().expect("three vectors");
        Self { basis: [a, b, c] }
    }
}

impl EmbedderBackend for MeanColorEmbedder {
    fn dim(&self) -> usize {
        self.basis[0].len()
    }

    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>, MatchError> {
        let m = imaging::mean_rgb(crop);
        let mut e = vec![0.0; self.dim()];
        for (c, basis) in self.basis.iter().enumerate() {
            for (o, b) in e.iter_mut().zip(basis) {
                *o += m[c] * b;
            }
        }
        if e.iter().all(|&v| v == 0.0) {
            return Err(MatchError::BackendFailure("black crop has no mean-color embedding".into()));
        }
        Ok(e)
    }
}

/// Synthetic detector that reads ground-truth boxes registered per image
/// fingerprint. Boxes are returned for categories named by a prompt
/// (case-insensitive substring match), with a fixed score and optional
/// deterministic jitter.
#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    truth: BTreeMap<String, Vec<(String, BBox)>>,
    pub score: f64,
    pub jitter_px: f64,
}

impl OracleDetector {
    pub fn new(score: f64, jitter_px: f64) -> Self {
        Self {
            truth: BTreeMap::new(),
            score,
            jitter_px,
        }
    }

    pub fn register(&mut self, image: &RgbImage, boxes: Vec<(String, BBox)>) {
        self.truth.entry(image_fingerprint(image)).or_default().extend(boxes);
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

impl DetectorBackend for OracleDetector {
    fn detect(
        &self,
        image: &RgbImage,
        prompts: &[String],
        box_threshold: f64,
        _text_threshold: f64,
    ) -> Result<Vec<Proposal>, MatchError> {
        if self.score < box_threshold {
            return Ok(Vec::new());
        }
        let key = image_fingerprint(image);
        let Some(boxes) = self.truth.get(&key) else {
            return Ok(Vec::new());
        };
        let (w, h) = image.dimensions();
        let mut out = Vec::new();
        for (i, (cat, b)) in boxes.iter().enumerate() {
            let lc = cat.to_lowercase();
            if !prompts.iter().any(|p| p.to_lowercase().contains(&lc)) {
                continue;
            }
            let bbox = if self.jitter_px > 0.0 {
                let j = jitter_offsets(&key, i, self.jitter_px);
                BBox::new(b.x_min + j[0], b.y_min + j[1], b.x_max + j[2], b.y_max + j[3])
            } else {
                *b
            };
            if let Some(bbox) = bbox.clip(w, h) {
                out.push(Proposal {
                    bbox,
                    score: self.score,
                    detector_label: Some(cat.clone()),
                });
            }
        }
        Ok(out)
    }
}

fn jitter_offsets(key: &str, i: usize, amplitude: f64) -> [f64; 4] {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update((i as u64).to_le_bytes());
    let d = h.finalize();
    std::array::from_fn(|k| {
        let u = f64::from(u16::from_le_bytes([d[2 * k], d[2 * k + 1]])) / f64::from(u16::MAX);
        (2.0 * u - 1.0) * amplitude
    })
}
