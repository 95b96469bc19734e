//! Trajectory data model, the on-disk dataset layout, and the mask codec.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json
//! trajectories/<id>/meta.json
//! trajectories/<id>/states.csv
//! trajectories/<id>/frames/%06d.png
//! trajectories/<id>/masks/<category>/%06d.png
//! ```
//!
//! `manifest.json` is written in canonical form (sorted keys, two-space
//! indentation, trailing newline) so that a load/save cycle is byte-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::imaging::{BBox, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("augmented trajectory references missing parent `{0}`")]
    DanglingParent(String),
    #[error("mask codec error: {0}")]
    CodecError(String),
    #[error("invalid mask value {value} at index {index}")]
    InvalidMaskValue { index: usize, value: u8 },
    #[error("invalid trajectory `{id}`: {reason}")]
    InvalidTrajectory { id: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::SchemaViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn invalid(id: &str, reason: impl Into<String>) -> Self {
        Self::InvalidTrajectory {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    Augmented,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Expert => "expert",
            Source::Augmented => "augmented",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "expert" => Some(Source::Expert),
            "augmented" => Some(Source::Augmented),
            _ => None,
        }
    }
}

/// Per-frame, per-category region: the mask of one task-relevant entity.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub category: String,
    pub bbox: BBox,
    pub mask: Mask,
    pub confidence: f64,
}

impl RegionAnnotation {
    /// Annotation whose box is derived from the mask. `None` for an empty
    /// mask, which has no box.
    pub fn from_mask(category: impl Into<String>, mask: Mask, confidence: f64) -> Option<Self> {
        let bbox = mask.tight_bbox()?;
        Some(Self {
            category: category.into(),
            bbox,
            mask,
            confidence,
        })
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        self.bbox
            .validate_within(width, height)
            .map_err(|e| e.to_string())?;
        if self.mask.dims() != (width, height) {
            return Err(format!("mask for `{}` has wrong dimensions", self.category));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0,1]", self.confidence));
        }
        if !self.mask.is_empty() && self.mask.tight_bbox() != Some(self.bbox) {
            return Err(format!("bbox of `{}` is not tight around its mask", self.category));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: RgbImage,
    pub proprio: Vec<f64>,
    pub action: Vec<f64>,
    pub annotations: Vec<RegionAnnotation>,
}

impl Frame {
    pub fn annotation(&self, category: &str) -> Option<&RegionAnnotation> {
        self.annotations.iter().find(|a| a.category == category)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub instruction: String,
    pub frames: Vec<Frame>,
    pub source: Source,
    pub parent_id: Option<String>,
}

impl Trajectory {
    pub fn dims(&self) -> (u32, u32) {
        self.frames
            .first()
            .map(|f| f.image.dimensions())
            .unwrap_or((0, 0))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks the per-trajectory invariants (non-empty, shared image size,
    /// increasing indices, constant state dimensions, valid annotations).
    pub fn validate(&self) -> Result<(), DatasetError> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| DatasetError::invalid(&self.id, "no frames"))?;
        let (w, h) = first.image.dimensions();
        let (pd, ad) = (first.proprio.len(), first.action.len());
        let mut last: Option<usize> = None;
        for f in &self.frames {
            if f.image.dimensions() != (w, h) {
                return Err(DatasetError::invalid(&self.id, format!("frame {} size differs", f.index)));
            }
            if last.is_some_and(|l| f.index <= l) {
                return Err(DatasetError::invalid(&self.id, "frame indices not increasing"));
            }
            last = Some(f.index);
            if f.proprio.len() != pd || f.action.len() != ad {
                return Err(DatasetError::invalid(&self.id, format!("frame {} state dims differ", f.index)));
            }
            let mut seen = BTreeSet::new();
            for a in &f.annotations {
                a.validate(w, h).map_err(|r| DatasetError::invalid(&self.id, r))?;
                if !seen.insert(a.category.as_str()) {
                    return Err(DatasetError::invalid(&self.id, format!("duplicate category `{}`", a.category)));
                }
            }
        }
        match (self.source, &self.parent_id) {
            (Source::Augmented, None) => Err(DatasetError::invalid(&self.id, "augmented without parent_id")),
            (Source::Expert, Some(_)) => Err(DatasetError::invalid(&self.id, "expert with parent_id")),
            _ => Ok(()),
        }
    }

    /// Augmented copies must keep the parent's frame count, proprioception
    /// and actions bit-for-bit.
    pub fn check_derived_from(&self, parent: &Trajectory) -> Result<(), DatasetError> {
        if self.frames.len() != parent.frames.len() {
            return Err(DatasetError::invalid(&self.id, "frame count differs from parent"));
        }
        for (a, e) in self.frames.iter().zip(&parent.frames) {
            if a.action != e.action || a.proprio != e.proprio {
                return Err(DatasetError::invalid(
                    &self.id,
                    format!("frame {} actions/proprio differ from parent", a.index),
                ));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.frames
            .iter()
            .flat_map(|f| f.annotations.iter().map(|a| a.category.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: String,
    pub path: String,
    pub source: Source,
    pub parent_id: Option<String>,
    pub frame_count: usize,
}

impl TrajectoryEntry {
    pub fn for_trajectory(t: &Trajectory) -> Self {
        Self {
            id: t.id.clone(),
            path: trajectory_dir_name(&t.id),
            source: t.source,
            parent_id: t.parent_id.clone(),
            frame_count: t.frames.len(),
        }
    }
}

pub fn trajectory_dir_name(id: &str) -> String {
    format!("trajectories/{id}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: String,
    pub tasks: Vec<TaskDescriptor>,
    pub trajectories: Vec<TrajectoryEntry>,
    pub category_registry: Vec<String>,
}

impl DatasetManifest {
    pub fn new(
        tasks: Vec<TaskDescriptor>,
        trajectories: Vec<TrajectoryEntry>,
        category_registry: Vec<String>,
    ) -> Result<Self, DatasetError> {
        let m = Self {
            version: MANIFEST_VERSION.to_string(),
            tasks,
            trajectories,
            category_registry,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = BTreeSet::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.id.is_empty() {
                return Err(DatasetError::schema(format!("trajectories[{i}].id"), "empty id"));
            }
            if !ids.insert(t.id.as_str()) {
                return Err(DatasetError::schema(
                    format!("trajectories[{i}].id"),
                    format!("duplicate trajectory id `{}`", t.id),
                ));
            }
            if t.frame_count == 0 {
                return Err(DatasetError::schema(format!("trajectories[{i}].frame_count"), "must be positive"));
            }
            match (t.source, &t.parent_id) {
                (Source::Augmented, None) => {
                    return Err(DatasetError::schema(
                        format!("trajectories[{i}].parent_id"),
                        "augmented trajectory without parent",
                    ))
                }
                (Source::Expert, Some(_)) => {
                    return Err(DatasetError::schema(
                        format!("trajectories[{i}].parent_id"),
                        "expert trajectory with parent",
                    ))
                }
                _ => {}
            }
        }
        let experts: BTreeSet<&str> = self
            .trajectories
            .iter()
            .filter(|t| t.source == Source::Expert)
            .map(|t| t.id.as_str())
            .collect();
        for t in &self.trajectories {
            if let Some(p) = &t.parent_id {
                if !experts.contains(p.as_str()) {
                    return Err(DatasetError::DanglingParent(p.clone()));
                }
            }
        }
        let mut cats = BTreeSet::new();
        for (i, c) in self.category_registry.iter().enumerate() {
            if c.is_empty() || !cats.insert(c) {
                return Err(DatasetError::schema(
                    format!("category_registry[{i}]"),
                    "empty or duplicate category",
                ));
            }
        }
        Ok(())
    }

    pub fn count(&self, source: Source) -> usize {
        self.trajectories.iter().filter(|t| t.source == source).count()
    }

    pub fn entry(&self, id: &str) -> Option<&TrajectoryEntry> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn to_value(&self) -> Value {
        let trajectories: Vec<Value> = self
            .trajectories
            .iter()
            .map(|t| {
                json!({
                    "id": t.id,
                    "path": t.path,
                    "source": t.source.as_str(),
                    "parent_id": t.parent_id,
                    "frame_count": t.frame_count,
                })
            })
            .collect();
        json!({
            "version": self.version,
            "tasks": self.tasks.iter().map(|t| json!({"name": t.name, "instruction": t.instruction})).collect::<Vec<_>>(),
            "trajectories": trajectories,
            "category_registry": self.category_registry,
        })
    }

    /// Canonical text form: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_string(&self) -> String {
        canonical_json(&self.to_value())
    }

    pub fn from_value(v: &Value) -> Result<Self, DatasetError> {
        let obj = v
            .as_object()
            .ok_or_else(|| DatasetError::schema("<root>", "expected an object"))?;
        let version = req_str(obj, "version", "version")?;
        if version != MANIFEST_VERSION {
            return Err(DatasetError::schema("version", format!("unsupported version `{version}`")));
        }
        let tasks = req_array(obj, "tasks", "tasks")?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let path = format!("tasks[{i}]");
                let o = t
                    .as_object()
                    .ok_or_else(|| DatasetError::schema(&path, "expected an object"))?;
                Ok(TaskDescriptor {
                    name: req_str(o, "name", &format!("{path}.name"))?,
                    instruction: req_str(o, "instruction", &format!("{path}.instruction"))?,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let trajectories = req_array(obj, "trajectories", "trajectories")?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let path = format!("trajectories[{i}]");
                let o = t
                    .as_object()
                    .ok_or_else(|| DatasetError::schema(&path, "expected an object"))?;
                let source_s = req_str(o, "source", &format!("{path}.source"))?;
                let source = Source::parse(&source_s).ok_or_else(|| {
                    DatasetError::schema(format!("{path}.source"), format!("unknown source `{source_s}`"))
                })?;
                let parent_id = match o.get("parent_id") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => return Err(DatasetError::schema(format!("{path}.parent_id"), "expected string or null")),
                };
                let frame_count = o
                    .get("frame_count")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| {
                        DatasetError::schema(format!("{path}.frame_count"), "expected a non-negative integer")
                    })? as usize;
                Ok(TrajectoryEntry {
                    id: req_str(o, "id", &format!("{path}.id"))?,
                    path: req_str(o, "path", &format!("{path}.path"))?,
                    source,
                    parent_id,
                    frame_count,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let category_registry = req_array(obj, "category_registry", "category_registry")?
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| DatasetError::schema(format!("category_registry[{i}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let m = Self {
            version,
            tasks,
            trajectories,
            category_registry,
        };
        m.validate()?;
        Ok(m)
    }
}

fn req_str(o: &serde_json::Map<String, Value>, key: &str, path: &str) -> Result<String, DatasetError> {
    match o.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DatasetError::schema(path, "expected a string")),
        None => Err(DatasetError::schema(path, "missing field")),
    }
}

fn req_array<'a>(
    o: &'a serde_json::Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<&'a Vec<Value>, DatasetError> {
    match o.get(key) {
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(DatasetError::schema(path, "expected an array")),
        None => Err(DatasetError::schema(path, "missing field")),
    }
}

/// Sorted-key pretty JSON with a trailing newline. `serde_json::Map` is a
/// BTreeMap here, so key order is already lexicographic.
pub fn canonical_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

/// Reads and validates `<root>/manifest.json` (or the file itself when
/// `path` names a file). Trajectory payloads are not touched.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(DatasetError::MissingFile(file));
    }
    let text = fs::read_to_string(&file)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| DatasetError::schema("<root>", e.to_string()))?;
    DatasetManifest::from_value(&v)
}

pub fn save_manifest(manifest: &DatasetManifest, root: &Path) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(root)?;
    let file = root.join(MANIFEST_FILE);
    fs::write(&file, manifest.to_canonical_string())?;
    Ok(file)
}

/// Encodes a binary mask as an 8-bit grayscale PNG: 1 → 255, 0 → 0.
pub fn encode_mask(width: u32, height: u32, values: &[u8]) -> Result<Vec<u8>, DatasetError> {
    if values.len() != (width as usize) * (height as usize) {
        return Err(DatasetError::CodecError(format!(
            "expected {} values for {width}x{height}, got {}",
            (width as usize) * (height as usize),
            values.len()
        )));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(DatasetError::InvalidMaskValue { index, value });
    }
    let img = GrayImage::from_fn(width, height, |x, y| {
        Luma([values[(y as usize) * (width as usize) + x as usize] * 255])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DatasetError::CodecError(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_binary_mask(mask: &Mask) -> Result<Vec<u8>, DatasetError> {
    encode_mask(mask.width(), mask.height(), mask.as_raw())
}

/// Decodes a single-channel 8-bit image; pixels ≥ 128 become 1.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask, DatasetError> {
    let img = image::load_from_memory(bytes).map_err(|e| DatasetError::CodecError(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(DatasetError::CodecError(format!(
                "expected single-channel 8-bit image, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    Ok(Mask::from_raw(w, h, data).expect("thresholded values are binary"))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, DatasetError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DatasetError::CodecError(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, DatasetError> {
    Ok(image::load_from_memory(bytes)
        .map_err(|e| DatasetError::CodecError(e.to_string()))?
        .to_rgb8())
}

/// Fixed 17-significant-digit float formatting; round trips exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    id: String,
    instruction: String,
    source: Source,
    parent_id: Option<String>,
    annotations: Vec<AnnotationMeta>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationMeta {
    frame: usize,
    category: String,
    confidence: String,
    bbox: [String; 4],
}

/// Writes one trajectory directory under `root`. Exclusive access to the
/// directory is assumed.
pub fn write_trajectory(root: &Path, traj: &Trajectory) -> Result<TrajectoryEntry, DatasetError> {
    traj.validate()?;
    let entry = TrajectoryEntry::for_trajectory(traj);
    let dir = root.join(&entry.path);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(dir.join("frames"))?;

    let mut annotations = Vec::new();
    for f in &traj.frames {
        fs::write(dir.join("frames").join(format!("{:06}.png", f.index)), encode_png(&f.image)?)?;
        for a in &f.annotations {
            let mdir = dir.join("masks").join(&a.category);
            fs::create_dir_all(&mdir)?;
            fs::write(mdir.join(format!("{:06}.png", f.index)), encode_binary_mask(&a.mask)?)?;
            annotations.push(AnnotationMeta {
                frame: f.index,
                category: a.category.clone(),
                confidence: format_float(a.confidence),
                bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max].map(format_float),
            });
        }
    }

    let mut wtr = csv::Writer::from_path(dir.join("states.csv")).map_err(csv_err)?;
    let first = &traj.frames[0];
    let mut header = vec!["index".to_string()];
    header.extend((0..first.proprio.len()).map(|i| format!("proprio_{i}")));
    header.extend((0..first.action.len()).map(|i| format!("action_{i}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for f in &traj.frames {
        let mut rec = vec![f.index.to_string()];
        rec.extend(f.proprio.iter().map(|&v| format_float(v)));
        rec.extend(f.action.iter().map(|&v| format_float(v)));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;

    let meta = TrajectoryMeta {
        id: traj.id.clone(),
        instruction: traj.instruction.clone(),
        source: traj.source,
        parent_id: traj.parent_id.clone(),
        annotations,
    };
    let v = serde_json::to_value(&meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), canonical_json(&v))?;
    Ok(entry)
}

fn csv_err(e: csv::Error) -> DatasetError {
    DatasetError::CodecError(e.to_string())
}

/// Loads a trajectory payload referenced by a manifest entry.
pub fn load_trajectory(root: &Path, entry: &TrajectoryEntry) -> Result<Trajectory, DatasetError> {
    let dir = root.join(&entry.path);
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(DatasetError::MissingFile(meta_path));
    }
    let meta: TrajectoryMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| DatasetError::schema(format!("{}/meta.json", entry.path), e.to_string()))?;

    let states_path = dir.join("states.csv");
    if !states_path.is_file() {
        return Err(DatasetError::MissingFile(states_path));
    }
    let mut rdr = csv::Reader::from_path(&states_path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let pd = headers.iter().filter(|h| h.starts_with("proprio_")).count();
    let ad = headers.iter().filter(|h| h.starts_with("action_")).count();
    let mut frames = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let parse = |s: &str| -> Result<f64, DatasetError> {
            s.parse::<f64>()
                .map_err(|e| DatasetError::schema(format!("{}/states.csv", entry.path), e.to_string()))
        };
        let index: usize = rec[0]
            .parse()
            .map_err(|_| DatasetError::schema(format!("{}/states.csv", entry.path), "bad index"))?;
        let proprio = (1..=pd).map(|i| parse(&rec[i])).collect::<Result<Vec<_>, _>>()?;
        let action = (pd + 1..=pd + ad).map(|i| parse(&rec[i])).collect::<Result<Vec<_>, _>>()?;
        let fpath = dir.join("frames").join(format!("{index:06}.png"));
        if !fpath.is_file() {
            return Err(DatasetError::MissingFile(fpath));
        }
        let image = decode_png(&fs::read(&fpath)?)?;
        frames.push(Frame {
            index,
            image,
            proprio,
            action,
            annotations: Vec::new(),
        });
    }
    for a in meta.annotations {
        let mpath = dir.join("masks").join(&a.category).join(format!("{:06}.png", a.frame));
        if !mpath.is_file() {
            return Err(DatasetError::MissingFile(mpath));
        }
        let mask = decode_mask(&fs::read(&mpath)?)?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| DatasetError::schema(format!("{}/meta.json", entry.path), e.to_string()))
        };
        let b = a.bbox.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?;
        let frame = frames
            .iter_mut()
            .find(|f| f.index == a.frame)
            .ok_or_else(|| DatasetError::schema(format!("{}/meta.json", entry.path), "annotation for unknown frame"))?;
        frame.annotations.push(RegionAnnotation {
            category: a.category,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            mask,
            confidence: parse(&a.confidence)?,
        });
    }
    let traj = Trajectory {
        id: meta.id,
        instruction: meta.instruction,
        frames,
        source: meta.source,
        parent_id: meta.parent_id,
    };
    if traj.id != entry.id || traj.frames.len() != entry.frame_count || traj.source != entry.source {
        return Err(DatasetError::schema(entry.path.clone(), "payload disagrees with manifest entry"));
    }
    traj.validate()?;
    Ok(traj)
}

/// In-memory dataset: a manifest plus its loaded trajectories.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn from_trajectories(
        tasks: Vec<TaskDescriptor>,
        trajectories: Vec<Trajectory>,
        category_registry: Vec<String>,
    ) -> Result<Self, DatasetError> {
        for t in &trajectories {
            t.validate()?;
        }
        let manifest = DatasetManifest::new(
            tasks,
            trajectories.iter().map(TrajectoryEntry::for_trajectory).collect(),
            category_registry,
        )?;
        let ds = Self {
            manifest,
            trajectories,
        };
        ds.check_parents()?;
        Ok(ds)
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let manifest = load_manifest(root)?;
        let trajectories = manifest
            .trajectories
            .iter()
            .map(|e| load_trajectory(root, e))
            .collect::<Result<Vec<_>, _>>()?;
        let ds = Self {
            manifest,
            trajectories,
        };
        ds.check_parents()?;
        Ok(ds)
    }

    pub fn save(&self, root: &Path) -> Result<(), DatasetError> {
        let trajectories_dir = root.join("trajectories");
        if trajectories_dir.exists() {
            fs::remove_dir_all(&trajectories_dir)?;
        }
        for t in &self.trajectories {
            write_trajectory(root, t)?;
        }
        save_manifest(&self.manifest, root)?;
        Ok(())
    }

    /// Re-checks the action-invariance link between augmented copies and
    /// their expert parents.
    pub fn check_parents(&self) -> Result<(), DatasetError> {
        let by_id: BTreeMap<&str, &Trajectory> =
            self.trajectories.iter().map(|t| (t.id.as_str(), t)).collect();
        for t in &self.trajectories {
            if let Some(p) = &t.parent_id {
                let parent = by_id
                    .get(p.as_str())
                    .filter(|p| p.source == Source::Expert)
                    .ok_or_else(|| DatasetError::DanglingParent(p.clone()))?;
                t.check_derived_from(parent)?;
            }
        }
        Ok(())
    }

    pub fn experts(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.source == Source::Expert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, source: Source, parent: Option<&str>) -> Trajectory {
        let frames = (0..3)
            .map(|i| Frame {
                index: i,
                image: RgbImage::from_pixel(4, 3, image::Rgb([i as u8 * 10, 5, 7])),
                proprio: vec![0.1 * i as f64, 1.0 / 3.0],
                action: vec![-0.25, i as f64],
                annotations: vec![RegionAnnotation::from_mask(
                    "cube",
                    Mask::from_bbox(4, 3, &BBox::new(1.0, 0.0, 3.0, 2.0)),
                    0.9,
                )
                .unwrap()],
            })
            .collect();
        Trajectory {
            id: id.into(),
            instruction: "push the cube".into(),
            frames,
            source,
            parent_id: parent.map(String::from),
        }
    }

    fn fixture_manifest() -> DatasetManifest {
        let mut entries = vec![];
        for e in 0..2 {
            entries.push(TrajectoryEntry::for_trajectory(&traj(&format!("e{e}"), Source::Expert, None)));
            for k in 0..5 {
                entries.push(TrajectoryEntry::for_trajectory(&traj(
                    &format!("e{e}-aug{k}"),
                    Source::Augmented,
                    Some(&format!("e{e}")),
                )));
            }
        }
        DatasetManifest::new(
            vec![TaskDescriptor {
                name: "push".into(),
                instruction: "push the cube".into(),
            }],
            entries,
            vec!["cube".into()],
        )
        .unwrap()
    }

    #[test]
    fn manifest_partition_counts() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&fixture_manifest(), dir.path()).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.count(Source::Expert), 2);
        assert_eq!(m.count(Source::Augmented), 10);
    }

    #[test]
    fn dangling_parent_rejected() {
        let mut v = fixture_manifest().to_value();
        v["trajectories"][1]["parent_id"] = json!("x");
        assert!(matches!(DatasetManifest::from_value(&v), Err(DatasetError::DanglingParent(p)) if p == "x"));
    }

    #[test]
    fn schema_violation_names_field() {
        let mut v = fixture_manifest().to_value();
        v["trajectories"][2]["frame_count"] = json!("three");
        match DatasetManifest::from_value(&v) {
            Err(DatasetError::SchemaViolation { field, .. }) => assert_eq!(field, "trajectories[2].frame_count"),
            other => panic!("unexpected {other:?}"),
        }
        let mut v = fixture_manifest().to_value();
        v.as_object_mut().unwrap().remove("version");
        assert!(matches!(
            DatasetManifest::from_value(&v),
            Err(DatasetError::SchemaViolation { field, .. }) if field == "version"
        ));
    }

    #[test]
    fn missing_manifest_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(DatasetError::MissingFile(_))));
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_manifest(&fixture_manifest(), dir.path()).unwrap();
        let first = fs::read(&p).unwrap();
        // oracle: independently re-serialize the parsed document with sorted keys
        let parsed: Value = serde_json::from_slice(&first).unwrap();
        assert_eq!(canonical_json(&parsed).into_bytes(), first);
        let m = load_manifest(dir.path()).unwrap();
        save_manifest(&m, dir.path()).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn mask_codec_examples() {
        let ones = GrayImage::from_pixel(3, 2, Luma([255]));
        let mut buf = Cursor::new(Vec::new());
        ones.write_to(&mut buf, ImageFormat::Png).unwrap();
        assert!(decode_mask(buf.get_ref()).unwrap().as_raw().iter().all(|&v| v == 1));

        let zeros = GrayImage::from_pixel(3, 2, Luma([0]));
        let mut buf = Cursor::new(Vec::new());
        zeros.write_to(&mut buf, ImageFormat::Png).unwrap();
        assert!(decode_mask(buf.get_ref()).unwrap().is_empty());

        let checker = GrayImage::from_fn(4, 4, |x, y| Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
        let mut buf = Cursor::new(Vec::new());
        checker.write_to(&mut buf, ImageFormat::Png).unwrap();
        let m = decode_mask(buf.get_ref()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(x, y), (x + y) % 2 == 0);
            }
        }
    }

    #[test]
    fn decode_thresholds_at_128() {
        let g = GrayImage::from_raw(4, 1, vec![127, 128, 3, 250]).unwrap();
        let mut buf = Cursor::new(Vec::new());
        g.write_to(&mut buf, ImageFormat::Png).unwrap();
        assert_eq!(decode_mask(buf.get_ref()).unwrap().as_raw(), &[0, 1, 0, 1]);
    }

    #[test]
    fn encode_rejects_non_binary_and_decode_rejects_garbage() {
        assert!(matches!(
            encode_mask(2, 1, &[1, 2]),
            Err(DatasetError::InvalidMaskValue { index: 1, value: 2 })
        ));
        assert!(matches!(decode_mask(b"not an image"), Err(DatasetError::CodecError(_))));
        let rgb = encode_png(&RgbImage::new(2, 2)).unwrap();
        assert!(matches!(decode_mask(&rgb), Err(DatasetError::CodecError(_))));
    }

    #[test]
    fn one_pixel_round_trip() {
        let bytes = encode_mask(1, 1, &[1]).unwrap();
        assert_eq!(decode_mask(&bytes).unwrap().as_raw(), &[1]);
    }

    #[test]
    fn exhaustive_2x2_round_trip() {
        for bits in 0u8..16 {
            let vals: Vec<u8> = (0..4).map(|i| (bits >> i) & 1).collect();
            let m = decode_mask(&encode_mask(2, 2, &vals).unwrap()).unwrap();
            assert_eq!(m.as_raw(), vals.as_slice());
        }
    }

    #[test]
    fn trajectory_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let e = traj("e0", Source::Expert, None);
        let a = traj("e0-aug0", Source::Augmented, Some("e0"));
        let ds = Dataset::from_trajectories(vec![], vec![e.clone(), a], vec!["cube".into()]).unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.trajectories[0], e);
        assert_eq!(loaded.manifest, ds.manifest);
        assert!(dir.path().join("trajectories/e0/masks/cube/000002.png").is_file());
    }

    #[test]
    fn augmented_must_preserve_actions() {
        let e = traj("e0", Source::Expert, None);
        let mut a = traj("e0-aug0", Source::Augmented, Some("e0"));
        a.frames[1].action[0] += 1e-12;
        let err = Dataset::from_trajectories(vec![], vec![e, a], vec![]).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidTrajectory { .. }));
    }

    #[test]
    fn trajectory_invariants() {
        let mut t = traj("t", Source::Expert, None);
        t.frames[2].index = 1;
        assert!(t.validate().is_err());
        let mut t = traj("t", Source::Expert, None);
        t.frames[1].image = RgbImage::new(5, 5);
        assert!(t.validate().is_err());
        let mut t = traj("t", Source::Expert, None);
        t.frames.clear();
        assert!(t.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_mask_round_trip(w in 1u32..64, h in 1u32..64, seed in proptest::prelude::any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..2u8)).collect();
            let m = decode_mask(&encode_mask(w, h, &vals).unwrap()).unwrap();
            proptest::prop_assert_eq!(m.as_raw(), vals.as_slice());
        }

        #[test]
        fn float_format_round_trips(v in proptest::num::f64::NORMAL) {
            proptest::prop_assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }
}
