//! Detection evaluation: box IoU, greedy matching, all-point interpolated AP,
//! mAP@0.5, prompt-ensemble pooling with class-wise NMS, and re-labelling
//! detections through one-shot reference matching.
//!
//! Record format for ground truth and detections, one per line, no header:
//!
//! ```text
//! image_id,category,x_min,y_min,x_max,y_max[,score]
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BBox, ImagingError};
use crate::plot;
use crate::region_match::{
    embed_box, match_candidates, DetectorBackend, EmbeddedProposal, EmbedderBackend, MatchError, MatchParams, Proposal,
    ReferenceSet,
};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectEvalError {
    #[error(transparent)]
    InvalidBox(#[from] ImagingError),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("ground truth contains no boxes")]
    EmptyGroundTruth,
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("category `{0}` has no prompts")]
    NoPrompts(String),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no image for `{0}`")]
    MissingImage(String),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    boxes: Vec<GroundTruthBox>,
    registry: Vec<String>,
}

impl GroundTruthSet {
    pub fn new(boxes: Vec<GroundTruthBox>, registry: Vec<String>) -> Result<Self, DetectEvalError> {
        for b in &boxes {
            b.bbox.validate()?;
            if !registry.contains(&b.category) {
                return Err(DetectEvalError::UnknownCategory(b.category.clone()));
            }
        }
        Ok(Self { boxes, registry })
    }

    pub fn boxes(&self) -> &[GroundTruthBox] {
        &self.boxes
    }

    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn count(&self, category: &str) -> usize {
        self.boxes.iter().filter(|b| b.category == category).count()
    }

    pub fn image_ids(&self) -> BTreeSet<&str> {
        self.boxes.iter().map(|b| b.image_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Result<Self, DetectEvalError> {
        for d in &detections {
            d.bbox.validate()?;
            if !(0.0..=1.0).contains(&d.score) {
                return Err(DetectEvalError::BadScore(d.score));
            }
        }
        Ok(Self { detections })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn into_inner(self) -> Vec<Detection> {
        self.detections
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64, DetectEvalError> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// One point of the precision-recall staircase, after the detection at
/// `rank` (0-based, score-descending order).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub score: f64,
    pub true_positive: bool,
    pub precision: f64,
    pub recall: f64,
}

/// Score-descending greedy matching of one category's detections.
///
/// Detections are visited by descending score, ties broken by higher best
/// IoU against any ground truth of the same image, then input order. Each
/// takes the unmatched ground-truth box of highest IoU (first in input
/// order on ties) if that IoU reaches `iou_thresh`.
pub fn match_category(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    iou_thresh: f64,
) -> Result<Vec<(usize, bool)>, DetectEvalError> {
    let best_iou = |d: &Detection| -> Result<f64, DetectEvalError> {
        let mut best = 0.0f64;
        for g in gts.iter().filter(|g| g.image_id == d.image_id) {
            best = best.max(box_iou(&d.bbox, &g.bbox)?);
        }
        Ok(best)
    };
    let mut order: Vec<(usize, f64)> = dets
        .iter()
        .enumerate()
        .map(|(i, d)| best_iou(d).map(|b| (i, b)))
        .collect::<Result<_, _>>()?;
    order.sort_by(|a, b| {
        dets[b.0]
            .score
            .partial_cmp(&dets[a.0].score)
            .unwrap_or(Ordering::Equal)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then(a.0.cmp(&b.0))
    });
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for (i, _) in order {
        let d = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image_id != d.image_id {
                continue;
            }
            let iou = box_iou(&d.bbox, &g.bbox)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            assert!(!taken[j], "ground truth matched twice");
            taken[j] = true;
        }
        out.push((i, best.is_some()));
    }
    Ok(out)
}

fn check_iou(iou_thresh: f64) -> Result<(), DetectEvalError> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(DetectEvalError::BadThreshold(iou_thresh));
    }
    Ok(())
}

fn split_category<'a>(
    dets: &'a DetectionSet,
    gts: &'a GroundTruthSet,
    category: &str,
) -> Result<(Vec<&'a Detection>, Vec<&'a GroundTruthBox>), DetectEvalError> {
    if !gts.registry.iter().any(|c| c == category) {
        return Err(DetectEvalError::UnknownCategory(category.to_string()));
    }
    Ok((
        dets.detections.iter().filter(|d| d.category == category).collect(),
        gts.boxes.iter().filter(|g| g.category == category).collect(),
    ))
}

pub fn pr_curve(
    dets: &DetectionSet,
    gts: &GroundTruthSet,
    category: &str,
    iou_thresh: f64,
) -> Result<Vec<PrPoint>, DetectEvalError> {
    check_iou(iou_thresh)?;
    let (d, g) = split_category(dets, gts, category)?;
    let matched = match_category(&d, &g, iou_thresh)?;
    let n_gt = g.len();
    let mut tp = 0usize;
    Ok(matched
        .into_iter()
        .enumerate()
        .map(|(rank, (i, hit))| {
            tp += usize::from(hit);
            PrPoint {
                rank,
                score: d[i].score,
                true_positive: hit,
                precision: tp as f64 / (rank + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect())
}

/// Area under the all-point interpolated precision-recall curve.
pub fn ap_from_curve(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

pub fn average_precision(
    dets: &DetectionSet,
    gts: &GroundTruthSet,
    category: &str,
    iou_thresh: f64,
) -> Result<f64, DetectEvalError> {
    Ok(ap_from_curve(&pr_curve(dets, gts, category, iou_thresh)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub ap: f64,
    pub ground_truth: usize,
    pub detections: usize,
    /// Counts at the score cutoff with the best F1.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub score_cutoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub iou_threshold: f64,
    pub per_category: Vec<CategoryReport>,
    /// Unweighted mean over categories with at least one ground-truth box.
    pub map: f64,
}

fn best_operating_point(curve: &[PrPoint], n_gt: usize) -> (usize, usize, usize, Option<f64>) {
    let mut best = (0, 0, n_gt, None);
    let mut best_f1 = 0.0;
    let mut tp = 0;
    for (k, p) in curve.iter().enumerate() {
        tp += usize::from(p.true_positive);
        let fp = k + 1 - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_gt - tp)) as f64;
        if f1 > best_f1 {
            best_f1 = f1;
            best = (tp, fp, n_gt - tp, Some(p.score));
        }
    }
    best
}

pub fn evaluate_detections(
    dets: &DetectionSet,
    gts: &GroundTruthSet,
    iou_thresh: f64,
    method: &str,
) -> Result<EvalReport, DetectEvalError> {
    check_iou(iou_thresh)?;
    if gts.boxes.is_empty() {
        return Err(DetectEvalError::EmptyGroundTruth);
    }
    if let Some(d) = dets.detections.iter().find(|d| !gts.registry.contains(&d.category)) {
        return Err(DetectEvalError::UnknownCategory(d.category.clone()));
    }
    let mut per_category = Vec::new();
    for c in &gts.registry {
        let n_gt = gts.count(c);
        if n_gt == 0 {
            continue;
        }
        let curve = pr_curve(dets, gts, c, iou_thresh)?;
        let (tp, fp, fn_, score_cutoff) = best_operating_point(&curve, n_gt);
        per_category.push(CategoryReport {
            category: c.clone(),
            ap: ap_from_curve(&curve),
            ground_truth: n_gt,
            detections: curve.len(),
            tp,
            fp,
            fn_,
            score_cutoff,
        });
    }
    let map = per_category.iter().map(|r| r.ap).sum::<f64>() / per_category.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        iou_threshold: iou_thresh,
        per_category,
        map,
    })
}

/// mAP at IoU 0.5.
pub fn map50(dets: &DetectionSet, gts: &GroundTruthSet, method: &str) -> Result<EvalReport, DetectEvalError> {
    evaluate_detections(dets, gts, DEFAULT_IOU, method)
}

impl EvalReport {
    /// Tab-separated table, one row per category plus a final mAP row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("category\tap50\tgt\tdetections\ttp\tfp\tfn\n");
        for r in &self.per_category {
            s.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
                r.category, r.ap, r.ground_truth, r.detections, r.tp, r.fp, r.fn_
            ));
        }
        s.push_str(&format!("mAP\t{:.6}\t\t\t\t\t\n", self.map));
        s
    }

    pub fn bar_chart_svg(&self) -> String {
        let bars: Vec<(String, f64)> = self.per_category.iter().map(|r| (r.category.clone(), r.ap)).collect();
        plot::bar_chart(
            &format!("AP@{} per category ({}, mAP {:.3})", self.iou_threshold, self.method, self.map),
            "AP",
            &bars,
        )
    }
}

/// Class-wise greedy NMS: within each (image, category), keep the highest
/// score and drop every box whose IoU with a kept box exceeds `iou_thresh`.
/// Output is ordered by image, category, then descending score.
pub fn nms(detections: Vec<Detection>, iou_thresh: f64) -> Result<Vec<Detection>, DetectEvalError> {
    let mut groups: BTreeMap<(String, String), Vec<(usize, Detection)>> = BTreeMap::new();
    for (i, d) in detections.into_iter().enumerate() {
        groups.entry((d.image_id.clone(), d.category.clone())).or_default().push((i, d));
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut kept: Vec<Detection> = Vec::new();
        for (_, d) in group {
            let mut suppressed = false;
            for k in &kept {
                if box_iou(&k.bbox, &d.bbox)? > iou_thresh {
                    suppressed = true;
                    break;
                }
            }
            if !suppressed {
                kept.push(d);
            }
        }
        out.extend(kept);
    }
    Ok(out)
}

/// Queries the detector once per prompt, pools the proposals under the
/// category that owns the prompt, then applies class-wise NMS.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_prompts(
    detector: &dyn DetectorBackend,
    image_id: &str,
    image: &RgbImage,
    prompts: &BTreeMap<String, Vec<String>>,
    box_threshold: f64,
    text_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>, DetectEvalError> {
    let mut pooled = Vec::new();
    for (category, list) in prompts {
        if list.is_empty() {
            return Err(DetectEvalError::NoPrompts(category.clone()));
        }
        for prompt in list {
            let proposals = detector
                .detect(image, std::slice::from_ref(prompt), box_threshold, text_threshold)
                .map_err(|e| DetectEvalError::BackendFailure(e.to_string()))?;
            pooled.extend(proposals.into_iter().map(|p| Detection {
                image_id: image_id.to_string(),
                category: category.clone(),
                bbox: p.bbox,
                score: p.score.clamp(0.0, 1.0),
            }));
        }
    }
    nms(pooled, nms_iou)
}

/// Five phrasing variants per category name.
pub fn default_prompts(category: &str) -> Vec<String> {
    vec![
        category.to_string(),
        format!("a {category}"),
        format!("a photo of a {category}"),
        format!("the {category} on the table"),
        format!("a {category} seen from above"),
    ]
}

/// Replaces each detection's category with the reference match of its crop;
/// rejected detections are dropped.
pub fn reclassify_with_matching(
    dets: &DetectionSet,
    refs: &ReferenceSet,
    embedder: &dyn EmbedderBackend,
    images: &BTreeMap<String, RgbImage>,
    params: MatchParams,
) -> Result<DetectionSet, DetectEvalError> {
    let mut embedded = Vec::with_capacity(dets.len());
    let mut keep = Vec::with_capacity(dets.len());
    for d in &dets.detections {
        let image = images
            .get(&d.image_id)
            .ok_or_else(|| DetectEvalError::MissingImage(d.image_id.clone()))?;
        let Some(bbox) = d.bbox.clip(image.width(), image.height()) else { continue };
        let Ok(embedding) = embed_box(image, &bbox, embedder) else { continue };
        embedded.push(EmbeddedProposal {
            proposal: Proposal {
                bbox: d.bbox,
                score: d.score,
                detector_label: Some(d.category.clone()),
            },
            embedding,
        });
        keep.push(d);
    }
    let assignments = match_candidates(&embedded, refs, params)?;
    let out = keep
        .into_iter()
        .zip(assignments)
        .filter_map(|(d, a)| {
            a.category.map(|category| Detection {
                category,
                ..d.clone()
            })
        })
        .collect();
    DetectionSet::new(out)
}

fn parse_f64(field: Option<&str>, line: usize, name: &str) -> Result<f64, DetectEvalError> {
    field
        .map(str::trim)
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| DetectEvalError::Parse {
            line,
            reason: format!("missing or invalid {name}"),
        })
}

fn records(text: &str) -> Result<Vec<(usize, csv::StringRecord)>, DetectEvalError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| DetectEvalError::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_box(rec: &csv::StringRecord, line: usize) -> Result<(String, String, BBox), DetectEvalError> {
    let image_id = rec.get(0).map(str::trim).unwrap_or_default().to_string();
    let category = rec.get(1).map(str::trim).unwrap_or_default().to_string();
    if image_id.is_empty() || category.is_empty() {
        return Err(DetectEvalError::Parse {
            line,
            reason: "image_id and category are required".into(),
        });
    }
    let bbox = BBox::checked(
        parse_f64(rec.get(2), line, "x_min")?,
        parse_f64(rec.get(3), line, "y_min")?,
        parse_f64(rec.get(4), line, "x_max")?,
        parse_f64(rec.get(5), line, "y_max")?,
    )
    .map_err(|e| DetectEvalError::Parse {
        line,
        reason: e.to_string(),
    })?;
    Ok((image_id, category, bbox))
}

/// Parses ground-truth records. Without an explicit registry, the sorted
/// set of categories seen becomes the registry.
pub fn parse_ground_truth(text: &str, registry: Option<Vec<String>>) -> Result<GroundTruthSet, DetectEvalError> {
    let mut boxes = Vec::new();
    for (line, rec) in records(text)? {
        if rec.len() != 6 {
            return Err(DetectEvalError::Parse {
                line,
                reason: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        let (image_id, category, bbox) = parse_box(&rec, line)?;
        boxes.push(GroundTruthBox {
            image_id,
            category,
            bbox,
        });
    }
    let registry = registry.unwrap_or_else(|| {
        let set: BTreeSet<String> = boxes.iter().map(|b| b.category.clone()).collect();
        set.into_iter().collect()
    });
    GroundTruthSet::new(boxes, registry)
}

pub fn parse_detections(text: &str) -> Result<DetectionSet, DetectEvalError> {
    let mut dets = Vec::new();
    for (line, rec) in records(text)? {
        if rec.len() != 7 {
            return Err(DetectEvalError::Parse {
                line,
                reason: format!("expected 7 fields, found {}", rec.len()),
            });
        }
        let (image_id, category, bbox) = parse_box(&rec, line)?;
        let score = parse_f64(rec.get(6), line, "score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectEvalError::Parse {
                line,
                reason: format!("score {score} outside [0, 1]"),
            });
        }
        dets.push(Detection {
            image_id,
            category,
            bbox,
            score,
        });
    }
    DetectionSet::new(dets)
}

fn write_records(rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 fields")
}

fn box_fields(b: &BBox) -> [String; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v.to_string())
}

pub fn ground_truth_to_string(gts: &GroundTruthSet) -> String {
    write_records(gts.boxes.iter().map(|b| {
        let mut r = vec![b.image_id.clone(), b.category.clone()];
        r.extend(box_fields(&b.bbox));
        r
    }))
}

pub fn detections_to_string(dets: &[Detection]) -> String {
    write_records(dets.iter().map(|d| {
        let mut r = vec![d.image_id.clone(), d.category.clone()];
        r.extend(box_fields(&d.bbox));
        r.push(d.score.to_string());
        r
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: &str, cat: &str, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_id: image.into(),
            category: cat.into(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn det(image: &str, cat: &str, b: [f64; 4], score: f64) -> Detection {
        Detection {
            image_id: image.into(),
            category: cat.into(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            score,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert_eq!(box_iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap(), 1.0 / 7.0);
        assert!(box_iou(&BBox::new(2.0, 0.0, 1.0, 1.0), &a).is_err());
    }

    #[test]
    fn perfect_and_empty() {
        let g = GroundTruthSet::new(
            vec![gt("a", "cup", [0.0, 0.0, 4.0, 4.0]), gt("b", "bowl", [1.0, 1.0, 5.0, 5.0])],
            vec!["bowl".into(), "cup".into()],
        )
        .unwrap();
        let perfect = DetectionSet::new(
            g.boxes()
                .iter()
                .map(|b| det(&b.image_id, &b.category, [b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max], 1.0))
                .collect(),
        )
        .unwrap();
        assert_eq!(map50(&perfect, &g, "t").unwrap().map, 1.0);
        assert_eq!(average_precision(&DetectionSet::default(), &g, "cup", 0.5).unwrap(), 0.0);
        let half = DetectionSet::new(vec![perfect.detections()[0].clone()]).unwrap();
        assert_eq!(map50(&half, &g, "t").unwrap().map, 0.5);
        assert!(matches!(
            average_precision(&perfect, &g, "plate", 0.5),
            Err(DetectEvalError::UnknownCategory(_))
        ));
        assert!(matches!(
            map50(&perfect, &GroundTruthSet::new(vec![], vec!["cup".into()]).unwrap(), "t"),
            Err(DetectEvalError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn interleaved_staircase() {
        let g = GroundTruthSet::new(
            vec![gt("a", "cup", [0.0, 0.0, 10.0, 10.0]), gt("a", "cup", [20.0, 20.0, 30.0, 30.0])],
            vec!["cup".into()],
        )
        .unwrap();
        let d = DetectionSet::new(vec![
            det("a", "cup", [0.0, 0.0, 10.0, 10.0], 0.9),
            det("a", "cup", [50.0, 50.0, 60.0, 60.0], 0.8),
            det("a", "cup", [20.0, 20.0, 30.0, 30.0], 0.7),
        ])
        .unwrap();
        // points (r, p): (1/2, 1), (1/2, 1/2), (1, 2/3)
        assert_eq!(average_precision(&d, &g, "cup", 0.5).unwrap(), 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
        let r = map50(&d, &g, "t").unwrap();
        assert_eq!((r.per_category[0].tp, r.per_category[0].fp, r.per_category[0].fn_), (2, 1, 0));
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let g = GroundTruthSet::new(vec![gt("a", "cup", [0.0, 0.0, 10.0, 10.0])], vec!["cup".into()]).unwrap();
        let d = [det("a", "cup", [0.0, 0.0, 10.0, 10.0], 0.9), det("a", "cup", [0.0, 0.0, 10.0, 9.0], 0.9)];
        let refs: Vec<&Detection> = d.iter().collect();
        let gts: Vec<&GroundTruthBox> = g.boxes().iter().collect();
        let m = match_category(&refs, &gts, 0.5).unwrap();
        // equal scores: the better-overlapping detection goes first
        assert_eq!(m, vec![(0, true), (1, false)]);
    }

    #[test]
    fn nms_examples() {
        let a = det("i", "cup", [0.0, 0.0, 10.0, 10.0], 0.9);
        let dup = det("i", "cup", [0.0, 0.0, 10.0, 10.0], 0.6);
        let far = det("i", "cup", [20.0, 0.0, 30.0, 10.0], 0.5);
        let other = det("i", "bowl", [0.0, 0.0, 10.0, 10.0], 0.4);
        let out = nms(vec![dup.clone(), a.clone(), far.clone(), other.clone()], 0.5).unwrap();
        assert_eq!(out, vec![other, a, far]);
        assert_eq!(nms(out.clone(), 0.5).unwrap(), out);
    }

    #[test]
    fn lowest_score_false_positive_never_raises_ap() {
        let g = GroundTruthSet::new(
            vec![gt("a", "cup", [0.0, 0.0, 10.0, 10.0]), gt("a", "cup", [20.0, 20.0, 30.0, 30.0])],
            vec!["cup".into()],
        )
        .unwrap();
        let mut d = vec![det("a", "cup", [0.0, 0.0, 10.0, 10.0], 0.9)];
        let before = average_precision(&DetectionSet::new(d.clone()).unwrap(), &g, "cup", 0.5).unwrap();
        d.push(det("a", "cup", [40.0, 40.0, 45.0, 45.0], 0.1));
        let after = average_precision(&DetectionSet::new(d).unwrap(), &g, "cup", 0.5).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn record_roundtrip_and_errors() {
        let text = "img1,cup,0,0,10,10\nimg2,bowl,1.5,2,3,4\n";
        let g = parse_ground_truth(text, None).unwrap();
        assert_eq!(g.registry(), &["bowl".to_string(), "cup".to_string()]);
        assert_eq!(parse_ground_truth(&ground_truth_to_string(&g), None).unwrap(), g);
        let dets = "img1,cup,0,0,10,10,0.75\n";
        let d = parse_detections(dets).unwrap();
        assert_eq!(detections_to_string(d.detections()), dets);
        assert!(matches!(parse_detections("img1,cup,0,0,10,10\n"), Err(DetectEvalError::Parse { line: 1, .. })));
        assert!(matches!(
            parse_detections("a,cup,0,0,1,1,0.5\nb,cup,0,0,1,1,1.5\n"),
            Err(DetectEvalError::Parse { line: 2, .. })
        ));
        assert!(parse_ground_truth("a,cup,5,0,1,1\n", None).is_err());
        assert!(parse_ground_truth("a,cup,0,0,1,1\n", Some(vec!["bowl".into()])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ap_is_bounded(seed in proptest::prelude::any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                [x, y, x + rng.random_range(1.0..15.0), y + rng.random_range(1.0..15.0)]
            };
            let gts: Vec<_> = (0..rng.random_range(1..6)).map(|_| gt("a", "cup", rand_box(&mut rng))).collect();
            let dets: Vec<_> = (0..rng.random_range(0..10)).map(|_| {
                let b = rand_box(&mut rng);
                det("a", "cup", b, rng.random_range(0.0..=1.0))
            }).collect();
            let g = GroundTruthSet::new(gts, vec!["cup".into()]).unwrap();
            let d = DetectionSet::new(dets.clone()).unwrap();
            let ap = average_precision(&d, &g, "cup", 0.5).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&ap));
            let once = nms(dets, 0.5).unwrap();
            proptest::prop_assert_eq!(nms(once.clone(), 0.5).unwrap(), once);
        }
    }
}
