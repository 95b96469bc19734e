//! Region-contrastive learning.
//!
//! Object images (`mask ⊙ image`) are encoded to `z_obj`, gated by a
//! sigmoid attention map computed from the full-image features `z`:
//!
//! ```text
//! a_att = sigmoid(A(z) ⊙ z)        A = per-position channel mixing (W z + b)
//! z_att = a_att ⊙ z_obj
//! ```
//!
//! Pooled, unit-normalized `z_att` vectors then enter a supervised
//! contrastive loss whose positives are all other samples of the same
//! category and whose denominator runs over every other sample in the batch.
//! Forward and backward passes for every piece live here so the training
//! loop can chain them.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{check_dims, ImagingError, Mask};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_WEIGHT: f64 = 0.5;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RclError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pooled feature is all zero")]
    ZeroFeature,
    #[error("contrastive batch needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("embedding {index} has norm {norm}, expected 1")]
    NonUnitEmbedding { index: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    FullImage,
    ObjectImage,
    Attended,
}

/// C×H'×W' feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>, source: FeatureSource) -> Result<Self, RclError> {
        if values.len() != channels * height * width {
            return Err(RclError::ShapeMismatch(format!(
                "{} values for {channels}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
            source,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, source: FeatureSource) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
            source,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Channel-mixing map applied at every spatial position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub channels: usize,
    /// Row-major C×C.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            weight: vec![0.0; channels * channels],
            bias: vec![0.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<(), RclError> {
        if self.channels != channels || self.weight.len() != channels * channels || self.bias.len() != channels {
            return Err(RclError::ShapeMismatch(format!(
                "attention params for {} channels, features have {channels}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    SpatialMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RclConfig {
    pub enabled: bool,
    pub temperature: f64,
    /// Weight of the contrastive term in the combined loss.
    pub weight: f64,
    pub pooling: Pooling,
}

impl Default for RclConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: DEFAULT_TEMPERATURE,
            weight: DEFAULT_WEIGHT,
            pooling: Pooling::SpatialMean,
        }
    }
}

impl RclConfig {
    pub fn validate(&self) -> Result<(), RclError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(RclError::BadTemperature(self.temperature));
        }
        if !(self.weight >= 0.0) {
            return Err(RclError::ShapeMismatch(format!("negative rcl weight {}", self.weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, temperature: f64) -> Result<Self, RclError> {
        if embeddings.len() != labels.len() {
            return Err(RclError::ShapeMismatch(format!(
                "{} embeddings, {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        if embeddings.len() < 2 {
            return Err(RclError::DegenerateBatch(embeddings.len()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(RclError::BadTemperature(temperature));
        }
        let dim = embeddings[0].len();
        for (index, e) in embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(RclError::ShapeMismatch(format!("embedding {index} has dim {}", e.len())));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(RclError::NonUnitEmbedding { index, norm });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Samples without any positive; they contribute 0.
    pub singleton: Vec<bool>,
}

impl LossOutput {
    pub fn singleton_count(&self) -> usize {
        self.singleton.iter().filter(|&&s| s).count()
    }
}

/// `I_obj = mask ⊙ I`.
pub fn extract_object_image(image: &RgbImage, mask: &Mask) -> Result<RgbImage, RclError> {
    check_dims(image.dimensions(), mask.dims())?;
    let mut out = image.clone();
    for (p, &m) in out.pixels_mut().zip(mask.as_raw()) {
        if m == 0 {
            p.0 = [0, 0, 0];
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `A(z)` at every position: `pre[c,p] = Σ_k W[c,k] z[k,p] + b[c]`.
fn attention_logits(z: &FeatureMap, params: &AttentionParams) -> Vec<f64> {
    let (c_n, hw) = (z.channels, z.spatial());
    let mut pre = vec![0.0; c_n * hw];
    for c in 0..c_n {
        let row = &mut pre[c * hw..(c + 1) * hw];
        row.iter_mut().for_each(|v| *v = params.bias[c]);
        for k in 0..c_n {
            let w = params.weight[c * c_n + k];
            if w == 0.0 {
                continue;
            }
            let zk = &z.values[k * hw..(k + 1) * hw];
            for (r, &zv) in row.iter_mut().zip(zk) {
                *r += w * zv;
            }
        }
    }
    pre
}

pub fn attentive_features(z: &FeatureMap, z_obj: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap, RclError> {
    if z.shape() != z_obj.shape() {
        return Err(RclError::ShapeMismatch(format!("z {:?} vs z_obj {:?}", z.shape(), z_obj.shape())));
    }
    params.check(z.channels)?;
    let pre = attention_logits(z, params);
    let values = pre
        .iter()
        .zip(&z.values)
        .zip(&z_obj.values)
        .map(|((a, zv), ov)| sigmoid(a * zv) * ov)
        .collect();
    Ok(FeatureMap {
        channels: z.channels,
        height: z.height,
        width: z.width,
        values,
        source: FeatureSource::Attended,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub z: Vec<f64>,
    pub z_obj: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of [`attentive_features`] given `∂L/∂z_att`.
pub fn attentive_features_backward(
    z: &FeatureMap,
    z_obj: &FeatureMap,
    params: &AttentionParams,
    grad_out: &[f64],
) -> Result<AttentionGrads, RclError> {
    if z.shape() != z_obj.shape() || grad_out.len() != z.values.len() {
        return Err(RclError::ShapeMismatch("attention backward inputs disagree".into()));
    }
    params.check(z.channels)?;
    let (c_n, hw) = (z.channels, z.spatial());
    let pre = attention_logits(z, params);
    let mut g_z = vec![0.0; c_n * hw];
    let mut g_obj = vec![0.0; c_n * hw];
    let mut g_pre = vec![0.0; c_n * hw];
    for i in 0..c_n * hw {
        let a = sigmoid(pre[i] * z.values[i]);
        g_obj[i] = grad_out[i] * a;
        let g_s = grad_out[i] * z_obj.values[i] * a * (1.0 - a);
        g_pre[i] = g_s * z.values[i];
        g_z[i] += g_s * pre[i];
    }
    let mut g_w = vec![0.0; c_n * c_n];
    let mut g_b = vec![0.0; c_n];
    for c in 0..c_n {
        let gp = &g_pre[c * hw..(c + 1) * hw];
        g_b[c] = gp.iter().sum();
        for k in 0..c_n {
            let zk = &z.values[k * hw..(k + 1) * hw];
            g_w[c * c_n + k] = gp.iter().zip(zk).map(|(a, b)| a * b).sum();
            let w = params.weight[c * c_n + k];
            if w != 0.0 {
                for (gz, g) in g_z[k * hw..(k + 1) * hw].iter_mut().zip(gp) {
                    *gz += w * g;
                }
            }
        }
    }
    Ok(AttentionGrads {
        z: g_z,
        z_obj: g_obj,
        weight: g_w,
        bias: g_b,
    })
}

fn spatial_mean(z: &FeatureMap) -> Vec<f64> {
    let hw = z.spatial() as f64;
    (0..z.channels)
        .map(|c| z.values[c * z.spatial()..(c + 1) * z.spatial()].iter().sum::<f64>() / hw)
        .collect()
}

/// Spatial mean per channel, then L2 normalization.
pub fn pool_embedding(z_att: &FeatureMap) -> Result<Vec<f64>, RclError> {
    let m = spatial_mean(z_att);
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(RclError::ZeroFeature);
    }
    Ok(m.into_iter().map(|v| v / n).collect())
}

/// Backward pass of [`pool_embedding`]: maps `∂L/∂e` to `∂L/∂z_att`.
pub fn pool_embedding_backward(z_att: &FeatureMap, grad_embedding: &[f64]) -> Result<Vec<f64>, RclError> {
    let m = spatial_mean(z_att);
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(RclError::ZeroFeature);
    }
    let e: Vec<f64> = m.iter().map(|v| v / n).collect();
    let dot: f64 = e.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
    let hw = z_att.spatial();
    let mut out = vec![0.0; z_att.values.len()];
    for c in 0..z_att.channels {
        let g_m = (grad_embedding[c] - e[c] * dot) / n / hw as f64;
        out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = g_m);
    }
    Ok(out)
}

/// Scaled similarity matrix `s[i][j] = z_i · z_j / d`.
fn logits(batch: &ContrastiveBatch) -> Vec<Vec<f64>> {
    let e = &batch.embeddings;
    let d = batch.temperature;
    e.iter()
        .map(|a| e.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d).collect())
        .collect()
}

/// Log-sum-exp over `j ≠ i` with the row max subtracted.
fn lse_excluding(row: &[f64], i: usize) -> f64 {
    let m = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + s.ln()
}

/// Supervised region-contrastive loss summed over the batch.
///
/// For each `i` with positives `P(i)` (same label, excluding `i`):
/// `ℓ_i = -1/|P(i)| Σ_{p∈P(i)} [s_ip − log Σ_{j≠i} exp(s_ij)]`.
/// Samples without positives contribute 0 and are flagged as singletons.
pub fn region_contrastive_loss(batch: &ContrastiveBatch) -> LossOutput {
    let s = logits(batch);
    let n = batch.len();
    let mut per_sample = vec![0.0; n];
    let mut singleton = vec![false; n];
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && batch.labels[p] == batch.labels[i]).collect();
        if pos.is_empty() {
            singleton[i] = true;
            continue;
        }
        let lse = lse_excluding(&s[i], i);
        let mean_pos = pos.iter().map(|&p| s[i][p]).sum::<f64>() / pos.len() as f64;
        per_sample[i] = lse - mean_pos;
    }
    LossOutput {
        loss: per_sample.iter().sum(),
        per_sample,
        singleton,
    }
}

/// Gradient of [`region_contrastive_loss`] with respect to each embedding,
/// treating the embeddings as unconstrained vectors.
pub fn rcl_gradient(batch: &ContrastiveBatch) -> Vec<Vec<f64>> {
    let s = logits(batch);
    let n = batch.len();
    let dim = batch.embeddings[0].len();
    let d = batch.temperature;
    // coef[i][j] = ∂ℓ_i/∂s_ij = softmax_j(s_i·) − [j ∈ P(i)]/|P(i)|
    let mut coef = vec![vec![0.0; n]; n];
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && batch.labels[p] == batch.labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let lse = lse_excluding(&s[i], i);
        for j in (0..n).filter(|&j| j != i) {
            coef[i][j] = (s[i][j] - lse).exp();
        }
        let w = 1.0 / pos.len() as f64;
        for &p in &pos {
            coef[i][p] -= w;
        }
    }
    let e = &batch.embeddings;
    (0..n)
        .map(|k| {
            let mut g = vec![0.0; dim];
            for j in 0..n {
                let c = coef[k][j] + coef[j][k];
                if c != 0.0 {
                    for (gv, ev) in g.iter_mut().zip(&e[j]) {
                        *gv += c * ev / d;
                    }
                }
            }
            g
        })
        .collect()
}

/// Mean squared action error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, RclError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(RclError::ShapeMismatch(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// `MSE(pred, truth) + λ · L_RC` (the contrastive term only when enabled
/// and a batch is available).
pub fn combined_loss(
    action_pred: &[f64],
    action_true: &[f64],
    batch: Option<&ContrastiveBatch>,
    cfg: &RclConfig,
) -> Result<f64, RclError> {
    let l2 = mse(action_pred, action_true)?;
    let rc = match batch {
        Some(b) if cfg.enabled => region_contrastive_loss(b).loss,
        _ => 0.0,
    };
    Ok(l2 + cfg.weight * rc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, source: FeatureSource) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect(), source).unwrap()
    }

    #[test]
    fn object_image_examples() {
        let img = RgbImage::from_fn(2, 2, |x, y| Rgb([x as u8 * 50 + 1, y as u8 * 50 + 2, 3]));
        assert_eq!(extract_object_image(&img, &Mask::full(2, 2)).unwrap(), img);
        assert!(extract_object_image(&img, &Mask::empty(2, 2)).unwrap().pixels().all(|p| p.0 == [0, 0, 0]));
        let m = Mask::from_raw(2, 2, vec![1, 0, 0, 0]).unwrap();
        let out = extract_object_image(&img, &m).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let expect = if (x, y) == (0, 0) { img.get_pixel(0, 0).0 } else { [0, 0, 0] };
            assert_eq!(p.0, expect);
        }
        assert!(extract_object_image(&img, &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn zero_attention_halves_object_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_map(&mut rng, 3, 2, 2, FeatureSource::FullImage);
        let zo = random_map(&mut rng, 3, 2, 2, FeatureSource::ObjectImage);
        let out = attentive_features(&z, &zo, &AttentionParams::zeros(3)).unwrap();
        for (a, b) in out.values.iter().zip(&zo.values) {
            assert_eq!(*a, 0.5 * b);
        }
        assert_eq!(out.source, FeatureSource::Attended);

        let zeros = FeatureMap::zeros(3, 2, 2, FeatureSource::ObjectImage);
        let mut p = AttentionParams::zeros(3);
        p.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        assert!(attentive_features(&z, &zeros, &p).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_shape_errors() {
        let z = FeatureMap::zeros(3, 2, 2, FeatureSource::FullImage);
        let zo = FeatureMap::zeros(3, 2, 3, FeatureSource::ObjectImage);
        assert!(matches!(attentive_features(&z, &zo, &AttentionParams::zeros(3)), Err(RclError::ShapeMismatch(_))));
        assert!(matches!(attentive_features(&z, &z, &AttentionParams::zeros(4)), Err(RclError::ShapeMismatch(_))));
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w) = (3, 2, 3);
        let z = random_map(&mut rng, c, h, w, FeatureSource::FullImage);
        let zo = random_map(&mut rng, c, h, w, FeatureSource::ObjectImage);
        let mut p = AttentionParams::zeros(c);
        p.weight.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let g_out: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |z: &FeatureMap, zo: &FeatureMap, p: &AttentionParams| -> f64 {
            attentive_features(z, zo, p).unwrap().values.iter().zip(&g_out).map(|(a, b)| a * b).sum()
        };
        let g = attentive_features_backward(&z, &zo, &p, &g_out).unwrap();
        let h_ = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
        for i in 0..z.values.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.values[i] += h_;
            zm.values[i] -= h_;
            assert!(close(g.z[i], (f(&zp, &zo, &p) - f(&zm, &zo, &p)) / (2.0 * h_)));
            let (mut op, mut om) = (zo.clone(), zo.clone());
            op.values[i] += h_;
            om.values[i] -= h_;
            assert!(close(g.z_obj[i], (f(&z, &op, &p) - f(&z, &om, &p)) / (2.0 * h_)));
        }
        for i in 0..c * c {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.weight[i] += h_;
            pm.weight[i] -= h_;
            assert!(close(g.weight[i], (f(&z, &zo, &pp) - f(&z, &zo, &pm)) / (2.0 * h_)));
        }
        for i in 0..c {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.bias[i] += h_;
            pm.bias[i] -= h_;
            assert!(close(g.bias[i], (f(&z, &zo, &pp) - f(&z, &zo, &pm)) / (2.0 * h_)));
        }
    }

    #[test]
    fn pooling_examples() {
        let vals: Vec<f64> = [3.0, 0.0, 4.0].iter().flat_map(|&v| std::iter::repeat_n(v, 4)).collect();
        let m = FeatureMap::new(3, 2, 2, vals, FeatureSource::Attended).unwrap();
        assert_eq!(pool_embedding(&m).unwrap(), vec![0.6, 0.0, 0.8]);
        assert_eq!(pool_embedding(&FeatureMap::zeros(2, 2, 2, FeatureSource::Attended)), Err(RclError::ZeroFeature));

        // loop oracle: mean then normalize
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 3, 4, 4, FeatureSource::Attended);
        let mut mean = [0.0; 3];
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    mean[c] += m.at(c, y, x) / 16.0;
                }
            }
        }
        let n = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        let e = pool_embedding(&m).unwrap();
        for c in 0..3 {
            assert!((e[c] - mean[c] / n).abs() < 1e-12);
        }
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pooling_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 4, 3, 2, FeatureSource::Attended);
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |m: &FeatureMap| pool_embedding(m).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let an = pool_embedding_backward(&m, &g).unwrap();
        for i in 0..m.values.len() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.values[i] += 1e-6;
            q.values[i] -= 1e-6;
            let fd = (f(&p) - f(&q)) / 2e-6;
            assert!((fd - an[i]).abs() < 1e-7, "{fd} vs {}", an[i]);
        }
    }

    #[test]
    fn two_same_label_samples_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = ContrastiveBatch::new(vec![unit(&mut rng, 5), unit(&mut rng, 5)], vec![3, 3], 0.07).unwrap();
            let out = region_contrastive_loss(&b);
            assert_eq!(out.loss, 0.0);
            assert_eq!(out.singleton_count(), 0);
            // gradient of an identically-zero loss
            for g in rcl_gradient(&b) {
                assert!(g.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn singletons_contribute_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = ContrastiveBatch::new((0..3).map(|_| unit(&mut rng, 4)).collect(), vec![0, 1, 2], 0.07).unwrap();
        let out = region_contrastive_loss(&b);
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.singleton, vec![true; 3]);
        let b = ContrastiveBatch::new((0..3).map(|_| unit(&mut rng, 4)).collect(), vec![0, 0, 2], 0.07).unwrap();
        let out = region_contrastive_loss(&b);
        assert_eq!(out.singleton, vec![false, false, true]);
        assert_eq!(out.per_sample[2], 0.0);
    }

    #[test]
    fn batch_validation() {
        assert_eq!(ContrastiveBatch::new(vec![vec![1.0]], vec![0], 0.07), Err(RclError::DegenerateBatch(1)));
        assert!(matches!(
            ContrastiveBatch::new(vec![vec![1.0, 0.0], vec![2.0, 0.0]], vec![0, 0], 0.07),
            Err(RclError::NonUnitEmbedding { index: 1, .. })
        ));
        assert_eq!(
            ContrastiveBatch::new(vec![vec![1.0], vec![1.0]], vec![0, 0], 0.0),
            Err(RclError::BadTemperature(0.0))
        );
    }

    #[test]
    fn combined_loss_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = ContrastiveBatch::new((0..4).map(|_| unit(&mut rng, 3)).collect(), vec![0, 0, 1, 1], 0.07).unwrap();
        let pred = [0.1, -0.3, 0.5, 0.2];
        let truth = [0.0, -0.1, 0.4, 0.7];
        let l2 = ((0.1f64).powi(2) + (0.2f64).powi(2) + (0.1f64).powi(2) + (0.5f64).powi(2)) / 4.0;
        let off = RclConfig { weight: 0.0, ..RclConfig::default() };
        assert!((combined_loss(&pred, &truth, Some(&b), &off).unwrap() - l2).abs() < 1e-15);
        let one = RclConfig { weight: 1.0, ..RclConfig::default() };
        let rc = region_contrastive_loss(&b).loss;
        assert_eq!(combined_loss(&truth, &truth, Some(&b), &one).unwrap(), rc);
        let half = RclConfig::default();
        assert!((combined_loss(&pred, &truth, Some(&b), &half).unwrap() - (l2 + 0.5 * rc)).abs() < 1e-12);
        let disabled = RclConfig { enabled: false, ..RclConfig::default() };
        assert!((combined_loss(&pred, &truth, Some(&b), &disabled).unwrap() - l2).abs() < 1e-15);
        assert!(combined_loss(&pred, &truth[..3], None, &half).is_err());
    }

    proptest::proptest! {
        #[test]
        fn permutation_and_relabeling_invariance(seed in proptest::prelude::any::<u64>(), n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 6)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let base = region_contrastive_loss(&ContrastiveBatch::new(emb.clone(), labels.clone(), 0.07).unwrap()).loss;

            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let pe = order.iter().map(|&i| emb[i].clone()).collect();
            let pl = order.iter().map(|&i| labels[i]).collect();
            let perm = region_contrastive_loss(&ContrastiveBatch::new(pe, pl, 0.07).unwrap()).loss;
            proptest::prop_assert!((perm - base).abs() <= 1e-9 * base.abs().max(1.0));

            let relabeled = labels.iter().map(|l| [7, 2, 11][*l]).collect();
            let rl = region_contrastive_loss(&ContrastiveBatch::new(emb, relabeled, 0.07).unwrap()).loss;
            proptest::prop_assert_eq!(rl, base);
        }
    }
}
