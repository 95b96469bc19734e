//! Toy visuomotor policy: a three-layer convolutional encoder emitting a
//! feature map, adaptive average pooling to a coarse grid, and a two-layer
//! head mapping pooled features plus proprioception to an action.
//!
//! All parameters live in one flat vector so that the optimizer and the
//! checkpoint format stay trivial. Backpropagation is written by hand.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rcl::{AttentionParams, FeatureMap, FeatureSource};

use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArch {
    /// (height, width) of input images.
    pub image_size: (u32, u32),
    pub channels: usize,
    /// Side of the pooled feature grid fed to the head.
    pub grid: usize,
    pub hidden: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            channels: 32,
            grid: 4,
            hidden: 64,
            proprio_dim: 2,
            action_dim: 2,
        }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

const STRIDES: [usize; 3] = [2, 2, 1];

impl PolicyArch {
    pub fn feature_size(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.image_size.0 as usize, self.image_size.1 as usize);
        for s in STRIDES {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let (h, w) = self.feature_size();
        if self.channels == 0 || self.hidden == 0 || self.grid == 0 || self.action_dim == 0 {
            return Err(PolicyError::Config("policy dimensions must be positive".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(PolicyError::Config("image_size must be positive".into()));
        }
        if h % self.grid != 0 || w % self.grid != 0 {
            return Err(PolicyError::Config(format!(
                "feature map {h}x{w} is not divisible into a {g}x{g} grid",
                g = self.grid
            )));
        }
        Ok(())
    }

    fn head_inputs(&self) -> usize {
        self.channels * self.grid * self.grid + self.proprio_dim
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    conv_w: [usize; 3],
    conv_b: [usize; 3],
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    att_w: usize,
    att_b: usize,
    total: usize,
}

impl Layout {
    fn of(arch: &PolicyArch) -> Self {
        let c = arch.channels;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let conv_w0 = take(c * 3 * 9);
        let conv_b0 = take(c);
        let conv_w1 = take(c * c * 9);
        let conv_b1 = take(c);
        let conv_w2 = take(c * c * 9);
        let conv_b2 = take(c);
        let fc1_w = take(arch.hidden * arch.head_inputs());
        let fc1_b = take(arch.hidden);
        let fc2_w = take(arch.action_dim * arch.hidden);
        let fc2_b = take(arch.action_dim);
        let att_w = take(c * c);
        let att_b = take(c);
        Self {
            conv_w: [conv_w0, conv_w1, conv_w2],
            conv_b: [conv_b0, conv_b1, conv_b2],
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            att_w,
            att_b,
            total: take(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub arch: PolicyArch,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Vec<f64>,
    /// Post-ReLU outputs of each conv layer.
    acts: [Vec<f64>; 3],
    shapes: [(usize, usize, usize); 4],
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    inputs: Vec<f64>,
    hidden: Vec<f64>,
}

impl ToyPolicy {
    /// He-normal conv and head weights, zero biases, small attention weights.
    pub fn init(arch: PolicyArch, seed: u64) -> Result<Self, PolicyError> {
        arch.validate()?;
        let layout = Layout::of(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = arch.channels;
        let mut fill = |params: &mut [f64], fan_in: usize, gain: f64| {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            params.iter_mut().for_each(|p| {
                let n: f64 = StandardNormal.sample(&mut rng);
                *p = std * n;
            });
        };
        let l = layout;
        fill(&mut params[l.conv_w[0]..l.conv_b[0]], 27, 1.0);
        fill(&mut params[l.conv_w[1]..l.conv_b[1]], 9 * c, 1.0);
        fill(&mut params[l.conv_w[2]..l.conv_b[2]], 9 * c, 1.0);
        fill(&mut params[l.fc1_w..l.fc1_b], arch.head_inputs(), 1.0);
        fill(&mut params[l.fc2_w..l.fc2_b], arch.hidden, 0.5);
        fill(&mut params[l.att_w..l.att_b], c, 0.1);
        Ok(Self { arch, layout, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn from_params(arch: PolicyArch, params: Vec<f64>) -> Result<Self, PolicyError> {
        arch.validate()?;
        let layout = Layout::of(&arch);
        if params.len() != layout.total {
            return Err(PolicyError::Config(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::Config("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self { arch, layout, params })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn attention(&self) -> AttentionParams {
        let c = self.arch.channels;
        AttentionParams {
            channels: c,
            weight: self.params[self.layout.att_w..self.layout.att_w + c * c].to_vec(),
            bias: self.params[self.layout.att_b..self.layout.att_b + c].to_vec(),
        }
    }

    /// Accumulates attention gradients into a flat gradient vector.
    pub fn add_attention_grad(&self, grad: &mut [f64], weight: &[f64], bias: &[f64]) {
        let c = self.arch.channels;
        for (g, v) in grad[self.layout.att_w..self.layout.att_w + c * c].iter_mut().zip(weight) {
            *g += v;
        }
        for (g, v) in grad[self.layout.att_b..self.layout.att_b + c].iter_mut().zip(bias) {
            *g += v;
        }
    }

    fn check_image(&self, image: &RgbImage) -> Result<(), PolicyError> {
        let (h, w) = self.arch.image_size;
        if image.dimensions() != (w, h) {
            return Err(PolicyError::Config(format!(
                "policy expects {w}x{h} images, got {:?}",
                image.dimensions()
            )));
        }
        Ok(())
    }

    /// Encodes an image into the last pre-pooling feature map.
    pub fn encode(&self, image: &RgbImage, source: FeatureSource) -> Result<(FeatureMap, EncoderCache), PolicyError> {
        self.check_image(image)?;
        let (h, w) = (image.height() as usize, image.width() as usize);
        let mut input = vec![0.0; 3 * h * w];
        for (i, p) in image.pixels().enumerate() {
            for c in 0..3 {
                input[c * h * w + i] = f64::from(p.0[c]) / 255.0 - 0.5;
            }
        }
        let c = self.arch.channels;
        let mut shapes = [(3, h, w); 4];
        let mut acts: [Vec<f64>; 3] = Default::default();
        for l in 0..3 {
            let (ci, hi, wi) = shapes[l];
            let (ho, wo) = (conv_out(hi, STRIDES[l]), conv_out(wi, STRIDES[l]));
            shapes[l + 1] = (c, ho, wo);
            let x = if l == 0 { &input } else { &acts[l - 1] };
            let mut y = conv_forward(
                x,
                (ci, hi, wi),
                &self.params[self.layout.conv_w[l]..self.layout.conv_w[l] + c * ci * 9],
                &self.params[self.layout.conv_b[l]..self.layout.conv_b[l] + c],
                c,
                STRIDES[l],
            );
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            acts[l] = y;
        }
        let (fc, fh, fw) = shapes[3];
        let map = FeatureMap::new(fc, fh, fw, acts[2].clone(), source).expect("shape computed above");
        Ok((map, EncoderCache { input, acts, shapes }))
    }

    /// Backpropagates `∂L/∂z` through the encoder into `grad`.
    pub fn encode_backward(&self, cache: &EncoderCache, grad_z: &[f64], grad: &mut [f64]) {
        let c = self.arch.channels;
        let mut g = grad_z.to_vec();
        for l in (0..3).rev() {
            for (gv, a) in g.iter_mut().zip(&cache.acts[l]) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let (ci, hi, wi) = cache.shapes[l];
            let x = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
            let (wo, rest) = grad[self.layout.conv_w[l]..].split_at_mut(c * ci * 9);
            let bo = &mut rest[..c];
            let gx = conv_backward(
                x,
                (ci, hi, wi),
                &self.params[self.layout.conv_w[l]..self.layout.conv_w[l] + c * ci * 9],
                &g,
                c,
                STRIDES[l],
                wo,
                bo,
                l > 0,
            );
            g = gx;
        }
    }

    /// Adaptive average pooling to the head grid, then the head.
    pub fn head(&self, z: &FeatureMap, proprio: &[f64]) -> Result<(Vec<f64>, HeadCache), PolicyError> {
        if proprio.len() != self.arch.proprio_dim {
            return Err(PolicyError::Config(format!(
                "policy expects {} proprio values, got {}",
                self.arch.proprio_dim,
                proprio.len()
            )));
        }
        let a = &self.arch;
        let mut inputs = pool_grid(z, a.grid);
        inputs.extend_from_slice(proprio);
        let n_in = a.head_inputs();
        let l = self.layout;
        let mut hidden = vec![0.0; a.hidden];
        for (j, hv) in hidden.iter_mut().enumerate() {
            let row = &self.params[l.fc1_w + j * n_in..l.fc1_w + (j + 1) * n_in];
            let s: f64 = row.iter().zip(&inputs).map(|(w, x)| w * x).sum::<f64>() + self.params[l.fc1_b + j];
            *hv = s.max(0.0);
        }
        let out = (0..a.action_dim)
            .map(|k| {
                let row = &self.params[l.fc2_w + k * a.hidden..l.fc2_w + (k + 1) * a.hidden];
                row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + self.params[l.fc2_b + k]
            })
            .collect();
        Ok((out, HeadCache { inputs, hidden }))
    }

    /// Backpropagates `∂L/∂action` through the head; returns `∂L/∂z`.
    pub fn head_backward(&self, z: &FeatureMap, cache: &HeadCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let a = &self.arch;
        let l = self.layout;
        let n_in = a.head_inputs();
        let mut g_hidden = vec![0.0; a.hidden];
        for (k, &go) in grad_out.iter().enumerate() {
            grad[l.fc2_b + k] += go;
            for j in 0..a.hidden {
                grad[l.fc2_w + k * a.hidden + j] += go * cache.hidden[j];
                g_hidden[j] += go * self.params[l.fc2_w + k * a.hidden + j];
            }
        }
        let mut g_in = vec![0.0; n_in];
        for j in 0..a.hidden {
            if cache.hidden[j] <= 0.0 {
                continue;
            }
            let gh = g_hidden[j];
            grad[l.fc1_b + j] += gh;
            let wrow = l.fc1_w + j * n_in;
            for i in 0..n_in {
                grad[wrow + i] += gh * cache.inputs[i];
                g_in[i] += gh * self.params[wrow + i];
            }
        }
        pool_grid_backward(z, a.grid, &g_in[..a.channels * a.grid * a.grid])
    }

    /// Full forward pass: image and proprio to action.
    pub fn act(&self, image: &RgbImage, proprio: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let (z, _) = self.encode(image, FeatureSource::FullImage)?;
        Ok(self.head(&z, proprio)?.0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "arch": self.arch,
            "params": self.params.iter().map(|p| crate::dataset::format_float(*p)).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, PolicyError> {
        let arch: PolicyArch = serde_json::from_value(v["arch"].clone())
            .map_err(|e| PolicyError::Config(format!("checkpoint arch: {e}")))?;
        let params = v["params"]
            .as_array()
            .ok_or_else(|| PolicyError::Config("checkpoint has no params array".into()))?
            .iter()
            .map(|p| {
                p.as_str()
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| PolicyError::Config("unparseable checkpoint parameter".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(arch, params)
    }
}

/// 3×3 convolution with zero padding 1.
fn conv_forward(
    x: &[f64],
    (ci, hi, wi): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    co: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = (conv_out(hi, stride), conv_out(wi, stride));
    let mut y = vec![0.0; co * ho * wo];
    for o in 0..co {
        let yo = &mut y[o * ho * wo..(o + 1) * ho * wo];
        yo.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..ci {
            let xi = &x[i * hi * wi..(i + 1) * hi * wi];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * ci + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(wo, wi, stride, kx);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= hi {
                            continue;
                        }
                        let row = &xi[iy as usize * wi..(iy as usize + 1) * wi];
                        let out = &mut yo[oy * wo..(oy + 1) * wo];
                        for ox in x0..x1 {
                            out[ox] += wv * row[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Output columns whose tap `k` lands inside the input row.
fn valid_range(wo: usize, wi: usize, stride: usize, k: usize) -> (usize, usize) {
    let start = usize::from(k == 0);
    let mut end = wo;
    while end > start && (end - 1) * stride + k > wi {
        end -= 1;
    }
    (start, end)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    (ci, hi, wi): (usize, usize, usize),
    weight: &[f64],
    gy: &[f64],
    co: usize,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_gx: bool,
) -> Vec<f64> {
    let (ho, wo) = (conv_out(hi, stride), conv_out(wi, stride));
    let mut gx = if need_gx { vec![0.0; ci * hi * wi] } else { Vec::new() };
    for o in 0..co {
        let go = &gy[o * ho * wo..(o + 1) * ho * wo];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..ci {
            let xi = &x[i * hi * wi..(i + 1) * hi * wi];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (x0, x1) = valid_range(wo, wi, stride, kx);
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= hi {
                            continue;
                        }
                        let iy = iy as usize;
                        let g_row = &go[oy * wo..(oy + 1) * wo];
                        let row = &xi[iy * wi..(iy + 1) * wi];
                        for ox in x0..x1 {
                            acc += g_row[ox] * row[ox * stride + kx - 1];
                        }
                        if need_gx {
                            let gxr = &mut gx[i * hi * wi + iy * wi..i * hi * wi + (iy + 1) * wi];
                            for ox in x0..x1 {
                                gxr[ox * stride + kx - 1] += wv * g_row[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gx
}

/// Average pooling of each channel onto a `grid`×`grid` lattice of equal
/// blocks, flattened channel-major.
pub fn pool_grid(z: &FeatureMap, grid: usize) -> Vec<f64> {
    let (bh, bw) = (z.height / grid, z.width / grid);
    let norm = (bh * bw) as f64;
    let mut out = vec![0.0; z.channels * grid * grid];
    for c in 0..z.channels {
        for y in 0..z.height {
            for x in 0..z.width {
                out[(c * grid + y / bh) * grid + x / bw] += z.at(c, y, x) / norm;
            }
        }
    }
    out
}

fn pool_grid_backward(z: &FeatureMap, grid: usize, g: &[f64]) -> Vec<f64> {
    let (bh, bw) = (z.height / grid, z.width / grid);
    let norm = (bh * bw) as f64;
    let mut out = vec![0.0; z.values.len()];
    for c in 0..z.channels {
        for y in 0..z.height {
            for x in 0..z.width {
                out[(c * z.height + y) * z.width + x] = g[(c * grid + y / bh) * grid + x / bw] / norm;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 24,
            steps: 50_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(PolicyError::Config("learning_rate and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(PolicyError::Config("AdamW betas must be in [0,1) and epsilon positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PolicyError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            *p -= c.learning_rate * (update + c.weight_decay * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::Rng;

    fn small_arch() -> PolicyArch {
        PolicyArch {
            image_size: (16, 16),
            channels: 3,
            grid: 2,
            hidden: 5,
            proprio_dim: 2,
            action_dim: 2,
        }
    }

    fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn shapes() {
        let a = PolicyArch::default();
        assert_eq!(a.feature_size(), (16, 16));
        a.validate().unwrap();
        let p = ToyPolicy::init(small_arch(), 1).unwrap();
        let (z, _) = p.encode(&noise_image(1, 16, 16), FeatureSource::FullImage).unwrap();
        assert_eq!(z.shape(), (3, 4, 4));
        assert!(p.encode(&noise_image(1, 8, 16), FeatureSource::FullImage).is_err());
        let bad = PolicyArch { grid: 3, ..small_arch() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let (ci, hi, wi, co) = (2, 5, 6, 3);
            let x: Vec<f64> = (0..ci * hi * wi).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv_forward(&x, (ci, hi, wi), &w, &b, co, stride);
            let (ho, wo) = (conv_out(hi, stride), conv_out(wi, stride));
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[o];
                        for i in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < hi && (ix as usize) < wi {
                                        s += w[((o * ci + i) * 3 + ky) * 3 + kx]
                                            * x[(i * hi + iy as usize) * wi + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y[(o * ho + oy) * wo + ox] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn loss(p: &ToyPolicy, img: &RgbImage, obj: &RgbImage, proprio: &[f64], target: &[f64]) -> f64 {
        use crate::rcl::{attentive_features, pool_embedding};
        let (z, _) = p.encode(img, FeatureSource::FullImage).unwrap();
        let (out, _) = p.head(&z, proprio).unwrap();
        let (zo, _) = p.encode(obj, FeatureSource::ObjectImage).unwrap();
        let att = attentive_features(&z, &zo, &p.attention()).unwrap();
        let e = pool_embedding(&att).unwrap();
        let l2: f64 = out.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        l2 + e.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::rcl::{attentive_features, attentive_features_backward, pool_embedding_backward};
        let p = ToyPolicy::init(small_arch(), 11).unwrap();
        let img = noise_image(2, 16, 16);
        let obj = noise_image(3, 16, 16);
        let proprio = [0.3, -0.2];
        let target = [0.5, 0.1];

        let (z, zc) = p.encode(&img, FeatureSource::FullImage).unwrap();
        let (out, hc) = p.head(&z, &proprio).unwrap();
        let (zo, oc) = p.encode(&obj, FeatureSource::ObjectImage).unwrap();
        let att_params = p.attention();
        let att = attentive_features(&z, &zo, &att_params).unwrap();
        let mut grad = vec![0.0; p.num_params()];
        let g_out: Vec<f64> = out.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g_z = p.head_backward(&z, &hc, &g_out, &mut grad);
        let g_e: Vec<f64> = (0..3).map(|i| i as f64 + 1.0).collect();
        let g_att = pool_embedding_backward(&att, &g_e).unwrap();
        let ag = attentive_features_backward(&z, &zo, &att_params, &g_att).unwrap();
        g_z.iter_mut().zip(&ag.z).for_each(|(a, b)| *a += b);
        p.encode_backward(&zc, &g_z, &mut grad);
        p.encode_backward(&oc, &ag.z_obj, &mut grad);
        p.add_attention_grad(&mut grad, &ag.weight, &ag.bias);

        let mut checked = 0;
        for i in (0..p.num_params()).step_by(3) {
            let mut a = p.clone();
            let mut b = p.clone();
            a.params[i] += 1e-6;
            b.params[i] -= 1e-6;
            let fd = (loss(&a, &img, &obj, &proprio, &target) - loss(&b, &img, &obj, &proprio, &target)) / 2e-6;
            let tol = 1e-5 * fd.abs().max(grad[i].abs()).max(1e-2);
            assert!((fd - grad[i]).abs() < tol, "param {i}: fd {fd} vs analytic {}", grad[i]);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let p = ToyPolicy::init(small_arch(), 4).unwrap();
        let back = ToyPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(ToyPolicy::from_params(small_arch(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        let mut decay = AdamW::new(OptimizerConfig { learning_rate: 0.1, weight_decay: 0.5, ..cfg }, 1);
        let mut q = vec![2.0];
        decay.step(&mut q, &[0.0]);
        assert!((q[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
