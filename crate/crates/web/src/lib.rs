//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust twin (`*_impl`) returning
//! `Result<_, String>` so it can be tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use roboaug_core::augment::{composite_binary, sample_prompt, BackgroundProvider, ProceduralProvider, PromptLibrary};
use roboaug_core::detect_eval::{
    ap_from_curve, pr_curve, Detection, DetectionSet, GroundTruthBox, GroundTruthSet,
};
use roboaug_core::imaging::BBox;
use roboaug_core::policy::{SceneRenderer, Split, SyntheticSceneConfig};
use roboaug_core::rcl::{region_contrastive_loss, ContrastiveBatch};
use roboaug_core::seed::derive_seed;

fn to_js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Source frame, task mask and composited frame side by side.
pub struct CompositePreview {
    pub width: u32,
    pub height: u32,
    pub rgba: Vec<u8>,
    pub prompt: String,
}

pub fn composite_preview_impl(side: u32, seed: u64, prompt: Option<String>) -> Result<CompositePreview, String> {
    if side < 16 || side % 16 != 0 || side > 256 {
        return Err("side must be a multiple of 16 between 16 and 256".into());
    }
    let cfg = SyntheticSceneConfig::at_size(side, 1, 1, seed);
    let mut renderer = SceneRenderer::new(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "episode"));
    let ep = renderer.sample_episode(Split::Train, &mut rng);
    let (image, block, marker) = renderer.render(&ep, ep.start);
    let mut mask = block;
    mask.or_assign(&marker).map_err(|e| e.to_string())?;
    let prompt = match prompt.filter(|p| !p.trim().is_empty()) {
        Some(p) => p,
        None => {
            let lib = PromptLibrary::default_library();
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prompt"));
            sample_prompt(&lib, &mut prng).map_err(|e| e.to_string())?.text.clone()
        }
    };
    let bg = ProceduralProvider
        .generate(&prompt, side, side, derive_seed(seed, "background"))
        .map_err(|e| e.to_string())?;
    let out = composite_binary(&image, &mask, &bg).map_err(|e| e.to_string())?;
    let width = side * 3;
    let mut rgba = Vec::with_capacity((width * side * 4) as usize);
    for y in 0..side {
        for x in 0..width {
            let (panel, px) = (x / side, x % side);
            let rgb = match panel {
                0 => image.get_pixel(px, y).0,
                1 => {
                    let v = if mask.get(px, y) { 255 } else { 0 };
                    [v, v, v]
                }
                _ => out.get_pixel(px, y).0,
            };
            rgba.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
    }
    Ok(CompositePreview {
        width,
        height: side,
        rgba,
        prompt,
    })
}

#[wasm_bindgen]
pub struct Preview {
    inner: CompositePreview,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.inner.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.inner.height
    }

    #[wasm_bindgen(getter)]
    pub fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.inner.rgba.clone()
    }
}

/// Renders a scene, samples (or takes) a background prompt and composites.
#[wasm_bindgen]
pub fn composite_preview(side: u32, seed: u32, prompt: Option<String>) -> Result<Preview, JsValue> {
    composite_preview_impl(side, u64::from(seed), prompt)
        .map(|inner| Preview { inner })
        .map_err(to_js)
}

/// Contrastive loss of one random clustered batch at each temperature.
/// Embeddings are `centroid[label] + spread * noise`, normalized.
pub fn loss_curve_impl(
    seed: u64,
    batch: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    temperatures: &[f64],
) -> Result<Vec<f64>, String> {
    if batch < 2 || classes == 0 || dim == 0 {
        return Err("need batch >= 2, classes >= 1, dim >= 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let centroids: Vec<Vec<f64>> = (0..classes).map(|_| gauss(dim)).collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let embeddings: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let v: Vec<f64> = centroids[l].iter().zip(gauss(dim)).map(|(c, n)| c + spread * n).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    temperatures
        .iter()
        .map(|&t| {
            ContrastiveBatch::new(embeddings.clone(), labels.clone(), t)
                .map(|b| region_contrastive_loss(&b).loss)
                .map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn loss_curve(
    seed: u32,
    batch: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    temperatures: Vec<f64>,
) -> Result<Vec<f64>, JsValue> {
    loss_curve_impl(u64::from(seed), batch, classes, dim, spread, &temperatures).map_err(to_js)
}

/// Precision-recall staircase for a ranked hit pattern such as `"TFTT"`
/// (highest score first) against `n_gt` ground-truth boxes. Returns JSON
/// `{"ap": .., "points": [{"recall": .., "precision": ..}, ..]}`.
pub fn pr_explorer_impl(pattern: &str, n_gt: usize) -> Result<String, String> {
    let hits: Vec<bool> = pattern
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c.to_ascii_uppercase() {
            'T' | '1' => Ok(true),
            'F' | '0' => Ok(false),
            other => Err(format!("unexpected `{other}`; use T and F")),
        })
        .collect::<Result<_, _>>()?;
    let tps = hits.iter().filter(|&&h| h).count();
    if n_gt == 0 || tps > n_gt {
        return Err(format!("{tps} hits need at least as many ground-truth boxes (got {n_gt})"));
    }
    let gt_box = |i: usize| BBox::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0);
    let gts = GroundTruthSet::new(
        (0..n_gt)
            .map(|i| GroundTruthBox {
                image_id: "demo".into(),
                category: "object".into(),
                bbox: gt_box(i),
            })
            .collect(),
        vec!["object".into()],
    )
    .map_err(|e| e.to_string())?;
    let n = hits.len();
    let mut next_gt = 0;
    let dets = hits
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            let bbox = if hit {
                next_gt += 1;
                gt_box(next_gt - 1)
            } else {
                BBox::new(0.0, 100.0 + 20.0 * k as f64, 10.0, 110.0 + 20.0 * k as f64)
            };
            Detection {
                image_id: "demo".into(),
                category: "object".into(),
                bbox,
                score: 1.0 - k as f64 / (n + 1) as f64,
            }
        })
        .collect();
    let dets = DetectionSet::new(dets).map_err(|e| e.to_string())?;
    let curve = pr_curve(&dets, &gts, "object", 0.5).map_err(|e| e.to_string())?;
    let points: Vec<serde_json::Value> = curve
        .iter()
        .map(|p| serde_json::json!({"recall": p.recall, "precision": p.precision}))
        .collect();
    Ok(serde_json::json!({"ap": ap_from_curve(&curve), "points": points}).to_string())
}

#[wasm_bindgen]
pub fn pr_explorer(pattern: &str, n_gt: usize) -> Result<String, JsValue> {
    pr_explorer_impl(pattern, n_gt).map_err(to_js)
}
