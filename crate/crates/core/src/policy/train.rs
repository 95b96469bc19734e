//! Behavior cloning with the combined action + region-contrastive loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::rcl::{
    attentive_features, attentive_features_backward, extract_object_image, pool_embedding, pool_embedding_backward,
    rcl_gradient, region_contrastive_loss, ContrastiveBatch, FeatureMap, FeatureSource, RclConfig, RclError,
};
use crate::seed::derive_seed;

use super::model::{AdamW, EncoderCache, OptimizerConfig, PolicyArch, ToyPolicy};
use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: PolicyArch,
    pub optimizer: OptimizerConfig,
    pub rcl: RclConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: PolicyArch::default(),
            optimizer: OptimizerConfig::default(),
            rcl: RclConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The contrastive branch runs only when enabled with a positive weight,
    /// so a zero weight and a disabled branch train identically.
    pub fn rcl_active(&self) -> bool {
        self.rcl.enabled && self.rcl.weight > 0.0
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l2: f64,
    pub rcl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub log: Vec<TrainLogRecord>,
    /// Contrastive samples that had no positive in their batch.
    pub singleton_samples: usize,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

struct ObjectPass {
    sample: usize,
    label: usize,
    z_obj: FeatureMap,
    cache: EncoderCache,
    attended: FeatureMap,
    embedding: Vec<f64>,
}

/// Trains a fresh policy on every frame of `dataset`.
pub fn train_policy(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, PolicyError> {
    cfg.optimizer.validate()?;
    cfg.rcl.validate()?;
    let frames: Vec<(usize, usize)> = dataset
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.frames.len()).map(move |fi| (ti, fi)))
        .collect();
    if frames.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let registry = &dataset.manifest.category_registry;
    if cfg.rcl_active() {
        for t in &dataset.trajectories {
            if let Some(f) = t.frames.iter().find(|f| f.annotations.is_empty()) {
                return Err(PolicyError::MissingMasks {
                    trajectory: t.id.clone(),
                    frame: f.index,
                });
            }
        }
    }
    let first = &dataset.trajectories[frames[0].0].frames[0];
    if first.action.len() != cfg.arch.action_dim || first.proprio.len() != cfg.arch.proprio_dim {
        return Err(PolicyError::Config(format!(
            "dataset has {}-d proprio and {}-d actions, architecture expects {} and {}",
            first.proprio.len(),
            first.action.len(),
            cfg.arch.proprio_dim,
            cfg.arch.action_dim
        )));
    }

    let mut policy = ToyPolicy::init(cfg.arch, derive_seed(cfg.seed, "init"))?;
    let mut opt = AdamW::new(cfg.optimizer, policy.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let b = cfg.optimizer.batch_size;
    let a_dim = cfg.arch.action_dim;
    let lambda = cfg.rcl.weight;
    let mut log = Vec::with_capacity(cfg.optimizer.steps);
    let mut singleton_samples = 0;

    for step in 0..cfg.optimizer.steps {
        let batch: Vec<(usize, usize)> = (0..b).map(|_| frames[rng.random_range(0..frames.len())]).collect();
        let mut grad = vec![0.0; policy.num_params()];
        let mut sq = 0.0;
        let mut full = Vec::with_capacity(b);
        for &(ti, fi) in &batch {
            let frame = &dataset.trajectories[ti].frames[fi];
            let (z, cache) = policy.encode(&frame.image, FeatureSource::FullImage)?;
            let (out, head_cache) = policy.head(&z, &frame.proprio)?;
            let g_out: Vec<f64> = out
                .iter()
                .zip(&frame.action)
                .map(|(p, y)| {
                    sq += (p - y) * (p - y);
                    2.0 * (p - y) / (b * a_dim) as f64
                })
                .collect();
            let g_z = policy.head_backward(&z, &head_cache, &g_out, &mut grad);
            full.push((z, cache, g_z));
        }
        let l2 = sq / (b * a_dim) as f64;

        let mut rc = 0.0;
        if cfg.rcl_active() {
            let attention = policy.attention();
            let mut passes = Vec::new();
            for (s, &(ti, fi)) in batch.iter().enumerate() {
                let frame = &dataset.trajectories[ti].frames[fi];
                for ann in &frame.annotations {
                    let Some(label) = registry.iter().position(|c| *c == ann.category) else {
                        return Err(PolicyError::UnknownCategory(ann.category.clone()));
                    };
                    let obj = extract_object_image(&frame.image, &ann.mask)?;
                    let (z_obj, cache) = policy.encode(&obj, FeatureSource::ObjectImage)?;
                    let attended = attentive_features(&full[s].0, &z_obj, &attention)?;
                    let embedding = match pool_embedding(&attended) {
                        Ok(e) => e,
                        Err(RclError::ZeroFeature) => continue,
                        Err(e) => return Err(e.into()),
                    };
                    passes.push(ObjectPass {
                        sample: s,
                        label,
                        z_obj,
                        cache,
                        attended,
                        embedding,
                    });
                }
            }
            if passes.len() >= 2 {
                let contrastive = ContrastiveBatch::new(
                    passes.iter().map(|p| p.embedding.clone()).collect(),
                    passes.iter().map(|p| p.label).collect(),
                    cfg.rcl.temperature,
                )?;
                let out = region_contrastive_loss(&contrastive);
                rc = out.loss;
                singleton_samples += out.singleton_count();
                let g_emb = rcl_gradient(&contrastive);
                for (p, g) in passes.iter().zip(g_emb) {
                    let g: Vec<f64> = g.iter().map(|v| lambda * v).collect();
                    let g_att = pool_embedding_backward(&p.attended, &g)?;
                    let ag = attentive_features_backward(&full[p.sample].0, &p.z_obj, &attention, &g_att)?;
                    full[p.sample].2.iter_mut().zip(&ag.z).for_each(|(a, v)| *a += v);
                    policy.encode_backward(&p.cache, &ag.z_obj, &mut grad);
                    policy.add_attention_grad(&mut grad, &ag.weight, &ag.bias);
                }
            } else {
                singleton_samples += passes.len();
            }
        }
        for (_, cache, g_z) in &full {
            policy.encode_backward(cache, g_z, &mut grad);
        }
        let total = l2 + if cfg.rcl_active() { lambda * rc } else { 0.0 };
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::Diverged { step });
        }
        opt.step(policy.params_mut(), &grad);
        log.push(TrainLogRecord { step, l2, rcl: rc, total });
    }
    Ok(TrainOutcome {
        policy,
        log,
        singleton_samples,
    })
}
