//! Augmentation-ratio sweep: for each (ratio, seed) cell, generate expert
//! demonstrations, augment them, train a policy and evaluate it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_trajectory, AugmentationPlan, BackgroundProvider, ProceduralProvider, PromptLibrary};
use crate::dataset::Dataset;
use crate::plot;
use crate::seed::derive_seed;

use super::eval::{evaluate, EvalMetrics};
use super::scene::{generate_reach_dataset, Split, SyntheticSceneConfig};
use super::train::{train_policy, TrainConfig};
use super::PolicyError;

pub const DEFAULT_RATIOS: [usize; 7] = [0, 1, 3, 5, 8, 15, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_trajectories: usize,
    pub eval_episodes: usize,
    pub scene: SyntheticSceneConfig,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            seeds: vec![0, 1, 2],
            n_trajectories: 8,
            eval_episodes: 32,
            scene: SyntheticSceneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: usize,
    pub seed: u64,
    pub ood_mse: f64,
    pub ood_success: f64,
    pub id_mse: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub ratio: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Everything a single cell produces besides its row.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub row: SweepRow,
    pub ood: EvalMetrics,
    pub id: EvalMetrics,
    pub trajectories: usize,
}

/// Augments the exact-mask expert set at `ratio` and returns the training
/// dataset (experts first, then copies).
pub fn augmented_reach_dataset(
    scene: &SyntheticSceneConfig,
    n_trajectories: usize,
    ratio: usize,
    seed: u64,
    provider: &dyn BackgroundProvider,
) -> Result<Dataset, PolicyError> {
    let reach = generate_reach_dataset(scene, n_trajectories)?;
    let mut all = reach.annotated();
    if ratio > 0 {
        let ids: Vec<String> = reach.trajectories.iter().map(|t| t.id.clone()).collect();
        let plan = AugmentationPlan::new(
            ratio,
            derive_seed(seed, "augment"),
            provider.name(),
            &PromptLibrary::default_library(),
            &ids,
        )?;
        for (t, m) in reach.trajectories.iter().zip(&reach.masks) {
            let out = augment_trajectory(t, m, &plan, provider)?;
            if let Some((copy, e)) = out.failures.into_iter().next() {
                return Err(PolicyError::Augment(format!("`{}` copy {copy}: {e}", t.id)));
            }
            all.extend(out.trajectories);
        }
    }
    Ok(Dataset::from_trajectories(vec![scene.task()], all, scene.categories())?)
}

/// Per-cell scene: the texture banks are shared, episodes vary with `seed`.
pub fn cell_scene(base: &SyntheticSceneConfig, seed: u64) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        seed: derive_seed(seed, "scene"),
        ..base.clone()
    }
}

pub fn run_cell(cfg: &SweepConfig, ratio: usize, seed: u64, train: &TrainConfig) -> Result<CellOutput, PolicyError> {
    let started = Instant::now();
    let scene = cell_scene(&cfg.scene, seed);
    let dataset = augmented_reach_dataset(&scene, cfg.n_trajectories, ratio, seed, &ProceduralProvider)?;
    let train = TrainConfig {
        seed: derive_seed(seed, "train"),
        ..*train
    };
    let mut outcome = train_policy(&dataset, &train)?;
    let eval_seed = derive_seed(seed, "eval");
    let ood = evaluate(&mut outcome.policy, &scene, Split::Test, cfg.eval_episodes, eval_seed)?;
    let id = evaluate(&mut outcome.policy, &scene, Split::Train, cfg.eval_episodes, eval_seed)?;
    Ok(CellOutput {
        row: SweepRow {
            ratio,
            seed,
            ood_mse: ood.action_mse,
            ood_success: ood.success_rate,
            id_mse: id.action_mse,
            wallclock_s: started.elapsed().as_secs_f64(),
        },
        ood,
        id,
        trajectories: dataset.trajectories.len(),
    })
}

fn run_cells(cfg: &SweepConfig, cells: Vec<(usize, u64)>) -> Vec<((usize, u64), Result<CellOutput, PolicyError>)> {
    let run = |(r, s): (usize, u64)| ((r, s), run_cell(cfg, r, s, &cfg.train));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cells.into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cells.into_iter().map(run).collect()
    }
}

/// Runs every (ratio, seed) cell; failing cells are recorded and skipped.
pub fn ratio_sweep(cfg: &SweepConfig) -> Result<SweepResult, PolicyError> {
    if !cfg.ratios.contains(&0) {
        return Err(PolicyError::Config("sweep ratios must include 0".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(PolicyError::Config("sweep needs at least one seed".into()));
    }
    cfg.scene.validate()?;
    let cells: Vec<(usize, u64)> = cfg
        .ratios
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let mut result = SweepResult::default();
    for ((ratio, seed), out) in run_cells(cfg, cells) {
        match out {
            Ok(c) => result.rows.push(c.row),
            Err(e) => {
                log::warn!("sweep cell ratio={ratio} seed={seed} failed: {e}");
                result.failures.push(SweepFailure {
                    ratio,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(result)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

impl SweepResult {
    pub fn ratios(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.rows.iter().map(|r| r.ratio).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    fn median_of(&self, ratio: usize, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.ratio == ratio).map(f).collect();
        median(&mut v)
    }

    pub fn median_ood_mse(&self, ratio: usize) -> Option<f64> {
        self.median_of(ratio, |r| r.ood_mse)
    }

    pub fn median_ood_success(&self, ratio: usize) -> Option<f64> {
        self.median_of(ratio, |r| r.ood_success)
    }

    /// `ratio,seed,ood_mse,ood_success,id_mse,wallclock_s`
    pub fn to_csv(&self) -> Result<String, PolicyError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| PolicyError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| PolicyError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, PolicyError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<Result<Vec<SweepRow>, _>>()
            .map_err(|e| PolicyError::Io(e.to_string()))?;
        Ok(Self {
            rows,
            failures: Vec::new(),
        })
    }

    /// Median OOD success and action error against the augmentation ratio.
    pub fn plot_svg(&self) -> String {
        let ratios = self.ratios();
        let ticks: Vec<String> = ratios.iter().map(|r| format!("1:{r}")).collect();
        let success: Vec<f64> = ratios.iter().map(|&r| self.median_ood_success(r).unwrap_or(f64::NAN)).collect();
        let mse: Vec<f64> = ratios.iter().map(|&r| self.median_ood_mse(r).unwrap_or(f64::NAN)).collect();
        plot::line_chart(
            "Held-out performance vs augmentation ratio",
            "expert : augmented ratio",
            "median over seeds",
            &ticks,
            &[("OOD success rate".into(), success), ("OOD action MSE".into(), mse)],
        )
    }
}
