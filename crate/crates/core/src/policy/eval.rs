//! Open-loop action error and closed-loop success on held-out scenes.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed::derive_seed;

use super::model::ToyPolicy;
use super::scene::{expert_action, step_position, SceneRenderer, Split, SyntheticSceneConfig};
use super::PolicyError;

/// What a policy sees at one step. `position` and `goal` are privileged
/// simulator state; learned policies ignore them.
pub struct Observation<'a> {
    pub image: &'a RgbImage,
    pub proprio: &'a [f64],
    pub position: [f64; 2],
    pub goal: [f64; 2],
}

pub trait Policy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<[f64; 2], PolicyError>;
}

impl Policy for ToyPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<[f64; 2], PolicyError> {
        let a = ToyPolicy::act(self, obs.image, obs.proprio)?;
        if a.len() != 2 {
            return Err(PolicyError::Config(format!("policy emits {}-d actions, scene needs 2", a.len())));
        }
        Ok([a[0], a[1]])
    }
}

/// The closed-form controller that generated the demonstrations.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedExpert {
    pub max_step: f64,
}

impl Policy for ScriptedExpert {
    fn act(&mut self, obs: &Observation<'_>) -> Result<[f64; 2], PolicyError> {
        Ok(expert_action(obs.position, obs.goal, self.max_step))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, _obs: &Observation<'_>) -> Result<[f64; 2], PolicyError> {
        Ok([0.0, 0.0])
    }
}

/// Full-length steps in uniformly random directions.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn direction(&mut self) -> [f64; 2] {
        let theta = self.rng.random_range(0.0..std::f64::consts::TAU);
        [theta.cos(), theta.sin()]
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation<'_>) -> Result<[f64; 2], PolicyError> {
        Ok(self.direction())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error against the expert action, over expert-visited
    /// states.
    pub action_mse: f64,
    /// Fraction of closed-loop rollouts ending within the goal radius.
    pub success_rate: f64,
    pub episodes: usize,
}

fn within_goal(pos: [f64; 2], goal: [f64; 2], radius: f64) -> bool {
    (pos[0] - goal[0]).hypot(pos[1] - goal[1]) <= radius
}

/// Evaluates `policy` on `n_episodes` freshly sampled episodes of `split`.
pub fn evaluate(
    policy: &mut dyn Policy,
    cfg: &SyntheticSceneConfig,
    split: Split,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalMetrics, PolicyError> {
    if n_episodes == 0 {
        return Err(PolicyError::Config("evaluation needs at least one episode".into()));
    }
    let mut renderer = SceneRenderer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval-{split:?}")));
    let (mut sq, mut count, mut successes) = (0.0, 0usize, 0usize);
    for _ in 0..n_episodes {
        let ep = renderer.sample_episode(split, &mut rng);
        for pos in renderer.expert_positions(&ep) {
            let (image, _, _) = renderer.render(&ep, pos);
            let proprio = renderer.proprio(pos);
            let a = policy.act(&Observation {
                image: &image,
                proprio: &proprio,
                position: pos,
                goal: ep.goal,
            })?;
            let e = expert_action(pos, ep.goal, cfg.max_step);
            sq += (a[0] - e[0]).powi(2) + (a[1] - e[1]).powi(2);
            count += 2;
        }
        let mut pos = ep.start;
        for _ in 1..cfg.episode_length {
            let (image, _, _) = renderer.render(&ep, pos);
            let proprio = renderer.proprio(pos);
            let a = policy.act(&Observation {
                image: &image,
                proprio: &proprio,
                position: pos,
                goal: ep.goal,
            })?;
            if !a.iter().all(|v| v.is_finite()) {
                return Err(PolicyError::Config("policy emitted a non-finite action".into()));
            }
            pos = step_position(pos, a, cfg.max_step);
        }
        successes += usize::from(within_goal(pos, ep.goal, cfg.goal_radius));
    }
    Ok(EvalMetrics {
        action_mse: sq / count as f64,
        success_rate: successes as f64 / n_episodes as f64,
        episodes: n_episodes,
    })
}

/// Evaluation on the held-out texture bank (plus distractors, if any).
pub fn evaluate_ood(
    policy: &mut dyn Policy,
    cfg: &SyntheticSceneConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalMetrics, PolicyError> {
    evaluate(policy, cfg, Split::Test, n_episodes, seed)
}

/// Monte-Carlo success rate of random-direction full steps, simulated on
/// positions only.
pub fn random_walk_success_rate(cfg: &SyntheticSceneConfig, n_episodes: usize, seed: u64) -> Result<f64, PolicyError> {
    let renderer = SceneRenderer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    for _ in 0..n_episodes {
        let ep = renderer.sample_episode(Split::Test, &mut rng);
        let mut pos = ep.start;
        for _ in 1..cfg.episode_length {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            pos = step_position(pos, [theta.cos(), theta.sin()], cfg.max_step);
        }
        successes += usize::from(within_goal(pos, ep.goal, cfg.goal_radius));
    }
    Ok(successes as f64 / n_episodes as f64)
}
