//! Desk-scale environments and offline data sources.
//!
//! [`ToyChainEnv`] is a two-step chain: the agent starts at position 0, moves
//! twice by a bounded action and is paid once, at the end, by a mixture of
//! Gaussian bumps over the final position. The default behavior data mostly
//! heads for the low bump, so the high one is under-represented.
//!
//! [`StaticDistribution2D`] is the ring-of-Gaussians target used by the
//! sampler comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::TransitionBatch;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// One Gaussian bump of the terminal reward. `weight` is the peak height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Two-step chain over a scalar position.
///
/// Observations are `[position, steps_taken]`; actions are scalars clamped to
/// `[-action_bound, action_bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyChainEnv {
    pub horizon: usize,
    pub action_bound: f64,
    pub reward_mixture: Vec<RewardComponent>,
}

impl Default for ToyChainEnv {
    fn default() -> Self {
        Self {
            horizon: 2,
            action_bound: 1.0,
            reward_mixture: vec![
                RewardComponent {
                    weight: 0.6,
                    mean: -0.8,
                    std: 0.25,
                },
                RewardComponent {
                    weight: 1.0,
                    mean: 1.2,
                    std: 0.15,
                },
            ],
        }
    }
}

pub const TOY_STATE_DIM: usize = 2;
pub const TOY_ACTION_DIM: usize = 1;

impl ToyChainEnv {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::InvalidArgument(
                "action bound must be positive".into(),
            ));
        }
        if self.reward_mixture.is_empty()
            || self
                .reward_mixture
                .iter()
                .any(|c| !(c.weight > 0.0) || !(c.std > 0.0))
        {
            return Err(Error::InvalidArgument(
                "reward mixture needs positive weights and std".into(),
            ));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    /// Mixture value at a terminal position.
    pub fn reward_at(&self, x: f64) -> f64 {
        self.reward_mixture
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.std;
                c.weight * (-0.5 * z * z).exp()
            })
            .sum()
    }

    pub fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let a = action[0].clamp(-self.action_bound, self.action_bound);
        let pos = state[0] + a;
        let taken = state[1] + 1.0;
        let done = taken as usize >= self.horizon;
        let reward = if done { self.reward_at(pos) } else { 0.0 };
        (vec![pos, taken], reward, done)
    }

    /// Largest attainable return: the mixture maximum over reachable
    /// positions.
    pub fn peak_return(&self) -> f64 {
        self.argmax_position().1
    }

    /// `(position, reward)` of the reachable mixture maximum, by dense grid
    /// search refined with golden-section search.
    pub fn argmax_position(&self) -> (f64, f64) {
        let reach = self.horizon as f64 * self.action_bound;
        let n = 20_000;
        let h = 2.0 * reach / n as f64;
        let best = (0..=n)
            .map(|i| -reach + i as f64 * h)
            .max_by(|a, b| self.reward_at(*a).total_cmp(&self.reward_at(*b)))
            .unwrap();
        let (mut lo, mut hi) = ((best - h).max(-reach), (best + h).min(reach));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = hi - g * (hi - lo);
            let d = lo + g * (hi - lo);
            if self.reward_at(c) > self.reward_at(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        let x = 0.5 * (lo + hi);
        (x, self.reward_at(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorComponent {
    pub weight: f64,
    /// Terminal position this component steers toward.
    pub target: f64,
}

/// Mixture of goal-seeking behavior policies. One component is drawn per
/// episode; each step moves an even share of the remaining distance to its
/// target plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub components: Vec<BehaviorComponent>,
    pub noise_std: f64,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self {
            components: vec![
                BehaviorComponent {
                    weight: 0.9,
                    target: -0.8,
                },
                BehaviorComponent {
                    weight: 0.1,
                    target: 1.2,
                },
            ],
            noise_std: 0.1,
        }
    }
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.is_empty()
            || self.components.iter().any(|c| !(c.weight > 0.0))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(
                "behavior weights must be positive and sum to 1".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise std must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &BehaviorComponent {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    /// Serialized description of the generating environment.
    pub env: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Dataset {
    pub fn new(
        transitions: Vec<Transition>,
        env: String,
        seed: u64,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        for t in &transitions {
            if t.state.len() != state_dim
                || t.next_state.len() != state_dim
                || t.action.len() != action_dim
            {
                return Err(Error::DimensionInconsistent(format!(
                    "transition shapes ({}, {}, {}) do not match ({state_dim}, {action_dim})",
                    t.state.len(),
                    t.action.len(),
                    t.next_state.len()
                )));
            }
            if !t.reward.is_finite() {
                return Err(Error::InvalidArgument("non-finite reward".into()));
            }
        }
        Ok(Self {
            transitions,
            env,
            seed,
            state_dim,
            action_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn batch_from_indices(&self, indices: &[usize]) -> Result<TransitionBatch> {
        let mut states = Tensor2::zeros(indices.len(), self.state_dim);
        let mut actions = Tensor2::zeros(indices.len(), self.action_dim);
        let mut next_states = Tensor2::zeros(indices.len(), self.state_dim);
        let mut rewards = Vec::with_capacity(indices.len());
        let mut dones = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let t = self.transitions.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("transition index {i} out of range"))
            })?;
            states.row_mut(r).copy_from_slice(&t.state);
            actions.row_mut(r).copy_from_slice(&t.action);
            next_states.row_mut(r).copy_from_slice(&t.next_state);
            rewards.push(t.reward);
            dones.push(t.done);
        }
        Ok(TransitionBatch {
            states,
            actions,
            rewards,
            next_states,
            dones,
        })
    }

    /// Uniform minibatch, with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        size: usize,
        rng: &mut R,
    ) -> Result<TransitionBatch> {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch_from_indices(&idx)
    }
}

/// Rolls out `n_episodes` behavior episodes with a generator seeded by `seed`.
pub fn gen_dataset(
    env: &ToyChainEnv,
    behavior: &BehaviorSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    env.validate()?;
    behavior.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_episodes * env.horizon);
    for _ in 0..n_episodes {
        let goal = behavior.pick(&mut rng).target;
        let mut state = env.initial_state();
        loop {
            let remaining = (env.horizon as f64 - state[1]).max(1.0);
            let noise: f64 = rng.sample(StandardNormal);
            let raw = (goal - state[0]) / remaining + behavior.noise_std * noise;
            let action = vec![raw.clamp(-env.action_bound, env.action_bound)];
            let (next_state, reward, done) = env.step(&state, &action);
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state: next_state.clone(),
                done,
            });
            if done {
                break;
            }
            state = next_state;
        }
    }
    let descriptor = serde_json::to_string(env).expect("env serializes");
    Dataset::new(transitions, descriptor, seed, TOY_STATE_DIM, TOY_ACTION_DIM)
}

/// Mean and population standard deviation of episode returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl ReturnStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Rolls out `policy` for `n_episodes` episodes.
pub fn episode_return<R, P>(
    env: &ToyChainEnv,
    mut policy: P,
    n_episodes: usize,
    rng: &mut R,
) -> Result<ReturnStats>
where
    R: Rng + ?Sized,
    P: FnMut(&[f64], &mut R) -> Result<Vec<f64>>,
{
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = env.initial_state();
        let mut total = 0.0;
        loop {
            let action = policy(&state, rng)?;
            let (next, reward, done) = env.step(&state, &action);
            total += reward;
            if done {
                break;
            }
            state = next;
        }
        returns.push(total);
    }
    Ok(ReturnStats::from_returns(returns))
}

/// Equal-weight Gaussian blobs evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticDistribution2D {
    pub count: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for StaticDistribution2D {
    fn default() -> Self {
        Self {
            count: 8,
            radius: 2.0,
            std: 0.1,
        }
    }
}

impl StaticDistribution2D {
    pub fn means(&self) -> Vec<[f64; 2]> {
        (0..self.count)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / self.count as f64;
                [self.radius * angle.cos(), self.radius * angle.sin()]
            })
            .collect()
    }

    /// Index of the nearest component mean.
    pub fn nearest_mode(&self, p: &[f64]) -> usize {
        self.means()
            .iter()
            .enumerate()
            .map(|(k, m)| (k, (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    /// Points together with the component each was drawn from.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Result<Vec<([f64; 2], usize)>> {
        if self.count < 2 {
            return Err(Error::InvalidArgument(
                "need at least two components".into(),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let means = self.means();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let k = rng.random_range(0..self.count);
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                (
                    [means[k][0] + self.std * zx, means[k][1] + self.std * zy],
                    k,
                )
            })
            .collect())
    }
}

pub fn sample_static(dist: &StaticDistribution2D, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    Ok(dist
        .sample_labeled(n, seed)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}
