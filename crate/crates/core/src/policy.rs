//! State-conditioned diffusion policy over the mean-reverting SDE.
//!
//! The policy owns a noise-prediction network `ε_φ(s, aᵗ, t)` and a
//! [`NoiseSchedule`]. Actions are drawn by running the Gaussian posterior
//! chain from `aᵀ ~ N(0, I)` down to index 0, each step plugging the
//! network's reconstruction `â⁰` into `p(a^{t-1} | aᵗ, â⁰)`.
//!
//! Training combines noise matching with a critic-guided term evaluated on a
//! one-shot reconstruction from a fresh Gaussian draw, plus an entropy bonus
//! built from `log p(a¹ | aᵀ, â⁰)`, which is tractable because every factor is
//! a forward-SDE Gaussian.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, Tape, Tensor2, TimeEmbedding};
use crate::sde::{
    self, build_schedule, forward_params, gaussian_log_density, posterior_params, reverse_sde_step,
    NoiseSchedule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub steps: usize,
    pub terminal_coef: f64,
    /// Symmetric bound applied to reconstructions and final actions.
    pub action_bound: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            state_dim: 2,
            action_dim: 1,
            hidden: vec![64, 64],
            embed_dim: 16,
            steps: 5,
            terminal_coef: 1e-4,
            action_bound: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub noise_net: Mlp,
    pub sched: NoiseSchedule,
    pub embedding: TimeEmbedding,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: Option<f64>,
}

/// Result of drawing one action through the reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub a_t: Vec<f64>,
    /// `aᵀ, …, a⁰` when requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Which reverse-time update drives sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Gaussian posterior `p(a^{t-1} | aᵗ, â⁰)`.
    Posterior,
    /// Euler–Maruyama on the reverse-time SDE with the learned score.
    ReverseSde,
}

/// Index grid used at sampling time. Coarse index `k` of `sched` evaluates the
/// network at its own training index `net_index[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub sched: NoiseSchedule,
    pub net_index: Vec<usize>,
}

impl SamplingGrid {
    pub fn full(pol: &DiffusionPolicy) -> Self {
        Self {
            sched: pol.sched.clone(),
            net_index: (0..=pol.sched.steps()).collect(),
        }
    }

    /// `steps` evenly spaced indices of the policy's training schedule.
    pub fn strided(pol: &DiffusionPolicy, steps: usize) -> Result<Self> {
        let total = pol.sched.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "sampling steps must lie in [1, {total}], got {steps}"
            )));
        }
        if steps == total {
            return Ok(Self::full(pol));
        }
        let net_index: Vec<usize> = (0..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self {
            sched: pol.sched.subsample(&net_index)?,
            net_index,
        })
    }

    /// `steps` indices spaced quadratically, `⌈(k / steps)² T⌉`, so the
    /// grid is finest near the data end. Indices are forced to increase.
    pub fn quadratic(pol: &DiffusionPolicy, steps: usize) -> Result<Self> {
        let total = pol.sched.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "sampling steps must lie in [1, {total}], got {steps}"
            )));
        }
        let mut net_index = vec![0usize];
        for k in 1..=steps {
            let frac = k as f64 / steps as f64;
            let raw = (frac * frac * total as f64).ceil() as usize;
            // leave room for the remaining indices
            let hi = total - (steps - k);
            let lo = net_index[k - 1] + 1;
            net_index.push(raw.clamp(lo, hi));
        }
        Ok(Self {
            sched: pol.sched.subsample(&net_index)?,
            net_index,
        })
    }

    /// Grid of `steps` indices with the given spacing.
    pub fn with_spacing(pol: &DiffusionPolicy, steps: usize, spacing: GridSpacing) -> Result<Self> {
        match spacing {
            GridSpacing::Uniform => Self::strided(pol, steps),
            GridSpacing::Quadratic => Self::quadratic(pol, steps),
        }
    }

    pub fn steps(&self) -> usize {
        self.sched.steps()
    }
}

/// How a coarse sampling grid picks indices from the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpacing {
    Uniform,
    Quadratic,
}

/// Something that scores actions and differentiates the score with respect
/// to the action.
pub trait ActionValue {
    /// Per-row values and `∂value/∂action` for a batch.
    fn values_and_action_grads(
        &self,
        states: &Tensor2,
        actions: &Tensor2,
    ) -> Result<(Vec<f64>, Tensor2)>;
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        if cfg.action_dim == 0 {
            return Err(Error::InvalidArgument("action_dim must be positive".into()));
        }
        if let Some(b) = cfg.action_bound {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "action bound must be positive, got {b}"
                )));
            }
        }
        let embedding = TimeEmbedding::new(cfg.embed_dim, 10_000.0)?;
        let mut widths = vec![cfg.state_dim + cfg.action_dim + cfg.embed_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(cfg.action_dim);
        Ok(Self {
            noise_net: Mlp::new(&widths, rng)?,
            sched: build_schedule(cfg.steps, cfg.terminal_coef)?,
            embedding,
            state_dim: cfg.state_dim,
            action_dim: cfg.action_dim,
            action_bound: cfg.action_bound,
        })
    }

    pub fn steps(&self) -> usize {
        self.sched.steps()
    }

    fn check_batch(&self, states: &Tensor2, actions: &Tensor2) -> Result<()> {
        if states.cols() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        if actions.cols() != self.action_dim {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim,
                got: actions.cols(),
            });
        }
        if states.rows() != actions.rows() {
            return Err(Error::DimensionMismatch {
                expected: states.rows(),
                got: actions.rows(),
            });
        }
        Ok(())
    }

    fn net_input(&self, states: &Tensor2, a_t: &Tensor2, ts: &[usize]) -> Result<Tensor2> {
        self.check_batch(states, a_t)?;
        if ts.len() != states.rows() {
            return Err(Error::DimensionMismatch {
                expected: states.rows(),
                got: ts.len(),
            });
        }
        let width = self.noise_net.input_width();
        let mut data = Vec::with_capacity(states.rows() * width);
        for (r, &t) in ts.iter().enumerate() {
            data.extend_from_slice(states.row(r));
            data.extend_from_slice(a_t.row(r));
            self.embedding.embed_into(t, &mut data);
        }
        Tensor2::from_vec(states.rows(), width, data)
    }

    /// `ε̂` for a batch, keeping the tape for backpropagation.
    pub fn predict_noise_batch(
        &self,
        states: &Tensor2,
        a_t: &Tensor2,
        ts: &[usize],
    ) -> Result<(Tensor2, Tape)> {
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > self.steps()) {
            return Err(Error::InvalidArgument(format!(
                "diffusion index {bad} outside [1, {}]",
                self.steps()
            )));
        }
        let input = self.net_input(states, a_t, ts)?;
        self.noise_net.forward(&input)
    }

    pub fn predict_noise(&self, state: &[f64], a_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let s = Tensor2::from_rows(&[state])?;
        let a = Tensor2::from_rows(&[a_t])?;
        Ok(self.predict_noise_batch(&s, &a, &[t])?.0.into_vec())
    }

    fn clip(&self, v: f64) -> f64 {
        match self.action_bound {
            Some(b) => v.clamp(-b, b),
            None => v,
        }
    }

    /// Runs the reverse chain for every row of `states`.
    ///
    /// Returns `(a⁰, a¹, aᵀ)` batches and, when `record` is set, every
    /// intermediate state from `aᵀ` to `a⁰`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        states: &Tensor2,
        grid: &SamplingGrid,
        sampler: Sampler,
        rng: &mut R,
        record: bool,
    ) -> Result<(Tensor2, Tensor2, Tensor2, Vec<Tensor2>)> {
        let rows = states.rows();
        let dim = self.action_dim;
        let steps = grid.steps();
        let a_terminal = gaussian_matrix(rows, dim, rng);
        let mut a = a_terminal.clone();
        let mut a1 = a.clone();
        let mut trajectory = Vec::new();
        if record {
            trajectory.push(a.clone());
        }
        for k in (1..=steps).rev() {
            let net_t = grid.net_index[k];
            let ts = vec![net_t; rows];
            let (eps_hat, _) = self.predict_noise_batch(states, &a, &ts)?;
            let mut next = Tensor2::zeros(rows, dim);
            match sampler {
                Sampler::Posterior => {
                    let p = posterior_params(&grid.sched, k)?;
                    let inv_signal = grid.sched.theta_cum(k).exp();
                    let noise = grid.sched.noise_scale(k);
                    let std = p.beta_tilde.sqrt();
                    for r in 0..rows {
                        let (x, e) = (a.row(r), eps_hat.row(r));
                        let out = next.row_mut(r);
                        for d in 0..dim {
                            let a0_hat = self.clip(inv_signal * (x[d] - noise * e[d]));
                            let z: f64 = rng.sample(StandardNormal);
                            out[d] = p.coef_at * x[d] + p.coef_a0 * a0_hat + std * z;
                        }
                    }
                }
                Sampler::ReverseSde => {
                    for r in 0..rows {
                        let score = sde::score_from_noise(eps_hat.row(r), k, &grid.sched)?;
                        let out = reverse_sde_step(a.row(r), &score, k, &grid.sched, rng)?;
                        next.row_mut(r).copy_from_slice(&out);
                    }
                }
            }
            a = next;
            if k == 2 {
                a1 = a.clone();
            }
            if record {
                trajectory.push(a.clone());
            }
        }
        let mut a0 = a;
        a0.data_mut().iter_mut().for_each(|v| *v = self.clip(*v));
        Ok((a0, a1, a_terminal, trajectory))
    }

    /// Draws one action for `state` with the posterior chain.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        rng: &mut R,
        record_trajectory: bool,
    ) -> Result<SampledAction> {
        let s = Tensor2::from_rows(&[state])?;
        let grid = SamplingGrid::full(self);
        let (a0, a1, a_t, traj) =
            self.sample_batch(&s, &grid, Sampler::Posterior, rng, record_trajectory)?;
        Ok(SampledAction {
            a0: a0.into_vec(),
            a1: a1.into_vec(),
            a_t: a_t.into_vec(),
            trajectory: record_trajectory
                .then(|| traj.into_iter().map(Tensor2::into_vec).collect()),
        })
    }

    /// Final actions only, posterior chain on the full grid.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        states: &Tensor2,
        rng: &mut R,
    ) -> Result<Tensor2> {
        let grid = SamplingGrid::full(self);
        Ok(self
            .sample_batch(states, &grid, Sampler::Posterior, rng, false)?
            .0)
    }
}

/// Inputs drawn for one noise-matching evaluation.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor2,
    pub noisy: Tensor2,
}

/// Per-row uniform `t ∈ {1..T}`, `ε ~ N(0, I)` and `aᵗ` from the forward
/// marginal.
pub fn draw_diffusion_inputs<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    actions: &Tensor2,
    rng: &mut R,
) -> Result<DiffusionDraw> {
    let rows = actions.rows();
    let dim = actions.cols();
    let steps = pol.steps();
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
    let eps = gaussian_matrix(rows, dim, rng);
    let mut noisy = Tensor2::zeros(rows, dim);
    for r in 0..rows {
        let x = sde::perturb(actions.row(r), ts[r], eps.row(r), &pol.sched)?;
        noisy.row_mut(r).copy_from_slice(&x);
    }
    Ok(DiffusionDraw { ts, eps, noisy })
}

/// Batch mean of `‖ε̂ - ε‖²` and its gradient with respect to `ε̂`.
pub fn noise_matching_loss(pred: &Tensor2, eps: &Tensor2) -> Result<(f64, Tensor2)> {
    if pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            name: "noise prediction".into(),
            expected: eps.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let rows = pred.rows().max(1) as f64;
    let mut grad = Tensor2::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), e) in grad.data_mut().iter_mut().zip(pred.data()).zip(eps.data()) {
        let diff = p - e;
        loss += diff * diff;
        *g = 2.0 * diff / rows;
    }
    Ok((loss / rows, grad))
}

pub struct DiffusionLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Noise-matching loss on a batch of `(state, action)` pairs.
pub fn diffusion_loss<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    states: &Tensor2,
    actions: &Tensor2,
    rng: &mut R,
) -> Result<DiffusionLoss> {
    if states.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    pol.check_batch(states, actions)?;
    let draw = draw_diffusion_inputs(pol, actions, rng)?;
    let (pred, tape) = pol.predict_noise_batch(states, &draw.noisy, &draw.ts)?;
    let (loss, grad_out) = noise_matching_loss(&pred, &draw.eps)?;
    let (grads, _) = pol.noise_net.backward(&tape, &grad_out)?;
    Ok(DiffusionLoss { loss, grads })
}

/// Where the training-time reconstructions `(â⁰, â¹, aᵀ)` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionApprox {
    /// Fresh `aᵀ ~ N(0, I)` and one noise prediction at `t = T`.
    Terminal,
    /// Reuses the noise-matching draw: `â⁰` is reconstructed from the
    /// perturbed dataset action at its sampled `t`, and `aᵀ` continues the
    /// same forward path from `t` to `T`.
    DiffusionDraw,
    /// Runs the full posterior chain from a fresh `aᵀ` and backpropagates
    /// through every step.
    #[default]
    Chain,
}

/// One recorded step of a differentiable chain.
#[derive(Debug, Clone)]
struct ChainStep {
    tape: Tape,
    coef_at: f64,
    coef_a0: f64,
    inv_signal: f64,
    noise: f64,
    /// `1` where the reconstruction stayed inside the action bound.
    inside: Vec<f64>,
}

/// Training-time reconstruction used in place of running the chain.
#[derive(Debug, Clone)]
pub struct ApproxActions {
    pub a_terminal: Tensor2,
    pub eps_hat: Tensor2,
    pub a0: Tensor2,
    pub a1: Tensor2,
    /// Per-row `∂â⁰/∂ε̂ = −e^{θ̄_t} σ_t`.
    d_a0_d_eps: Vec<f64>,
    d_a1_d_a0: f64,
    /// Present when the reconstruction owns its network call.
    tape: Option<Tape>,
    /// Steps `T, …, 1` when the actions came from the full chain.
    chain: Vec<ChainStep>,
}

impl ApproxActions {
    /// `∂L/∂ε̂` given `∂L/∂â⁰` and `∂L/∂â¹`.
    pub fn eps_grad(&self, grad_a0: &Tensor2, grad_a1: &Tensor2) -> Tensor2 {
        let mut out = grad_a0.clone();
        let cols = out.cols().max(1);
        for (i, (g, g1)) in out.data_mut().iter_mut().zip(grad_a1.data()).enumerate() {
            *g = (*g + self.d_a1_d_a0 * g1) * self.d_a0_d_eps[i / cols];
        }
        out
    }

    /// Accumulates parameter gradients given `∂L/∂â⁰` and `∂L/∂â¹`.
    pub fn backward_into(
        &self,
        pol: &DiffusionPolicy,
        grad_a0: &Tensor2,
        grad_a1: &Tensor2,
        grads: &mut [f64],
    ) -> Result<()> {
        if !self.chain.is_empty() {
            return self.chain_backward(pol, grad_a0, grad_a1, grads);
        }
        let tape = self.tape.as_ref().ok_or_else(|| {
            Error::InvalidArgument("reconstruction shares the noise-matching tape".into())
        })?;
        pol.noise_net
            .backward_into(tape, &self.eps_grad(grad_a0, grad_a1), grads)?;
        Ok(())
    }

    fn chain_backward(
        &self,
        pol: &DiffusionPolicy,
        grad_a0: &Tensor2,
        grad_a1: &Tensor2,
        grads: &mut [f64],
    ) -> Result<()> {
        let (rows, dim) = (grad_a0.rows(), grad_a0.cols());
        let offset = pol.state_dim;
        // `g` holds ∂L/∂a^{k-1} on entry to step k
        let mut g = grad_a0.clone();
        for (i, step) in self.chain.iter().rev().enumerate() {
            let k = i + 1;
            let mut d_eps = Tensor2::zeros(rows, dim);
            let mut d_x0 = Tensor2::zeros(rows, dim);
            for j in 0..rows * dim {
                let dx = step.coef_a0 * g.data()[j] * step.inside[j];
                d_x0.data_mut()[j] = dx;
                d_eps.data_mut()[j] = -dx * step.inv_signal * step.noise;
            }
            let input_grad = pol.noise_net.backward_into(&step.tape, &d_eps, grads)?;
            let mut next = Tensor2::zeros(rows, dim);
            for r in 0..rows {
                let ig = &input_grad.row(r)[offset..offset + dim];
                for d in 0..dim {
                    let j = r * dim + d;
                    next.data_mut()[j] = step.coef_at * g.data()[j]
                        + step.inv_signal * d_x0.data()[j]
                        + ig[d];
                }
            }
            if k == 1 {
                for (v, e) in next.data_mut().iter_mut().zip(grad_a1.data()) {
                    *v += e;
                }
            }
            g = next;
        }
        Ok(())
    }
}

/// Runs the posterior chain on the full grid and records every step for
/// backpropagation. `â¹` is the chain state entering the last step.
pub fn chain_actions_batch<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    states: &Tensor2,
    rng: &mut R,
) -> Result<ApproxActions> {
    let (rows, dim) = (states.rows(), pol.action_dim);
    let steps = pol.steps();
    let a_terminal = gaussian_matrix(rows, dim, rng);
    let mut a = a_terminal.clone();
    let mut a1 = a.clone();
    let mut eps_last = Tensor2::zeros(rows, dim);
    let mut chain = Vec::with_capacity(steps);
    for k in (1..=steps).rev() {
        if k == 1 {
            a1 = a.clone();
        }
        let (eps_hat, tape) = pol.predict_noise_batch(states, &a, &vec![k; rows])?;
        let p = posterior_params(&pol.sched, k)?;
        let inv_signal = pol.sched.theta_cum(k).exp();
        let noise = pol.sched.noise_scale(k);
        let std = p.beta_tilde.sqrt();
        let mut inside = vec![1.0; rows * dim];
        let mut next = Tensor2::zeros(rows, dim);
        for j in 0..rows * dim {
            let raw = inv_signal * (a.data()[j] - noise * eps_hat.data()[j]);
            let x0 = pol.clip(raw);
            if x0 != raw {
                inside[j] = 0.0;
            }
            let z: f64 = if std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            next.data_mut()[j] = p.coef_at * a.data()[j] + p.coef_a0 * x0 + std * z;
        }
        chain.push(ChainStep {
            tape,
            coef_at: p.coef_at,
            coef_a0: p.coef_a0,
            inv_signal,
            noise,
            inside,
        });
        a = next;
        eps_last = eps_hat;
    }
    Ok(ApproxActions {
        a_terminal,
        eps_hat: eps_last,
        a0: a,
        a1,
        d_a0_d_eps: Vec::new(),
        d_a1_d_a0: 0.0,
        tape: None,
        chain,
    })
}

/// `â⁰` from `(aᵗ, ε̂)` at per-row indices, `â¹` by re-perturbing it with
/// fresh noise.
fn reconstruct(
    pol: &DiffusionPolicy,
    noisy: &Tensor2,
    eps_hat: &Tensor2,
    ts: &[usize],
    rng: &mut (impl Rng + ?Sized),
) -> (Tensor2, Tensor2, Vec<f64>) {
    let (rows, dim) = (noisy.rows(), noisy.cols());
    let z = gaussian_matrix(rows, dim, rng);
    let signal_1 = pol.sched.signal_coef(1);
    let noise_1 = pol.sched.noise_scale(1);
    let mut a0 = Tensor2::zeros(rows, dim);
    let mut a1 = Tensor2::zeros(rows, dim);
    let mut d_a0_d_eps = Vec::with_capacity(rows);
    for (r, &t) in ts.iter().enumerate() {
        let inv_signal = pol.sched.theta_cum(t).exp();
        let noise_t = pol.sched.noise_scale(t);
        d_a0_d_eps.push(-inv_signal * noise_t);
        for d in 0..dim {
            let i = r * dim + d;
            let x0 = inv_signal * (noisy.data()[i] - noise_t * eps_hat.data()[i]);
            a0.data_mut()[i] = x0;
            a1.data_mut()[i] = signal_1 * x0 + noise_1 * z.data()[i];
        }
    }
    (a0, a1, d_a0_d_eps)
}

/// Draws `aᵀ ~ N(0, I)`, predicts `ε̂` at `t = T`, reconstructs
/// `â⁰ = e^{θ̄_T}(aᵀ − σ_T ε̂)` and re-perturbs it to `â¹` with fresh noise.
pub fn approx_actions_batch<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    states: &Tensor2,
    rng: &mut R,
) -> Result<ApproxActions> {
    let rows = states.rows();
    let steps = pol.steps();
    let a_terminal = gaussian_matrix(rows, pol.action_dim, rng);
    let ts = vec![steps; rows];
    let (eps_hat, tape) = pol.predict_noise_batch(states, &a_terminal, &ts)?;
    let (a0, a1, d_a0_d_eps) = reconstruct(pol, &a_terminal, &eps_hat, &ts, rng);
    Ok(ApproxActions {
        a_terminal,
        eps_hat,
        a0,
        a1,
        d_a0_d_eps,
        d_a1_d_a0: pol.sched.signal_coef(1),
        tape: Some(tape),
        chain: Vec::new(),
    })
}

/// Reconstruction from a noise-matching draw and its prediction. `aᵀ`
/// extends each row's forward path from its `t` to `T` with fresh noise.
pub fn approx_actions_from_draw<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    draw: &DiffusionDraw,
    eps_hat: &Tensor2,
    rng: &mut R,
) -> Result<ApproxActions> {
    if eps_hat.shape() != draw.noisy.shape() {
        return Err(Error::ShapeMismatch {
            name: "noise prediction".into(),
            expected: draw.noisy.shape().to_vec(),
            got: eps_hat.shape().to_vec(),
        });
    }
    let (a0, a1, d_a0_d_eps) = reconstruct(pol, &draw.noisy, eps_hat, &draw.ts, rng);
    let steps = pol.steps();
    let dim = pol.action_dim;
    let z = gaussian_matrix(draw.noisy.rows(), dim, rng);
    let mut a_terminal = draw.noisy.clone();
    for (r, &t) in draw.ts.iter().enumerate() {
        if t == steps {
            continue;
        }
        let (m, v) = forward_params(&pol.sched, t, steps)?;
        let sd = v.sqrt();
        for (x, e) in a_terminal.row_mut(r).iter_mut().zip(z.row(r)) {
            *x = m * *x + sd * e;
        }
    }
    Ok(ApproxActions {
        a_terminal,
        eps_hat: eps_hat.clone(),
        a0,
        a1,
        d_a0_d_eps,
        d_a1_d_a0: pol.sched.signal_coef(1),
        tape: None,
        chain: Vec::new(),
    })
}

/// Single-state form of [`approx_actions_batch`].
pub fn approx_actions_for_training<R: Rng + ?Sized>(
    pol: &DiffusionPolicy,
    state: &[f64],
    rng: &mut R,
) -> Result<SampledAction> {
    let s = Tensor2::from_rows(&[state])?;
    let approx = approx_actions_batch(pol, &s, rng)?;
    Ok(SampledAction {
        a0: approx.a0.into_vec(),
        a1: approx.a1.into_vec(),
        a_t: approx.a_terminal.into_vec(),
        trajectory: None,
    })
}

/// `log p(a¹ | aᵀ, â⁰)` and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbA1 {
    pub value: f64,
    pub grad_a1: Vec<f64>,
    pub grad_a0: Vec<f64>,
}

/// Bayes-rule form of the index-1 marginal:
/// `log p(aᵀ | a¹) + log p(a¹ | â⁰) − log p(aᵀ | â⁰)`.
pub fn log_prob_a1(
    sched: &NoiseSchedule,
    a1: &[f64],
    a_terminal: &[f64],
    a0_hat: &[f64],
) -> Result<LogProbA1> {
    let steps = sched.steps();
    if steps < 2 {
        return Err(Error::InvalidArgument(
            "entropy estimate needs T >= 2".into(),
        ));
    }
    if a1.len() != a_terminal.len() || a1.len() != a0_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: a1.len(),
            got: a_terminal.len().max(a0_hat.len()),
        });
    }
    let (m_1t, v_1t) = forward_params(sched, 1, steps)?;
    let (m_01, v_01) = forward_params(sched, 0, 1)?;
    let (m_0t, v_0t) = forward_params(sched, 0, steps)?;
    let mean_1t: Vec<f64> = a1.iter().map(|x| x * m_1t).collect();
    let mean_01: Vec<f64> = a0_hat.iter().map(|x| x * m_01).collect();
    let mean_0t: Vec<f64> = a0_hat.iter().map(|x| x * m_0t).collect();
    let value = gaussian_log_density(a_terminal, &mean_1t, v_1t)
        + gaussian_log_density(a1, &mean_01, v_01)
        - gaussian_log_density(a_terminal, &mean_0t, v_0t);
    let mut grad_a1 = Vec::with_capacity(a1.len());
    let mut grad_a0 = Vec::with_capacity(a1.len());
    for d in 0..a1.len() {
        let r_1t = a_terminal[d] - mean_1t[d];
        let r_01 = a1[d] - mean_01[d];
        let r_0t = a_terminal[d] - mean_0t[d];
        grad_a1.push(m_1t * r_1t / v_1t - r_01 / v_01);
        grad_a0.push(m_01 * r_01 / v_01 - m_0t * r_0t / v_0t);
    }
    Ok(LogProbA1 {
        value,
        grad_a1,
        grad_a0,
    })
}

#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub diffusion_loss: f64,
    /// Mean critic value at the reconstructed actions.
    pub mean_q: f64,
    /// Batch mean of `|Q|` used for the λ normalization.
    pub mean_abs_q: f64,
    pub lambda: f64,
    /// Batch mean of `−log p(â¹ | aᵀ, â⁰)`.
    pub entropy: f64,
    /// Per-row `−log p(â¹ | aᵀ, â⁰)`, zero when the entropy term is inactive.
    pub neg_log_prob: Vec<f64>,
}

type LogProbFn = dyn Fn(&NoiseSchedule, &[f64], &[f64], &[f64]) -> Result<LogProbA1>;

/// Entropy-regularized policy objective
/// `L_diff − λ · mean[Q(s, â⁰) − α(s) log p(â¹ | aᵀ, â⁰)]`, with
/// `λ = eta_weight / mean|Q|` treated as a constant.
///
/// `alpha` holds one temperature per batch row. The entropy term is skipped
/// when every temperature is zero, which also allows `T = 1`.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss<R: Rng + ?Sized, C: ActionValue + ?Sized>(
    pol: &DiffusionPolicy,
    critic: &C,
    states: &Tensor2,
    actions: &Tensor2,
    alpha: &[f64],
    eta_weight: f64,
    approx: ActionApprox,
    rng: &mut R,
) -> Result<PolicyLoss> {
    policy_loss_with(
        pol,
        critic,
        states,
        actions,
        alpha,
        eta_weight,
        approx,
        rng,
        &log_prob_a1,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn policy_loss_with<R: Rng + ?Sized, C: ActionValue + ?Sized>(
    pol: &DiffusionPolicy,
    critic: &C,
    states: &Tensor2,
    actions: &Tensor2,
    alpha: &[f64],
    eta_weight: f64,
    approx_mode: ActionApprox,
    rng: &mut R,
    log_prob: &LogProbFn,
) -> Result<PolicyLoss> {
    let rows = states.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if alpha.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: alpha.len(),
        });
    }
    if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "entropy temperature must be non-negative, got {a}"
        )));
    }
    pol.check_batch(states, actions)?;
    let draw = draw_diffusion_inputs(pol, actions, rng)?;
    let (pred, diff_tape) = pol.predict_noise_batch(states, &draw.noisy, &draw.ts)?;
    let (diff_loss, diff_grad) = noise_matching_loss(&pred, &draw.eps)?;

    let approx = match approx_mode {
        ActionApprox::Terminal => approx_actions_batch(pol, states, rng)?,
        ActionApprox::DiffusionDraw => approx_actions_from_draw(pol, &draw, &pred, rng)?,
        ActionApprox::Chain => chain_actions_batch(pol, states, rng)?,
    };
    let (q, dq_da) = critic.values_and_action_grads(states, &approx.a0)?;
    let n = rows as f64;
    let mean_q = q.iter().sum::<f64>() / n;
    let mean_abs_q = q.iter().map(|v| v.abs()).sum::<f64>() / n;
    let lambda = eta_weight / mean_abs_q.max(1e-6);

    let entropy_active = alpha.iter().any(|a| *a > 0.0);
    let dim = pol.action_dim;
    let mut grad_a0 = Tensor2::zeros(rows, dim);
    let mut grad_a1 = Tensor2::zeros(rows, dim);
    let mut neg_log_prob = vec![0.0; rows];
    let mut weighted_log_prob = 0.0;
    for r in 0..rows {
        let g0 = grad_a0.row_mut(r);
        for (g, dq) in g0.iter_mut().zip(dq_da.row(r)) {
            *g = -lambda / n * dq;
        }
        if entropy_active {
            let lp = log_prob(
                &pol.sched,
                approx.a1.row(r),
                approx.a_terminal.row(r),
                approx.a0.row(r),
            )?;
            neg_log_prob[r] = -lp.value;
            weighted_log_prob += alpha[r] * lp.value;
            let scale = lambda * alpha[r] / n;
            for (g, v) in g0.iter_mut().zip(&lp.grad_a0) {
                *g += scale * v;
            }
            for (g, v) in grad_a1.row_mut(r).iter_mut().zip(&lp.grad_a1) {
                *g = scale * v;
            }
        }
    }
    let mut grads = vec![0.0; pol.noise_net.param_count()];
    match approx_mode {
        ActionApprox::Terminal | ActionApprox::Chain => {
            pol.noise_net
                .backward_into(&diff_tape, &diff_grad, &mut grads)?;
            approx.backward_into(pol, &grad_a0, &grad_a1, &mut grads)?;
        }
        ActionApprox::DiffusionDraw => {
            let mut total = diff_grad;
            let extra = approx.eps_grad(&grad_a0, &grad_a1);
            for (g, e) in total.data_mut().iter_mut().zip(extra.data()) {
                *g += e;
            }
            pol.noise_net
                .backward_into(&diff_tape, &total, &mut grads)?;
        }
    }
    let loss = diff_loss - lambda * (mean_q - weighted_log_prob / n);
    Ok(PolicyLoss {
        loss,
        grads,
        diffusion_loss: diff_loss,
        mean_q,
        mean_abs_q,
        lambda,
        entropy: neg_log_prob.iter().sum::<f64>() / n,
        neg_log_prob,
    })
}
