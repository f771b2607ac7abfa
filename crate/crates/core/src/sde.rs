//! Closed-form mathematics of the zero-mean mean-reverting SDE
//!
//! ```text
//! da = -θ_t a dt + σ_t dw,    σ_t² = 2 θ_t
//! ```
//!
//! discretized on integer indices `t ∈ {0, …, T}` with unit spacing. Every
//! quantity is a function of the per-step integrals `θ′_t = ∫_{t-1}^{t} θ_z dz`
//! and their running sums `θ̄_t`, both held by [`NoiseSchedule`].
//!
//! Nothing in this module is learned. The functions are pure apart from the
//! random stream handed to the samplers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Ratio `θ′_T / θ′_1` of the linear per-step ramp produced by [`build_schedule`].
pub const RAMP_RATIO: f64 = 10.0;

/// `1 - e^{-2x}` without cancellation for small `x`.
#[inline]
pub fn one_minus_exp_neg2(x: f64) -> f64 {
    -(-2.0 * x).exp_m1()
}

/// Discretized mean-reversion rates.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `theta_step[t - 1] = θ′_t` for `t = 1..=T`.
    theta_step: Vec<f64>,
    /// `theta_cum[t] = θ̄_t`, `theta_cum[0] = 0`.
    theta_cum: Vec<f64>,
}

/// A diffusion state tagged with its index.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub value: Vec<f64>,
    pub t: usize,
}

/// Builds the default schedule: `θ′_t` ramps linearly from `θ′_1` to
/// `θ′_T = 10 θ′_1`, scaled so that `e^{-2 θ̄_T} = terminal_coef`.
///
/// With `T = 1` the single step carries the whole integral.
pub fn build_schedule(steps: usize, terminal_coef: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(terminal_coef > 0.0 && terminal_coef < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "terminal coefficient must lie in (0, 1), got {terminal_coef}"
        )));
    }
    let total = -0.5 * terminal_coef.ln();
    let shape: Vec<f64> = if steps == 1 {
        vec![1.0]
    } else {
        (0..steps)
            .map(|i| 1.0 + (RAMP_RATIO - 1.0) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let norm: f64 = shape.iter().sum();
    let theta_step: Vec<f64> = shape.iter().map(|w| total * w / norm).collect();
    let mut theta_cum = Vec::with_capacity(steps + 1);
    theta_cum.push(0.0);
    let mut acc = 0.0;
    for s in &theta_step {
        acc += s;
        theta_cum.push(acc);
    }
    // pin the endpoint against summation drift
    theta_cum[steps] = total;
    Ok(NoiseSchedule {
        theta_step,
        theta_cum,
    })
}

impl NoiseSchedule {
    /// Rebuilds a schedule from cumulative values `θ̄_0 = 0 < θ̄_1 < … < θ̄_T`.
    pub fn from_cumulative(theta_cum: Vec<f64>) -> Result<Self> {
        if theta_cum.len() < 2 {
            return Err(Error::InvalidArgument(
                "cumulative schedule needs at least two entries".into(),
            ));
        }
        if theta_cum[0] != 0.0 {
            return Err(Error::InvalidArgument("theta_cum[0] must be 0".into()));
        }
        let theta_step: Vec<f64> = theta_cum.windows(2).map(|w| w[1] - w[0]).collect();
        if theta_step.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "theta_cum must be strictly increasing and finite".into(),
            ));
        }
        Ok(Self {
            theta_step,
            theta_cum,
        })
    }

    /// Coarser schedule visiting the given indices of `self`, which must start
    /// at 0, end at `T` and increase strictly.
    pub fn subsample(&self, indices: &[usize]) -> Result<Self> {
        if indices.first() != Some(&0) || indices.last() != Some(&self.steps()) {
            return Err(Error::InvalidArgument(
                "subsample indices must run from 0 to T".into(),
            ));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "subsample indices must increase strictly".into(),
            ));
        }
        Self::from_cumulative(indices.iter().map(|&i| self.theta_cum[i]).collect())
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.theta_step.len()
    }

    /// `θ′_t` for `1 ≤ t ≤ T`.
    pub fn theta_step(&self, t: usize) -> f64 {
        self.theta_step[t - 1]
    }

    /// `θ̄_t` for `0 ≤ t ≤ T`.
    pub fn theta_cum(&self, t: usize) -> f64 {
        self.theta_cum[t]
    }

    pub fn theta_steps(&self) -> &[f64] {
        &self.theta_step
    }

    pub fn theta_cums(&self) -> &[f64] {
        &self.theta_cum
    }

    /// `e^{-θ̄_t}`, the signal coefficient of the marginal at `t`.
    pub fn signal_coef(&self, t: usize) -> f64 {
        (-self.theta_cum[t]).exp()
    }

    /// `√(1 - e^{-2θ̄_t})`, the noise scale of the marginal at `t`.
    pub fn noise_scale(&self, t: usize) -> f64 {
        one_minus_exp_neg2(self.theta_cum[t]).sqrt()
    }

    /// True when the terminal marginal is within 1e-2 of the standard Gaussian
    /// in its mean coefficient.
    pub fn reaches_prior(&self) -> bool {
        self.signal_coef(self.steps()) <= 1e-2 * (1.0 + 1e-12)
    }

    fn check_index(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return Err(Error::InvalidArgument(format!(
                "diffusion index {t} outside [{}, {}]",
                if allow_zero { 0 } else { 1 },
                self.steps()
            )));
        }
        Ok(())
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Mean coefficient and variance of `p(a^t | a^τ)`.
pub fn forward_params(sched: &NoiseSchedule, tau: usize, t: usize) -> Result<(f64, f64)> {
    if tau >= t {
        return Err(Error::InvalidArgument(format!(
            "forward transition needs tau < t, got tau={tau}, t={t}"
        )));
    }
    sched.check_index(t, false)?;
    let delta = sched.theta_cum[t] - sched.theta_cum[tau];
    Ok(((-delta).exp(), one_minus_exp_neg2(delta)))
}

/// `a^t = a⁰ e^{-θ̄_t} + √(1 - e^{-2θ̄_t}) ε`.
pub fn perturb(a0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dims(a0.len(), eps.len())?;
    let (mean, var) = forward_params(sched, 0, t)?;
    let std = var.sqrt();
    Ok(a0
        .iter()
        .zip(eps)
        .map(|(a, e)| a * mean + std * e)
        .collect())
}

/// Conditional score `∇ log p_t(a | a⁰) = -ε / √(1 - e^{-2θ̄_t})`.
pub fn score_from_noise(eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_index(t, false)?;
    let std = sched.noise_scale(t);
    Ok(eps.iter().map(|e| -e / std).collect())
}

/// Coefficients of the Gaussian posterior `p(a^{t-1} | a^t, a⁰)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    pub coef_at: f64,
    pub coef_a0: f64,
    pub beta_tilde: f64,
}

impl PosteriorParams {
    pub fn mean(&self, a_t: &[f64], a0: &[f64]) -> Vec<f64> {
        a_t.iter()
            .zip(a0)
            .map(|(x, y)| self.coef_at * x + self.coef_a0 * y)
            .collect()
    }
}

pub fn posterior_params(sched: &NoiseSchedule, t: usize) -> Result<PosteriorParams> {
    sched.check_index(t, false)?;
    let prev = sched.theta_cum[t - 1];
    let step = sched.theta_step[t - 1];
    let var_prev = one_minus_exp_neg2(prev);
    let var_t = one_minus_exp_neg2(sched.theta_cum[t]);
    let var_step = one_minus_exp_neg2(step);
    Ok(PosteriorParams {
        coef_at: var_prev / var_t * (-step).exp(),
        coef_a0: var_step / var_t * (-prev).exp(),
        beta_tilde: (var_prev * var_step / var_t).max(0.0),
    })
}

/// Draws `a^{t-1} ~ N(μ̃_t(a^t, â⁰), β̃_t I)`.
pub fn posterior_sample<R: Rng + ?Sized>(
    a_t: &[f64],
    a0_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(a_t.len(), a0_hat.len())?;
    let p = posterior_params(sched, t)?;
    let std = p.beta_tilde.sqrt();
    Ok(a_t
        .iter()
        .zip(a0_hat)
        .map(|(x, y)| {
            let z: f64 = rng.sample(StandardNormal);
            p.coef_at * x + p.coef_a0 * y + std * z
        })
        .collect())
}

/// Inverts the reparameterization with a predicted noise:
/// `â⁰ = e^{θ̄_t} (a^t - √(1 - e^{-2θ̄_t}) ε̂)`, optionally clamped to `±clip`.
pub fn estimate_a0(
    a_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>> {
    check_dims(a_t.len(), eps_hat.len())?;
    sched.check_index(t, false)?;
    let inv_signal = sched.theta_cum[t].exp();
    let std = sched.noise_scale(t);
    Ok(a_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let v = inv_signal * (x - std * e);
            match clip {
                Some(c) => v.clamp(-c, c),
                None => v,
            }
        })
        .collect())
}

/// One explicit Euler–Maruyama step of the reverse-time SDE from index `t`
/// to `t - 1`.
///
/// Time runs backwards with `dt = -1` index, so with `θ_t dt ≈ θ′_t` and
/// `σ_t² dt ≈ 2θ′_t` the update is
/// `a^{t-1} = a^t (1 + θ′_t) + 2θ′_t · score + √(2θ′_t) z`.
pub fn reverse_sde_step<R: Rng + ?Sized>(
    a_t: &[f64],
    score: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(a_t.len(), score.len())?;
    sched.check_index(t, false)?;
    let step = sched.theta_step[t - 1];
    let diffusion = (2.0 * step).sqrt();
    Ok(a_t
        .iter()
        .zip(score)
        .map(|(x, s)| {
            let z: f64 = rng.sample(StandardNormal);
            x * (1.0 + step) + 2.0 * step * s + diffusion * z
        })
        .collect())
}

/// Log density of `N(x; mean, var·I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
}
