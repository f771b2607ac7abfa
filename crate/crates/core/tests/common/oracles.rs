//! Independent references for the closed-form SDE quantities. Every
//! function returns the largest discrepancy it saw.

use edpq_core::policy::log_prob_a1;
use edpq_core::sde::{
    build_schedule, estimate_a0, perturb, posterior_params, NoiseSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `(mean coefficient, variance)` of `a^t | a^τ`, straight from the
/// cumulative rates.
fn transition(sched: &NoiseSchedule, tau: usize, t: usize) -> (f64, f64) {
    let d = sched.theta_cums()[t] - sched.theta_cums()[tau];
    ((-d).exp(), 1.0 - (-2.0 * d).exp())
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-12 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

struct Triple {
    sched: NoiseSchedule,
    a0: f64,
    at: f64,
    t: usize,
}

fn random_triple(rng: &mut ChaCha8Rng, min_t: usize) -> Triple {
    let steps = [5, 10, 100][rng.random_range(0..3)];
    let sched = build_schedule(steps, 1e-4).unwrap();
    let t = rng.random_range(min_t..=steps);
    let a0 = rng.random_range(-1.0..1.0);
    let eps: f64 = rng.sample(StandardNormal);
    let at = perturb(&[a0], t, &[eps], &sched).unwrap()[0];
    Triple { sched, a0, at, t }
}

/// Posterior mean against the numerical minimizer of
/// `−log p(aᵗ | aᵗ⁻¹) − log p(aᵗ⁻¹ | a⁰)`.
pub fn posterior_mean_vs_argmin(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        // at t = 1 the second factor is a point mass
        let Triple { sched, a0, at, t } = random_triple(&mut rng, 2);
        let (m_step, v_step) = transition(&sched, t - 1, t);
        let (m_prev, v_prev) = transition(&sched, 0, t - 1);
        let nll = |x: f64| {
            (at - m_step * x).powi(2) / (2.0 * v_step) + (x - m_prev * a0).powi(2) / (2.0 * v_prev)
        };
        let argmin = golden_min(nll, -20.0, 20.0);
        let mean = posterior_params(&sched, t).unwrap().mean(&[at], &[a0])[0];
        worst = worst.max((argmin - mean).abs());
    }
    worst
}

/// Relative gap between `p(aᵗ | aᵗ⁻¹) p(aᵗ⁻¹ | a⁰) / p(aᵗ | a⁰)` and the
/// closed-form posterior density over a grid around the posterior mean.
pub fn bayes_density_gap(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let Triple { sched, a0, at, t } = random_triple(&mut rng, 2);
        let (m_step, v_step) = transition(&sched, t - 1, t);
        let (m_prev, v_prev) = transition(&sched, 0, t - 1);
        let (m_t, v_t) = transition(&sched, 0, t);
        let p = posterior_params(&sched, t).unwrap();
        let mean = p.mean(&[at], &[a0])[0];
        let sd = p.beta_tilde.sqrt();
        for i in -20..=20 {
            let x = mean + sd * i as f64 / 5.0;
            let bayes = normal_pdf(at, m_step * x, v_step) * normal_pdf(x, m_prev * a0, v_prev)
                / normal_pdf(at, m_t * a0, v_t);
            let closed = normal_pdf(x, mean, p.beta_tilde);
            worst = worst.max((bayes - closed).abs() / closed.max(1.0));
        }
    }
    worst
}

/// Bayes-rule `log p(a¹ | aᵀ, a⁰)` against the conjugate-Gaussian
/// posterior of `a¹` with prior `p(a¹ | a⁰)` and likelihood `p(aᵀ | a¹)`.
pub fn log_prob_vs_conjugate(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let steps = [2, 5, 10][rng.random_range(0..3)];
        let sched = build_schedule(steps, 1e-4).unwrap();
        let dim = rng.random_range(1..4);
        let a0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a1: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let at: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let (m_01, v_01) = transition(&sched, 0, 1);
        let (m_1t, v_1t) = transition(&sched, 1, steps);
        let precision = 1.0 / v_01 + m_1t * m_1t / v_1t;
        let reference: f64 = (0..dim)
            .map(|d| {
                let mean = (m_01 * a0[d] / v_01 + m_1t * at[d] / v_1t) / precision;
                normal_logpdf(a1[d], mean, 1.0 / precision)
            })
            .sum();
        let value = log_prob_a1(&sched, &a1, &at, &a0).unwrap().value;
        worst = worst.max((value - reference).abs());
    }
    worst
}

/// `a⁰` recovered from a perturbed action and the true noise.
pub fn inversion_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let steps = [5, 10, 100][rng.random_range(0..3)];
        let sched = build_schedule(steps, 1e-4).unwrap();
        let t = rng.random_range(1..=steps);
        let a0: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let at = perturb(&a0, t, &eps, &sched).unwrap();
        let back = estimate_a0(&at, &eps, t, &sched, None).unwrap();
        for (x, y) in a0.iter().zip(&back) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
