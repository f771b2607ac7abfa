mod common;

use common::oracles;
use edpq_core::sde::{
    build_schedule, forward_params, perturb, posterior_params, posterior_sample, reverse_sde_step,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn posterior_mean_is_the_likelihood_argmin() {
    let err = oracles::posterior_mean_vs_argmin(50, 1);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bayes_product_is_the_posterior_density() {
    let err = oracles::bayes_density_gap(20, 2);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn log_prob_matches_conjugate_posterior() {
    let err = oracles::log_prob_vs_conjugate(50, 3);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn reconstruction_inverts_perturbation() {
    let err = oracles::inversion_error(200, 4);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn perturbation_moments() {
    let sched = build_schedule(10, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a0, t, n) = (0.7, 4, 200_000);
    let (mean_coef, var) = forward_params(&sched, 0, t).unwrap();
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            perturb(&[a0], t, &[e], &sched).unwrap()[0]
        })
        .collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    // five standard errors
    assert!((m - a0 * mean_coef).abs() < 5.0 * (var / n as f64).sqrt());
    assert!((v - var).abs() < 5.0 * var * (2.0 / n as f64).sqrt());
}

#[test]
fn posterior_sample_moments() {
    let sched = build_schedule(5, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (at, a0, t, n) = (0.3, -0.5, 3, 200_000);
    let p = posterior_params(&sched, t).unwrap();
    let draws: Vec<f64> = (0..n)
        .map(|_| posterior_sample(&[at], &[a0], t, &sched, &mut rng).unwrap()[0])
        .collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    let mean = p.coef_at * at + p.coef_a0 * a0;
    assert!((m - mean).abs() < 5.0 * (p.beta_tilde / n as f64).sqrt());
    assert!((v - p.beta_tilde).abs() < 5.0 * p.beta_tilde * (2.0 / n as f64).sqrt());
}

#[test]
fn reverse_sde_with_point_mass_score_concentrates() {
    // for a point mass at c the exact score is -(a - c e^{-θ̄_t}) / (1 - e^{-2θ̄_t})
    let c = 0.4;
    let mut errors = Vec::new();
    for steps in [30, 100] {
        let sched = build_schedule(steps, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut total = 0.0;
        let n = 400;
        for _ in 0..n {
            let mut a = vec![rng.sample::<f64, _>(StandardNormal)];
            for t in (1..=steps).rev() {
                let (m, v) = forward_params(&sched, 0, t).unwrap();
                let score = [-(a[0] - c * m) / v];
                a = reverse_sde_step(&a, &score, t, &sched, &mut rng).unwrap();
            }
            total += a[0];
        }
        errors.push((total / n as f64 - c).abs());
    }
    assert!(errors[1] < errors[0], "{errors:?}");
    assert!(errors[1] < 0.1, "{errors:?}");
}

proptest! {
    #[test]
    fn markov_composition(steps in 2usize..60, coef in 1e-5f64..0.5, split in 0.0f64..1.0, end in 0.0f64..1.0) {
        let sched = build_schedule(steps, coef).unwrap();
        let t = 1 + ((steps - 1) as f64 * end) as usize + 1;
        let t = t.min(steps);
        let tau = ((t - 1) as f64 * split) as usize;
        prop_assume!(tau >= 1);
        let (m1, v1) = forward_params(&sched, 0, tau).unwrap();
        let (m2, v2) = forward_params(&sched, tau, t).unwrap();
        let (m, v) = forward_params(&sched, 0, t).unwrap();
        prop_assert!((m1 * m2 - m).abs() < 1e-12);
        prop_assert!((m2 * m2 * v1 + v2 - v).abs() < 1e-12);
    }

    #[test]
    fn posterior_mean_is_locally_optimal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = rng.random_range(2..50);
        let sched = build_schedule(steps, 1e-4).unwrap();
        let t = rng.random_range(2..=steps);
        let a0: f64 = rng.random_range(-1.0..1.0);
        let at: f64 = rng.sample(StandardNormal);
        let (ms, vs) = forward_params(&sched, t - 1, t).unwrap();
        let (mp, vp) = forward_params(&sched, 0, t - 1).unwrap();
        let nll = |x: f64| (at - ms * x).powi(2) / (2.0 * vs) + (x - mp * a0).powi(2) / (2.0 * vp);
        let mu = posterior_params(&sched, t).unwrap().mean(&[at], &[a0])[0];
        prop_assert!(nll(mu + 1e-3) > nll(mu));
        prop_assert!(nll(mu - 1e-3) > nll(mu));
    }

    #[test]
    fn chain_with_true_start_lands_on_it(seed in any::<u64>(), steps in 1usize..40) {
        let sched = build_schedule(steps, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut a: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        for t in (1..=steps).rev() {
            a = posterior_sample(&a, &a0, t, &sched, &mut rng).unwrap();
        }
        prop_assert!((a[0] - a0[0]).abs() < 1e-12 && (a[1] - a0[1]).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_is_nonnegative_and_finite(steps in 1usize..200, coef in 1e-8f64..0.9) {
        let sched = build_schedule(steps, coef).unwrap();
        for t in 1..=steps {
            let p = posterior_params(&sched, t).unwrap();
            prop_assert!(p.beta_tilde >= 0.0 && p.beta_tilde.is_finite());
            prop_assert!(p.coef_at.is_finite() && p.coef_a0.is_finite());
        }
    }
}
