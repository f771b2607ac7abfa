//! Central finite differences against every hand-written gradient, on
//! networks no wider than 32 units. Each check panics on mismatch.

use edpq_core::critic::{CriticConfig, QEnsemble};
use edpq_core::nn::{Mlp, Tensor2};
use edpq_core::policy::{
    diffusion_loss, policy_loss, ActionApprox, DiffusionPolicy, PolicyConfig,
};
use edpq_core::trainer::alpha_objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(scale > 0.0, "{name}: gradient vanished");
    assert!(diff / scale < TOL, "{name}: relative error {}", diff / scale);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        assert!(
            err <= TOL * a.abs().max(n.abs()) + 1e-7,
            "{name}[{i}]: analytic {a} numeric {n}"
        );
    }
}

fn numeric_grad(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn policy(seed: u64, steps: usize) -> DiffusionPolicy {
    let cfg = PolicyConfig {
        state_dim: 2,
        action_dim: 2,
        hidden: vec![16, 16],
        embed_dim: 4,
        steps,
        terminal_coef: 1e-2,
        action_bound: Some(1.0),
    };
    DiffusionPolicy::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

pub fn diffusion() {
    let pol = policy(1, 5);
    let s = random_batch(6, 2, 2);
    let a = random_batch(6, 2, 3);
    let analytic = diffusion_loss(&pol, &s, &a, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap()
        .grads;
    let mut probe = pol.clone();
    let numeric = numeric_grad(pol.noise_net.params(), |p| {
        probe.noise_net.set_params(p).unwrap();
        diffusion_loss(&probe, &s, &a, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .loss
    });
    assert_close("diffusion", &analytic, &numeric);
}

fn check_policy_gradient(approx: ActionApprox, alpha: f64, eta: f64) {
    let pol = policy(5, 5);
    let critic = QEnsemble::new(
        2,
        2,
        &CriticConfig {
            members: 4,
            hidden: vec![16],
            ..CriticConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    let s = random_batch(5, 2, 7);
    let a = random_batch(5, 2, 8);
    let alphas = vec![alpha; 5];
    let run = |p: &DiffusionPolicy| {
        policy_loss(
            p,
            &critic,
            &s,
            &a,
            &alphas,
            eta,
            approx,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap()
    };
    let base = run(&pol);
    // λ is a detached constant, so the reference objective freezes it
    let lambda = base.lambda;
    let mut probe = pol.clone();
    let numeric = numeric_grad(pol.noise_net.params(), |p| {
        probe.noise_net.set_params(p).unwrap();
        let out = run(&probe);
        out.diffusion_loss - lambda * (out.mean_q + alpha * out.entropy)
    });
    assert!((base.loss - (base.diffusion_loss - lambda * (base.mean_q + alpha * base.entropy))).abs() < 1e-12);
    assert_close(&format!("policy {approx:?} α={alpha}"), &base.grads, &numeric);
}

pub fn policy_terminal() {
    check_policy_gradient(ActionApprox::Terminal, 0.0, 1.0);
    check_policy_gradient(ActionApprox::Terminal, 0.2, 1.0);
}

pub fn policy_draw() {
    check_policy_gradient(ActionApprox::DiffusionDraw, 0.0, 1.0);
    check_policy_gradient(ActionApprox::DiffusionDraw, 0.2, 2.5);
}

pub fn policy_chain() {
    check_policy_gradient(ActionApprox::Chain, 0.0, 1.0);
    check_policy_gradient(ActionApprox::Chain, 0.2, 2.5);
}

pub fn critic() {
    let mut ens = QEnsemble::new(
        2,
        1,
        &CriticConfig {
            members: 3,
            hidden: vec![32, 16],
            ..CriticConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(10),
    )
    .unwrap();
    let s = random_batch(7, 2, 11);
    let a = random_batch(7, 1, 12);
    let targets: Vec<Vec<f64>> = (0..3)
        .map(|m| random_batch(1, 7, 13 + m).into_vec())
        .collect();
    let (_, grads) = ens.regression_loss(&s, &a, &targets).unwrap();
    for m in 0..3 {
        let params = ens.members[m].params().to_vec();
        let numeric = numeric_grad(&params, |p| {
            ens.members[m].set_params(p).unwrap();
            ens.regression_loss(&s, &a, &targets).unwrap().0[m]
        });
        ens.members[m].set_params(&params).unwrap();
        assert_close(&format!("critic member {m}"), &grads[m], &numeric);
    }
}

pub fn temperature() {
    let net = Mlp::new(&[2, 32, 1], &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let s = random_batch(9, 2, 15);
    let entropy = random_batch(1, 9, 16).into_vec();
    let (_, analytic) = alpha_objective(&net, &s, &entropy, -1.0).unwrap();
    let mut probe = net.clone();
    let numeric = numeric_grad(net.params(), |p| {
        probe.set_params(p).unwrap();
        alpha_objective(&probe, &s, &entropy, -1.0).unwrap().0
    });
    assert_close("temperature", &analytic, &numeric);
}
