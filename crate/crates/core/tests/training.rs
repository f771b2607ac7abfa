use edpq_core::critic::{CriticConfig, QEnsemble, TransitionBatch};
use edpq_core::envs::{gen_dataset, BehaviorSpec, Dataset, ToyChainEnv};
use edpq_core::experiments::toy_config;
use edpq_core::nn::{adam_step, AdamState, Tensor2};
use edpq_core::policy::{DiffusionPolicy, PolicyConfig};
use edpq_core::trainer::{AlphaSetting, MetricsRecord, TrainConfig, TrainerState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: 100,
        batch_size: 32,
        members: 4,
        policy_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        embed_dim: 8,
        eval_episodes: 5,
        log_every: 1,
        ..toy_config()
    }
}

fn toy_data(episodes: usize, seed: u64) -> Dataset {
    gen_dataset(&ToyChainEnv::default(), &BehaviorSpec::default(), episodes, seed).unwrap()
}

#[test]
fn critic_converges_to_the_bellman_fixed_point() {
    // one state, one action (the policy bound pins actions to ~0), reward 1, γ = 0.9
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pol = DiffusionPolicy::new(
        &PolicyConfig {
            state_dim: 1,
            action_dim: 1,
            hidden: vec![8],
            embed_dim: 4,
            steps: 3,
            terminal_coef: 1e-4,
            action_bound: Some(1e-9),
        },
        &mut rng,
    )
    .unwrap();
    let mut ens = QEnsemble::new(
        1,
        1,
        &CriticConfig {
            members: 3,
            hidden: vec![16, 16],
            gamma: 0.9,
            beta_lcb: 1.0,
            polyak_rate: 0.05,
        },
        &mut rng,
    )
    .unwrap();
    let n = 8;
    let batch = TransitionBatch {
        states: Tensor2::zeros(n, 1),
        actions: Tensor2::zeros(n, 1),
        rewards: vec![1.0; n],
        next_states: Tensor2::zeros(n, 1),
        dones: vec![false; n],
    };
    let mut opts: Vec<AdamState> = ens
        .members
        .iter()
        .map(|m| AdamState::new(m.param_count(), 1e-2))
        .collect();
    for _ in 0..3000 {
        let (_, grads) = ens.critic_loss(&batch, &pol, &mut rng, false, 1).unwrap();
        for ((net, g), opt) in ens.members.iter_mut().zip(&grads).zip(&mut opts) {
            adam_step(net.params_mut(), g, opt).unwrap();
        }
        ens.polyak_update(ens.polyak_rate).unwrap();
    }
    for q in ens.q_values(&[0.0], &[0.0]).unwrap() {
        assert!((q - 10.0).abs() < 0.5, "{q}");
    }
}

#[test]
fn max_backup_dominates_single_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pol = DiffusionPolicy::new(
        &PolicyConfig {
            state_dim: 2,
            action_dim: 1,
            hidden: vec![16],
            embed_dim: 4,
            steps: 5,
            terminal_coef: 1e-4,
            action_bound: Some(1.0),
        },
        &mut rng,
    )
    .unwrap();
    let ens = QEnsemble::new(
        2,
        1,
        &CriticConfig {
            members: 2,
            hidden: vec![16],
            ..CriticConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let trials = 1000;
    let next = Tensor2::from_vec(trials, 2, vec![0.3; 2 * trials]).unwrap();
    let rewards = vec![0.0; trials];
    let dones = vec![false; trials];
    let single = ens
        .ensemble_targets(&rewards, &next, &dones, &pol, &mut rng, false, 1)
        .unwrap();
    let max = ens
        .ensemble_targets(&rewards, &next, &dones, &pol, &mut rng, true, 10)
        .unwrap();
    for m in 0..2 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&max[m]) >= mean(&single[m]), "member {m}");
    }
}

fn mean_alpha(state: &TrainerState, states: &Tensor2) -> f64 {
    let a = state.alpha.values(states).unwrap();
    assert!(a.iter().all(|&x| x > 0.0));
    a.iter().sum::<f64>() / a.len() as f64
}

#[test]
fn temperature_follows_the_entropy_gap() {
    let cfg = TrainConfig {
        alpha: AlphaSetting::Auto,
        alpha_lr: 1e-2,
        ..small_config()
    };
    let states = Tensor2::from_vec(6, 2, vec![0.0, 0.0, 0.5, 1.0, -0.5, 1.0, 0.2, 0.0, 0.9, 1.0, -0.9, 1.0])
        .unwrap();
    for (entropy, rises) in [(2.0, false), (-3.0, true)] {
        let mut state = TrainerState::new(&cfg, 2, 1).unwrap();
        let h_bar = state.target_entropy();
        let before = mean_alpha(&state, &states);
        for _ in 0..20 {
            state.auto_alpha_step(&states, &[entropy; 6], h_bar).unwrap();
        }
        let after = mean_alpha(&state, &states);
        assert_eq!(after > before, rises, "entropy {entropy}: {before} -> {after}");
    }
}

#[test]
fn critics_see_this_steps_update_before_the_policy() {
    let data = toy_data(50, 3);
    let cfg = small_config();
    let mut reference = TrainerState::new(&cfg, 2, 1).unwrap();
    let batch = data.sample_batch(32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut manual = reference.clone();
    reference.train_step(&batch).unwrap();

    manual.critic_step(&batch).unwrap();
    manual.policy_step(&batch.states, &batch.actions).unwrap();
    assert_eq!(manual.policy.noise_net, reference.policy.noise_net);
    assert_eq!(manual.critic.members, reference.critic.members);
}

#[test]
fn ensemble_members_drift_apart() {
    let data = toy_data(100, 5);
    let cfg = small_config();
    let mut state = TrainerState::new(&cfg, 2, 1).unwrap();
    state.run_steps(&data, None, 100, &mut Vec::new()).unwrap();
    let m = &state.critic.members;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let d: f64 = m[i]
                .params()
                .iter()
                .zip(m[j].params())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(d > 0.0);
        }
    }
}

fn late_entropy(alpha: f64) -> f64 {
    let data = toy_data(300, 6);
    let cfg = TrainConfig {
        alpha: AlphaSetting::Fixed(alpha),
        epochs: 6,
        seed: 6,
        ..small_config()
    };
    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut state = TrainerState::new(&cfg, 2, 1).unwrap();
    state.run_steps(&data, None, cfg.total_steps(), &mut metrics).unwrap();
    let tail = &metrics[metrics.len() - 100..];
    tail.iter().map(|m| m.entropy).sum::<f64>() / tail.len() as f64
}

#[test]
fn larger_temperature_raises_entropy() {
    let low = late_entropy(0.01);
    let high = late_entropy(0.05);
    assert!(high > low, "{low} vs {high}");
}

#[test]
fn ensemble_spread_grows_off_data() {
    let data = toy_data(500, 7);
    let cfg = TrainConfig {
        epochs: 15,
        members: 8,
        ..small_config()
    };
    let mut state = TrainerState::new(&cfg, 2, 1).unwrap();
    state.run_steps(&data, None, cfg.total_steps(), &mut Vec::new()).unwrap();
    let s0 = ToyChainEnv::default().initial_state();
    let spread = |actions: &[f64]| {
        let states = Tensor2::from_rows(&vec![[s0[0], s0[1]]; actions.len()]).unwrap();
        let acts = Tensor2::from_vec(actions.len(), 1, actions.to_vec()).unwrap();
        let s = state.critic.spread(&states, &acts).unwrap();
        s.iter().sum::<f64>() / s.len() as f64
    };
    // behavior first steps cluster near -0.4 and +0.6
    let inside: Vec<f64> = (0..11).map(|i| -0.5 + 0.02 * i as f64).collect();
    let outside: Vec<f64> = (0..11).map(|i| 0.9 + 0.01 * i as f64).chain((0..11).map(|i| -1.0 + 0.02 * i as f64)).collect();
    let (a, b) = (spread(&inside), spread(&outside));
    assert!(b > a, "in-distribution {a} vs off-data {b}");
}
