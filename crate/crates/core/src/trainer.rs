//! Offline actor-critic loop: ensemble critic regression, entropy-regularized
//! diffusion policy improvement, optional temperature tuning and Polyak
//! target tracking.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, QEnsemble, TransitionBatch};
use crate::envs::{episode_return, Dataset, ReturnStats, ToyChainEnv};
use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, polyak, sigmoid, softplus, AdamState, Mlp, Tensor2};
use crate::policy::{policy_loss, ActionApprox, DiffusionPolicy, PolicyConfig, PolicyLoss};

/// Entropy temperature: a constant, or a state-dependent value learned
/// against a target entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSetting {
    Fixed(f64),
    Auto,
}

impl FromStr for AlphaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        let v: f64 = s.parse().map_err(|_| {
            Error::InvalidArgument(format!("alpha must be a number or \"auto\", got {s:?}"))
        })?;
        Ok(Self::Fixed(v))
    }
}

impl fmt::Display for AlphaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(v) => write!(f, "{v}"),
            Self::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Text(String),
}

impl Serialize for AlphaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Fixed(v) => AlphaRepr::Number(*v),
            Self::Auto => AlphaRepr::Text("auto".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match AlphaRepr::deserialize(d)? {
            AlphaRepr::Number(v) => Ok(Self::Fixed(v)),
            AlphaRepr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub alpha: AlphaSetting,
    /// Starting temperature of the learned `α(s)`.
    pub alpha_init: f64,
    /// Entropy floor for the learned temperature; `-action_dim` when unset.
    pub target_entropy: Option<f64>,
    /// Weight of the value term inside `λ = eta_weight / mean|Q|`.
    pub eta_weight: f64,
    /// Source of the reconstructed actions fed to the critic.
    pub action_approx: ActionApprox,
    pub beta_lcb: f64,
    pub members: usize,
    pub diffusion_steps: usize,
    pub terminal_coef: f64,
    pub gamma: f64,
    pub polyak_rate: f64,
    pub max_q_backup: bool,
    pub n_backup: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub action_bound: Option<f64>,
    /// Global gradient-norm ceiling per network, off when unset.
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            steps_per_epoch: 100,
            batch_size: 256,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            alpha: AlphaSetting::Fixed(0.01),
            alpha_init: 0.01,
            target_entropy: None,
            eta_weight: 1.0,
            action_approx: ActionApprox::default(),
            beta_lcb: 4.0,
            members: 16,
            diffusion_steps: 5,
            terminal_coef: 1e-4,
            gamma: 0.99,
            polyak_rate: 0.005,
            max_q_backup: false,
            n_backup: 10,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            embed_dim: 16,
            action_bound: Some(1.0),
            grad_clip: None,
            eval_every: 5000,
            eval_episodes: 10,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("members", self.members),
            ("diffusion_steps", self.diffusion_steps),
            ("n_backup", self.n_backup),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("log_every", self.log_every),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        for (name, lr) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(Error::InvalidArgument(
                "polyak_rate must lie in (0, 1]".into(),
            ));
        }
        if !(self.eta_weight >= 0.0) || !(self.beta_lcb >= 0.0) {
            return Err(Error::InvalidArgument(
                "eta_weight and beta_lcb must be non-negative".into(),
            ));
        }
        match self.alpha {
            AlphaSetting::Fixed(a) if !(a >= 0.0) => {
                return Err(Error::InvalidArgument(format!(
                    "alpha must be >= 0, got {a}"
                )));
            }
            AlphaSetting::Auto if !(self.alpha_init > 0.0) => {
                return Err(Error::InvalidArgument("alpha_init must be positive".into()));
            }
            _ => {}
        }
        let entropy_on = !matches!(self.alpha, AlphaSetting::Fixed(a) if a == 0.0);
        if entropy_on && self.diffusion_steps < 2 {
            return Err(Error::InvalidArgument(
                "entropy regularization needs diffusion_steps >= 2".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn policy_config(&self, state_dim: usize, action_dim: usize) -> PolicyConfig {
        PolicyConfig {
            state_dim,
            action_dim,
            hidden: self.policy_hidden.clone(),
            embed_dim: self.embed_dim,
            steps: self.diffusion_steps,
            terminal_coef: self.terminal_coef,
            action_bound: self.action_bound,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            members: self.members,
            hidden: self.critic_hidden.clone(),
            gamma: self.gamma,
            beta_lcb: self.beta_lcb,
            polyak_rate: self.polyak_rate,
        }
    }
}

pub const ALPHA_HIDDEN: usize = 32;

/// Temperature state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaState {
    Fixed(f64),
    /// `α(s) = softplus(net(s))` with its optimizer.
    Auto {
        net: Mlp,
        opt: AdamState,
    },
}

impl AlphaState {
    /// Per-row temperatures, detached.
    pub fn values(&self, states: &Tensor2) -> Result<Vec<f64>> {
        match self {
            Self::Fixed(a) => Ok(vec![*a; states.rows()]),
            Self::Auto { net, .. } => Ok(net
                .predict(states)?
                .data()
                .iter()
                .map(|&x| softplus(x))
                .collect()),
        }
    }
}

/// `log(e^y − 1)`, the inverse of softplus.
fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub policy: DiffusionPolicy,
    pub target_policy: DiffusionPolicy,
    pub critic: QEnsemble,
    pub policy_opt: AdamState,
    pub critic_opts: Vec<AdamState>,
    pub alpha: AlphaState,
    /// Completed gradient steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Values logged for one step. Evaluation fields are set only on steps that
/// ran an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub diffusion_loss: f64,
    /// Mean of the per-member Bellman losses.
    pub q_loss: f64,
    pub policy_loss: f64,
    /// Batch mean of `−log p(â¹ | aᵀ, s)`; zero with the entropy term off.
    pub entropy: f64,
    /// Batch mean of `|Q_LCB|` at the reconstructed actions.
    pub mean_abs_q: f64,
    /// Batch mean of the temperature.
    pub alpha: f64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.diffusion_loss,
            self.q_loss,
            self.policy_loss,
            self.entropy,
            self.mean_abs_q,
            self.alpha,
        ]
        .iter()
        .chain(self.eval_mean.iter())
        .chain(self.eval_std.iter())
        .all(|v| v.is_finite())
    }
}

/// Receiver for metrics records.
pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;

    fn epoch_end(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

fn apply_update(
    params: &mut [f64],
    grads: &mut [f64],
    opt: &mut AdamState,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(c) = clip {
        clip_grad_norm(grads, c);
    }
    adam_step(params, grads, opt)
}

impl TrainerState {
    pub fn new(config: &TrainConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = DiffusionPolicy::new(&config.policy_config(state_dim, action_dim), &mut rng)?;
        let critic = QEnsemble::new(state_dim, action_dim, &config.critic_config(), &mut rng)?;
        let alpha = match config.alpha {
            AlphaSetting::Fixed(a) => AlphaState::Fixed(a),
            AlphaSetting::Auto => {
                let mut net = Mlp::new(&[state_dim, ALPHA_HIDDEN, 1], &mut rng)?;
                // start every state near alpha_init
                let (w_out, b_out) = net.layer_ranges(1);
                let params = net.params_mut();
                params[w_out].iter_mut().for_each(|w| *w = 0.0);
                params[b_out][0] = softplus_inverse(config.alpha_init);
                let opt = AdamState::new(net.param_count(), config.alpha_lr);
                AlphaState::Auto { net, opt }
            }
        };
        Ok(Self {
            policy_opt: AdamState::new(policy.noise_net.param_count(), config.policy_lr),
            critic_opts: critic
                .members
                .iter()
                .map(|m| AdamState::new(m.param_count(), config.critic_lr))
                .collect(),
            target_policy: policy.clone(),
            policy,
            critic,
            alpha,
            step: 0,
            rng,
            config: config.clone(),
        })
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.policy.action_dim as f64))
    }

    /// One regression step for every critic member; returns the mean loss.
    pub fn critic_step(&mut self, batch: &TransitionBatch) -> Result<f64> {
        let (losses, mut grads) = self.critic.critic_loss(
            batch,
            &self.target_policy,
            &mut self.rng,
            self.config.max_q_backup,
            self.config.n_backup,
        )?;
        for ((net, g), opt) in self
            .critic
            .members
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(self.critic_opts.iter_mut())
        {
            apply_update(net.params_mut(), g, opt, self.config.grad_clip)?;
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// One step on the entropy-regularized policy objective against the
    /// current critics.
    pub fn policy_step(
        &mut self,
        states: &Tensor2,
        actions: &Tensor2,
    ) -> Result<(PolicyLoss, Vec<f64>)> {
        let alpha = self.alpha.values(states)?;
        let mut out = policy_loss(
            &self.policy,
            &self.critic,
            states,
            actions,
            &alpha,
            self.config.eta_weight,
            self.config.action_approx,
            &mut self.rng,
        )?;
        apply_update(
            self.policy.noise_net.params_mut(),
            &mut out.grads,
            &mut self.policy_opt,
            self.config.grad_clip,
        )?;
        Ok((out, alpha))
    }

    /// One gradient step on `J = mean[α(s)(H(s) − H̄)]` where `H(s)` is the
    /// per-state entropy estimate. Returns `J` before the step.
    pub fn auto_alpha_step(
        &mut self,
        states: &Tensor2,
        entropy: &[f64],
        target_entropy: f64,
    ) -> Result<f64> {
        let AlphaState::Auto { net, opt } = &mut self.alpha else {
            return Err(Error::InvalidArgument(
                "temperature step requested with a fixed alpha".into(),
            ));
        };
        let (out, grads) = alpha_objective(net, states, entropy, target_entropy)?;
        let mut grads = grads;
        adam_step(net.params_mut(), &mut grads, opt)?;
        Ok(out)
    }

    /// Critic update, policy update, temperature update, then target tracking.
    pub fn train_step(&mut self, batch: &TransitionBatch) -> Result<MetricsRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let q_loss = self.critic_step(batch)?;
        let (pl, alpha) = self.policy_step(&batch.states, &batch.actions)?;
        if matches!(self.alpha, AlphaState::Auto { .. }) {
            let h_bar = self.target_entropy();
            self.auto_alpha_step(&batch.states, &pl.neg_log_prob, h_bar)?;
        }
        polyak(
            &mut self.target_policy.noise_net,
            &self.policy.noise_net,
            self.config.polyak_rate,
        )?;
        self.critic.polyak_update(self.config.polyak_rate)?;
        self.step += 1;
        Ok(MetricsRecord {
            step: self.step,
            diffusion_loss: pl.diffusion_loss,
            q_loss,
            policy_loss: pl.loss,
            entropy: pl.entropy,
            mean_abs_q: pl.mean_abs_q,
            alpha: alpha.iter().sum::<f64>() / alpha.len() as f64,
            eval_mean: None,
            eval_std: None,
        })
    }

    /// Rolls out the online policy. The generator depends only on the seed
    /// and the step, so evaluating never perturbs training.
    pub fn evaluate(&self, env: &ToyChainEnv, episodes: usize) -> Result<ReturnStats> {
        let mut rng = eval_rng(self.config.seed, self.step);
        evaluate_policy(&self.policy, env, episodes, &mut rng)
    }

    /// Runs `n` more steps, sampling minibatches from `dataset` and
    /// reporting to `sink` on evaluation steps, every `log_every` steps and
    /// at the end of each epoch.
    pub fn run_steps(
        &mut self,
        dataset: &Dataset,
        env: Option<&ToyChainEnv>,
        n: u64,
        sink: &mut dyn MetricsSink,
    ) -> Result<()> {
        let per_epoch = self.config.steps_per_epoch as u64;
        for _ in 0..n {
            let batch = dataset.sample_batch(self.config.batch_size, &mut self.rng)?;
            let mut rec = self.train_step(&batch)?;
            let eval_now = env.is_some() && rec.step % self.config.eval_every as u64 == 0;
            if let (true, Some(env)) = (eval_now, env) {
                let stats = self.evaluate(env, self.config.eval_episodes)?;
                rec.eval_mean = Some(stats.mean);
                rec.eval_std = Some(stats.std);
            }
            if !rec.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite metrics at step {}",
                    rec.step
                )));
            }
            let epoch_done = rec.step % per_epoch == 0;
            if eval_now || epoch_done || rec.step % self.config.log_every as u64 == 0 {
                sink.record(&rec)?;
            }
            if epoch_done {
                sink.epoch_end()?;
            }
        }
        Ok(())
    }
}

/// Temperature objective and its parameter gradient.
pub fn alpha_objective(
    net: &Mlp,
    states: &Tensor2,
    entropy: &[f64],
    target_entropy: f64,
) -> Result<(f64, Vec<f64>)> {
    let rows = states.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if entropy.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: entropy.len(),
        });
    }
    let (raw, tape) = net.forward(states)?;
    let n = rows as f64;
    let mut value = 0.0;
    let mut g = Tensor2::zeros(rows, 1);
    for r in 0..rows {
        let x = raw.data()[r];
        let gap = entropy[r] - target_entropy;
        value += softplus(x) * gap / n;
        g.data_mut()[r] = sigmoid(x) * gap / n;
    }
    let (grads, _) = net.backward(&tape, &g)?;
    Ok((value, grads))
}

/// Generator for the evaluation at `step` of the run seeded with `seed`.
pub fn eval_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Mean and spread of returns for the posterior-chain policy.
pub fn evaluate_policy<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    env: &ToyChainEnv,
    episodes: usize,
    rng: &mut R,
) -> Result<ReturnStats> {
    episode_return(
        env,
        |s: &[f64], r: &mut R| Ok(policy.sample_action(s, r, false)?.a0),
        episodes,
        rng,
    )
}

/// Fresh state trained for `config.epochs × config.steps_per_epoch` steps.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    env: Option<&ToyChainEnv>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainerState> {
    let mut state = TrainerState::new(config, dataset.state_dim, dataset.action_dim)?;
    state.run_steps(dataset, env, config.total_steps(), sink)?;
    Ok(state)
}
