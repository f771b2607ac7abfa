//! Seeded experiment drivers: the 2-D reconstruction benchmark and
//! multi-seed toy-task grids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{gen_dataset, sample_static, BehaviorSpec, ReturnStats, StaticDistribution2D, ToyChainEnv};
use crate::error::{Error, Result};
use crate::nn::{adam_step, polyak, AdamState, Tensor2};
use crate::policy::{diffusion_loss, DiffusionPolicy, GridSpacing, PolicyConfig, Sampler, SamplingGrid};
use crate::trainer::{AlphaSetting, MetricsRecord, MetricsSink, TrainConfig, TrainerState};
use crate::wasserstein::{sliced_w1, DEFAULT_PROJECTIONS};

/// Settings for the sampler comparison on [`StaticDistribution2D`]. One
/// model is trained with `model_steps` indices; coarser chains evaluate it
/// on strided sub-grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub distribution: StaticDistribution2D,
    pub model_steps: usize,
    pub terminal_coef: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub train_samples: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub posterior_steps: Vec<usize>,
    pub sde_steps: Vec<usize>,
    pub projections: usize,
    pub spacing: GridSpacing,
    /// Rate of the weight average used for sampling.
    pub ema_rate: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            distribution: StaticDistribution2D::default(),
            model_steps: 100,
            terminal_coef: 1e-4,
            hidden: vec![256, 256],
            embed_dim: 16,
            train_samples: 8000,
            train_steps: 12000,
            batch_size: 256,
            lr: 1e-3,
            eval_samples: 10000,
            posterior_steps: vec![1, 2, 5],
            sde_steps: vec![5, 30, 100],
            projections: DEFAULT_PROJECTIONS,
            spacing: GridSpacing::Quadratic,
            ema_rate: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructRow {
    pub seed: u64,
    pub sampler: Sampler,
    pub steps: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    pub sampler: Sampler,
    pub steps: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructOutcome {
    pub rows: Vec<ReconstructRow>,
    pub clouds: Vec<SampleCloud>,
    pub heldout: Vec<[f64; 2]>,
}

impl ReconstructOutcome {
    pub fn distance(&self, sampler: Sampler, steps: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sampler == sampler && r.steps == steps)
            .map(|r| r.distance)
    }
}

/// Trains an unconditional noise model on the 2-D mixture and draws from it
/// with both samplers at every requested chain length. Distances are sliced
/// W1 against a held-out sample.
pub fn reconstruct_benchmark(cfg: &ReconstructConfig, seed: u64) -> Result<ReconstructOutcome> {
    let bad = cfg
        .posterior_steps
        .iter()
        .chain(&cfg.sde_steps)
        .find(|&&s| s == 0 || s > cfg.model_steps);
    if let Some(s) = bad {
        return Err(Error::InvalidArgument(format!(
            "chain length {s} outside [1, {}]",
            cfg.model_steps
        )));
    }
    if cfg.train_samples == 0 || cfg.eval_samples == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcfg = PolicyConfig {
        state_dim: 0,
        action_dim: 2,
        hidden: cfg.hidden.clone(),
        embed_dim: cfg.embed_dim,
        steps: cfg.model_steps,
        terminal_coef: cfg.terminal_coef,
        action_bound: None,
    };
    let mut model = DiffusionPolicy::new(&pcfg, &mut rng)?;
    if !(cfg.ema_rate > 0.0 && cfg.ema_rate <= 1.0) {
        return Err(Error::InvalidArgument("ema_rate must lie in (0, 1]".into()));
    }
    let train = sample_static(&cfg.distribution, cfg.train_samples, seed.wrapping_mul(2) + 1)?;
    let heldout = sample_static(&cfg.distribution, cfg.eval_samples, seed.wrapping_mul(2) + 2)?;
    let mut opt = AdamState::new(model.noise_net.param_count(), cfg.lr);
    let mut ema = model.clone();
    let no_state = Tensor2::zeros(cfg.batch_size, 0);
    for _ in 0..cfg.train_steps {
        let rows: Vec<[f64; 2]> = (0..cfg.batch_size)
            .map(|_| train[rand::Rng::random_range(&mut rng, 0..train.len())])
            .collect();
        let batch = Tensor2::from_rows(&rows)?;
        let out = diffusion_loss(&model, &no_state, &batch, &mut rng)?;
        adam_step(model.noise_net.params_mut(), &out.grads, &mut opt)?;
        polyak(&mut ema.noise_net, &model.noise_net, cfg.ema_rate)?;
    }
    let model = ema;

    let mut rows = Vec::new();
    let mut clouds = Vec::new();
    let no_state = Tensor2::zeros(cfg.eval_samples, 0);
    let plan = cfg
        .posterior_steps
        .iter()
        .map(|&s| (Sampler::Posterior, s))
        .chain(cfg.sde_steps.iter().map(|&s| (Sampler::ReverseSde, s)));
    for (sampler, steps) in plan {
        let grid = SamplingGrid::with_spacing(&model, steps, cfg.spacing)?;
        let (a0, ..) = model.sample_batch(&no_state, &grid, sampler, &mut rng, false)?;
        let points: Vec<[f64; 2]> = (0..a0.rows()).map(|r| [a0.row(r)[0], a0.row(r)[1]]).collect();
        let distance = if points.iter().all(|p| p[0].is_finite() && p[1].is_finite()) {
            sliced_w1(&points, &heldout, cfg.projections, seed)?
        } else {
            f64::INFINITY
        };
        rows.push(ReconstructRow {
            seed,
            sampler,
            steps,
            distance,
        });
        clouds.push(SampleCloud {
            sampler,
            steps,
            points,
        });
    }
    Ok(ReconstructOutcome {
        rows,
        clouds,
        heldout,
    })
}

/// Desk-scale preset for the two-step toy task: smaller batches and faster
/// critic learning so a run takes a few minutes on one core.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 80,
        steps_per_epoch: 100,
        batch_size: 64,
        policy_lr: 1e-3,
        critic_lr: 1e-2,
        alpha: AlphaSetting::Fixed(0.01),
        beta_lcb: 4.0,
        members: 16,
        eval_every: 8000,
        eval_episodes: 1000,
        ..TrainConfig::default()
    }
}

/// Number of offline episodes generated for each toy run.
pub const TOY_EPISODES: usize = 1000;

/// One toy-task training run: a dataset generated from `config.seed`,
/// training, then a final evaluation of the online policy.
pub fn run_toy(
    config: &TrainConfig,
    env: &ToyChainEnv,
    behavior: &BehaviorSpec,
    episodes: usize,
    sink: &mut dyn MetricsSink,
) -> Result<(TrainerState, ReturnStats)> {
    let data = gen_dataset(env, behavior, episodes, config.seed)?;
    let mut state = TrainerState::new(config, data.state_dim, data.action_dim)?;
    state.run_steps(&data, Some(env), config.total_steps(), sink)?;
    let stats = state.evaluate(env, config.eval_episodes)?;
    Ok((state, stats))
}

/// Cartesian grid over temperature, ensemble size and LCB coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub alphas: Vec<AlphaSetting>,
    pub members: Vec<usize>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    /// Entropy on and off crossed with a small and a large ensemble.
    fn default() -> Self {
        Self {
            alphas: vec![AlphaSetting::Fixed(0.0), AlphaSetting::Fixed(0.01)],
            members: vec![2, 16],
            betas: vec![4.0],
            seeds: (0..5).collect(),
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty()
            || self.members.is_empty()
            || self.betas.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::InvalidArgument("ablation grid has an empty axis".into()));
        }
        Ok(())
    }

    /// Cells in `(alpha, M, beta)` order.
    pub fn cells(&self) -> Vec<(AlphaSetting, usize, f64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &m in &self.members {
                for &b in &self.betas {
                    out.push((a, m, b));
                }
            }
        }
        out
    }

    pub fn run_count(&self) -> usize {
        self.cells().len() * self.seeds.len()
    }
}

/// Final evaluation of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub alpha: AlphaSetting,
    pub members: usize,
    pub beta: f64,
    pub seed: u64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

/// Across-seed summary of one cell. `std` is the population standard
/// deviation of the per-seed mean returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub alpha: AlphaSetting,
    pub members: usize,
    pub beta: f64,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(runs: &[AblationRun], grid: &AblationGrid) -> Vec<AblationSummary> {
    grid.cells()
        .into_iter()
        .map(|(alpha, members, beta)| {
            let means: Vec<f64> = runs
                .iter()
                .filter(|r| r.alpha == alpha && r.members == members && r.beta == beta)
                .map(|r| r.eval_mean)
                .collect();
            let (mean, std) = mean_std(&means);
            AblationSummary {
                alpha,
                members,
                beta,
                seeds: means.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Runs every cell for every seed on top of `base`. `on_run` sees each run
/// as it finishes together with its metrics.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    env: &ToyChainEnv,
    behavior: &BehaviorSpec,
    episodes: usize,
    mut on_run: impl FnMut(&AblationRun, &[MetricsRecord]) -> Result<()>,
) -> Result<(Vec<AblationRun>, Vec<AblationSummary>)> {
    grid.validate()?;
    let mut runs = Vec::with_capacity(grid.run_count());
    for (alpha, members, beta) in grid.cells() {
        for &seed in &grid.seeds {
            let cfg = TrainConfig {
                alpha,
                members,
                beta_lcb: beta,
                seed,
                ..base.clone()
            };
            let mut metrics = Vec::new();
            let (_, stats) = run_toy(&cfg, env, behavior, episodes, &mut metrics)?;
            let run = AblationRun {
                alpha,
                members,
                beta,
                seed,
                eval_mean: stats.mean,
                eval_std: stats.std,
            };
            on_run(&run, &metrics)?;
            runs.push(run);
        }
    }
    let summary = summarize(&runs, grid);
    Ok((runs, summary))
}
