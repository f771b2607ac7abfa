mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edpq_core::envs::{gen_dataset, ReturnStats};
use edpq_core::experiments::{
    reconstruct_benchmark, run_ablation, AblationRun, AblationSummary, ReconstructRow,
};
use edpq_core::io::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, MetricsWriter,
};
use edpq_core::trainer::{evaluate_policy, AlphaSetting, TrainerState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "edpq", version, about = "Entropy-regularized diffusion policy with Q-ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from the behavior mixture.
    GenData(GenDataArgs),
    /// Train a policy and critic ensemble on a dataset.
    Train(TrainArgs),
    /// Roll out a checkpointed policy.
    Eval(EvalArgs),
    /// Compare posterior sampling with the reverse-time SDE on a 2-D mixture.
    DemoReconstruct(ReconstructArgs),
    /// Train a grid of temperatures, ensemble sizes and LCB coefficients.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    ToyChain,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "toy-chain")]
    env: EnvName,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Overrides shared by the training commands.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Entropy temperature, a number or `auto`.
    #[arg(long)]
    alpha: Option<AlphaSetting>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    members: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Diffusion steps T.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    diffusion_steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps_per_epoch: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    eval_every: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    eval_episodes: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let t = &mut cfg.train;
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.members {
            t.members = v as usize;
        }
        if let Some(v) = self.beta {
            t.beta_lcb = v;
        }
        if let Some(v) = self.diffusion_steps {
            t.diffusion_steps = v as usize;
        }
        if let Some(v) = self.epochs {
            t.epochs = v as usize;
        }
        if let Some(v) = self.steps_per_epoch {
            t.steps_per_epoch = v as usize;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v as usize;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v as usize;
        }
        if let Some(v) = self.eval_episodes {
            t.eval_episodes = v as usize;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Supplies the environment; defaults to the run's own config when the
    /// checkpoint sits in a run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; defaults to `eval/` beside the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    train_steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    eval_samples: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<AlphaSetting>>,
    #[arg(long = "members-grid", value_delimiter = ',')]
    members_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Offline episodes per generated dataset.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DemoReconstruct(a) => demo_reconstruct(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn print_hash(cfg: &RunConfig) -> Result<()> {
    println!("config hash: {}", cfg.hash()?);
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let EnvName::ToyChain = args.env;
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(n) = args.episodes {
        cfg.episodes = n as usize;
    }
    cfg.validate()?;
    print_hash(&cfg)?;
    let data = gen_dataset(&cfg.env, &cfg.behavior, cfg.episodes, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_dataset(&args.out, &data)?;
    let terminal: Vec<f64> = data
        .transitions
        .iter()
        .filter(|t| t.done)
        .map(|t| t.reward)
        .collect();
    let stats = ReturnStats::from_returns(terminal);
    println!(
        "wrote {} transitions from {} episodes to {}",
        data.len(),
        cfg.episodes,
        args.out.display()
    );
    println!(
        "episode return mean {:.4} std {:.4} max {:.4}",
        stats.mean,
        stats.std,
        stats.returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    Ok(())
}

fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

fn step_checkpoint(run_dir: &Path, step: u64) -> PathBuf {
    checkpoint_dir(run_dir).join(format!("step_{step:08}.ckpt"))
}

/// Newest `step_*.ckpt` in the run directory.
fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = checkpoint_dir(run_dir);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn train(args: TrainArgs) -> Result<()> {
    let run_dir = &args.run_dir;
    let config_path = run_dir.join("config.toml");
    let cfg = if args.resume {
        if args.flags.config.is_some() {
            bail!("--resume reads the config from the run directory");
        }
        let cfg = RunConfig::load(Some(&config_path))?;
        cfg.validate()?;
        cfg
    } else {
        args.flags.resolve()?
    };
    print_hash(&cfg)?;
    let data = load_dataset(&args.data)?;
    ensure_dir(&checkpoint_dir(run_dir))?;
    ensure_dir(&run_dir.join("eval"))?;

    let metrics_path = run_dir.join("metrics.jsonl");
    let (mut state, mut metrics) = if args.resume {
        let path = latest_checkpoint(run_dir)?
            .with_context(|| format!("no checkpoint under {}", run_dir.display()))?;
        let state = load_checkpoint(&path)?;
        if state.config != cfg.train {
            bail!("checkpoint {} was written with a different config", path.display());
        }
        println!("resuming from step {}", state.step);
        (state, MetricsWriter::append(&metrics_path)?)
    } else {
        fs::write(&config_path, cfg.to_toml()?)
            .with_context(|| format!("writing {}", config_path.display()))?;
        let state = TrainerState::new(&cfg.train, data.state_dim, data.action_dim)?;
        (state, MetricsWriter::create(&metrics_path)?)
    };

    let total = cfg.train.total_steps();
    let chunk = match cfg.checkpoint_every {
        0 => total.max(1),
        n => n,
    };
    while state.step < total {
        let n = chunk.min(total - state.step);
        state.run_steps(&data, Some(&cfg.env), n, &mut metrics)?;
        metrics.flush()?;
        save_checkpoint(step_checkpoint(run_dir, state.step), &state)?;
    }
    save_checkpoint(checkpoint_dir(run_dir).join("final.ckpt"), &state)?;
    let stats = state.evaluate(&cfg.env, cfg.train.eval_episodes)?;
    println!(
        "trained {} steps; return {:.4} ± {:.4} over {} episodes",
        state.step, stats.mean, stats.std, cfg.train.eval_episodes
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    step: u64,
    seed: u64,
    episodes: usize,
    mean: f64,
    std: f64,
    returns: Vec<f64>,
}

fn eval(args: EvalArgs) -> Result<()> {
    let run_config = args
        .checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join("config.toml"))
        .filter(|p| p.is_file());
    let cfg = RunConfig::load(args.config.as_deref().or(run_config.as_deref()))?;
    cfg.env.validate()?;
    print_hash(&cfg)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let stats = evaluate_policy(&state.policy, &cfg.env, args.episodes as usize, &mut rng)?;
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        step: state.step,
        seed: args.seed,
        episodes: stats.returns.len(),
        mean: stats.mean,
        std: stats.std,
        returns: stats.returns,
    };
    let out = match args.out {
        Some(p) => p,
        None => {
            let ckpt_dir = args.checkpoint.parent().unwrap_or(Path::new("."));
            let base = ckpt_dir.parent().unwrap_or(Path::new("."));
            base.join("eval")
                .join(format!("step_{:08}_seed_{}.json", state.step, args.seed))
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(&out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "step {}: return {:.4} ± {:.4} over {} episodes -> {}",
        report.step,
        report.mean,
        report.std,
        report.episodes,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CloudPoint {
    x: f64,
    y: f64,
}

fn demo_reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(n) = args.train_steps {
        cfg.reconstruct.train_steps = n as usize;
    }
    if let Some(n) = args.eval_samples {
        cfg.reconstruct.eval_samples = n as usize;
    }
    if args.seeds.is_empty() {
        bail!("need at least one seed");
    }
    print_hash(&cfg)?;
    let clouds_dir = args.out.join("clouds");
    ensure_dir(&clouds_dir)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    let mut rows: Vec<ReconstructRow> = Vec::new();
    println!("{:>4}  {:<11} {:>5}  {:>9}", "seed", "sampler", "T", "distance");
    for &seed in &args.seeds {
        let outcome = reconstruct_benchmark(&cfg.reconstruct, seed)?;
        for row in &outcome.rows {
            println!(
                "{:>4}  {:<11} {:>5}  {:>9.5}",
                seed,
                sampler_name(row.sampler),
                row.steps,
                row.distance
            );
        }
        for cloud in &outcome.clouds {
            let name = format!("seed_{seed}_{}_T{}.csv", sampler_name(cloud.sampler), cloud.steps);
            write_csv(&clouds_dir.join(name), &to_points(&cloud.points))?;
        }
        write_csv(
            &clouds_dir.join(format!("seed_{seed}_heldout.csv")),
            &to_points(&outcome.heldout),
        )?;
        rows.extend(outcome.rows);
    }
    let path = args.out.join("reconstruct.csv");
    write_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sampler_name(s: edpq_core::policy::Sampler) -> &'static str {
    match s {
        edpq_core::policy::Sampler::Posterior => "posterior",
        edpq_core::policy::Sampler::ReverseSde => "reverse-sde",
    }
}

fn to_points(points: &[[f64; 2]]) -> Vec<CloudPoint> {
    points.iter().map(|p| CloudPoint { x: p[0], y: p[1] }).collect()
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = args.flags.resolve()?;
    if let Some(v) = args.alphas {
        cfg.ablation.alphas = v;
    }
    if let Some(v) = args.members_grid {
        cfg.ablation.members = v;
    }
    if let Some(v) = args.betas {
        cfg.ablation.betas = v;
    }
    if let Some(v) = args.seeds {
        cfg.ablation.seeds = v;
    }
    if let Some(n) = args.episodes {
        cfg.episodes = n as usize;
    }
    cfg.validate()?;
    print_hash(&cfg)?;
    ensure_dir(&args.out.join("cells"))?;
    fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    println!("{} runs", cfg.ablation.run_count());
    let out = &args.out;
    let (runs, summary): (Vec<AblationRun>, Vec<AblationSummary>) = run_ablation(
        &cfg.train,
        &cfg.ablation,
        &cfg.env,
        &cfg.behavior,
        cfg.episodes,
        |run, records| {
            let dir = out.join("cells").join(format!(
                "alpha_{}_m_{}_beta_{}_seed_{}",
                run.alpha, run.members, run.beta, run.seed
            ));
            fs::create_dir_all(&dir)?;
            let mut w = MetricsWriter::create(dir.join("metrics.jsonl"))?;
            for rec in records {
                w.write(rec)?;
            }
            w.flush()?;
            println!(
                "alpha {} M {} beta {} seed {}: {:.4} ± {:.4}",
                run.alpha, run.members, run.beta, run.seed, run.eval_mean, run.eval_std
            );
            Ok(())
        },
    )?;
    write_csv(&out.join("runs.csv"), &runs)?;
    write_csv(&out.join("summary.csv"), &summary)?;
    println!("{:>6} {:>4} {:>5} {:>8} {:>8}", "alpha", "M", "beta", "mean", "std");
    for s in &summary {
        println!(
            "{:>6} {:>4} {:>5} {:>8.4} {:>8.4}",
            s.alpha.to_string(),
            s.members,
            s.beta,
            s.mean,
            s.std
        );
    }
    Ok(())
}
