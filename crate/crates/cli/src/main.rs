use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fan_core::config::FanConfig;
use fan_core::data::{generate_dataset, read_dataset, write_dataset, BehaviorMix, OfflineDataset};
use fan_core::env::{EnvKind, ToyEnv};
use fan_core::error::Error;
use fan_core::gradcheck::{run_gradient_checks, GRAD_REL_TOL};
use fan_core::rng::{uniform_unit, Streams};
use fan_core::theory::{
    expectile_1d, fixed_point_iterate, verify_anchoring_bound, verify_contraction,
    verify_expectile_limit, CheckRecord, TabularNoiseMDP, REPORT_HEADER,
};
use fan_core::trainer::{
    evaluate, fan_train, finetune_online, flop_estimate, load_checkpoint, run_ablation,
    save_checkpoint, train_behavior_cloning, write_metrics_csv, AblationSuite,
};
use rand::Rng;

#[derive(Parser)]
#[command(name = "fan", version, about = "Train and check flow-anchored offline RL agents on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted behavior mix and write a dataset file.
    GenData {
        #[arg(long, value_parser = parse_env)]
        env: EnvKind,
        #[arg(long, default_value_t = 50_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        mix: Option<Mix>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train offline and save a checkpoint plus `metrics.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Train the policy on the behavior regularizer only.
        #[arg(long)]
        bc: bool,
    },
    /// Evaluate a checkpoint's policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvKind>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue training with environment interaction.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Offline data seeding the buffer; defaults to the env's standard mix.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a verification suite and print one record per check.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint for the anchoring suite (1-D actions); trains one if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train an ablation grid and print mean and std success per cell.
    Ablate {
        #[arg(long)]
        suite: AblationSuite,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print closed-form FLOP counts for a configuration.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mix {
    Mixed,
    Expert,
    Twin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Contraction,
    Expectile,
    Anchoring,
    Grad,
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Errors that map to exit code 1 rather than 2.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let check = e.downcast_ref::<CheckFailed>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Aborted { .. }));
            ExitCode::from(if check { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            env,
            n,
            seed,
            mix,
            out,
        } => gen_data(env, n, seed, mix, &out),
        Command::Train {
            config,
            data,
            out_dir,
            bc,
        } => train(config.as_deref(), &data, &out_dir, bc),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
        } => eval(&checkpoint, env, episodes, seed),
        Command::Finetune {
            checkpoint,
            config,
            data,
            out_dir,
        } => finetune(&checkpoint, config.as_deref(), data.as_deref(), out_dir),
        Command::Verify {
            suite,
            seed,
            checkpoint,
        } => verify(suite, seed, checkpoint.as_deref()),
        Command::Ablate {
            suite,
            seeds,
            config,
            data,
        } => ablate(suite, seeds, config.as_deref(), data.as_deref()),
        Command::Flops { config } => {
            let cfg = load_config(config.as_deref())?;
            let env = ToyEnv::new(cfg.env);
            print!("{}", flop_estimate(&cfg, env.state_dim, env.action_dim));
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FanConfig> {
    match path {
        None => Ok(FanConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FanConfig::parse(&text)?)
        }
    }
}

fn default_mix(env: &ToyEnv) -> BehaviorMix {
    match env.kind {
        EnvKind::PointMass2d => BehaviorMix::mixed_quality(),
        EnvKind::TwinGoal1d => BehaviorMix::twin_goal(),
    }
}

fn gen_data(kind: EnvKind, n: usize, seed: u64, mix: Option<Mix>, out: &Path) -> anyhow::Result<()> {
    let env = ToyEnv::new(kind);
    let mix = match mix {
        None => default_mix(&env),
        Some(Mix::Mixed) => BehaviorMix::mixed_quality(),
        Some(Mix::Expert) => BehaviorMix::expert(&env, 0.1),
        Some(Mix::Twin) => BehaviorMix::twin_goal(),
    };
    let ds = generate_dataset(&env, &mix, n, seed)?;
    write_dataset(out, &ds)?;
    let stats = ds.episode_stats();
    println!(
        "wrote {} transitions ({} episodes, success rate {:.3}) to {}",
        ds.len(),
        stats.episodes,
        stats.success_rate(),
        out.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out_dir: &Path, bc: bool) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let ds = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let out = if bc {
        train_behavior_cloning(&ds, &cfg)?
    } else {
        fan_train(&ds, &cfg)?
    };
    save_checkpoint(out_dir, &out.nets, &cfg)?;
    write_metrics_csv(out_dir.join("metrics.csv"), &out.log)?;
    if let (Some(last), Some(best)) = (out.final_success(), out.best_last_success(3)) {
        println!(
            "final success {last:.3}, mean of last 3 {:.3}, best of last 3 {best:.3}",
            out.mean_last_success(3).unwrap_or(0.0)
        );
    }
    println!("checkpoint written to {}", out_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, env: Option<EnvKind>, episodes: usize, seed: u64) -> anyhow::Result<()> {
    let (nets, cfg) = load_checkpoint(checkpoint)?;
    let kind = env.unwrap_or(cfg.env);
    if kind != cfg.env {
        bail!("checkpoint was trained on {}, not {kind}", cfg.env);
    }
    if episodes == 0 {
        bail!("episodes must be at least 1");
    }
    let env = ToyEnv::new(kind);
    let stats = evaluate(&nets.pi, &env, episodes, &mut Streams::new(seed).stream("eval", 0))?;
    println!("episodes\t{episodes}");
    println!("mean_return\t{}", stats.mean_return);
    println!("success_rate\t{}", stats.success_rate);
    Ok(())
}

fn offline_data(data: Option<&Path>, cfg: &FanConfig) -> anyhow::Result<OfflineDataset> {
    match data {
        Some(p) => Ok(read_dataset(p).with_context(|| format!("reading {}", p.display()))?),
        None => {
            let env = ToyEnv::new(cfg.env);
            Ok(generate_dataset(&env, &default_mix(&env), 50_000, 0)?)
        }
    }
}

fn finetune(
    checkpoint: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (nets, saved) = load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => {
            let mut cfg = saved.clone();
            cfg.apply_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            cfg
        }
        None => saved.clone(),
    };
    if cfg.env != saved.env || cfg.hidden != saved.hidden || cfg.ensemble != saved.ensemble {
        bail!("config changes env, net.hidden or critic.ensemble of the checkpoint");
    }
    let ds = offline_data(data, &cfg)?;
    let out = finetune_online(nets, &ds, &cfg)?;
    let dir = out_dir.unwrap_or_else(|| checkpoint.join("online"));
    save_checkpoint(&dir, &out.nets, &cfg)?;
    write_metrics_csv(dir.join("metrics.csv"), &out.log)?;
    if let Some(last) = out.log.last() {
        println!("final online success {:.3} after {} env steps", last.eval_success_rate, out.env_steps);
    }
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn verify(suite: Suite, seed: u64, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let records = match suite {
        Suite::Contraction => contraction_records(seed)?,
        Suite::Expectile => expectile_records(seed)?,
        Suite::Anchoring => anchoring_records(seed, checkpoint)?,
        Suite::Grad => run_gradient_checks(50, seed)?
            .into_iter()
            .map(|c| {
                let passed = c.passed();
                CheckRecord::new(format!("grad/{}", c.name), c.max_rel_error, GRAD_REL_TOL, passed)
            })
            .collect(),
    };
    println!("{REPORT_HEADER}");
    for r in &records {
        println!("{r}");
    }
    let failed = records.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} of {} checks failed", records.len())).into());
    }
    Ok(())
}

fn contraction_records(seed: u64) -> anyhow::Result<Vec<CheckRecord>> {
    let streams = Streams::new(seed);
    let tol = 1e-8;
    let mut out = Vec::new();
    for (i, &gamma) in [0.5, 0.9, 0.99].iter().cycle().take(10).enumerate() {
        let i = i as u64;
        let mut rng = streams.stream("mdp", i);
        let (ns, na, nz) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=8));
        let mdp = TabularNoiseMDP::random(&mut rng, ns, na, nz, gamma)?;
        let report = verify_contraction(&mdp, 100, &mut streams.stream("pairs", i))?;
        out.push(CheckRecord::new(
            format!("contraction/mdp{i}/max_ratio"),
            report.max_ratio,
            gamma,
            report.passed(),
        ));
        let (lo, hi) = mdp.return_range();
        let a = fixed_point_iterate(&mdp, &mdp.zeros(), tol)?;
        let init = mdp.random_table(&mut streams.stream("init", i), lo - 5.0, hi + 5.0);
        let b = fixed_point_iterate(&mdp, &init, tol)?;
        out.push(CheckRecord::at_most(
            format!("contraction/mdp{i}/fixed_point_gap"),
            fan_core::theory::d_infty(&a.table, &b.table)?,
            2.0 * tol / (1.0 - gamma),
        ));
    }
    Ok(out)
}

fn expectile_records(seed: u64) -> anyhow::Result<Vec<CheckRecord>> {
    let grid = [0.5, 0.7, 0.9, 0.99, 0.999];
    let samples = uniform_unit(&mut Streams::new(seed).stream("expectile", 0), 100);
    let r = verify_expectile_limit(&samples, &grid)?;
    let closed = expectile_1d(&[0.0, 1.0], 0.9)?;
    Ok(vec![
        CheckRecord::at_most("expectile/max_decrease", r.max_decrease, 1e-9),
        CheckRecord::at_most("expectile/mean_gap", (r.values[0] - r.sample_mean).abs(), 1e-9),
        CheckRecord::at_most("expectile/relative_gap_to_max", r.relative_gap(), 0.02),
        CheckRecord::at_most("expectile/two_point", (closed - 0.9).abs(), 1e-8),
    ])
}

fn anchoring_records(seed: u64, checkpoint: Option<&Path>) -> anyhow::Result<Vec<CheckRecord>> {
    let nets = match checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => {
            let data = generate_dataset(&ToyEnv::twin_goal_1d(), &BehaviorMix::twin_goal(), 20_000, seed)?;
            let cfg = FanConfig {
                env: EnvKind::TwinGoal1d,
                seed,
                total_steps: 2_000,
                eval_every: 2_000,
                eval_episodes: 10,
                ..FanConfig::default()
            };
            fan_train(&data, &cfg)?.nets
        }
    };
    if nets.action_dim() != 1 {
        bail!("the anchoring suite needs a checkpoint with 1-D actions");
    }
    let env = ToyEnv::twin_goal_1d();
    let held_out = generate_dataset(&env, &BehaviorMix::twin_goal(), 2_000, seed + 1_000)?;
    let streams = Streams::new(seed).derive("heldout", 0);
    let mut out = Vec::new();
    for k in 0..4 {
        let batch = fan_core::data::sample_batch(&held_out, 16, &mut streams.stream("states", k))?;
        let r = verify_anchoring_bound(&nets.pi, &nets.v, batch.states.view(), 200, &mut streams.stream("noise", k))?;
        out.push(CheckRecord::new(
            format!("anchoring/batch{k}"),
            r.mean_w2_squared,
            r.bound + r.slack,
            r.passed(),
        ));
    }
    Ok(out)
}

fn ablate(
    suite: AblationSuite,
    seeds: usize,
    config: Option<&Path>,
    data: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let ds = offline_data(data, &cfg)?;
    print!("{}", run_ablation(suite, &ds, &cfg, seeds)?);
    Ok(())
}
