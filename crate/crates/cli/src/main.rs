//! `nsdt`: environment inspection, planning, data generation, training,
//! evaluation, bound checks and reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nsdt_core::baselines::Method;
use nsdt_core::experiments::{
    self, assemble_episodes, checkpoint_path, dataset_path, dataset_mode_for, emit_heatmap_data, evaluate_policy,
    generate_dataset, load_policy, read_dataset, write_dataset, DatasetMode, EvalConfig, ExperimentConfig,
};
use nsdt_core::gridworld::{EnvConfig, GridWorld};
use nsdt_core::hierarchy::{run_episodes, write_traces, Decode};
use nsdt_core::symbolic::{abstract_state, ground_operators, plan, GoalSpec};
use nsdt_core::theory::{verify_theorem1, verify_theorem2, Thm1Config, Thm2Config};

#[derive(Parser)]
#[command(name = "nsdt", version, about = "Hierarchical neuro-symbolic decision transformer experiments")]
struct Cli {
    /// Base seed for data generation, training and bound checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EnvArg {
    /// Preset name (case1_default, case2_default) or path to an environment JSON file.
    #[arg(long, default_value = "case1_default")]
    env: String,
    /// Overrides the environment's fail_prob.
    #[arg(long)]
    fail_prob: Option<f64>,
}

impl EnvArg {
    fn world(&self) -> Result<GridWorld> {
        let mut cfg = if Path::new(&self.env).is_file() {
            EnvConfig::from_json(&fs::read_to_string(&self.env)?)?
        } else {
            EnvConfig::preset(&self.env)?
        };
        if let Some(p) = self.fail_prob {
            cfg = cfg.with_fail_prob(p);
        }
        Ok(GridWorld::new(cfg)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hybrid,
    Pure,
}

impl From<ModeArg> for DatasetMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hybrid => DatasetMode::HybridLabeled,
            ModeArg::Pure => DatasetMode::PureUnlabeled,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print an environment's configuration and initial state.
    Env {
        #[command(flatten)]
        env: EnvArg,
    },
    /// Print the symbolic plan from the initial state and its cost.
    Plan {
        #[command(flatten)]
        env: EnvArg,
    },
    /// Generate a demonstration dataset.
    GenData {
        #[command(flatten)]
        env: EnvArg,
        #[arg(long, value_enum, default_value = "hybrid")]
        mode: ModeArg,
        /// Scripted episodes; defaults to the per-case size.
        #[arg(long)]
        episodes: Option<usize>,
        /// Share of random-attempt episodes in the pure dataset.
        #[arg(long)]
        random_fraction: Option<f64>,
    },
    /// Train one method from its dataset.
    Train {
        #[command(flatten)]
        env: EnvArg,
        /// pure_dt, dqn, lstm, gru, options or hybrid.
        #[arg(long)]
        method: Method,
        /// Dataset file; defaults to the one `gen-data` writes for the method.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dqn_steps: Option<usize>,
    },
    /// Run a few episodes and print their outcomes.
    Rollout {
        #[command(flatten)]
        env: EnvArg,
        #[arg(long, default_value = "hybrid")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "greedy")]
        decode: DecodeArg,
    },
    /// Evaluate methods over the fail_prob grid and write metrics.
    Evaluate {
        #[command(flatten)]
        env: EnvArg,
        /// Comma-separated methods; all seven by default.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Check the hierarchical regret bound or the PAC sub-goal bound.
    Verify {
        #[command(subcommand)]
        which: Verify,
    },
    /// Rebuild metrics files and the heatmap from evaluated cells.
    Report {
        /// Recompute every row from trace files and compare with the existing CSV.
        #[arg(long)]
        recompute: bool,
        /// Also emit the method x (case, fail_prob) heatmap; needs the full grid.
        #[arg(long)]
        heatmap: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Greedy,
    Sample,
}

#[derive(Subcommand)]
enum Verify {
    /// Hierarchical regret bound on random small instances.
    Thm1 {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// PAC sub-goal bound over a training-size sweep.
    Thm2 {
        /// Comma-separated segment counts per operator.
        #[arg(long, value_delimiter = ',')]
        m_grid: Vec<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    experiments::write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = experiment_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Env { env } => {
            let world = env.world()?;
            println!("{}", world.config().to_json_pretty());
            print!("{}", world.render(&world.reset()));
        }
        Command::Plan { env } => {
            let world = env.world()?;
            let p = plan(&abstract_state(&world, &world.reset()), &GoalSpec::for_world(&world), &ground_operators(&world))?;
            for (i, name) in p.names().iter().enumerate() {
                println!("{:>3}  {name}", i + 1);
            }
            println!("cost {}", p.total_cost);
        }
        Command::GenData { env, mode, episodes, random_fraction } => {
            let world = env.world()?;
            let mode = DatasetMode::from(mode);
            let mut dc = cfg.dataset(world.case(), mode, cli.seed);
            if let Some(n) = episodes {
                dc.episodes = n;
            }
            if let Some(f) = random_fraction {
                dc.random_fraction = f;
            }
            let data = generate_dataset(&world, &dc)?;
            let path = dataset_path(out, world.case(), mode);
            write_dataset(&path, &data.segments)?;
            write_json(&path.with_extension("report.json"), &data.report)?;
            for w in &data.report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: {} segments, {} steps, {} successes",
                path.display(),
                data.report.segments,
                data.report.steps,
                data.report.successes
            );
        }
        Command::Train { env, method, data, epochs, dqn_steps } => {
            let world = env.world()?;
            let Some(mode) = dataset_mode_for(method) else { bail!("{method} is not trained") };
            let data = data.unwrap_or_else(|| dataset_path(out, world.case(), mode));
            let episodes = assemble_episodes(&read_dataset(&data)?)?;
            let mut overrides = cfg.train.clone();
            overrides.epochs = epochs.or(overrides.epochs);
            overrides.dqn_steps = dqn_steps.or(overrides.dqn_steps);
            let ckpt = checkpoint_path(out, method, world.case());
            let summary = experiments::train_method(method, &world, &episodes, &overrides, cli.seed, &ckpt)?;
            write_json(&ckpt.with_extension("train.json"), &summary)?;
            for (i, l) in summary.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.6}", i + 1);
            }
            println!("{} samples -> {}", summary.samples, ckpt.display());
        }
        Command::Rollout { env, method, checkpoint, episodes, decode } => {
            let world = GridWorld::new(env.world()?.config().clone().with_seed(cli.seed))?;
            let ckpt = checkpoint.unwrap_or_else(|| checkpoint_path(out, method, world.case()));
            let policy = load_policy(method, &ckpt)?;
            let decode = match decode {
                DecodeArg::Greedy => Decode::Greedy,
                DecodeArg::Sample => Decode::Sample,
            };
            let traces = run_episodes(&world, policy.as_ref(), &cfg.eval.exec, decode, 0..episodes as u64);
            let mut buf = Vec::new();
            write_traces(&mut buf, &traces)?;
            let path = out.join("rollouts").join(format!("{}_{}.jsonl", world.case().short_name(), method.slug()));
            experiments::write_atomic(&path, &buf)?;
            for t in &traces {
                println!(
                    "episode {:>3}  success {:<5}  steps {:>3}  return {:.2}  replans {}",
                    t.episode,
                    t.success,
                    t.steps(),
                    t.total_reward(),
                    t.replans
                );
            }
        }
        Command::Evaluate { env, methods, episodes, seeds } => {
            let world = env.world()?;
            let eval = EvalConfig {
                episodes: episodes.unwrap_or(cfg.eval.episodes),
                seeds: seeds.unwrap_or(cfg.eval.seeds),
                ..cfg.eval.clone()
            };
            let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods };
            // fail before any work if a checkpoint is missing
            let policies = methods
                .iter()
                .map(|&m| load_policy(m, &checkpoint_path(out, m, world.case())).map(|p| (m, p)))
                .collect::<Result<Vec<_>, _>>()?;
            for (m, policy) in &policies {
                for r in evaluate_policy(policy.as_ref(), *m, &world, &eval, Some(out))? {
                    println!(
                        "{:<16} {:<7} fail {:<4} success {:.3} ± {:.3}",
                        m.label(),
                        r.case.short_name(),
                        r.fail_prob,
                        r.success_rate,
                        r.success_rate_std
                    );
                }
            }
            experiments::write_metrics(out, &experiments::collect_rows(out, false)?)?;
        }
        Command::Verify { which: Verify::Thm1 { instances } } => {
            let report = verify_theorem1(&Thm1Config { instances, seed: cli.seed, ..Thm1Config::default() })?;
            write_json(&out.join("verify").join("thm1.json"), &report)?;
            println!(
                "{} instances, {} violations, min slack {:.4}",
                report.instances.len(),
                report.violations,
                report.min_slack
            );
            if report.violations > 0 {
                bail!("hierarchical bound violated on {} instances", report.violations);
            }
        }
        Command::Verify { which: Verify::Thm2 { m_grid, seeds } } => {
            let mut tc = Thm2Config { seed: cli.seed, ..Thm2Config::default() };
            if !m_grid.is_empty() {
                tc.m_grid = m_grid;
            }
            if let Some(s) = seeds {
                tc.seeds = s;
            }
            let report = verify_theorem2(&tc)?;
            write_json(&out.join("verify").join("thm2.json"), &report)?;
            for p in &report.points {
                let within = p.within_bound.map_or("-".to_string(), |w| format!("{w:.2}"));
                println!(
                    "m {:>5}  failure {:.4} ± {:.4}  bound {:.4}  within {within}",
                    p.m, p.mean_failure, p.half_width, p.bound
                );
            }
            println!("slope {:.3}  monotone {}  bound holds {}", report.slope, report.monotone_within_ci, report.bound_holds);
        }
        Command::Report { recompute, heatmap } => {
            let summary = experiments::report(out, recompute)?;
            println!("{} rows -> {}", summary.rows.len(), experiments::metrics_paths(out).0.display());
            if summary.identical == Some(false) {
                bail!("recomputed metrics differ from the existing CSV");
            }
            if heatmap {
                emit_heatmap_data(&summary.rows)?.write(out)?;
                println!("heatmap -> {}", out.join("heatmap.csv").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
