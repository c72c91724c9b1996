use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use overlearn::control::{empirical_loss, TrainingSet};
use overlearn::diagnostics::{
    empirical_rademacher, partition_training_set, relative_performance, v_bar_star,
    v_star_empirical, GroupWeighting, PathwiseConfig, RademacherConfig,
};
use overlearn::harness::{
    self, emit_results, ExperimentConfig, OutputFormat, RunConfig, ROLE_TEST, ROLE_TRAIN,
    ROLE_VALIDATION, THREADS_ENV,
};
use overlearn::problems::sample_training_set;
use overlearn::{trainer, Error, Result};

#[derive(Parser)]
#[command(name = "overlearn", version, about = "Deep Monte Carlo control with overlearning diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    config: PathBuf,
    /// Overrides the seed of the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; standard output when omitted (except for checkpoints).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a training set and write it as JSON.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Which derived stream to draw.
        #[arg(long, value_enum, default_value = "train")]
        role: Role,
    },
    /// Train a network action and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the training set and a fresh test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pathwise floors and, on request, a Rademacher estimate.
    Diag {
        #[command(flatten)]
        common: Common,
        /// Trajectories closer than this at some time are grouped.
        #[arg(long, default_value_t = 0.0)]
        link_tolerance: f64,
        /// Sign draws for the Rademacher estimate; zero skips it.
        #[arg(long, default_value_t = 0)]
        rademacher_draws: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Run a sweep of repeated trainings and write the result tables.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) {
    let n = harness::resolve_threads(threads);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("thread pool already initialized: {e}");
    }
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn draw(cfg: &RunConfig, role: u64) -> Result<TrainingSet> {
    let inst = cfg.problem.instance()?;
    sample_training_set(inst.sampler.as_ref(), cfg.n, cfg.seed_for(role))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample { common, role } => {
            set_threads(common.threads);
            let cfg = load_run(&common)?;
            let role = match role {
                Role::Train => ROLE_TRAIN,
                Role::Validation => ROLE_VALIDATION,
                Role::Test => ROLE_TEST,
            };
            let set = draw(&cfg, role)?;
            write_json(&serde_json::to_value(&set).expect("set serializes"), common.out.as_deref())
        }
        Command::Train { common } => {
            set_threads(common.threads);
            let cfg = load_run(&common)?;
            let inst = cfg.problem.instance()?;
            let train_set = draw(&cfg, ROLE_TRAIN)?;
            let validation = draw(&cfg, ROLE_VALIDATION)?;
            let (action, report) = trainer::train(
                &inst.problem,
                &train_set,
                &validation,
                &cfg.net_config(),
                &cfg.train_config(),
            )?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("model.ckpt"));
            harness::save_checkpoint(&action, &out)?;
            log::info!("checkpoint written to {}", out.display());
            write_json(
                &json!({
                    "checkpoint": out,
                    "stop_epoch": report.stop_epoch,
                    "best_epoch": report.best_epoch,
                    "stop_reason": report.stop_reason,
                    "best_validation_loss": report.best_validation_loss(),
                    "train_loss": report.train_loss,
                    "validation_loss": report.validation_loss,
                    "wall_time_secs": report.wall_time_secs,
                }),
                None,
            )
        }
        Command::Eval { common, checkpoint } => {
            set_threads(common.threads);
            let cfg = load_run(&common)?;
            let inst = cfg.problem.instance()?;
            let action = harness::load_action(&checkpoint, &inst.problem)?;
            let train_set = draw(&cfg, ROLE_TRAIN)?;
            let test_set = draw(&cfg, ROLE_TEST)?;
            let mut out = json!({
                "loss_in": empirical_loss(&inst.problem, &action, &train_set)?,
                "loss_out": empirical_loss(&inst.problem, &action, &test_set)?,
            });
            if let Some(oracle) = &inst.oracle {
                out["loss_oracle_in"] = json!(empirical_loss(&inst.problem, oracle, &train_set)?);
                out["loss_oracle_out"] = json!(empirical_loss(&inst.problem, oracle, &test_set)?);
                if let Some(lambda) = cfg.problem.lambda() {
                    let gap = relative_performance(
                        &inst.problem,
                        &action,
                        oracle,
                        &train_set,
                        &test_set,
                        lambda,
                    )?;
                    out["gap"] = serde_json::to_value(gap).expect("report serializes");
                }
            }
            write_json(&out, common.out.as_deref())
        }
        Command::Diag {
            common,
            link_tolerance,
            rademacher_draws,
            delta,
        } => {
            set_threads(common.threads);
            let cfg = load_run(&common)?;
            let inst = cfg.problem.instance()?;
            let problem = &inst.problem;
            let set = draw(&cfg, ROLE_TRAIN)?;
            let pw = PathwiseConfig {
                seed: cfg.seed,
                ..PathwiseConfig::default()
            };
            let v_star = v_star_empirical(problem, &set, &pw)?;
            let partition = partition_training_set(&set, link_tolerance)?;
            let v_bar = v_bar_star(problem, &set, &partition, &pw, GroupWeighting::Equal)?;
            let mut out = json!({
                "n": set.len(),
                "v_star": v_star,
                "groups": partition.len(),
                "v_bar_star": v_bar,
                "c_star": problem.c_star,
            });
            if let Some(oracle) = &inst.oracle {
                out["oracle_loss"] = json!(empirical_loss(problem, oracle, &set)?);
            }
            if rademacher_draws > 0 {
                let est = empirical_rademacher(
                    problem,
                    &cfg.net_config(),
                    &set,
                    rademacher_draws,
                    &RademacherConfig::default(),
                    cfg.seed,
                )?;
                let bounds = est.bounds(problem.c_star, set.len(), delta)?;
                out["rademacher"] = json!({
                    "r_hat": est.r_hat,
                    "std_error": est.std_error,
                    "skipped": est.skipped,
                    "is_lower_bound": est.is_lower_bound,
                    "bounds": bounds,
                });
            }
            write_json(&out, common.out.as_deref())
        }
        Command::Experiment { common, format } => {
            let mut cfg = ExperimentConfig::from_file(&common.config)?;
            if let Some(s) = common.seed {
                cfg.base_seed = s;
            }
            if common.threads.is_some() {
                cfg.threads = common.threads;
            }
            let (format, default_name) = match format {
                Format::Csv => (OutputFormat::Csv, "results.csv"),
                Format::Json => (OutputFormat::Json, "results.json"),
            };
            let out = common
                .out
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from(default_name));
            let result = harness::run_experiment(&cfg)?;
            emit_results(&result, format, &out)?;
            for c in &result.cells {
                let a = &c.aggregate;
                let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
                println!(
                    "cell {} d={} n={} params={}: p_in {} gap {} ({} ok, {} failed)",
                    c.spec.index,
                    c.spec.dim,
                    c.spec.n,
                    c.param_count,
                    f(a.p_in_mu),
                    f(a.gap_mu),
                    a.runs_ok,
                    a.failures
                );
            }
            println!("results written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
