//! `metaadapt` command-line front end: `train`, `sweep`, `eval`, `compare`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{compare_csv, evaluate_adaptation, task_sweep, SweepReport};
use crate::checkpoint::{checkpoint_load, checkpoint_to_string};
use crate::config::Config;
use crate::env::TaskSpec;
use crate::maml::{meta_train, training_log_csv};
use crate::policy::{PolicyModel, PolicyParams};
use crate::rng::tags;
use crate::safe::{safe_meta_train, safety_log_csv};
use crate::{Error, Result, RngStream};

#[derive(Debug, Parser)]
#[command(name = "metaadapt", version, about = "Second-order MAML with negative-adaptation diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (`key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-task parallelism (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train and write final.ckpt, train.csv and config.resolved.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Record measured per-iteration wall time instead of 0.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Evaluate adaptation over the configured task grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV; the training range goes to `<out>.meta`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one task's adaptation report as `key=value` lines.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        task_param: f64,
    },
    /// Sweep two checkpoints on the same grid and streams, side by side.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

/// Config file, then `--set` overrides, then `--seed`; validated.
pub fn resolve_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_params(path: &Path, cfg: &Config) -> Result<PolicyParams> {
    let ck = checkpoint_load(path)?;
    let expected = cfg.problem()?.policy.manifest();
    if ck.params.manifest() != &expected {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured policy shape",
            path.display()
        )));
    }
    Ok(ck.params)
}

fn sweep(cfg: &Config, params: &PolicyParams) -> Result<SweepReport> {
    let problem = cfg.problem()?;
    task_sweep(
        &problem,
        params,
        &cfg.sweep_grid()?,
        &cfg.maml,
        &cfg.eval,
        (cfg.task_low, cfg.task_high),
        &RngStream::new(cfg.seed).child(tags::SWEEP),
    )
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(Error::Config("--workers must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(f),
    }
}

/// Run a parsed command. `stdout` receives the `eval` report and short
/// summaries.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { common, out, wall_clock } => {
            let cfg = resolve_config(&common)?;
            let problem = cfg.problem()?;
            let root = RngStream::new(cfg.seed);
            let init = problem.policy.init_params(cfg.log_std_init, &mut root.child(tags::INIT).rng());
            let dist = cfg.distribution()?;
            let (params, log, safety_log) = with_workers(common.workers, || {
                if cfg.safe_enabled {
                    let (p, l, s) = safe_meta_train(&problem, &dist, init, &cfg.maml, &cfg.safety, &root)?;
                    Ok((p, l, Some(s)))
                } else {
                    let (p, l) = meta_train(&problem, &dist, init, &cfg.maml, &root)?;
                    Ok((p, l, None))
                }
            })?;
            std::fs::create_dir_all(&out).map_err(io_err(format!("creating {}", out.display())))?;
            write_file(&out.join("final.ckpt"), &checkpoint_to_string(&params, &cfg.digest()))?;
            write_file(&out.join("train.csv"), &training_log_csv(&log, wall_clock))?;
            write_file(&out.join("config.resolved"), &cfg.resolved())?;
            if let Some(s) = safety_log {
                write_file(&out.join("safe.csv"), &safety_log_csv(&s))?;
            }
            let last = log.last();
            writeln!(
                stdout,
                "trained {} iterations; final post_return {}; outputs in {}",
                log.len(),
                last.map_or("n/a".to_string(), |r| format!("{:?}", r.post_return)),
                out.display()
            )
            .map_err(io_err("writing stdout".into()))?;
        }
        Command::Sweep { common, checkpoint, out } => {
            let cfg = resolve_config(&common)?;
            let params = load_params(&checkpoint, &cfg)?;
            let report = with_workers(common.workers, || sweep(&cfg, &params))?;
            write_file(&out, &report.to_csv())?;
            let mut meta = out.clone().into_os_string();
            meta.push(".meta");
            write_file(Path::new(&meta), &report.training_range_line())?;
        }
        Command::Eval {
            common,
            checkpoint,
            task_param,
        } => {
            let cfg = resolve_config(&common)?;
            let params = load_params(&checkpoint, &cfg)?;
            let task = TaskSpec::new(cfg.family, task_param)?;
            let problem = cfg.problem()?;
            let stream = RngStream::new(cfg.seed).child(tags::SWEEP).child(task_param.to_bits());
            let r = with_workers(common.workers, || {
                evaluate_adaptation(&problem, &params, &task, &cfg.maml, &cfg.eval, &stream)
            })?;
            let mut text = format!("task_param={:?}\nn_eval={}\n", task.parameter(), r.pre.n);
            for (prefix, s) in [("pre", &r.pre), ("post", &r.post)] {
                for (name, v) in [
                    ("median", s.median),
                    ("p5", s.p5),
                    ("p25", s.p25),
                    ("p75", s.p75),
                    ("p95", s.p95),
                    ("mean", s.mean),
                ] {
                    text.push_str(&format!("{prefix}_{name}={v:?}\n"));
                }
            }
            text.push_str(&format!(
                "gamma_mean={:?}\nprob_improve={:?}\nnegative_flag={}\n",
                r.gamma_mean(),
                r.prob_improve,
                r.negative_flag
            ));
            stdout.write_all(text.as_bytes()).map_err(io_err("writing stdout".into()))?;
        }
        Command::Compare {
            common,
            checkpoint_a,
            checkpoint_b,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let a = load_params(&checkpoint_a, &cfg)?;
            let b = load_params(&checkpoint_b, &cfg)?;
            let (ra, rb) = with_workers(common.workers, || Ok((sweep(&cfg, &a)?, sweep(&cfg, &b)?)))?;
            write_file(&out, &compare_csv(&ra, &rb)?)?;
        }
    }
    Ok(())
}
