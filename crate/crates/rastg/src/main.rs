use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rastg::config::RunConfig;
use rastg::error::{exit, Error, Result};
use rastg::fsutil;
use rastg::pipeline::{self, SplitSel};
use rastg::runlog::{Level, RunLog, StderrLogger};
use rastg_core::feedback::WindowSpec;
use rastg_core::preprocess::SamplingPolicy;

/// Skeleton-based rehabilitation exercise assessment.
#[derive(Debug, Parser)]
#[command(name = "rastg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Echo more progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// First frame of every group.
    First,
    /// Seeded random frame of every group.
    Random,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Normalize and resample every sequence of a manifest.
    Preprocess {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target_len: Option<usize>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Append bone orientation quaternions.
        #[arg(long)]
        quaternions: bool,
    },
    /// Train a model and evaluate it on the held-out split.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// all, train, val or test.
        #[arg(long, default_value = "all")]
        split: String,
        /// Split assignment written by `train`.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Score one sequence and write its joint heatmap.
    Assess {
        checkpoint: PathBuf,
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        id: Option<String>,
        /// Also render the heatmap as PNG.
        #[arg(long)]
        png: bool,
    },
    /// Assess every session and summarize scores per period.
    Report {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subject: Option<String>,
        /// `month` or `days:N`.
        #[arg(long, default_value = "month")]
        window: String,
        #[arg(long)]
        png: bool,
    },
}

fn parse_window(s: &str) -> Result<WindowSpec> {
    if s == "month" {
        return Ok(WindowSpec::Month);
    }
    s.strip_prefix("days:")
        .and_then(|n| n.parse().ok())
        .filter(|&n| n > 0)
        .map(WindowSpec::Days)
        .ok_or_else(|| Error::Usage(format!("--window must be `month` or `days:N`, got `{s}`")))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        for key in ["train.seed", "split.seed", "model.init_seed", "synth.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    overrides.extend_from_slice(extra);
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn open_log(out: &Path, echo: Level) -> Result<RunLog> {
    fsutil::create_dir(out)?;
    RunLog::create(out, Some(echo))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let echo = match c.verbose {
        0 => Level::Warn,
        1 => Level::Info,
        _ => Level::Debug,
    };
    let filter = match echo {
        Level::Warn => log::LevelFilter::Warn,
        Level::Info => log::LevelFilter::Info,
        Level::Debug => log::LevelFilter::Debug,
    };
    if log::set_boxed_logger(Box::new(StderrLogger(filter))).is_ok() {
        log::set_max_level(filter);
    }
    match &cli.command {
        Command::Synth { out, n } => {
            let extra: Vec<String> = n.iter().map(|n| format!("synth.n={n}")).collect();
            let cfg = config(c, &extra)?;
            let mut log = open_log(out, echo)?;
            let path = pipeline::synth(out, &cfg, &mut log)?;
            println!("{}", path.display());
        }
        Command::Preprocess {
            manifest,
            out,
            target_len,
            policy,
            quaternions,
        } => {
            let mut extra: Vec<String> = target_len.iter().map(|t| format!("data.target_frames={t}")).collect();
            if *quaternions {
                extra.push("data.quaternions=true".into());
            }
            let mut cfg = config(c, &extra)?;
            match policy {
                Some(PolicyArg::First) => cfg.data.policy = SamplingPolicy::DeterministicFirst,
                Some(PolicyArg::Random) => {
                    cfg.data.policy = SamplingPolicy::RandomInGroup {
                        seed: c.seed.unwrap_or(0),
                    }
                }
                None => {}
            }
            let mut log = open_log(out, echo)?;
            let path = pipeline::preprocess(manifest, out, &cfg, &mut log)?;
            println!("{}", path.display());
        }
        Command::Train { manifest, out, epochs } => {
            let extra: Vec<String> = epochs.iter().map(|e| format!("train.epochs={e}")).collect();
            let cfg = config(c, &extra)?;
            let mut log = open_log(out, echo)?;
            let s = pipeline::train(manifest, out, &cfg, &mut log)?;
            let m = &s.test.report.overall;
            println!(
                "best_epoch={} test_mad={:.4} test_rmse={:.4} test_mape={}",
                s.best_epoch,
                m.mad,
                m.rmse,
                opt(m.mape)
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            split,
            split_file,
        } => {
            let cfg = config(c, &[])?;
            let sel: SplitSel = split.parse()?;
            let mut log = open_log(out, echo)?;
            let doc = pipeline::eval(checkpoint, manifest, sel, split_file.as_deref(), out, &cfg, &mut log)?;
            let m = &doc.report.overall;
            println!(
                "split={} mad={:.4} rmse={:.4} mape={}",
                doc.split,
                m.mad,
                m.rmse,
                opt(m.mape)
            );
        }
        Command::Assess {
            checkpoint,
            sequence,
            out,
            id,
            png,
        } => {
            let cfg = config(c, &[])?;
            let mut log = open_log(out, echo)?;
            let r = pipeline::assess(checkpoint, sequence, id.as_deref(), out, *png, &cfg, &mut log)?;
            println!("{} score={:.2}", r.sample_id, r.score);
        }
        Command::Report {
            checkpoint,
            manifest,
            out,
            subject,
            window,
            png,
        } => {
            let cfg = config(c, &[])?;
            let window = parse_window(window)?;
            let mut log = open_log(out, echo)?;
            let s = pipeline::report(
                checkpoint,
                manifest,
                subject.as_deref(),
                window,
                out,
                *png,
                &cfg,
                &mut log,
            )?;
            println!("windows={}", s.windows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={} message={msg:?}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
