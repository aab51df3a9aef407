// SPDX-License-Identifier: Apache-2.0

//! `ovseg`: synthetic scene generation, pipeline runs and evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovseg_core::config::RunConfig;
use ovseg_core::harness;
use ovseg_core::io::write_atomic;
use ovseg_core::metrics::{load_association, AssociationMatrix, MeanOver};
use ovseg_core::scene::demo_class_names;
use ovseg_core::sim::make_frequency_kernel;
use ovseg_core::Error;

#[derive(Parser)]
#[command(
    name = "ovseg",
    version,
    about = "Open-vocabulary segmentation mechanisms on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeanOverArg {
    Any,
    Gt,
}

impl From<MeanOverArg> for MeanOver {
    fn from(m: MeanOverArg) -> Self {
        match m {
            MeanOverArg::Any => MeanOver::AnyPresent,
            MeanOverArg::Gt => MeanOver::GtPresent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write scene images (8-bit PNG) and ground-truth label maps (16-bit PNG).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and evaluate it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compute IoU / SG-IoU over existing label maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        assoc: Option<PathBuf>,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "any")]
        mean_over: MeanOverArg,
    },
    /// Dump a frequency kernel as CSV.
    Kernel {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn kernel_csv(h: usize, w: usize, sigma: f64, out: &Path) -> Result<(), Error> {
    let kernel = make_frequency_kernel(h, w, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in kernel.coeffs().rows() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Contract(format!("csv encoding failed: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv encoding failed: {e}")))?;
    write_atomic(out, &bytes)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let n = harness::generate(&cfg, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Run {
            config,
            out,
            workers,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (--out or output_dir)".into()))?;
            if workers == Some(0) {
                return Err(Error::Config("--workers must be at least 1".into()));
            }
            let report = harness::run_eval(&cfg, &out, workers)?;
            println!(
                "mIoU {} mSG-IoU {} -> {}",
                fmt_metric(report.miou),
                fmt_metric(report.msg_iou),
                out.join("report.json").display()
            );
        }
        Command::Eval {
            pred,
            gt,
            assoc,
            classes,
            out,
            mean_over,
        } => {
            if classes == 0 {
                return Err(Error::Config("--classes must be positive".into()));
            }
            let assoc = match assoc {
                Some(path) => load_association(&path, classes).map_err(|e| match e {
                    Error::Io { path, source } => {
                        Error::Config(format!("cannot read {}: {source}", path.display()))
                    }
                    other => other,
                })?,
                None => AssociationMatrix::empty(classes),
            };
            let report = harness::eval_dirs(
                &pred,
                &gt,
                &assoc,
                &demo_class_names(classes),
                mean_over.into(),
                &out,
            )?;
            println!(
                "mIoU {} mSG-IoU {} -> {}",
                fmt_metric(report.miou),
                fmt_metric(report.msg_iou),
                out.display()
            );
        }
        Command::Kernel { h, w, sigma, out } => {
            kernel_csv(h, w, sigma, &out)?;
            println!("wrote {h}x{w} kernel (sigma {sigma}) to {}", out.display());
        }
    }
    Ok(())
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
