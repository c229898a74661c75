//! `unerf` command line: train, render, evaluate, verify, and inspect.
//!
//! Exit codes: 0 success, 1 check/test failure, 2 bad configuration or IO.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use unerf::io::{apply_config_key, read_run_config, RunConfig};

#[derive(Parser)]
#[command(name = "unerf", version, about = "Unbounded neural radiance fields on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write checkpoint + logs.
    Fit {
        /// Run config file (key = value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint.bin, loss_log.txt, poses.txt.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override one config key, e.g. --set total_steps=500 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render one camera from a checkpoint: RGB PPM plus optional depth grid.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Pose file (written by fit as poses.txt).
        #[arg(long)]
        poses: PathBuf,
        /// Camera index within the pose file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional median-depth grid output.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Report held-out PSNR/MSE of a checkpoint on its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the oracle/invariant verification suites.
    Check {
        /// Run the full-size suites instead of the fast ones.
        #[arg(long)]
        full: bool,
    },
    /// Dump one pixel's per-stage histograms as text.
    PlotHistogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Pixel as x,y (continuous coordinates).
        #[arg(long, default_value = "32.5,32.5")]
        pixel: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig, unerf::Error> {
    let mut cfg = match path {
        Some(p) => read_run_config(p)?,
        None => RunConfig::default(),
    };
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            unerf::Error::invalid(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        apply_config_key(&mut cfg, k.trim(), v.trim())?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, unerf::Error> {
    match cli.command {
        Command::Fit { config, out, set } => {
            let cfg = load_config(&config, &set)?;
            let artifacts = unerf::runner::run_fit(&cfg, &out)?;
            println!(
                "fit complete: {} steps, held-out psnr {:.3} dB (mse {:.6e})",
                cfg.train.total_steps, artifacts.final_eval.psnr, artifacts.final_eval.mse
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("loss log:   {}", artifacts.log.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { checkpoint, config, set, poses, index, out, depth_out } => {
            let cfg = load_config(&config, &set)?;
            unerf::runner::run_render(&checkpoint, &cfg, &poses, index, &out, depth_out.as_deref())?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, config, set } => {
            let cfg = load_config(&config, &set)?;
            let metrics = unerf::runner::run_eval(&checkpoint, &cfg)?;
            println!("psnr {:.4} dB  mse {:.8e}", metrics.psnr, metrics.mse);
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { full } => {
            let reports = unerf::check::run_all(!full);
            let mut all_passed = true;
            for r in &reports {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {:<22} {:>7.2}s  {}", r.name, r.seconds, r.detail);
                all_passed &= r.passed;
            }
            if all_passed {
                println!("all {} suites passed", reports.len());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::PlotHistogram { checkpoint, config, set, poses, index, pixel, out } => {
            let cfg = load_config(&config, &set)?;
            let (px, py) = pixel
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| unerf::Error::invalid(format!("--pixel expects x,y, got '{pixel}'")))?;
            let dump = unerf::runner::run_plot_histogram(&checkpoint, &cfg, &poses, index, px, py)?;
            match out {
                Some(path) => std::fs::write(path, dump)?,
                None => print!("{dump}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
