//! `fdcl`: Fourier contrastive day-to-night adaptation on the toy benchmark.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.
//! Log verbosity follows `FDCL_LOG` (env_logger syntax, default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdcl_core::pipeline::{self, gradcheck, RunConfig, TranslateOptions};
use fdcl_core::Error;

#[derive(Parser)]
#[command(name = "fdcl", version, about = "Fourier contrastive day-to-night adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fourier amplitude-swap translation of a folder of day images.
    ///
    /// The amplitude swap works on the centered spectrum (zero frequency
    /// moved to row H/2, column W/2). Beta is the side of the swapped square
    /// as a fraction of min(H, W): side = floor(beta * min(H, W)), so betas
    /// below 1/min(H, W) swap nothing.
    Translate {
        /// Folder of source (day) images.
        #[arg(long)]
        src: PathBuf,
        /// Folder of target (night) images; one is drawn per source.
        #[arg(long)]
        night: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed beta; otherwise sampled from `beta.schedule` per image.
        #[arg(long)]
        beta: Option<f64>,
        /// Also write a grid comparing betas 0.001, 0.01, 0.05 and 0.1.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Burn-in, adaptation per variant, evaluation and artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of day2night_baseline, day_longer, fourier_ft, fdcl_ewc,
        /// fdcl_ewc_2w, no_ewc_cropped, no_ewc_full.
        #[arg(long)]
        variant: Option<String>,
        /// Output directory, overrides `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulates finished run directories as CSV.
    Report {
        /// Run directories written by `fdcl run`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every tape operation and the combined
    /// contrastive loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomised trials per case.
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Writes the synthetic splits as PNG folders plus a matching config.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> fdcl_core::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: "--set".into(),
            msg: format!("expected KEY=VALUE, got `{o}`"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> fdcl_core::Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> fdcl_core::Result<bool> {
    match cmd {
        Command::Translate {
            src,
            night,
            out,
            beta,
            sweep,
            cfg,
        } => {
            let cfg = load_config(&cfg)?;
            let summary = pipeline::cmd_translate(&TranslateOptions {
                src_dir: src,
                night_dir: night,
                out_dir: out,
                beta,
                schedule: cfg.beta.clone(),
                seed: cfg.seed,
                sweep,
            })?;
            println!(
                "translated {} images, skipped {}",
                summary.betas.len(),
                summary.skipped.len()
            );
        }
        Command::Run { cfg, variant, out } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(v) = variant {
                cfg.set("variant", &v)?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let o = pipeline::cmd_run(&cfg)?;
            println!(
                "{} seed {}: day AP50 {:.4} AP {:.4}, night AP50 {:.4} AP {:.4} -> {}",
                o.variant,
                cfg.seed,
                o.day.ap50.mean,
                o.day.ap.mean,
                o.night.ap50.mean,
                o.night.ap.mean,
                cfg.out_dir.display()
            );
        }
        Command::Report { runs, out } => {
            let r = pipeline::report(&runs)?;
            for f in &r.flags {
                log::warn!("{f}");
            }
            write_or_print(out.as_deref(), &r.to_csv())?;
        }
        Command::Gradcheck { seed, trials } => {
            let s = gradcheck::run_suite(seed, trials)?;
            for c in &s.cases {
                println!(
                    "{:<20} trials {:>3}  max rel error {:.3e}",
                    c.name, c.trials, c.max_rel_error
                );
            }
            let ok = s.passed();
            println!(
                "{} trials, max rel error {:.3e}, tolerance {:.0e}: {}",
                s.trials(),
                s.max_rel_error(),
                gradcheck::TOLERANCE,
                if ok { "pass" } else { "FAIL" }
            );
            return Ok(ok);
        }
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg)?;
            cfg.validate()?;
            pipeline::cmd_gen_data(&cfg, &out)?;
            println!("wrote splits and data.txt under {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FDCL_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
