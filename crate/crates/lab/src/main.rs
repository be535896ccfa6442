use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use humanline_lab::config::{load_runs, TheoryConfig};
use humanline_lab::error::{LabError, Result};
use humanline_lab::stats::Summary;
use humanline_lab::{eval, plot, runner, theory, Run};

#[derive(Parser)]
#[command(name = "humanline-lab", version, about = "Humanline alignment experiments on tiny policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict to one seed (theory checks: the master seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to `out` in the config, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the offline preference corpora.
    GenerateData(Common),
    /// Train every run in the config.
    Train(Common),
    /// Winrate and pass-rate of trained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path template (`{seed}`, `{label}`).
        #[arg(long)]
        checkpoint: Option<String>,
        /// Baseline path template; defaults to each run's initial policy.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run the numerical theory checks.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Corrupt the clamp bound to confirm the limit check can fail.
        #[arg(long)]
        corrupt_clamp: bool,
    },
    /// Tidy CSV of metrics and eval results.
    PlotData(Common),
}

fn runs_and_out(common: &Common) -> Result<(Vec<Run>, PathBuf)> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| LabError::Config("--config is required".into()))?;
    let runs = load_runs(path)?;
    let out = common
        .out
        .clone()
        .or_else(|| runs[0].config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((runs, out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(LabError::io(path))
}

fn fmt_summary(s: &Summary) -> String {
    match s.se {
        Some(se) => format!("{:.4} ± {:.4} (n={})", s.mean, se, s.n),
        None => format!("{:.4} (n={})", s.mean, s.n),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let (runs, out) = runs_and_out(&c)?;
            for p in runner::generate_all(&runs, c.seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train(c) => {
            let (runs, out) = runs_and_out(&c)?;
            let results = runner::train_all(&runs, c.seed, &out)?;
            for (label, rewards) in runner::final_rewards(&results) {
                let xs: Vec<f64> = rewards.iter().map(|&(_, r)| r).collect();
                println!("{label}: final reward {}", fmt_summary(&Summary::of(&xs)));
            }
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => {
            let (runs, out) = runs_and_out(&common)?;
            for r in &runs {
                let report = eval::eval_run(r, common.seed, &out, checkpoint.as_deref(), baseline.as_deref())?;
                eval::write_report(&report, &out)?;
                println!(
                    "{}: winrate {}, pass-rate {}",
                    report.label,
                    fmt_summary(&report.winrate),
                    fmt_summary(&report.pass_rate)
                );
            }
        }
        Command::VerifyTheory { common, corrupt_clamp } => {
            let mut cfg = match &common.config {
                Some(p) => load_runs(p)?[0].config.theory,
                None => TheoryConfig::default(),
            };
            cfg.corrupt_clamp |= corrupt_clamp;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let report = theory::run_suite(&cfg, common.seed.unwrap_or(0));
            write_json(&out.join("theory-report.json"), &report)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            let failures = report.failures();
            if failures > 0 {
                return Err(LabError::TheoryFailed(failures));
            }
        }
        Command::PlotData(c) => {
            let (runs, out) = runs_and_out(&c)?;
            let rows = plot::collect(&runs, c.seed, &out)?;
            fs::create_dir_all(&out).map_err(LabError::io(&out))?;
            let path = plot::csv_path(&out);
            let file = fs::File::create(&path).map_err(LabError::io(&path))?;
            plot::write_csv(&rows, file)?;
            println!("{} ({} rows)", path.display(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HL_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
