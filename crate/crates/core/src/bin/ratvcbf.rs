use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ratvcbf::harness::{self, Config};
use ratvcbf::safety_filter::FilterMode;
use ratvcbf::Error;

#[derive(Parser)]
#[command(name = "ratvcbf", version, about = "Force-corridor safety filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one filter mode and write its trace, summary and figures.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: FilterMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate all three modes on the same scenario.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the randomized oracle checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<FilterMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(config: Option<PathBuf>, seed: Option<u64>) -> ratvcbf::Result<Config> {
    let mut cfg = match config {
        Some(path) => Config::load(&path)?,
        None => Config::default(),
    };
    if let Some(seed) = seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> ratvcbf::Result<bool> {
    match command {
        Command::Run { config, mode, out, seed } => {
            let cfg = load(config, seed)?;
            let result = harness::run(&cfg, mode)?;
            harness::emit_outputs(&result.log, &result.summary, &out)?;
            let s = &result.summary;
            println!(
                "{mode}: min h_r {} | min robust h {} | violations {} | infeasible {} | pass {}",
                show(s.min_h_r),
                show(s.min_robust_h),
                s.violation_ticks,
                s.infeasible_ticks,
                s.pass
            );
            Ok(true)
        }
        Command::Compare { config, out, seed } => {
            let cfg = load(config, seed)?;
            let cmp = harness::compare_modes(&cfg)?;
            let logs: Vec<_> = cmp.runs.iter().map(|r| &r.log).collect();
            harness::emit_comparison(&logs, &cmp.report, &out)?;
            println!("{:<14} {:>14} {:>14} {:>14} {:>10} {:>8}", "mode", "min h_true", "min robust h", "mean h", "in band", "pass");
            for s in &cmp.report.summaries {
                println!(
                    "{:<14} {:>14} {:>14} {:>14} {:>10} {:>8}",
                    s.mode.name(),
                    show(s.min_h_true),
                    show(s.min_robust_h),
                    show(s.mean_h),
                    show(s.mrr_in_band_fraction),
                    s.pass
                );
            }
            println!("conservatism reduction: {}%", show(cmp.report.conservatism_reduction_percent));
            Ok(true)
        }
        Command::Selftest { seed } => {
            let mut ok = true;
            for check in harness::selftest(seed) {
                println!("[{}] {}: {}", if check.pass { "pass" } else { "FAIL" }, check.name, check.detail);
                ok &= check.pass;
            }
            Ok(ok)
        }
    }
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"))
}
