use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mustdrop_core::harness::{
    report_json, run_pipeline, table3, table6, write_report, write_trace, Baseline, Harness,
    PipelineConfig, TableRow,
};
use mustdrop_core::Error;

#[derive(Parser)]
#[command(
    name = "mustdrop",
    version,
    about = "Multi-stage vision token dropping on a toy model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one fixture end to end and write its report and trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report destination; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Find the prefill threshold that hits a survivor budget.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Budget in reference-image tokens (e.g. 64 of 576).
        #[arg(long)]
        budget: f64,
        #[arg(long, default_value_t = 100)]
        fixtures: usize,
    },
    /// Calibrate and run the suite at several reference budgets.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "192,128,64")]
        budgets: Vec<f64>,
    },
    /// KV memory accounting at standard resolution.
    Table3,
    /// KV memory and FLOPs accounting at high resolution.
    Table6,
    /// Needle retention and cost of each baseline against mustdrop.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated baseline names, or `all`.
        #[arg(long, default_value = "all")]
        baselines: String,
    },
}

/// Marks failures that exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
    PipelineConfig::load(path).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

fn print_table(title: &str, rows: &[TableRow]) -> bool {
    println!("{title}");
    println!(
        "{:<28} {:>8} {:>12} {:>12} {:>9}  result",
        "row", "tokens", "value", "expected", "error"
    );
    for r in rows {
        println!(
            "{:<28} {:>8.1} {:>12.4} {:>12.4} {:>8.3}%  {}",
            r.label,
            r.tokens,
            r.value,
            r.expected,
            100.0 * r.error,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    rows.iter().all(|r| r.pass)
}

fn parse_baselines(text: &str) -> anyhow::Result<Vec<Baseline>> {
    if text == "all" {
        return Ok(Baseline::ALL.to_vec());
    }
    text.split(',')
        .map(|s| Baseline::parse(s.trim()).map_err(|e| Usage(e.to_string()).into()))
        .collect()
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run {
            config,
            trace,
            report,
        } => {
            let out = run_pipeline(&load(&config)?)?;
            if let Some(path) = trace {
                write_trace(&out.trace, &path)?;
            }
            match report {
                Some(path) => write_report(&out.report, &path)?,
                None => print!("{}", report_json(&out.report)?),
            }
        }
        Command::Calibrate {
            config,
            budget,
            fixtures,
        } => {
            let mut config = load(&config)?;
            config.suite_size = fixtures;
            let harness = Harness::new(config)?;
            let target = harness.config.scaled_budget(budget)?;
            let c = harness.calibrate(target, &harness.suite_seeds())?;
            println!("budget          {budget} reference tokens ({target:.4} on this grid)");
            println!("gamma           {:.6}", c.gamma);
            println!("achieved mean   {:.4}", c.achieved_mean);
            println!(
                "relative error  {:+.2}%",
                100.0 * (c.achieved_mean / target - 1.0)
            );
            println!("iterations      {}", c.iterations);
        }
        Command::Sweep { config, budgets } => {
            let harness = Harness::new(load(&config)?)?;
            println!(
                "{:>8} {:>8} {:>10} {:>9} {:>11} {:>10} {:>10} {:>7}",
                "budget", "scaled", "gamma", "mean", "compress", "kv MB", "flops -", "needle"
            );
            for row in harness.sweep(&budgets)? {
                let s = &row.summary;
                println!(
                    "{:>8} {:>8.3} {:>10.6} {:>9.3} {:>10.2}% {:>10.2} {:>9.2}% {:>3}/{}",
                    row.reference_budget,
                    row.budget,
                    row.calibration.gamma,
                    row.calibration.achieved_mean,
                    100.0 * s.cost.compression_ratio,
                    s.cost.kv_mb.decode,
                    100.0 * s.cost.flops_reduction,
                    s.needle_retained,
                    s.needle_fixtures
                );
            }
        }
        Command::Table3 => return Ok(print_table("llava-1.5-7b", &table3())),
        Command::Table6 => return Ok(print_table("llava-next-7b", &table6())),
        Command::Compare { config, baselines } => {
            let baselines = parse_baselines(&baselines)?;
            let harness = Harness::new(load(&config)?)?;
            println!(
                "{:<13} {:>9} {:>9} {:>9} {:>11} {:>10} {:>10} {:>7}",
                "baseline", "encoded", "s_few", "cached", "compress", "kv MB", "flops -", "needle"
            );
            for s in harness.compare(&baselines)? {
                println!(
                    "{:<13} {:>9.2} {:>9.2} {:>9.2} {:>10.2}% {:>10.2} {:>9.2}% {:>3}/{}",
                    s.baseline.name(),
                    s.mean_post_encode,
                    s.mean_s_few,
                    s.mean_final_cached,
                    100.0 * s.cost.compression_ratio,
                    s.cost.kv_mb.decode,
                    100.0 * s.cost.flops_reduction,
                    s.needle_retained,
                    s.needle_fixtures
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage =
                e.is::<Usage>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
