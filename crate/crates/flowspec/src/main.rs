use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowspec::config::{parse_config, StrategyId};
use flowspec::report::{compare_csv, run_compare, run_sweep, sweep_csv};
use flowspec::sim::run_strategy;
use flowspec::trace::emit_trace;

/// Simulator of pipeline-parallel tree-based speculative decoding.
/// All reported times and throughputs are in simulated seconds from the
/// configured cost model.
#[derive(Parser)]
#[command(name = "flowspec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one strategy and print its metrics.
    Run(RunArgs),
    /// Run several strategies on the same config and print a CSV report.
    Compare(CompareArgs),
    /// Re-run one config across values of a single parameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Write the event trace (JSON lines) to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the full result (config, tokens, metrics) as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    config: PathBuf,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    /// Average metrics over this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u32,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// Dotted config key, e.g. params.l or oracle.alignment.
    #[arg(long)]
    param: String,
    /// Comma-separated values to substitute.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

fn load_config(path: &PathBuf) -> flowspec::Result<flowspec::RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| flowspec::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}

fn cmd_run(args: &RunArgs) -> flowspec::Result<()> {
    let cfg = load_config(&args.config)?;
    let mut result = run_strategy(&cfg)?;
    if let Some(path) = &args.trace {
        emit_trace(&result, path)?;
        result.trace_path = Some(path.display().to_string());
    }
    println!("strategy: {}", cfg.strategy.name());
    println!("committed tokens: {}", result.committed.len());
    match &result.metrics {
        Some(m) => {
            println!("simulated latency: {:.6} s", m.latency_s);
            println!("throughput: {:.6} tokens per simulated second", m.xi);
            println!("rounds: {}  steps: {}", m.rounds, m.steps);
            println!("mean accepted per step: {:.3}", m.mean_accept_len);
        }
        None => println!("no decode rounds (prefill only)"),
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&result)
            .map_err(|e| flowspec::Error::InvalidArgument(format!("serialize result: {}", e)))?;
        std::fs::write(path, json).map_err(|e| flowspec::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> flowspec::Result<()> {
    let base = load_config(&args.config)?;
    let mut configs = Vec::new();
    for name in &args.strategies {
        let mut cfg = base.clone();
        cfg.strategy = StrategyId::parse(name)?;
        configs.push(cfg);
    }
    let rows = run_compare(&configs, args.seeds)?;
    print!("{}", compare_csv(&rows));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> flowspec::Result<()> {
    let base = load_config(&args.config)?;
    let rows = run_sweep(&base, &args.param, &args.values)?;
    print!("{}", sweep_csv(&args.param, &rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
