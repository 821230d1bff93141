//! `sindy`: run identification experiments from TOML configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sindy_core::BenchmarkKind;

use sindy_cli::config::{self, RunConfig};
use sindy_cli::run::{self, Knob, RunError};

#[derive(Parser)]
#[command(name = "sindy", version, about = "Sparse identification with trainable library parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one config and write its artifacts.
    Run { config: PathBuf },
    /// Repeat a fit over values of one sparsity knob and emit a CSV table.
    Sweep {
        config: PathBuf,
        /// `lambda` or `gamma_std`.
        #[arg(long)]
        knob: String,
        /// Comma-separated values; may be empty.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
    /// Print the built-in benchmarks and their default parameters.
    ListBenchmarks,
}

fn parse_values(text: &str) -> Result<Vec<f64>, config::ConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| config::ConfigError::Invalid(format!("bad value `{s}`"))))
        .collect()
}

fn list_benchmarks() {
    for kind in BenchmarkKind::ALL {
        let sys = sindy_core::make_benchmark(kind.name(), &[]).expect("built-in benchmark");
        let params: Vec<String> = sys.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<10} {}  [{}]", kind.name(), kind.description(), params.join(", "));
    }
    println!("{:<10} T' = -V.grad T + kappa lap T + beta exp(T/(1+eps T)) - alpha T", "wildfire");
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let equations = run::run(&cfg)?;
            print!("{equations}");
        }
        Command::Sweep { config, knob, values } => {
            let cfg = RunConfig::load(&config)?;
            let knob = Knob::parse(&knob)?;
            let values = parse_values(&values)?;
            let csv = run::sweep(&cfg, knob, &values)?;
            let name = format!("sweep_{}.csv", knob.name());
            run::write_atomically(&cfg.output_dir(), &[(name, csv.clone())])?;
            print!("{csv}");
        }
        Command::ListBenchmarks => list_benchmarks(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
