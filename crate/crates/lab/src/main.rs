use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reservoir_core::operators::OperatorSpec;
use reservoir_lab::config::parse_config;
use reservoir_lab::experiments::{budget_cells, budget_rows, run_experiment, BUDGET_COLUMNS};
use reservoir_lab::plot::{emit_plot_data, PlotKind};
use reservoir_lab::record::Cell;
use reservoir_lab::LabError;

/// Exit codes: 0 success, 1 configuration or I/O error, 2 failed grid cells.
#[derive(Parser)]
#[command(name = "reservoir-lab", version, about = "Run reservoir approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv and record.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config value; repeatable, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write a plot table next to a record.
    Plot {
        #[arg(long)]
        record: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
    },
    /// Print the error budget as CSV.
    Budget {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        bm: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        n_grid: Vec<usize>,
        /// Operator whose memory tail enters the budget.
        #[arg(long, default_value = "exp_filter:lambda=0.5")]
        operator: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::Run { config, set } => {
            let cfg = parse_config(config.as_deref(), &set)?;
            let record = run_experiment(&cfg)?;
            let path = record.write(&cfg.output_root())?;
            println!("{}", path.display());
            for (k, v) in &record.summary {
                println!("{k} = {}", v.render());
            }
            if record.failed_cells > 0 {
                eprintln!("{} cell(s) failed", record.failed_cells);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { record, kind } => {
            println!("{}", emit_plot_data(&record, kind)?.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Budget {
            m,
            d,
            delta,
            bm,
            n_grid,
            operator,
        } => {
            let op = OperatorSpec::parse(&operator).map_err(|e| LabError::Config(format!("operator: {e}")))?;
            let mut header = vec!["m", "d", "delta", "n"];
            header.extend(BUDGET_COLUMNS);
            println!("{}", header.join(","));
            for (coords, budget) in budget_rows(&op, bm, &[m], &[d], &[delta], &n_grid) {
                let budget = budget.map_err(|e| LabError::Config(e.to_string()))?;
                let row: Vec<String> = coords.iter().chain(&budget_cells(&budget)).map(Cell::render).collect();
                println!("{}", row.join(","));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
