use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exdrop::check::gradcheck_config;
use exdrop::grid::grid_search;
use exdrop::metrics::{export_plotdata, read_metrics};
use exdrop::train::{train, write_run};
use exdrop::verify::{oracle_suite, write_report, OracleSettings};
use exdrop::{invalid_config, load_config, output_root, Result};

/// Train and check transformer encoders with explicit dropout regularizers.
///
/// Outputs go under $EXDROP_OUT (default `exdrop-out`).
#[derive(Parser)]
#[command(name = "exdrop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoint and summary.
    Train { config: PathBuf },
    /// Run the config's `[grid]` block and write the results table.
    Grid { config: PathBuf },
    /// Compare Monte Carlo dropout moments and regularizers with closed forms.
    VerifyOracle {
        #[arg(long, default_value_t = 0.2)]
        p: f64,
        #[arg(long, default_value_t = 200_000)]
        nt: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check objective gradients against central differences.
    Gradcheck {
        config: PathBuf,
        /// Training sequences in the checked batch.
        #[arg(long, default_value_t = 2)]
        sequences: usize,
    },
    /// Turn a metrics CSV into (x, y, series) plot data.
    ExportPlot {
        metrics: PathBuf,
        /// Defaults to `plotdata.csv` next to the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> Result<bool> {
    let root = output_root();
    match command {
        Command::Train { config } => {
            let config = load_config(&config)?;
            let outcome = train(&config)?;
            let dir = config.output_dir(&root);
            write_run(&outcome, &config, &dir)?;
            let s = outcome.summary();
            println!(
                "best epoch {} of {}: val_acc={:.4} test_acc={:.4}",
                s.best_epoch,
                s.epochs,
                s.best_val_accuracy,
                s.test_accuracy.unwrap_or(f64::NAN)
            );
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Grid { config } => {
            let config = load_config(&config)?;
            let grid = config.grid.clone().ok_or_else(|| invalid_config("grid", "the config has no [grid] block"))?;
            let dir = config.output_dir(&root);
            let report = grid_search(&config, &grid, Some(&dir))?;
            report.write(&grid, &dir)?;
            print!("{}", report.table(&grid));
            println!("wrote {}", dir.display());
            Ok(report.selected.is_some())
        }
        Command::VerifyOracle { p, nt, seed } => {
            let records = oracle_suite(OracleSettings { p, n_t: nt, seed })?;
            for r in &records {
                println!("{}", r.line());
            }
            let path = root.join("oracle").join("report.json");
            write_report(&records, &path)?;
            println!("wrote {}", path.display());
            Ok(records.iter().all(|r| r.passed))
        }
        Command::Gradcheck { config, sequences } => {
            let config = load_config(&config)?;
            let report = gradcheck_config(&config, sequences)?;
            for t in &report.tensors {
                println!("{:<24} {:.3e}", t.name, t.max_relative_error);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict} max relative error {:.3e}", report.max_error());
            let path = config.output_dir(&root).join("gradcheck.csv");
            report.write_csv(&path)?;
            println!("wrote {}", path.display());
            Ok(report.passed())
        }
        Command::ExportPlot { metrics, out } => {
            let rows = read_metrics(&metrics)?;
            let out = out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).join("plotdata.csv"));
            export_plotdata(&rows, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
