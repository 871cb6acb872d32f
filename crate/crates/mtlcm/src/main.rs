use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtlcm::cli::{self, RunOptions};
use mtlcm::ingest::RealDatasetSpec;

#[derive(Parser, Debug)]
#[command(name = "mtlcm")]
#[command(about = "Identifiable multi-task representation learning: two-stage training, evaluation and table reproduction")]
#[command(arg_required_else_help = true)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset described by the config's [generator]
    /// section.
    Generate(GenerateArgs),
    /// Run the full pipeline (generate/ingest, train both stages,
    /// evaluate) for every seed in the config.
    Run(RunArgs),
    /// Run a benchmark-table grid and print obtained vs. reference scores.
    Reproduce(ReproduceArgs),
    /// Emit long-format convergence curves from saved reports.
    Plotdata(PlotdataArgs),
    /// Parse the superconductivity tables into a dataset directory.
    IngestSuperconduct(IngestArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long = "config")]
    config: PathBuf,
    #[arg(long = "output")]
    output: PathBuf,
    #[arg(long = "force", default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long = "config")]
    config: PathBuf,
    /// Replace the config's seed list (repeatable).
    #[arg(long = "seed")]
    seed: Vec<u64>,
    /// Override the config's output directory.
    #[arg(long = "output")]
    output: Option<PathBuf>,
    #[arg(long = "force", default_value_t = false)]
    force: bool,
    /// Worker threads for independent seeds (each seed stays
    /// single-threaded and deterministic).
    #[arg(long = "threads")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    /// table1 (linear grid) or table2 (nonlinear grid).
    table: String,
    #[arg(long = "scale", default_value = "desk")]
    scale: String,
    /// Root directory for the per-cell runs and the comparison table.
    #[arg(long = "output", default_value = "runs/reproduce")]
    output: PathBuf,
    #[arg(long = "force", default_value_t = false)]
    force: bool,
    #[arg(long = "threads")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct PlotdataArgs {
    /// Report JSON files produced by `run`.
    reports: Vec<PathBuf>,
    #[arg(long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Element-composition table (unique_m.csv of the standard
    /// distribution; see the book for where to obtain it).
    #[arg(long = "features")]
    features: PathBuf,
    /// Derived-properties table (train.csv of the standard distribution).
    #[arg(long = "targets")]
    targets: PathBuf,
    #[arg(long = "output")]
    output: PathBuf,
    /// Expected row count; 0 disables the check.
    #[arg(long = "expected-rows", default_value_t = 21_263)]
    expected_rows: usize,
    /// Optional sha256 content checks.
    #[arg(long = "features-sha256")]
    features_sha256: Option<String>,
    #[arg(long = "targets-sha256")]
    targets_sha256: Option<String>,
    #[arg(long = "no-standardize", default_value_t = false)]
    no_standardize: bool,
    #[arg(long = "force", default_value_t = false)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = CliArgs::parse();
    match dispatch(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(args: CliArgs) -> mtlcm::Result<()> {
    match args.command {
        Command::Generate(a) => {
            let path = cli::generate(&a.config, &a.output, a.force)?;
            println!("dataset written to {}", path.display());
            Ok(())
        }
        Command::Run(a) => {
            let opts = RunOptions {
                force: a.force,
                threads: a.threads,
                output_override: a.output,
                seeds_override: a.seed,
            };
            let summary = cli::run(&a.config, &opts)?;
            for report in &summary.reports {
                println!(
                    "seed {}: weak={} strong={} indicators={}",
                    report.seed,
                    fmt(report.weak_mcc),
                    fmt(report.strong_mcc),
                    fmt(report.indicator_accuracy),
                );
            }
            if let Some((mean, std)) = summary.pairwise {
                println!("pairwise strong MCC over seeds: {mean:.4} +- {std:.4}");
            }
            println!("artifacts in {}", summary.output_dir.display());
            Ok(())
        }
        Command::Reproduce(a) => {
            let table = cli::TableId::parse(&a.table)?;
            let scale = cli::Scale::parse(&a.scale)?;
            let opts = RunOptions {
                force: a.force,
                threads: a.threads,
                output_override: None,
                seeds_override: Vec::new(),
            };
            let summary = cli::reproduce(table, scale, &a.output, &opts)?;
            if summary.all_pass {
                Ok(())
            } else {
                Err(mtlcm::Error::Data("one or more cells failed their thresholds".into()))
            }
        }
        Command::Plotdata(a) => {
            cli::plotdata(&a.reports, &a.output)?;
            println!("curves written to {}", a.output.display());
            Ok(())
        }
        Command::IngestSuperconduct(a) => {
            let spec = RealDatasetSpec {
                features_path: a.features,
                targets_path: a.targets,
                n_expected_rows: if a.expected_rows == 0 { None } else { Some(a.expected_rows) },
                standardize: !a.no_standardize,
                expected_sha256_features: a.features_sha256,
                expected_sha256_targets: a.targets_sha256,
            };
            let path = cli::ingest_superconduct(&spec, &a.output, a.force)?;
            println!("dataset written to {}", path.display());
            Ok(())
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}
