use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitmix::attack::{leakage_sweep, write_leakage_csv, AttackScheme};
use splitmix::experiment::{
    apply_env_overrides, config_rdp, export_smashed_images, run_experiment, sweep, write_rdp_json,
    write_run, write_sweep_csv, SweepAxis,
};
use splitmix::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "splitmix",
    version,
    about = "Differentially private split learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, traffic.csv and rdp.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// One run per value of an axis, merged into sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// sigma, group_size or num_clients
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write rdp.json for the config without training.
    Rdp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render raw, smashed and mixed smashed data as PGM images.
    ExportSmashed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Reconstruction attack per scheme; writes leakage.csv.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Parameter(_) => 2,
        Error::Io(_) | Error::Csv(_) => 1,
        Error::Invariant(_) | Error::Protocol(_) | Error::State(_) | Error::Shape(_) => 3,
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_env_overrides(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let result = run_experiment(&cfg)?;
            write_run(&out, &result)?;
            if let Some(last) = result.metrics.last() {
                println!(
                    "{} rounds, final test accuracy {:.4}, train loss {:.4}",
                    result.metrics.len(),
                    last.test_acc,
                    last.train_loss
                );
            }
            println!("{}", result.rdp.to_json_line());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = sweep(&cfg, axis, &values)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&path, axis, &rows)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Rdp { config, out } => {
            let cfg = load(&config)?;
            let report = config_rdp(&cfg)?;
            std::fs::create_dir_all(&out)?;
            write_rdp_json(&out.join("rdp.json"), &report)?;
            println!("{}", report.to_json_line());
        }
        Command::ExportSmashed { config, count, out } => {
            let cfg = load(&config)?;
            let files = export_smashed_images(&cfg, count, &out)?;
            println!("{} images written to {}", files.len(), out.display());
        }
        Command::Attack { config, out } => {
            let cfg = load(&config)?;
            let report = leakage_sweep(&cfg)?;
            std::fs::create_dir_all(&out)?;
            write_leakage_csv(&out.join("leakage.csv"), &report)?;
            for &fraction in &cfg.attack.fractions {
                let medians: Vec<String> = AttackScheme::ALL
                    .iter()
                    .filter_map(|&s| report.median(s, fraction).map(|m| format!("{s}={m:.5}")))
                    .collect();
                println!("fraction {fraction}: median mse {}", medians.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
