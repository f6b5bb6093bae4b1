use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use snac_core::correlation::LandmarkDatabase;
use snac_core::scenario::{report_from_dir, run, ScenarioConfig};
use snac_core::shape::{fit_shape, radius_variances, write_shape_file, RadiusCovariance, ShapeFitProblem};

#[derive(Parser)]
#[command(name = "snac", version, about = "Swarm navigation and small-body characterization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its logs and report to a run directory.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Fit a regularized shape model to a landmark database CSV.
    ShapeFit {
        db: PathBuf,
        #[arg(long, default_value_t = 8)]
        degree: usize,
        #[arg(long, default_value_t = 1.84)]
        alpha: f64,
        /// Output shape file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the report of a finished run from its logs.
    Report { run_dir: PathBuf },
    /// Quick zero-duration run of the default scenario.
    Selftest,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ScenarioConfig::from_toml(&text)?;
            log::info!("{}: {} epochs", cfg.name, cfg.epochs());
            let output = run(&cfg)?;
            output.logs.write_to(&out)?;
            std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&output.timing)?)?;
            println!("{}", serde_json::to_string_pretty(&output.report)?);
        }
        Command::ShapeFit { db, degree, alpha, out } => {
            let text = std::fs::read_to_string(&db).with_context(|| format!("reading {}", db.display()))?;
            let db = LandmarkDatabase::from_csv(&text)?;
            let (points, covs) = db.positions_and_covariances();
            if points.is_empty() {
                bail!("landmark database is empty");
            }
            let problem = ShapeFitProblem::new(&points, RadiusCovariance::Diagonal(radius_variances(&points, &covs)), degree, alpha)?;
            let fit = fit_shape(&problem)?;
            let file = write_shape_file(&fit);
            match out {
                Some(p) => std::fs::write(p, file)?,
                None => print!("{file}"),
            }
        }
        Command::Report { run_dir } => {
            let report = report_from_dir(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Selftest => {
            let cfg = ScenarioConfig { orbits: 0.0, ..ScenarioConfig::default() };
            let output = run(&cfg)?;
            if output.report.epochs != 0 {
                bail!("zero-duration run produced epochs");
            }
            println!("selftest ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
