mod artifacts;
mod config;
mod pipeline;
mod report;

use artifacts::{Manifest, Writer};
use bcq_core::certify::{certify, CertificationConfig};
use bcq_core::QuadraticMap;
use clap::{Parser, Subcommand};
use config::{ConfigError, Overrides, RunConfig};
use pipeline::Failure;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bcq", version, about = "Benedicks–Carleson quadratic maps: certification, inducing, spectra and large deviations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check (A2)–(A4) up to the certification horizon.
    Certify {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run stages in dependency order: partition → induce → spectrum/ldp.
    Pipeline {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "partition,induce,spectrum,ldp")]
        stages: String,
    },
    /// Consolidate the artifacts of a run directory.
    Report {
        /// Run directory (defaults to --out).
        dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn config_exit(e: ConfigError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn init_workers(cfg: &RunConfig) {
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
}

fn cmd_certify(cfg: &RunConfig) -> ExitCode {
    let map = match QuadraticMap::new(cfg.a) {
        Ok(m) => m,
        Err(e) => return config_exit(ConfigError(e.to_string())),
    };
    let cc = CertificationConfig {
        lambda: cfg.lambda,
        horizon: cfg.horizon_certify,
        precision_bits: cfg.precision_bits,
        ..Default::default()
    };
    let report = certify(&map, &cc);
    let dir = cfg.out_dir();
    let written = std::fs::create_dir_all(dir).and_then(|_| {
        let mut manifest = Manifest::load(dir).unwrap_or_else(|| Manifest::new(cfg));
        let mut w = Writer { dir, config: cfg, manifest: &mut manifest, stage: "certify".into() };
        w.json(report::CONDITION_REPORT, &report)?;
        manifest.save(dir)
    });
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::from(1);
    }
    println!(
        "a = {}: A2 margin {:.6e} (n = {}), A3 margin {:.6e} (n = {}), A4 {:?} — {}",
        report.a,
        report.a2_margin,
        report.a2_argmin,
        report.a3_margin,
        report.a3_argmin,
        report.a4_heuristic.status,
        report.statement
    );
    if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Certify { overrides } => match RunConfig::load(&overrides) {
            Ok(cfg) => {
                init_workers(&cfg);
                cmd_certify(&cfg)
            }
            Err(e) => config_exit(e),
        },
        Command::Pipeline { overrides, stages } => {
            let cfg = match RunConfig::load(&overrides) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            let stages = match pipeline::parse_stages(&stages) {
                Ok(s) => s,
                Err(e) => return config_exit(e),
            };
            init_workers(&cfg);
            match pipeline::run_pipeline(&cfg, &stages) {
                Ok(()) => ExitCode::SUCCESS,
                Err(Failure::Config(m)) => config_exit(ConfigError(m)),
                Err(Failure::Stage { stage, message }) => {
                    eprintln!("error: stage {} failed: {message}", stage.name());
                    ExitCode::from(1)
                }
            }
        }
        Command::Report { dir, overrides } => {
            let cfg = match RunConfig::load(&overrides) {
                Ok(c) => c,
                Err(e) => return config_exit(e),
            };
            let dir = dir.unwrap_or_else(|| cfg.out.clone());
            match report::run_report(&dir) {
                Ok(summary) => {
                    print!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => config_exit(e),
            }
        }
    }
}
