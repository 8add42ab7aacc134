//! `latentfoil`: corpus generation, denoiser training, sampling, manifold
//! analysis and constrained shape optimization from one TOML config.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use latentfoil::optimizer::Mode;

use commands::{GradcheckFailed, MissingArtifact, OptimizeArgs};

#[derive(Parser, Debug)]
#[command(name = "latentfoil", version, about = "Airfoil design in a diffusion model's latent space")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed of the selected command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (the data directory for `gen-data`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the NACA sweep (and any .dat files) to bump coefficients.
    GenData,
    /// Train the denoiser on the fitted corpus.
    Train,
    /// Draw shapes through the deterministic sampler.
    Sample {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score-Jacobian spectra at generated samples or optimized shapes.
    Analyze {
        #[arg(long)]
        tau: Option<f64>,
        /// Result JSON files whose shapes are analyzed instead of samples.
        #[arg(long, num_args = 1..)]
        points: Vec<PathBuf>,
    },
    /// Constrained shape optimization.
    Optimize {
        /// hh, hh-scaled or latent.
        #[arg(long)]
        mode: Option<Mode>,
        /// Also write the panel pressure distribution of the result.
        #[arg(long)]
        dump_flow: bool,
    },
    /// Compare analytic derivatives against finite differences.
    Gradcheck,
    /// Tabulate optimization results.
    Report {
        /// Result files; defaults to every result_*.json in the output directory.
        files: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut loaded = config::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        loaded.config.paths.out_dir = out.clone();
    }
    let cfg = &mut loaded.config;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
        cfg.analysis.seed = seed;
        cfg.problem.seed = seed;
    }
    let out = cfg.paths.out_dir.clone();
    match cli.command {
        Command::GenData => {
            let dir = cli.out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            commands::gen_data(&loaded, &dir)
        }
        Command::Train => commands::train(&loaded, &out),
        Command::Sample { n } => {
            let n = n.unwrap_or(cfg.sample.count);
            let seed = cfg.sample.seed;
            commands::sample(&loaded, &out, n, seed)
        }
        Command::Analyze { tau, points } => {
            let tau = tau.unwrap_or(cfg.analysis.tau);
            commands::analyze(&loaded, &out, tau, &points)
        }
        Command::Optimize { mode, dump_flow } => {
            if let Some(m) = mode {
                cfg.problem.mode = m;
            }
            let args = OptimizeArgs {
                mode: cfg.problem.mode,
                dump_flow,
            };
            commands::optimize(&loaded, &out, &args).map(|_| ())
        }
        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(0);
            commands::gradcheck(&loaded, &out, seed)
        }
        Command::Report { files } => commands::report(&loaded, &out, &files),
    }
}

/// 1: usage or missing input, 2: numerical failure, 3: gradient check failed.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<MissingArtifact>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<latentfoil::Error>() {
            use latentfoil::Error as E;
            return match e {
                E::NonConvergence { .. } | E::Numerical(_) | E::Diverged { .. } | E::Geometry { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
