use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use binaural_beamform::experiment::{emit_results, run_experiment, ExperimentConfig, RunOptions};
use binaural_beamform::Result;

#[derive(Parser)]
#[command(name = "beamform", about = "Binaural beamformer experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point of a config and write the results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Also write per-bin filters and cue errors to bins.json.
        #[arg(long)]
        dump_bins: bool,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the version.
    Version,
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Version => {
            println!("beamform {}", env!("CARGO_PKG_VERSION"));
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate(&base_dir(&config))?;
            println!(
                "{}: ok ({} method configurations, {} interferer counts)",
                config.display(),
                cfg.variants().len(),
                cfg.sweep.r.len()
            );
        }
        Command::Run {
            config,
            out,
            seed,
            threads,
            dump_bins,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let base = base_dir(&config);
            let dir = match out {
                Some(d) => d,
                None if cfg.output_dir.is_absolute() => cfg.output_dir.clone(),
                None => base.join(&cfg.output_dir),
            };
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| binaural_beamform::Error::Config(format!("--threads: {e}")))?;
            }
            let output = run_experiment(&cfg, &base, RunOptions { dump_bins })?;
            emit_results(&output, &dir)?;
            println!("{} rows written to {}", output.rows.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
