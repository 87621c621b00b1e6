//! `agglom3d`: command-line driver for the multi-teacher distillation
//! pipeline. Every subcommand reads one TOML config, works inside one
//! output directory, and prints a JSON manifest of the artifacts it
//! wrote. Exit codes are stable for scripting: 0 success, 2 config
//! error, 3 I/O error, 4 contract/validation error, 5 training collapse.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agglom3d_core::config::RunConfig;
use agglom3d_core::trainer::TrainOutcome;
use agglom3d_core::{exec, pipeline, Error};

#[derive(Parser)]
#[command(
    name = "agglom3d",
    about = "Multi-teacher 2D-to-3D feature distillation at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults (with the standard teacher trio)
    /// apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Directory all artifacts are read from and written to.
    #[arg(long, default_value = "a3d_out")]
    out: PathBuf,

    /// Force serial execution everywhere (bit-exact logs).
    #[arg(long)]
    deterministic: bool,

    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, posed depth frames, and teacher feature maps.
    Gen(Common),
    /// Fuse multi-view features into per-scene point banks.
    Fuse(Common),
    /// Train the student on fused banks; writes checkpoints and logs.
    Train(Common),
    /// Open-vocabulary evaluation of the trained student.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Use the 2D/3D ensemble instead of plain 3D labels.
        #[arg(long)]
        ensemble: bool,
    },
    /// Linear probing of the frozen student (concat/average/single heads).
    Probe(Common),
    /// K-means clustering of student features.
    Cluster(Common),
    /// Per-teacher feature-value histograms over the fused banks.
    Hist(Common),
    /// Full ablation grid: gen -> fuse -> train -> eval per cell.
    Pipeline(Common),
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::with_default_teachers(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_for(err: &Error) -> ExitCode {
    let code = match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Validation(_) | Error::Contract(_) | Error::Capacity(_) | Error::Format { .. } => 4,
    };
    ExitCode::from(code)
}

const EXIT_COLLAPSE: u8 = 5;

fn run(cli: Cli) -> ExitCode {
    let common = match &cli.command {
        Command::Gen(c)
        | Command::Fuse(c)
        | Command::Train(c)
        | Command::Probe(c)
        | Command::Cluster(c)
        | Command::Hist(c)
        | Command::Pipeline(c) => c,
        Command::Eval { common, .. } => common,
    };
    if common.deterministic {
        exec::force_serial(true);
    }
    let mut cfg = match load_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("agglom3d: {e}");
            return exit_for(&e);
        }
    };
    let out = common.out.clone();
    let result = match &cli.command {
        Command::Gen(_) => pipeline::cmd_gen(&cfg, &out),
        Command::Fuse(_) => pipeline::cmd_fuse(&cfg, &out),
        Command::Train(_) => match pipeline::cmd_train(&cfg, &out) {
            Ok((manifest, outcome)) => {
                println!("{}", manifest.to_json());
                if let TrainOutcome::Collapsed {
                    step,
                    epoch,
                    reason,
                } = outcome
                {
                    eprintln!(
                        "agglom3d: training collapsed at step {step} (epoch {epoch}): {reason}"
                    );
                    return ExitCode::from(EXIT_COLLAPSE);
                }
                return ExitCode::SUCCESS;
            }
            Err(e) => Err(e),
        },
        Command::Eval { ensemble, .. } => {
            if *ensemble {
                cfg.eval.ensemble = true;
            }
            pipeline::cmd_eval(&cfg, &out)
        }
        Command::Probe(_) => pipeline::cmd_probe(&cfg, &out),
        Command::Cluster(_) => pipeline::cmd_cluster(&cfg, &out),
        Command::Hist(_) => pipeline::cmd_hist(&cfg, &out),
        Command::Pipeline(_) => pipeline::cmd_pipeline(&cfg, &out),
    };
    match result {
        Ok(manifest) => {
            println!("{}", manifest.to_json());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("agglom3d: {e}");
            exit_for(&e)
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse())
}
