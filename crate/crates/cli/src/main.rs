use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pcic_cli::commands::{self, CompressArgs};
use pcic_cli::config::GlobalConfig;
use pcic_core::codec::model::Ablation;
use pcic_core::dataset::Roi;

/// Point-cloud-conditioned learned image compression.
#[derive(Parser)]
#[command(name = "pcic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides every config-driven command accepts.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, env = "PCIC_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "PCIC_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PCIC_ABLATION")]
    ablation: Option<Ablation>,
    /// Train/evaluate the unconditional baseline.
    #[arg(long, env = "PCIC_UNCONDITIONAL")]
    unconditional: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<GlobalConfig> {
        commands::require_file(&self.config)?;
        let mut cfg = GlobalConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
            cfg.codec.injection_sides = a.injection_sides();
        }
        if self.unconditional {
            cfg.codec.conditional = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic KITTI-layout scenes and a config for them.
    Fixture {
        #[arg(long, env = "PCIC_OUT")]
        out: PathBuf,
        #[arg(long, env = "PCIC_SEED", default_value_t = 7)]
        seed: u64,
    },
    /// Build manifests and store the equalized depth map of every frame.
    Project {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "PCIC_DEGRADE_VOXEL")]
        degrade_voxel: Option<f64>,
    },
    /// Train one model per λ (or only `--lambda-index`).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "PCIC_LAMBDA_INDEX")]
        lambda_index: Option<u8>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Code one PNG into a bitstream.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Equalized depth map (PGM) aligned with the coded image.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long, env = "PCIC_ZEROS")]
        zeros: bool,
        /// Crop `x,y,width,height` before coding.
        #[arg(long, value_parser = parse_roi)]
        roi: Option<Roi>,
        #[arg(long, env = "PCIC_OUT")]
        out: PathBuf,
        /// Also write the encoder's reconstruction.
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Decode a bitstream into a PNG.
    Decompress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long, env = "PCIC_ZEROS")]
        zeros: bool,
        #[arg(long, env = "PCIC_OUT")]
        out: PathBuf,
    },
    /// Evaluate the trained sweep on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "PCIC_LAMBDA_INDEX")]
        lambda_index: Option<u8>,
        #[arg(long, env = "PCIC_ZEROS")]
        zeros: bool,
        #[arg(long, env = "PCIC_DEGRADE_VOXEL")]
        degrade_voxel: Option<f64>,
    },
    /// BD-Rate of one curve file against another.
    Bdrate { test: PathBuf, anchor: PathBuf },
    /// Plot and tabulate curves.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Curve files; defaults to every curve in the evaluation directory.
        curves: Vec<PathBuf>,
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long, env = "PCIC_OUT")]
        out: Option<PathBuf>,
    },
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(Roi { x, y, width, height }),
        _ => Err("expected x,y,width,height".into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixture { out, seed } => {
            let path = commands::fixture(&out, seed)?;
            println!("{}", path.display());
        }
        Command::Project { cfg, degrade_voxel } => {
            for path in commands::project(&cfg.load()?, degrade_voxel)? {
                println!("{}", path.display());
            }
        }
        Command::Train {
            cfg,
            lambda_index,
            resume,
        } => {
            for path in commands::train(&cfg.load()?, lambda_index, resume.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::Compress {
            checkpoint,
            image,
            depth,
            zeros,
            roi,
            out,
            recon,
        } => {
            let bytes = commands::compress(&CompressArgs {
                checkpoint: &checkpoint,
                image: &image,
                depth: depth.as_deref(),
                zeros,
                roi,
                out: &out,
                recon: recon.as_deref(),
            })?;
            println!("{bytes}");
        }
        Command::Decompress {
            checkpoint,
            input,
            depth,
            zeros,
            out,
        } => commands::decompress(&checkpoint, &input, depth.as_deref(), zeros, &out)?,
        Command::Eval {
            cfg,
            lambda_index,
            zeros,
            degrade_voxel,
        } => {
            let path = commands::eval(&cfg.load()?, lambda_index, zeros, degrade_voxel)?;
            println!("{}", path.display());
        }
        Command::Bdrate { test, anchor } => {
            println!("{}", commands::format_percent(commands::bdrate(&test, &anchor)?));
        }
        Command::Report {
            cfg,
            curves,
            anchor,
            out,
        } => {
            let files = commands::report(&cfg.load()?, &curves, anchor.as_deref(), out.as_deref())?;
            println!("{}", files.plot.display());
            println!("{}", files.table.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}

