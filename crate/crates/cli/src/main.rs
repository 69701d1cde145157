//! `radcam`: generate synthetic scenes, train at desk scale, run inference
//! with ablation toggles, and evaluate detections.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radcam_core::config::AblationFlags;
use radcam_core::error::{Error, Result};
use radcam_core::{commands, RunConfig};

#[derive(Parser)]
#[command(name = "radcam", version, about = "Radar-camera BEV fusion 3D detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config TOML; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma list of enabled fusion stages (rgbq,rcg,rgpp,pra);
    /// an empty value disables all of them.
    #[arg(long)]
    ablate: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from scratch on a scene directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of scene-*.json files.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the pipeline over scenes with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Directory of scene-*.json files.
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint binary written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score detection files against the scenes' ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of scene-*.json files.
        #[arg(long)]
        scenes: PathBuf,
        /// Detections JSON; repeat to compare several runs.
        #[arg(long = "dets", required = true)]
        dets: Vec<PathBuf>,
    },
}

fn parse_ablate(list: &str) -> Result<AblationFlags> {
    let mut flags = AblationFlags::all_off();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "rgbq" => flags.rgbq = true,
            "rcg" => flags.rcg = true,
            "rgpp" => flags.rgpp = true,
            "pra" => flags.pra = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation stage `{other}` (expected rgbq, rcg, rgpp, pra)"
                )))
            }
        }
    }
    Ok(flags)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(list) = &common.ablate {
        cfg.ablate = parse_ablate(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, count, seed } => {
            let cfg = load_config(&common)?;
            commands::cmd_gen(&cfg, count, seed, &common.out)
        }
        Command::Train { common, scenes, seed } => {
            let cfg = load_config(&common)?;
            commands::cmd_train(&cfg, &scenes, seed, &common.out)
        }
        Command::Infer { common, scenes, checkpoint } => {
            let cfg = load_config(&common)?;
            commands::cmd_infer(&cfg, &checkpoint, &scenes, &common.out)
        }
        Command::Eval { common, scenes, dets } => {
            let cfg = load_config(&common)?;
            commands::cmd_eval(&cfg, &dets, &scenes, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
