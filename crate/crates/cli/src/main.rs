use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ofnet_cli::config::{read_config, to_json, CorruptConfig, GenerateConfig, ModelConfig};
use ofnet_cli::{cmd_corrupt_test, cmd_eval, cmd_flow, cmd_generate, cmd_train, exit_code, sidecar_config, ModelSpec};
use ofnet_core::flow::FlowParams;
use ofnet_core::model::Variant;
use ofnet_core::phantom::Corruption;
use ofnet_core::Result;

/// Cine segmentation pipeline with flow-guided temporal feature aggregation.
///
/// Exit status: 0 on success, 1 on invalid input or configuration, 2 on a
/// numerical failure (non-finite values during training or inference).
#[derive(Parser)]
#[command(name = "ofnet", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration for the command; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed (generate, train). Other commands
    /// make no random draws and only echo it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom sequences (config: GenerateConfig).
    Generate,
    /// Dump the flow between adjacent frames of one sequence (config: flow parameters).
    Flow {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a network on every sequence under --data (config: model configuration).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// unet, ofnet_maxpool or ofnet_dilated; overrides the configuration.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint; the configuration defaults to the config.json beside it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Corrupt one frame and compare an aggregating network with a per-frame one.
    CorruptTest {
        /// Checkpoint of the aggregating network.
        #[arg(long)]
        ofnet: PathBuf,
        /// Checkpoint of the per-frame network.
        #[arg(long)]
        unet: PathBuf,
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Frame to corrupt (default: middle frame).
        #[arg(long)]
        frame: Option<usize>,
        /// contrast_drop or noise_burst.
        #[arg(long)]
        mode: Option<Corruption>,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| ofnet_core::Error::InvalidArgument("--out is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    let out = require_out(&cli.out)?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate => {
            let mut cfg: GenerateConfig = read_config(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            print!("{}", to_json(&cfg));
            let dirs = cmd_generate(&cfg, out)?;
            eprintln!("wrote {} sequences to {}", dirs.len(), out.display());
        }
        Command::Flow { data } => {
            let params: FlowParams = read_config(config)?;
            print!("{}", to_json(&params));
            let pairs = cmd_flow(&data, &params, out)?;
            eprintln!("wrote {} flow fields to {}", pairs.len(), out.display());
        }
        Command::Train { data, variant } => {
            let mut cfg: ModelConfig = read_config(config)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            print!("{}", to_json(&cfg));
            cmd_train(&cfg, &data, out)?;
        }
        Command::Eval { checkpoint, data } => {
            let cfg = match config {
                Some(_) => read_config(config)?,
                None => sidecar_config(&checkpoint)?,
            };
            print!("{}", to_json(&cfg));
            for (name, report) in cmd_eval(&checkpoint, &cfg, &data, out)? {
                let s = report.summary();
                eprintln!("{name}: dice myo {:.4} bp {:.4}", s.dice_myo.mean, s.dice_bp.mean);
            }
        }
        Command::CorruptTest { ofnet, unet, data, frame, mode } => {
            let mut cfg: CorruptConfig = read_config(config)?;
            if frame.is_some() {
                cfg.frame = frame;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            print!("{}", to_json(&cfg));
            let (of_cfg, un_cfg) = (sidecar_config(&ofnet)?, sidecar_config(&unet)?);
            let rows = cmd_corrupt_test(
                ModelSpec { checkpoint: &ofnet, config: &of_cfg },
                ModelSpec { checkpoint: &unet, config: &un_cfg },
                &data,
                &cfg,
                out,
            )?;
            if let Some(r) = rows.iter().find(|r| r.corrupted) {
                eprintln!(
                    "corrupted frame {}: myocardium dice {:.4} (aggregating) vs {:.4} (per-frame)",
                    r.frame, r.dice_myo_ofnet, r.dice_myo_unet
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
