use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use ubfine::orchestration::{self as orch, CommandOptions, RunConfig};
use ubfine::{Error, Result};

/// Diffusion super-resolution and category-balanced building classification.
#[derive(Parser)]
#[command(name = "ubfine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs instead of failing.
    #[arg(long, global = true, action = ArgAction::Set, num_args = 0..=1,
          default_value_t = false, default_missing_value = "true")]
    overwrite: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset archive.
    Synth,
    /// Train the diffusion denoiser for each selected fold.
    TrainSr,
    /// Super-resolve each selected fold and score it against bicubic.
    SuperResolve,
    /// Compute category weight tables and spread reports.
    CibmWeights,
    /// Train the dual-head classifier for each selected fold.
    TrainCls,
    /// Evaluate trained classifiers; per-fold and mean metrics.
    Eval,
    /// Run the SR x CIBM x CS ablation matrix.
    Ablate,
    /// Summarise existing results into report.md.
    Report,
}

fn load_config(cli: &Cli) -> Result<(RunConfig, Option<String>)> {
    let (mut cfg, source) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
            (RunConfig::from_toml_str(&text)?, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok((cfg, source))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, config_source) = load_config(cli)?;
    let opts = CommandOptions {
        overwrite: cli.overwrite,
        config_source,
    };
    match cli.command {
        Command::Synth => {
            let dir = orch::cmd_synth(&cfg, &opts)?;
            println!("wrote {}", dir.display());
        }
        Command::TrainSr => orch::cmd_train_sr(&cfg, &opts)?,
        Command::SuperResolve => {
            let s = orch::cmd_super_resolve(&cfg, &opts)?;
            println!(
                "PSNR {:.3} dB (bicubic {:.3}), SSIM {:.4} (bicubic {:.4}), consistency {:.3} (bicubic {:.3})",
                s.psnr, s.bicubic_psnr, s.ssim, s.bicubic_ssim, s.consistency, s.bicubic_consistency
            );
        }
        Command::CibmWeights => orch::cmd_cibm_weights(&cfg, &opts)?,
        Command::TrainCls => orch::cmd_train_cls(&cfg, &opts)?,
        Command::Eval => {
            let (outcomes, mean) = orch::cmd_eval(&cfg, &opts)?;
            for o in &outcomes {
                println!("fold {}: top1 {:.4} top5 {:.4}", o.fold, o.report.top1, o.report.top5);
            }
            println!("mean: top1 {:.4} top5 {:.4} f1 {:.4}", mean.top1, mean.top5, mean.f1);
        }
        Command::Ablate => {
            orch::cmd_ablate(&cfg, &opts)?;
            print!("{}", std::fs::read_to_string(cfg.out.join("ablation").join("ablation.md"))?);
        }
        Command::Report => {
            let path = orch::cmd_report(&cfg, &opts)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
