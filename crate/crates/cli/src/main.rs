use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gfss_cli::config::RunConfig;
use gfss_cli::{runner, CliError};
use gfss_core::adapt::Arm;

#[derive(Parser)]
#[command(
    name = "gfss",
    about = "Generalized few-shot segmentation over frozen features: episode generation, adaptation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the arms to run (comma-separated:
    /// transition, classifier-only, distillation-baseline).
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    /// Run independent arms/sweep entries on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode and train the frozen base classifier.
    Generate(CommonArgs),
    /// Run the few-shot learning phase on a generated episode.
    Adapt(CommonArgs),
    /// Run the component ablation (full / no-transition / no-ldam).
    Ablate(CommonArgs),
    /// Verify reverse-mode gradients against finite differences.
    CheckGradients {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per composition suite.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn parse_arm(name: &str) -> Result<Arm, CliError> {
    match name {
        "transition" => Ok(Arm::Transition),
        "classifier-only" => Ok(Arm::ClassifierOnly),
        "distillation-baseline" => Ok(Arm::DistillationBaseline),
        other => Err(CliError::Config(format!("unknown arm `{other}`"))),
    }
}

fn load(args: &CommonArgs) -> Result<(RunConfig, String, PathBuf), CliError> {
    let (mut cfg, hash) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(arms) = &args.arms {
        cfg.arms = arms
            .iter()
            .map(|a| parse_arm(a))
            .collect::<Result<_, _>>()?;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, hash, out))
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Generate(args) => {
            let (cfg, hash, out) = load(&args)?;
            let manifest = runner::cmd_generate(&cfg, &hash, &out)?;
            println!(
                "episode written to {}: {} support, {} query, {} base-phase images (base accuracy {:.3})",
                out.join(runner::EPISODE_DIR).display(),
                manifest.support.len(),
                manifest.query.len(),
                manifest.base_phase.len(),
                manifest.base_train_accuracy
            );
            Ok(())
        }
        Command::Adapt(args) => {
            let (cfg, hash, out) = load(&args)?;
            runner::cmd_adapt(&cfg, &hash, &out, args.parallel)?;
            Ok(())
        }
        Command::Ablate(args) => {
            let (cfg, hash, out) = load(&args)?;
            runner::cmd_ablate(&cfg, &hash, &out, args.parallel)?;
            Ok(())
        }
        Command::CheckGradients { seed, instances } => {
            if runner::cmd_check_gradients(seed, instances)? {
                Ok(())
            } else {
                Err(CliError::Core(gfss_core::Error::Numeric(
                    "gradient check exceeded tolerance".into(),
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
