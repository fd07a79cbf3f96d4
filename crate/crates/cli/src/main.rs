use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crowdlab::commands::{self, Context, Outcome, PredictArgs};
use crowdlab::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "crowdlab", version, about = "Crowd counting and crowd violence detection runs")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of run directories (default "runs").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cache root (default <out>/cache).
    #[arg(long, global = true, env = "CROWDLAB_CACHE")]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cache ground-truth density maps and clip tensors.
    Prepare,
    /// Decode, pad and shuffle the clip directories into a clip cache.
    ExtractFrames,
    /// Self-supervised rotation pre-training of the feature extractor.
    PretrainRotation,
    /// Train the density head on a stage-1 checkpoint.
    TrainDensity {
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Predict counts and density maps for images or a manifest.
    PredictCount {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image to score; repeatable. Without it the configured manifest is used.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Labeled manifest, overriding data.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Density scale, overriding the checkpoint's.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train the violence classifier.
    TrainAnomaly {
        #[arg(long)]
        pretrained_vgg: Option<PathBuf>,
    },
    /// Evaluate a violence classifier checkpoint.
    EvalAnomaly {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Curves and a JSON summary for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn context(cli: &Cli) -> CliResult<Context> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        config.output = Some(o.clone());
    }
    match &cli.command {
        Command::TrainDensity { stage1: Some(p) } => config.data.stage1_checkpoint = Some(p.clone()),
        Command::PredictCount { manifest: Some(p), .. } => config.data.manifest = Some(p.clone()),
        Command::TrainAnomaly { pretrained_vgg: Some(p) } => config.data.pretrained_vgg = Some(p.clone()),
        _ => {}
    }
    let cache = cli.cache.clone().unwrap_or_else(|| config.output_dir().join("cache"));
    Ok(Context { config, cache })
}

fn run(cli: Cli) -> CliResult<Outcome> {
    if let Command::Report { run } = &cli.command {
        return commands::report(run);
    }
    let ctx = context(&cli)?;
    match cli.command {
        Command::Prepare => commands::prepare(&ctx),
        Command::ExtractFrames => commands::extract_frames(&ctx),
        Command::PretrainRotation => commands::pretrain_rotation(&ctx),
        Command::TrainDensity { .. } => commands::train_density(&ctx),
        Command::PredictCount {
            checkpoint,
            images,
            scale,
            ..
        } => commands::predict(
            &ctx,
            &PredictArgs {
                checkpoint,
                images,
                scale,
            },
        ),
        Command::TrainAnomaly { .. } => commands::train_anomaly_cmd(&ctx),
        Command::EvalAnomaly { checkpoint } => commands::eval_anomaly(&ctx, &checkpoint),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            for l in out.lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
