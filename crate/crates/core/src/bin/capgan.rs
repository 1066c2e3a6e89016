use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use capgan::dataset::synthesize_dataset;
use capgan::harness::{
    load_captioner, load_classifier, open_dataset, run_evaluate, run_generate, run_train_captioner,
    run_train_classifier, run_train_refine, run_train_stage1, run_train_textenc, EvalOptions, TextToImage,
    TrainConfig, TrainOptions,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capgan", version, about = "Staged text-to-image GAN on synthetic captioned shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON training configuration; fields not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed (data seed for synth-data, sampling
    /// seed for generate and evaluate).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides one config field, e.g. `--set arch.c0=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a captioned shapes dataset.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[command(flatten)]
        common: Common,
    },
    TrainCaptioner(Common),
    TrainTextenc(Common),
    TrainClassifier(Common),
    TrainStage1(StageArgs),
    TrainStage2(StageArgs),
    TrainStage3(StageArgs),
    /// Sample images for captions read one per line from a file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Stage checkpoints in order, starting with stage I.
        #[arg(long = "stage", required = true)]
        stages: Vec<PathBuf>,
    },
    /// Inception score and perceptual distance on held-out captions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "stage")]
        stages: Vec<PathBuf>,
        /// Score the real held-out images.
        #[arg(long)]
        skip_generation: bool,
    },
}

fn config(common: &Common, stage: Option<u8>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for o in &common.overrides {
        let (key, value) = o.split_once('=').with_context(|| format!("`--set {o}` is not KEY=VALUE"))?;
        cfg.set(key, value)?;
    }
    if let Some(seed) = common.seed {
        cfg.train_seed = seed;
    }
    if let Some(stage) = stage {
        cfg.stage = stage;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn log_config(cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    write_json(&out.join("config.json"), cfg)?;
    eprintln!("config digest {}", cfg.digest()?);
    Ok(())
}

fn train_stage(args: &StageArgs, stage: u8) -> anyhow::Result<()> {
    let cfg = config(&args.common, Some(stage))?;
    log_config(&cfg, &args.common.out)?;
    let opts = TrainOptions {
        out_dir: args.common.out.clone(),
        resume: args.resume.clone(),
        max_steps: args.max_steps,
    };
    let run = if stage == 1 {
        run_train_stage1(&cfg, &opts)?
    } else {
        run_train_refine(&cfg, &opts)?
    };
    println!("{}", serde_json::json!({
        "checkpoint": run.checkpoint,
        "log": run.log,
        "steps": run.steps,
        "epochs": run.epochs_completed,
    }));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData {
            count,
            resolution,
            common,
        } => {
            let seed = common.seed.unwrap_or(TrainConfig::default().data_seed);
            let header = synthesize_dataset(count, resolution, seed, &common.out)?;
            println!("{}", serde_json::to_string(&header)?);
        }
        Command::TrainCaptioner(common) => {
            let cfg = config(&common, None)?;
            log_config(&cfg, &common.out)?;
            let (path, report) = run_train_captioner(&cfg, &common.out)?;
            println!("{}", serde_json::json!({ "checkpoint": path, "report": report }));
        }
        Command::TrainTextenc(common) => {
            let cfg = config(&common, None)?;
            log_config(&cfg, &common.out)?;
            let (path, report) = run_train_textenc(&cfg, &common.out)?;
            println!("{}", serde_json::json!({ "checkpoint": path, "report": report }));
        }
        Command::TrainClassifier(common) => {
            let cfg = config(&common, None)?;
            log_config(&cfg, &common.out)?;
            let (path, report) = run_train_classifier(&cfg, &common.out)?;
            println!("{}", serde_json::json!({ "checkpoint": path, "report": report }));
        }
        Command::TrainStage1(args) => train_stage(&args, 1)?,
        Command::TrainStage2(args) => train_stage(&args, 2)?,
        Command::TrainStage3(args) => train_stage(&args, 3)?,
        Command::Generate {
            common,
            captions,
            count,
            stages,
        } => {
            let cfg = config(&common, None)?;
            let text = std::fs::read_to_string(&captions).with_context(|| format!("reading {}", captions.display()))?;
            let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if lines.is_empty() {
                bail!(capgan::Error::Invalid(format!("{} holds no captions", captions.display())));
            }
            let model = TextToImage::load(&cfg.textenc_checkpoint, &stages)?;
            let out = run_generate(&model, &lines, common.seed.unwrap_or(0), count, &common.out)?;
            println!("{}", serde_json::json!({ "images": out.images.len(), "sheet": out.sheet, "grid": out.grid }));
        }
        Command::Evaluate {
            common,
            stages,
            skip_generation,
        } => {
            let cfg = config(&common, None)?;
            let data = open_dataset(&cfg)?;
            let (captioner, cap_digest) = load_captioner(&cfg.captioner_checkpoint)?;
            let (classifier, clf_digest) = load_classifier(&cfg.classifier_checkpoint)?;
            let model = if skip_generation {
                None
            } else {
                Some(TextToImage::load(&cfg.textenc_checkpoint, &stages)?)
            };
            std::fs::create_dir_all(&common.out)?;
            let report = run_evaluate(
                &cfg,
                &data,
                model.as_ref(),
                (&classifier, &clf_digest),
                (&captioner, &cap_digest),
                &EvalOptions {
                    seed: common.seed.unwrap_or(0),
                    skip_generation,
                },
                Some(&common.out.join("score.json")),
            )?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "missing_prerequisite" => 3,
        "format" => 4,
        "vocabulary" => 5,
        "invalid_input" => 6,
        "non_finite" => 7,
        "locked" => 8,
        "io" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|e| e.downcast_ref::<capgan::Error>())
                .map_or("other", capgan::Error::category);
            eprintln!("{}", serde_json::json!({ "error": category, "message": format!("{err:#}") }));
            ExitCode::from(exit_code(category))
        }
    }
}
