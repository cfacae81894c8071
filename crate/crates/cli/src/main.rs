use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clearflow_cli::dataset::{self, DatasetManifest, RenderJobConfig, Split};
use clearflow_cli::error::{CliError, Result};
use clearflow_cli::eval::{run_eval, EvalJobConfig};
use clearflow_cli::files::load_config;
use clearflow_cli::infer::{run_infer, run_infer_frames};
use clearflow_cli::merge::run_merge;
use clearflow_cli::train::run_train;
use clearflow_core::inference::InferenceConfig;
use clearflow_core::trainer::{Target, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "clearflow",
    version,
    about = "Depth and normal estimation for transparent objects"
)]
struct Cli {
    /// Worker threads for rendering and tensor work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root for default output directories.
    #[arg(long, global = true, env = "CLEARFLOW_CACHE_DIR", default_value = ".clearflow")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Depth,
    Normal,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Depth => Target::Depth,
            TargetArg::Normal => Target::Normal,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, settle and render a synthetic dataset (resumable).
    Render {
        /// Render job config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root seed; every sequence derives its own seed from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a rendered dataset for shape, finiteness and mask consistency.
    Validate {
        /// Dataset root containing dataset.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune LoRA adapters on the train split (resumes from the latest checkpoint).
    Train {
        /// Dataset root containing dataset.json.
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON); the flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict depth or normals for a dataset split or a directory of frames.
    Infer {
        /// Checkpoint written by `train` or `merge-lora`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (with dataset.json) or a directory of RGB PNG frames.
        #[arg(long, visible_alias = "input")]
        data: PathBuf,
        /// Dataset split to predict; ignored for a frame directory.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Expected target; refuses checkpoints trained for the other one.
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        /// Inference config (JSON); the flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Euler steps per segment.
        #[arg(long)]
        steps: Option<usize>,
        /// Frames per segment (4N + 1).
        #[arg(long)]
        segment: Option<usize>,
        /// Frames shared by consecutive segments (multiple of 4, at most half a segment).
        #[arg(long)]
        overlap: Option<usize>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth and a constant baseline.
    Eval {
        /// Directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root with the ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold LoRA adapters into the base weights.
    MergeLora {
        /// Checkpoint with adapters.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the merged checkpoint; must differ from the input.
        #[arg(long)]
        output: PathBuf,
    },
}

fn out_dir(out: Option<PathBuf>, cache: &Path, command: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cache.join(command));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let cache = cli.cache_dir;
    match cli.command {
        Command::Render { config, seed, out } => {
            let cfg: RenderJobConfig = load_config(config.as_deref())?;
            let root = out_dir(out, &cache, "render")?;
            let (manifest, summary) = dataset::render_dataset(&cfg, seed, &root)?;
            println!(
                "{} sequences in {}: rendered {}, skipped {}, quarantined {}, failed {}",
                manifest.sequences.len(),
                root.display(),
                summary.rendered.len(),
                summary.skipped.len(),
                summary.quarantined.len(),
                summary.failed.len()
            );
            if !summary.failed.is_empty() {
                for (id, e) in &summary.failed {
                    eprintln!("{id}: {e}");
                }
                return Err(CliError::Data(format!(
                    "{} sequences failed to render",
                    summary.failed.len()
                )));
            }
        }
        Command::Validate { data } => {
            let manifest = DatasetManifest::load(&data)?;
            let report = dataset::validate_dataset(&data, &manifest);
            if report.is_empty() {
                println!("{} sequences valid", manifest.sequences.len());
            } else {
                for (id, problems) in &report {
                    for p in problems {
                        println!("{id}: {p}");
                    }
                }
                return Err(CliError::Data(format!("{} invalid sequences", report.len())));
            }
        }
        Command::Train {
            data,
            config,
            seed,
            target,
            steps,
            out,
        } => {
            let mut cfg: TrainConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = target {
                cfg.target = t.into();
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let dir = out_dir(out, &cache, "train")?;
            let summary = run_train(&data, &dir, cfg, |row| {
                log::info!("step {} loss {:.5} lr {:.2e}", row.step, row.loss, row.lr);
            })?;
            println!(
                "trained to step {} in {}{}",
                summary.state.step(),
                dir.display(),
                summary
                    .resumed_from
                    .map(|s| format!(" (resumed from {s})"))
                    .unwrap_or_default()
            );
        }
        Command::Infer {
            checkpoint,
            data,
            split,
            target,
            config,
            steps,
            segment,
            overlap,
            seed,
            out,
        } => {
            let mut cfg: InferenceConfig = load_config(config.as_deref())?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.segment = segment.unwrap_or(cfg.segment);
            cfg.overlap = overlap.unwrap_or(cfg.overlap);
            let dir = out_dir(out, &cache, "infer")?;
            let target = target.map(Into::into);
            let pm = if data.join(dataset::MANIFEST_FILE).exists() {
                run_infer(&checkpoint, &data, split.into(), &dir, cfg, target)?
            } else {
                run_infer_frames(&checkpoint, &data, &dir, cfg, target)?
            };
            println!("{} {} predictions in {}", pm.sequences.len(), pm.target, dir.display());
        }
        Command::Eval {
            pred,
            data,
            config,
            out,
        } => {
            let cfg: EvalJobConfig = load_config(config.as_deref())?;
            let dir = out_dir(out, &cache, "eval")?;
            let report = run_eval(&pred, &data, &dir, &cfg)?;
            println!("method,{}", report.columns.join(","));
            for (method, values) in &report.mean {
                let v: Vec<String> = values.iter().map(|x| format!("{x:.3}")).collect();
                println!("{method},{}", v.join(","));
            }
        }
        Command::MergeLora { input, output } => {
            let n = run_merge(&input, &output)?;
            println!("merged {n} adapters into {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
