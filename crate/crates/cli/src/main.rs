//! `eend-vib`: simulate data, train the three-stage recipe, infer, score,
//! export plot data and run weight sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eend_vib::pipeline::Stage;

use crate::commands::CliError;
use crate::config::Loaded;

#[derive(Parser, Debug)]
#[command(name = "eend-vib", version, about = "Attractor-based neural diarization with an information bottleneck")]
struct Cli {
    /// TOML experiment config (tables or flat dotted keys).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Example: --set model.model_dim=32
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed every random stream is split from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dataset-level work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated conversation dataset.
    Simulate(SimulateArgs),
    /// Stage 1: train from scratch on two-speaker data.
    Train(StageArgs),
    /// Stage 2: adapt a stage-1 checkpoint to variable speaker counts.
    Adapt(StageArgs),
    /// Stage 3: fine-tune a stage-2 checkpoint on in-domain data.
    Finetune(StageArgs),
    /// Write one hypothesis RTTM per conversation.
    Infer(InferArgs),
    /// Score hypothesis RTTMs against references.
    Score(ScoreArgs),
    /// Export projected encoding ellipses.
    Visualize(VisualizeArgs),
    /// Train and evaluate over a grid of bottleneck weights.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// sc2, sc2-4 or finetune.
    #[arg(long)]
    kind: Option<String>,
    /// Number of conversations.
    #[arg(long)]
    n: Option<usize>,
    /// train, dev or eval; selects the seed stream and default directory.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Development dataset used for checkpoint selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta_e: Option<f64>,
    #[arg(long)]
    beta_a: Option<f64>,
    /// Samples per step for the loss.
    #[arg(long)]
    samples: Option<usize>,
    /// mean_based or per_sample.
    #[arg(long)]
    permutation: Option<String>,
    /// Disable both bottleneck branches and train the deterministic model.
    #[arg(long)]
    no_vib: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// mean or sample-avg.
    #[arg(long)]
    mode: Option<String>,
    /// Draws per recording in sample-avg mode.
    #[arg(long)]
    m: Option<usize>,
    /// Attractor existence threshold.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Directory of reference RTTMs, one file per conversation.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory of hypothesis RTTMs.
    #[arg(long)]
    hyp: PathBuf,
    /// Collar in seconds around reference boundaries.
    #[arg(long)]
    collar: Option<f64>,
    /// Exclude overlapped reference speech from scoring.
    #[arg(long)]
    no_overlap: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// attractors or frames.
    #[arg(long)]
    target: Option<String>,
    /// Frames sampled per conversation for the frames target.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated frame weights.
    #[arg(long, allow_hyphen_values = true)]
    betas_e: Option<String>,
    /// Comma-separated attractor weights.
    #[arg(long, allow_hyphen_values = true)]
    betas_a: Option<String>,
    /// Cartesian product of both axes.
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    baseline_seeds: Option<usize>,
}

fn push<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn quoted(s: Option<String>) -> Option<String> {
    s.map(|s| format!("\"{s}\""))
}

/// Dedicated flags expressed as config overrides, applied after `--set`.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = Vec::new();
    push(&mut o, "seed", cli.seed);
    match &cli.command {
        Command::Simulate(a) => {
            push(&mut o, "simulate.kind", quoted(a.kind.clone()));
            push(&mut o, "simulate.n", a.n);
            push(&mut o, "simulate.split", quoted(a.split.clone()));
        }
        Command::Train(a) | Command::Adapt(a) | Command::Finetune(a) => {
            let stage = stage_of(&cli.command).expect("stage command").name();
            push(&mut o, &format!("{stage}.epochs"), a.epochs);
            push(&mut o, &format!("{stage}.base_lr"), a.lr.map(|v| format!("{v:e}")));
            push(&mut o, "weights.beta_e", a.beta_e.map(|v| format!("{v:e}")));
            push(&mut o, "weights.beta_a", a.beta_a.map(|v| format!("{v:e}")));
            push(&mut o, "weights.n_samples", a.samples);
            push(&mut o, "weights.permutation", quoted(a.permutation.clone()));
            if a.no_vib {
                o.push("model.vib_frame_enabled=false".into());
                o.push("model.vib_attractor_enabled=false".into());
                o.push(format!("{stage}.deterministic_baseline=true"));
            }
        }
        Command::Infer(a) => {
            push(&mut o, "infer.mode", quoted(a.mode.clone()));
            push(&mut o, "infer.m", a.m);
            push(&mut o, "infer.tau", a.tau.map(|v| format!("{v:e}")));
        }
        Command::Score(a) => {
            push(&mut o, "infer.collar", a.collar.map(|v| format!("{v:e}")));
            if a.no_overlap {
                o.push("infer.score_overlap=false".into());
            }
        }
        Command::Visualize(a) => {
            push(&mut o, "visualize.target", quoted(a.target.clone()));
            push(&mut o, "visualize.frames_per_recording", a.frames);
        }
        Command::Sweep(a) => {
            push(&mut o, "sweep.betas_e", a.betas_e.as_ref().map(|s| format!("[{s}]")));
            push(&mut o, "sweep.betas_a", a.betas_a.as_ref().map(|s| format!("[{s}]")));
            if a.joint {
                o.push("sweep.joint=true".into());
            }
            push(&mut o, "sweep.baseline_seeds", a.baseline_seeds);
        }
    }
    o
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    match cmd {
        Command::Train(_) => Some(Stage::Train),
        Command::Adapt(_) => Some(Stage::Adapt),
        Command::Finetune(_) => Some(Stage::Finetune),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.clone();
    overrides.extend(flag_overrides(&cli));
    let loaded = Loaded::load(cli.config.as_deref(), &overrides)?;
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let jobs = cli.jobs;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&loaded, a.out),
        Command::Train(a) => commands::stage(&loaded, Stage::Train, a.into(), jobs),
        Command::Adapt(a) => commands::stage(&loaded, Stage::Adapt, a.into(), jobs),
        Command::Finetune(a) => commands::stage(&loaded, Stage::Finetune, a.into(), jobs),
        Command::Infer(a) => commands::infer(&loaded, &a.checkpoint, &a.data, a.out, jobs),
        Command::Score(a) => commands::score(&loaded, &a.reference, &a.hyp, a.out),
        Command::Visualize(a) => commands::visualize(&loaded, &a.checkpoint, &a.data, a.out),
        Command::Sweep(a) => commands::sweep(&loaded, a.train_data, a.eval_data, a.out, jobs),
    }
}

impl From<StageArgs> for commands::StagePaths {
    fn from(a: StageArgs) -> Self {
        Self { data: a.data, dev: a.dev, init: a.init, out: a.out }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
