use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use eend_vib::analysis_viz::{
    attractor_ellipses, export_plot_data, fmt_num, frame_ellipses, run_beta_sweep, SweepBase, SweepResult,
};
use eend_vib::data_sim::{
    make_dataset, read_dataset, read_rttm, write_dataset, write_rttm, Conversation, DatasetKind, FRAME_SECONDS,
    MANIFEST_NAME,
};
use eend_vib::model::EendEda;
use eend_vib::pipeline::{evaluate, infer_all, train_stage, Checkpoint, InferMode, Stage, TrainOutputs};
use eend_vib::scoring::{score_der, score_report, Timeline};
use eend_vib::tensor::split_seed;
use eend_vib::{Error, SeededRng};

use crate::config::{stream, ConfigError, ExperimentConfig, Loaded, Split, Target};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PRECONDITION: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(Error::InvalidConfig(_)) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
                Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => EXIT_IO,
                _ => EXIT_PRECONDITION,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io(path, e))
}

/// Create `dir` and record the resolved configuration in it.
fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    write(&dir.join("config.toml"), cfg.to_flat_toml())
}

fn dataset_name(kind: DatasetKind, split: Split) -> String {
    format!("{kind}-{}", split.name())
}

fn stage_kind(stage: Stage) -> DatasetKind {
    match stage {
        Stage::Train => DatasetKind::Sc2,
        Stage::Adapt => DatasetKind::Sc2To4,
        Stage::Finetune => DatasetKind::Finetune,
    }
}

fn load_data(dir: &Path) -> Result<Vec<Conversation>> {
    if !dir.join(MANIFEST_NAME).is_file() {
        return Err(Error::Precondition(format!("{} is not a dataset (no {MANIFEST_NAME})", dir.display())).into());
    }
    Ok(read_dataset(dir)?)
}

/// Checkpoint weights under the configured model, whose unset keys follow
/// the checkpoint.
fn load_model(loaded: &Loaded, path: &Path) -> Result<(EendEda, Checkpoint, ExperimentConfig)> {
    if !path.is_file() {
        return Err(Error::Precondition(format!("checkpoint {} does not exist", path.display())).into());
    }
    let ck = Checkpoint::load(path)?;
    let mut cfg = loaded.config.clone();
    cfg.model = loaded.model_over(&ck.model)?;
    let model = ck.to_model_checked(&cfg.model)?;
    Ok((model, ck, cfg))
}

pub fn simulate(loaded: &Loaded, out: Option<PathBuf>) -> Result<()> {
    let cfg = &loaded.config;
    let s = &cfg.simulate;
    let out = out.unwrap_or_else(|| cfg.paths.data_dir.join(dataset_name(s.kind, s.split)));
    let convs = make_dataset(s.kind, s.n, &cfg.sim, cfg.simulate_seed(s.split))?;
    prepare_dir(&out, cfg)?;
    write_dataset(&out, &convs)?;
    eprintln!("wrote {} {} conversations to {}", convs.len(), s.kind, out.display());
    Ok(())
}

pub struct StagePaths {
    pub data: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn stage(loaded: &Loaded, stage: Stage, paths: StagePaths, jobs: usize) -> Result<()> {
    let mut cfg = loaded.config.clone();
    let tcfg = cfg.stage(stage).clone();
    let model = match stage.prerequisite() {
        None => {
            if paths.init.is_some() {
                return Err(CliError::Config("train starts from scratch; --init applies to adapt and finetune".into()));
            }
            EendEda::new(cfg.model.clone(), &mut SeededRng::new(cfg.model_seed()))?
        }
        Some(prev) => {
            let init = paths
                .init
                .clone()
                .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(prev.name()).join("final.ckpt.json"));
            if !init.is_file() {
                return Err(Error::Precondition(format!(
                    "{stage} needs the {prev} checkpoint, {} does not exist",
                    init.display()
                ))
                .into());
            }
            let (model, ck, resolved) = load_model(loaded, &init)?;
            if ck.stage != prev {
                return Err(Error::Precondition(format!(
                    "{stage} needs the {prev} checkpoint, {} comes from {}",
                    init.display(),
                    ck.stage
                ))
                .into());
            }
            cfg = resolved;
            model
        }
    };
    let kind = stage_kind(stage);
    let data_dir = paths.data.unwrap_or_else(|| cfg.paths.data_dir.join(dataset_name(kind, Split::Train)));
    let data = load_data(&data_dir)?;
    let dev = match paths.dev {
        Some(p) => Some(load_data(&p)?),
        None => {
            let p = cfg.paths.data_dir.join(dataset_name(kind, Split::Dev));
            if p.join(MANIFEST_NAME).is_file() {
                Some(load_data(&p)?)
            } else {
                None
            }
        }
    };
    let out = paths.out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(stage.name()));
    prepare_dir(&out, &cfg)?;
    let outcome = train_stage(model, &data, &tcfg, TrainOutputs { dir: Some(&out), dev: dev.as_deref() })?;
    let last = outcome.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    eprintln!("{stage}: {} steps, final loss {last:.4}, checkpoint epoch {}", outcome.log.len(), outcome.checkpoint.epoch);
    if let Some(dev) = &dev {
        let ev = evaluate(&outcome.model, dev, InferMode::Mean, tcfg.tau, split_seed(cfg.seed, stream::INFER), jobs)?;
        let rows: Vec<_> = ev.recordings.iter().map(|r| (r.id.clone(), r.der.clone())).collect();
        write(&out.join("dev_report.tsv"), score_report(&rows))?;
        eprintln!("{stage}: dev DER {:.2}%", ev.der_percent());
    }
    Ok(())
}

pub fn infer(loaded: &Loaded, checkpoint: &Path, data: &Path, out: Option<PathBuf>, jobs: usize) -> Result<()> {
    let (model, _, cfg) = load_model(loaded, checkpoint)?;
    let data = load_data(data)?;
    let out = out.unwrap_or_else(|| cfg.paths.report_dir.join("infer"));
    let inf = &cfg.infer;
    let results = infer_all(&model, &data, inf.mode(), inf.tau, split_seed(cfg.seed, stream::INFER), jobs)?;
    prepare_dir(&out, &cfg)?;
    let mut counts = String::from("recording\tn_speakers\texistence\n");
    for (c, r) in data.iter().zip(&results) {
        write(&out.join(format!("{}.rttm", c.id)), write_rttm(&c.id, &r.decisions, &r.hypothesis_labels(), FRAME_SECONDS))?;
        let q: Vec<String> = r.output.q.data().iter().map(|v| format!("{v:.6}")).collect();
        counts.push_str(&format!("{}\t{}\t{}\n", c.id, r.n_speakers, q.join(",")));
    }
    write(&out.join("counts.tsv"), counts)?;
    eprintln!("wrote {} hypotheses to {}", results.len(), out.display());
    Ok(())
}

/// Every `*.rttm` in `dir`, keyed by file stem.
fn rttm_dir(dir: &Path) -> Result<Vec<(String, Timeline)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "rttm") {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            files.push((id, path));
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|(id, path)| {
            let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            Ok((id, Timeline::from_rttm(&read_rttm(&text)?)?))
        })
        .collect()
}

pub fn score(loaded: &Loaded, reference: &Path, hyp: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = &loaded.config;
    let refs = rttm_dir(reference)?;
    let hyps = rttm_dir(hyp)?;
    if refs.is_empty() {
        return Err(Error::EmptyInput("reference directory").into());
    }
    let ref_ids: Vec<&String> = refs.iter().map(|r| &r.0).collect();
    let hyp_ids: Vec<&String> = hyps.iter().map(|h| &h.0).collect();
    if ref_ids != hyp_ids {
        let missing: Vec<_> = ref_ids.iter().filter(|id| !hyp_ids.contains(id)).collect();
        let extra: Vec<_> = hyp_ids.iter().filter(|id| !ref_ids.contains(id)).collect();
        return Err(Error::Precondition(format!(
            "recording ids differ: missing hypotheses {missing:?}, unexpected hypotheses {extra:?}"
        ))
        .into());
    }
    let rows = refs
        .iter()
        .zip(&hyps)
        .map(|((id, r), (_, h))| Ok((id.clone(), score_der(r, h, cfg.infer.collar, cfg.infer.score_overlap)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = score_report(&rows);
    print!("{report}");
    let out = out.unwrap_or_else(|| cfg.paths.report_dir.join("score"));
    prepare_dir(&out, cfg)?;
    write(&out.join("der_report.tsv"), report)
}

pub fn visualize(loaded: &Loaded, checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let (model, _, cfg) = load_model(loaded, checkpoint)?;
    let data = load_data(data)?;
    let v = &cfg.visualize;
    let (basis, records, name) = match v.target {
        Target::Attractors => {
            let (b, r) = attractor_ellipses(&model, &data)?;
            (b, r, "ellipses_attractors.csv")
        }
        Target::Frames => {
            let mut rng = SeededRng::new(split_seed(cfg.seed, stream::VISUALIZE));
            let (b, r) = frame_ellipses(&model, &data, v.frames_per_recording, &mut rng)?;
            (b, r, "ellipses_frames.csv")
        }
    };
    let out = out.unwrap_or_else(|| cfg.paths.report_dir.join("visualize"));
    prepare_dir(&out, &cfg)?;
    export_plot_data(&records, &out.join(name))?;
    let pca = format!(
        "explained_1\texplained_2\ttotal_variance\tretained_ratio\n{}\t{}\t{}\t{}\n",
        fmt_num(basis.explained[0]),
        fmt_num(basis.explained[1]),
        fmt_num(basis.total_variance),
        fmt_num(basis.retained_ratio())
    );
    write(&out.join("pca.tsv"), pca)?;
    eprintln!("wrote {} ellipses to {}", records.len(), out.join(name).display());
    Ok(())
}

pub fn sweep(
    loaded: &Loaded,
    train_data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<()> {
    let cfg = &loaded.config;
    let kind = DatasetKind::Sc2;
    let train = load_data(&train_data.unwrap_or_else(|| cfg.paths.data_dir.join(dataset_name(kind, Split::Train))))?;
    let eval = load_data(&eval_data.unwrap_or_else(|| cfg.paths.data_dir.join(dataset_name(kind, Split::Eval))))?;
    let out = out.unwrap_or_else(|| cfg.paths.report_dir.join("sweep"));
    prepare_dir(&out, cfg)?;
    let path = out.join("sweep.csv");
    let base = SweepBase { model: cfg.model.clone(), train: cfg.train.clone(), train_data: &train, eval_data: &eval, jobs };
    let mut rows: Vec<SweepResult> = Vec::new();
    let mut write_err = None;
    let n = cfg.sweep.grid().len();
    run_beta_sweep(&cfg.sweep, &base, |row, err| {
        rows.push(row.clone());
        match err {
            Some(e) => eprintln!("[{}/{n}] beta_e={} beta_a={} failed: {e}", rows.len(), row.beta_e, row.beta_a),
            None => eprintln!(
                "[{}/{n}] beta_e={} beta_a={} seed={} DER {:.2}%",
                rows.len(),
                row.beta_e,
                row.beta_a,
                row.run_seed,
                row.der_percent
            ),
        }
        if let Err(e) = export_plot_data(&rows, &path) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(())
}
