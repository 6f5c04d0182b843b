//! Three-stage training recipe, Adam with warmup, checkpoint persistence and
//! averaging, and inference.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data_sim::{Conversation, FRAME_SECONDS};
use crate::error::{Error, Result};
use crate::losses::{
    attractor_loss, diarization_loss_pit, multi_sample_losses, total_loss, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::model::{
    activity_probs_values, count_speakers, sample_encoding, DiarizationOutput, EendEda, ModelConfig,
};
use crate::params::ParamSet;
use crate::scoring::{score_der, DerBreakdown, Timeline, DEFAULT_COLLAR};
use crate::tensor::{SeededRng, Tensor};

pub const CHECKPOINT_FORMAT: &str = "eend-vib-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Adapt,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Adapt => "adapt",
            Stage::Finetune => "finetune",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Train => None,
            Stage::Adapt => Some(Stage::Train),
            Stage::Finetune => Some(Stage::Adapt),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Stage::Train),
            "adapt" => Ok(Stage::Adapt),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidConfig(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weights: LossWeights,
    /// Existence threshold used when evaluating candidates.
    pub tau: f64,
    /// Number of trailing epoch checkpoints averaged into a candidate.
    pub avg_last_k: usize,
    /// A candidate is formed every this many epochs (and at the last epoch).
    pub avg_every: usize,
    pub seed: u64,
    /// Split recordings into chunks of this many frames; 0 keeps them whole.
    pub chunk_frames: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rescale the batch gradient to at most this global norm; 0 disables.
    pub max_grad_norm: f64,
    /// Train through the deterministic mean-head path with no sampling.
    pub deterministic_baseline: bool,
    /// Rotate each recording's features by a fresh random orthogonal matrix
    /// every epoch.
    pub augment_rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Train)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, base_lr) = match stage {
            Stage::Train => (40, 8e-3),
            Stage::Adapt => (40, 4e-3),
            Stage::Finetune => (20, 1e-3),
        };
        Self {
            stage,
            epochs,
            batch_size: 4,
            base_lr,
            warmup_steps: 100,
            weights: LossWeights::default(),
            tau: 0.5,
            avg_last_k: 5,
            avg_every: 5,
            seed: 0,
            chunk_frames: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_grad_norm: 5.0,
            deterministic_baseline: false,
            augment_rotation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.avg_last_k == 0 || self.avg_every == 0 {
            return bad("avg_last_k and avg_every must be >= 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps > 0".into());
        }
        if self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be >= 0".into());
        }
        self.weights.validate()
    }
}

/// `base_lr · min(step / warmup, sqrt(warmup / step))` for 1-based `step`;
/// constant `base_lr` when `warmup == 0`.
pub fn learning_rate(base_lr: f64, warmup: usize, step: u64) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    let (s, w) = (step.max(1) as f64, warmup as f64);
    base_lr * (s / w).min((w / s).sqrt())
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer_step",
            });
        }
        params.check_compatible(grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked compatible");
            let m = moment(&mut self.m, name, p.shape());
            let v = moment(&mut self.v, name, p.shape());
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let md = m.data_mut();
            let vd = v.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn moment<'a>(set: &'a mut ParamSet, name: &str, shape: &[usize]) -> &'a mut Tensor {
    if set.get(name).is_none() {
        set.insert(name, Tensor::zeros(shape.to_vec()));
    }
    set.get_mut(name).unwrap()
}

/// Seed and position of the training RNG. All draws of an epoch derive from
/// `(seed, epoch)`, so this pair is enough to resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub fingerprint: String,
    pub stage: Stage,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &EendEda, stage: Stage, epoch: usize, rng: RngState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            model: model.config().clone(),
            fingerprint: model.config().fingerprint(),
            stage,
            epoch,
            rng,
            params: model.params().clone(),
        }
    }

    pub fn to_model(&self) -> Result<EendEda> {
        if self.model.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.model.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        EendEda::from_parts(self.model.clone(), self.params.clone())
    }

    /// Load into a model, requiring the architecture of `expected`.
    pub fn to_model_checked(&self, expected: &ModelConfig) -> Result<EendEda> {
        if expected.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        let mut model = self.to_model()?;
        model.set_vib(expected.vib_frame_enabled, expected.vib_attractor_enabled);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Write to a temporary sibling, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Precondition(format!(
                "{}: unknown checkpoint format {:?}",
                path.display(),
                ck.format
            )));
        }
        Ok(ck)
    }
}

/// Elementwise mean of every parameter tensor. Metadata follows the last
/// checkpoint.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts
        .last()
        .ok_or(Error::EmptyInput("average_checkpoints"))?;
    for c in ckpts {
        if c.fingerprint != last.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: last.fingerprint.clone(),
                found: c.fingerprint.clone(),
            });
        }
        c.params.check_compatible(&last.params)?;
    }
    let k = ckpts.len() as f64;
    let mut params = ckpts[0].params.clone();
    for c in &ckpts[1..] {
        for (name, acc) in params.iter_mut() {
            acc.add_assign(c.params.get(name).unwrap());
        }
    }
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok(Checkpoint {
        params,
        ..last.clone()
    })
}

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub l_ekld: f64,
    pub l_akld: f64,
    pub wall_s: f64,
}

/// An averaged checkpoint considered for selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub epoch: usize,
    pub averaged: usize,
    pub dev_der: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The selected averaged model.
    pub model: EendEda,
    pub checkpoint: Checkpoint,
    /// Per-epoch snapshots, oldest first.
    pub history: Vec<Checkpoint>,
    pub candidates: Vec<Candidate>,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.total).collect()
    }

    /// Mean of each loss component over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> LossBreakdown {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        let k = tail.len().max(1) as f64;
        let mut b = LossBreakdown::default();
        for r in tail {
            b.total += r.total / k;
            b.l_d += r.l_d / k;
            b.l_a += r.l_a / k;
            b.l_ekld += r.l_ekld / k;
            b.l_akld += r.l_akld / k;
        }
        b
    }
}

/// Where a training run persists its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    /// Receives `train_log.jsonl`, candidate checkpoints and `final.ckpt.json`.
    pub dir: Option<&'a Path>,
    /// Evaluated with mean inference to pick among candidates.
    pub dev: Option<&'a [Conversation]>,
}

fn check_stage_data(stage: Stage, data: &[Conversation], model: &EendEda) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let max = model.config().max_attractors;
    for c in data {
        c.validate()?;
        if c.x.cols() != model.config().feat_dim {
            return Err(Error::ShapeMismatch {
                op: "train_stage",
                detail: format!(
                    "{}: {} feature dims, model expects {}",
                    c.id,
                    c.x.cols(),
                    model.config().feat_dim
                ),
            });
        }
        let s = c.n_speakers();
        if stage == Stage::Train && s != 2 {
            return Err(Error::Precondition(format!(
                "{}: initial training expects 2 speakers, found {s}",
                c.id
            )));
        }
        if s > max {
            return Err(Error::Precondition(format!(
                "{}: {s} speakers exceeds max_attractors {max}",
                c.id
            )));
        }
    }
    Ok(())
}

fn chunked(data: &[Conversation], chunk: usize) -> Vec<Conversation> {
    if chunk == 0 {
        return data.to_vec();
    }
    data.iter()
        .flat_map(|c| {
            let t = c.n_frames();
            (0..t)
                .step_by(chunk)
                .filter_map(move |a| c.chunk(a, (a + chunk).min(t)))
        })
        .collect()
}

/// Loss and parameter gradients for one recording.
pub fn conversation_gradients(
    model: &EendEda,
    conv: &Conversation,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(ParamSet, LossBreakdown)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let x = if cfg.augment_rotation {
        g.constant(conv.x.matmul(&random_rotation(conv.x.cols(), rng))?)
    } else {
        g.constant(conv.x.clone())
    };
    let s = conv.n_speakers();
    let (loss, breakdown) = if cfg.deterministic_baseline {
        let (p, q) = model.forward_deterministic(&mut g, &b, x, s + 1, s)?;
        let (l_d, _) = diarization_loss_pit(&mut g, p, &conv.y, None)?;
        let l_a = attractor_loss(&mut g, q, s)?;
        let total = total_loss(
            &mut g,
            &LossTerms {
                l_d,
                l_a,
                l_ekld: None,
                l_akld: None,
            },
            &cfg.weights,
        )?;
        let v = |var| g.value(var).data()[0];
        let br = LossBreakdown {
            total: v(total),
            l_d: v(l_d),
            l_a: v(l_a),
            l_ekld: 0.0,
            l_akld: 0.0,
        };
        (total, br)
    } else {
        let shuffle = model.config().shuffle_frames.then_some(&mut *rng);
        let encoded = model.encode(&mut g, &b, x, s + 1, shuffle)?;
        multi_sample_losses(&mut g, model, &b, &encoded, &conv.y, s, &cfg.weights, rng)?
    };
    let mut grads = g.backward(loss)?;
    Ok((b.collect_grads(&g, &mut grads), breakdown))
}

/// Haar-distributed orthogonal `[d × d]` matrix: QR of a Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`.
pub fn random_rotation(d: usize, rng: &mut SeededRng) -> Tensor {
    let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            data.push(q[(i, j)] * sign);
        }
    }
    Tensor::new(vec![d, d], data).expect("square")
}

fn to_divergence(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Minibatch training of `model` on `data` for `cfg.epochs` epochs. The
/// returned model is the selected average of trailing epoch checkpoints.
pub fn train_stage(
    mut model: EendEda,
    data: &[Conversation],
    cfg: &TrainConfig,
    out: TrainOutputs<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage_data(cfg.stage, data, &model)?;
    let data = chunked(data, cfg.chunk_frames);
    if data.is_empty() {
        return Err(Error::EmptyInput("training set after chunking"));
    }
    let mut log_file = match out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let root = SeededRng::new(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let mut history: Vec<Checkpoint> = Vec::new();
    let mut candidates = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::new();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        epoch_rng.fork(0).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let step = adam.steps() + 1;
            let mut acc: Option<ParamSet> = None;
            let mut sum = LossBreakdown::default();
            for &i in batch {
                let mut rng = epoch_rng.fork(1 + i as u64);
                let (grads, br) = conversation_gradients(&model, &data[i], cfg, &mut rng)
                    .map_err(|e| to_divergence(e, epoch, step))?;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, t) in a.iter_mut() {
                            t.add_assign(grads.get(name).unwrap());
                        }
                    }
                }
                sum.total += br.total;
                sum.l_d += br.l_d;
                sum.l_a += br.l_a;
                sum.l_ekld += br.l_ekld;
                sum.l_akld += br.l_akld;
            }
            let mut grads = acc.expect("non-empty batch");
            let k = batch.len() as f64;
            let mut sq = 0.0;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v /= k);
                sq += t.data().iter().map(|v| v * v).sum::<f64>();
            }
            if !sq.is_finite() || !sum.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {} grad norm² {sq}", sum.total / k),
                });
            }
            let norm = sq.sqrt();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            let lr = learning_rate(cfg.base_lr, cfg.warmup_steps, step);
            adam.step(model.params_mut(), &grads, lr)
                .map_err(|e| to_divergence(e, epoch, step))?;
            let rec = StepRecord {
                stage: cfg.stage,
                epoch,
                step,
                lr,
                total: sum.total / k,
                l_d: sum.l_d / k,
                l_a: sum.l_a / k,
                l_ekld: sum.l_ekld / k,
                l_akld: sum.l_akld / k,
                wall_s: start.elapsed().as_secs_f64(),
            };
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            log.push(rec);
        }

        let rng_state = RngState {
            seed: cfg.seed,
            epoch: epoch as u64,
        };
        history.push(Checkpoint::from_model(&model, cfg.stage, epoch, rng_state));
        if epoch % cfg.avg_every == 0 || epoch == cfg.epochs {
            let tail = &history[history.len().saturating_sub(cfg.avg_last_k)..];
            let avg = average_checkpoints(tail)?;
            let dev_der = match out.dev {
                Some(dev) => {
                    let m = avg.to_model()?;
                    Some(
                        evaluate(&m, dev, InferMode::Mean, cfg.tau, cfg.seed, 1)?
                            .aggregate
                            .der,
                    )
                }
                None => None,
            };
            candidates.push(Candidate {
                epoch,
                averaged: tail.len(),
                dev_der,
            });
            if let Some(dir) = out.dir {
                avg.save(&dir.join(format!("avg_epoch{epoch:03}.ckpt.json")))?;
            }
            // Without a dev set the latest candidate wins.
            let score = dev_der.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(s, _)| score <= *s) {
                best = Some((score, avg));
            }
        }
    }
    if let Some((f, p)) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let (_, checkpoint) = best.expect("at least one candidate");
    if let Some(dir) = out.dir {
        checkpoint.save(&dir.join("final.ckpt.json"))?;
    }
    let mut selected = checkpoint.to_model()?;
    selected.set_vib(
        model.config().vib_frame_enabled,
        model.config().vib_attractor_enabled,
    );
    Ok(TrainOutcome {
        model: selected,
        checkpoint,
        history,
        candidates,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    /// Evaluate at the encoding means.
    Mean,
    /// Average `p` and `q` over `m` reparameterised draws.
    SampleAvg { m: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `p` covers every decoded attractor, `S_max + 1` rows.
    pub output: DiarizationOutput,
    pub n_speakers: usize,
    /// `[n_speakers × T]`, `p > 0.5`.
    pub decisions: Tensor,
}

/// Diarize one recording. Mean mode ignores `rng`.
pub fn infer(
    model: &EendEda,
    x: &Tensor,
    mode: InferMode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<Inference> {
    let max = model.config().max_attractors;
    let n_out = max + 1;
    let (frames, attrs) = model.infer_encodings(x, n_out)?;
    let (p, q) = match mode {
        InferMode::Mean => (
            activity_probs_values(&frames.mu, &attrs.mu)?,
            model.existence_values(&attrs.mu)?,
        ),
        InferMode::SampleAvg { m } => {
            if m == 0 {
                return Err(Error::InvalidConfig("sample_avg needs m >= 1".into()));
            }
            let mut p_acc = Tensor::zeros(vec![n_out, x.rows()]);
            let mut q_acc = vec![0.0; n_out];
            for _ in 0..m {
                let zt = sample_encoding(&frames, rng);
                let zs = sample_encoding(&attrs, rng);
                p_acc.add_assign(&activity_probs_values(&zt, &zs)?);
                for (a, v) in q_acc.iter_mut().zip(model.existence_values(&zs)?) {
                    *a += v;
                }
            }
            let inv = 1.0 / m as f64;
            (
                p_acc.map(|v| v * inv),
                q_acc.into_iter().map(|v| v * inv).collect(),
            )
        }
    };
    let n_speakers = count_speakers(&q, tau, max);
    let t = x.rows();
    let decisions: Vec<f64> = p.data()[..n_speakers * t]
        .iter()
        .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(Inference {
        output: DiarizationOutput {
            p,
            q: Tensor::vector(q),
        },
        n_speakers,
        decisions: Tensor::new(vec![n_speakers, t], decisions)?,
    })
}

impl Inference {
    pub fn hypothesis_labels(&self) -> Vec<String> {
        (0..self.n_speakers).map(|s| format!("spk{s}")).collect()
    }

    pub fn timeline(&self) -> Result<Timeline> {
        Timeline::from_frames(&self.decisions, &self.hypothesis_labels(), FRAME_SECONDS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingResult {
    pub id: String,
    pub n_speakers_ref: usize,
    pub n_speakers_hyp: usize,
    pub q: Vec<f64>,
    pub der: DerBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub recordings: Vec<RecordingResult>,
    pub aggregate: DerBreakdown,
}

impl Evaluation {
    pub fn der_percent(&self) -> f64 {
        self.aggregate.der_percent()
    }
}

/// Infer every recording and score against its labels (collar 0.25 s,
/// overlap scored). Recording `i` draws from stream `i` of `seed`, so results
/// do not depend on `jobs`.
pub fn evaluate(
    model: &EendEda,
    data: &[Conversation],
    mode: InferMode,
    tau: f64,
    seed: u64,
    jobs: usize,
) -> Result<Evaluation> {
    let inferences = infer_all(model, data, mode, tau, seed, jobs)?;
    let recordings = data
        .iter()
        .zip(inferences)
        .map(|(c, inf)| {
            let reference = Timeline::from_frames(&c.y, &c.speaker_ids, FRAME_SECONDS)?;
            Ok(RecordingResult {
                id: c.id.clone(),
                n_speakers_ref: c.n_speakers(),
                n_speakers_hyp: inf.n_speakers,
                q: inf.output.q.data().to_vec(),
                der: score_der(&reference, &inf.timeline()?, DEFAULT_COLLAR, true)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = DerBreakdown::aggregate(recordings.iter().map(|r| &r.der));
    Ok(Evaluation {
        recordings,
        aggregate,
    })
}

/// Inference over a dataset, fanned out over up to `jobs` threads.
pub fn infer_all(
    model: &EendEda,
    data: &[Conversation],
    mode: InferMode,
    tau: f64,
    seed: u64,
    jobs: usize,
) -> Result<Vec<Inference>> {
    let root = SeededRng::new(seed);
    let run = |i: usize| infer(model, &data[i].x, mode, tau, &mut root.fork(i as u64));
    let jobs = jobs.clamp(1, data.len().max(1));
    if jobs == 1 {
        return (0..data.len()).map(run).collect();
    }
    let per = data.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<Inference>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let run = &run;
                s.spawn(move || {
                    (j * per..((j + 1) * per).min(data.len()))
                        .map(run)
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
