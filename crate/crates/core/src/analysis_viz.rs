//! PCA projections of stochastic encodings, frame categories, the β sweep
//! harness and plot-data files.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_sim::Conversation;
use crate::error::{Error, Result};
use crate::losses::{attractor_kld_normalizer, kld_loss_values, KldAttractorNorm};
use crate::model::{EendEda, ModelConfig, StochasticEncoding};
use crate::pipeline::{evaluate, train_stage, InferMode, TrainConfig, TrainOutputs};
use crate::tensor::SeededRng;

/// Top-2 principal directions of a set of vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Orthonormal rows, largest-magnitude entry of each positive.
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub explained: [f64; 2],
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn retained_ratio(&self) -> f64 {
        (self.explained[0] + self.explained[1]) / self.total_variance
    }

    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let c = |w: &[f64]| {
            w.iter()
                .zip(v)
                .zip(&self.mean)
                .map(|((w, x), m)| w * (x - m))
                .sum()
        };
        [c(&self.components[0]), c(&self.components[1])]
    }
}

pub fn pca_fit(vectors: &[Vec<f64>]) -> Result<PcaBasis> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "PCA needs at least 3 vectors, got {n}"
        )));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Precondition(
            "PCA needs equal-length vectors of dimension >= 2".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for v in vectors {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let total_variance = cov.trace();
    let scale = mean.iter().map(|m| m.abs()).fold(1.0, f64::max);
    if !(total_variance > 1e-24 * scale * scale) {
        return Err(Error::Precondition(
            "PCA input is degenerate (all vectors identical)".into(),
        ));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let component = |k: usize| {
        let col = eig.eigenvectors.column(order[k]);
        let mut w: Vec<f64> = col.iter().copied().collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let big = w
            .iter()
            .enumerate()
            .fold(0, |bi, (i, x)| if x.abs() > w[bi].abs() { i } else { bi });
        let sign = if w[big] < 0.0 { -1.0 } else { 1.0 };
        w.iter_mut().for_each(|x| *x *= sign / norm);
        w
    };
    let ev = |k: usize| eig.eigenvalues[order[k]].max(0.0);
    Ok(PcaBasis {
        mean,
        components: [component(0), component(1)],
        explained: [ev(0), ev(1)],
        total_variance,
    })
}

/// Closed set of plot categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Valid attractor by decoding order.
    Attractor(usize),
    Invalid,
    /// Frame where exactly this speaker is active.
    Speaker(usize),
    Overlap,
    Silence,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Attractor(i) => write!(f, "attractor_{i}"),
            Category::Invalid => f.write_str("invalid"),
            Category::Speaker(i) => write!(f, "speaker_{i}"),
            Category::Overlap => f.write_str("overlap"),
            Category::Silence => f.write_str("silence"),
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let idx = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad category {s:?}")))
        };
        match s {
            "invalid" => Ok(Category::Invalid),
            "overlap" => Ok(Category::Overlap),
            "silence" => Ok(Category::Silence),
            _ => {
                if let Some(r) = s.strip_prefix("attractor_") {
                    Ok(Category::Attractor(idx(r)?))
                } else if let Some(r) = s.strip_prefix("speaker_") {
                    Ok(Category::Speaker(idx(r)?))
                } else {
                    Err(Error::InvalidConfig(format!("bad category {s:?}")))
                }
            }
        }
    }
}

/// Category of one frame given its speaker-activity column.
pub fn categorize_frames(column: &[f64]) -> Category {
    let mut active = column
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i);
    match (active.next(), active.next()) {
        (None, _) => Category::Silence,
        (Some(i), None) => Category::Speaker(i),
        _ => Category::Overlap,
    }
}

/// Projected Gaussian of one encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipseRecord {
    pub conversation_id: String,
    pub category: Category,
    /// Attractor or frame index within the recording.
    pub index: usize,
    pub center: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl EllipseRecord {
    /// Semi-axes and orientation (radians) of the two-standard-deviation
    /// contour.
    pub fn contour_2sd(&self) -> (f64, f64, f64) {
        let [[a, b], [_, c]] = self.covariance;
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (l1, l2) = ((mid + rad).max(0.0), (mid - rad).max(0.0));
        let angle = 0.5 * (2.0 * b).atan2(a - c);
        (2.0 * l1.sqrt(), 2.0 * l2.sqrt(), angle)
    }

    pub fn area_2sd(&self) -> f64 {
        let (a, b, _) = self.contour_2sd();
        std::f64::consts::PI * a * b
    }
}

/// Center `W(μ − mean)` and covariance `W diag(σ²) Wᵀ`.
pub fn project_encoding(mu: &[f64], sigma: &[f64], basis: &PcaBasis) -> ([f64; 2], [[f64; 2]; 2]) {
    let center = basis.project(mu);
    let [w0, w1] = &basis.components;
    let mut cov = [[0.0; 2]; 2];
    for k in 0..mu.len() {
        let s2 = sigma[k] * sigma[k];
        cov[0][0] += w0[k] * s2 * w0[k];
        cov[0][1] += w0[k] * s2 * w1[k];
        cov[1][1] += w1[k] * s2 * w1[k];
    }
    cov[1][0] = cov[0][1];
    (center, cov)
}

fn encoding_rows(enc: &StochasticEncoding, deterministic: bool) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..enc.mu.rows())
        .map(|i| {
            let mu = enc.mu.row(i).to_vec();
            let sigma = if deterministic {
                vec![0.0; mu.len()]
            } else {
                enc.sigma.row(i).to_vec()
            };
            (mu, sigma)
        })
        .collect()
}

/// Ellipses of the `S + 1` attractors decoded per recording (true `S`): one
/// per valid attractor plus the invalid one. PCA is fitted on the means.
pub fn attractor_ellipses(
    model: &EendEda,
    data: &[Conversation],
) -> Result<(PcaBasis, Vec<EllipseRecord>)> {
    let det = !model.config().vib_attractor_enabled;
    let mut items = Vec::new();
    for c in data {
        let s = c.n_speakers();
        let (_, attrs) = model.infer_encodings(&c.x, s + 1)?;
        for (i, (mu, sigma)) in encoding_rows(&attrs, det).into_iter().enumerate() {
            let cat = if i < s {
                Category::Attractor(i)
            } else {
                Category::Invalid
            };
            items.push((c.id.clone(), cat, i, mu, sigma));
        }
    }
    build_ellipses(items)
}

/// Ellipses of `frames_per_recording` randomly chosen frames from each
/// recording, categorised by reference activity.
pub fn frame_ellipses(
    model: &EendEda,
    data: &[Conversation],
    frames_per_recording: usize,
    rng: &mut SeededRng,
) -> Result<(PcaBasis, Vec<EllipseRecord>)> {
    let det = !model.config().vib_frame_enabled;
    let mut items = Vec::new();
    for c in data {
        let (frames, _) = model.infer_encodings(&c.x, c.n_speakers() + 1)?;
        let rows = encoding_rows(&frames, det);
        let mut idx: Vec<usize> = (0..c.n_frames()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(frames_per_recording);
        idx.sort_unstable();
        for t in idx {
            let col: Vec<f64> = (0..c.n_speakers()).map(|s| c.y.get2(s, t)).collect();
            let (mu, sigma) = rows[t].clone();
            items.push((c.id.clone(), categorize_frames(&col), t, mu, sigma));
        }
    }
    build_ellipses(items)
}

type Item = (String, Category, usize, Vec<f64>, Vec<f64>);

fn build_ellipses(items: Vec<Item>) -> Result<(PcaBasis, Vec<EllipseRecord>)> {
    let mus: Vec<Vec<f64>> = items.iter().map(|it| it.3.clone()).collect();
    let basis = pca_fit(&mus)?;
    let records = items
        .into_iter()
        .map(|(id, category, index, mu, sigma)| {
            let (center, covariance) = project_encoding(&mu, &sigma, &basis);
            EllipseRecord {
                conversation_id: id,
                category,
                index,
                center,
                covariance,
            }
        })
        .collect();
    Ok((basis, records))
}

/// Distance between two category centroids and the mean distance of each
/// member of `a` to its own centroid.
pub fn cluster_separation(
    records: &[EllipseRecord],
    a: Category,
    b: Category,
) -> Option<(f64, f64)> {
    let pts = |c: Category| -> Vec<[f64; 2]> {
        records
            .iter()
            .filter(|r| r.category == c)
            .map(|r| r.center)
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let centroid = |p: &[[f64; 2]]| {
        let n = p.len() as f64;
        [
            p.iter().map(|x| x[0]).sum::<f64>() / n,
            p.iter().map(|x| x[1]).sum::<f64>() / n,
        ]
    };
    let dist = |x: [f64; 2], y: [f64; 2]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
    let (ca, cb) = (centroid(&pa), centroid(&pb));
    let spread = pa.iter().map(|&p| dist(p, ca)).sum::<f64>() / pa.len() as f64;
    Some((dist(ca, cb), spread))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub beta_e: f64,
    pub beta_a: f64,
    /// `inf` when the run failed.
    pub der_percent: f64,
    /// Absent when the branch is deterministic or the run failed.
    pub mean_kld_frames: Option<f64>,
    pub mean_kld_attractors: Option<f64>,
    pub run_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub betas_e: Vec<f64>,
    pub betas_a: Vec<f64>,
    /// Cartesian product when true; otherwise each axis alone with the
    /// other weight at zero.
    pub joint: bool,
    /// Extra deterministic runs (both weights zero) with consecutive seeds.
    pub baseline_seeds: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            betas_e: vec![1e-6, 1e-3, 1e0, 1e1],
            betas_a: vec![1e-6, 1e-3, 1e0, 1e1],
            joint: false,
            baseline_seeds: 5,
            seed: 0,
        }
    }
}

/// One training run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub beta_e: f64,
    pub beta_a: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self
            .betas_e
            .iter()
            .chain(&self.betas_a)
            .any(|b| !(b.is_finite() && *b >= 0.0))
        {
            return Err(Error::InvalidConfig(
                "sweep weights must be finite and non-negative".into(),
            ));
        }
        if self.grid().is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        Ok(())
    }

    /// Grid points first, then the baseline band.
    pub fn grid(&self) -> Vec<SweepPoint> {
        let mut pts = Vec::new();
        let at = |beta_e, beta_a| SweepPoint {
            beta_e,
            beta_a,
            seed: self.seed,
        };
        if self.joint {
            for &e in &self.betas_e {
                for &a in &self.betas_a {
                    pts.push(at(e, a));
                }
            }
        } else {
            pts.extend(self.betas_e.iter().map(|&e| at(e, 0.0)));
            pts.extend(self.betas_a.iter().map(|&a| at(0.0, a)));
        }
        pts.extend((0..self.baseline_seeds as u64).map(|k| SweepPoint {
            beta_e: 0.0,
            beta_a: 0.0,
            seed: self.seed + k,
        }));
        pts
    }
}

/// Everything a sweep run shares.
#[derive(Clone, Debug)]
pub struct SweepBase<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_data: &'a [Conversation],
    pub eval_data: &'a [Conversation],
    pub jobs: usize,
}

/// Mean per-recording KL terms on `data`, decoding `S + 1` attractors.
pub fn mean_klds(
    model: &EendEda,
    data: &[Conversation],
    norm: KldAttractorNorm,
) -> Result<(Option<f64>, Option<f64>)> {
    let cfg = model.config();
    let (mut fr, mut at) = (0.0, 0.0);
    for c in data {
        let s = c.n_speakers();
        let (frames, attrs) = model.infer_encodings(&c.x, s + 1)?;
        if cfg.vib_frame_enabled {
            fr += kld_loss_values(&frames, c.n_frames() as f64)?;
        }
        if cfg.vib_attractor_enabled {
            at += kld_loss_values(&attrs, attractor_kld_normalizer(norm, s))?;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((
        cfg.vib_frame_enabled.then_some(fr / n),
        cfg.vib_attractor_enabled.then_some(at / n),
    ))
}

/// Train and evaluate one sweep point. A branch is stochastic exactly when
/// its weight is positive.
pub fn run_sweep_point(p: SweepPoint, base: &SweepBase<'_>) -> Result<SweepResult> {
    let mcfg = ModelConfig {
        vib_frame_enabled: p.beta_e > 0.0,
        vib_attractor_enabled: p.beta_a > 0.0,
        ..base.model.clone()
    };
    let model = EendEda::new(mcfg, &mut SeededRng::new(p.seed))?;
    let mut tcfg = base.train.clone();
    tcfg.seed = p.seed;
    tcfg.weights.beta_e = p.beta_e;
    tcfg.weights.beta_a = p.beta_a;
    let out = train_stage(model, base.train_data, &tcfg, TrainOutputs::default())?;
    let ev = evaluate(
        &out.model,
        base.eval_data,
        InferMode::Mean,
        tcfg.tau,
        p.seed,
        base.jobs,
    )?;
    let (kf, ka) = mean_klds(&out.model, base.eval_data, tcfg.weights.kld_attractor_norm)?;
    Ok(SweepResult {
        beta_e: p.beta_e,
        beta_a: p.beta_a,
        der_percent: ev.der_percent(),
        mean_kld_frames: kf,
        mean_kld_attractors: ka,
        run_seed: p.seed,
    })
}

/// One row per grid point; failed runs become `der = inf` rows and the sweep
/// moves on. `on_result` sees each row as it completes.
pub fn run_beta_sweep(
    spec: &SweepSpec,
    base: &SweepBase<'_>,
    mut on_result: impl FnMut(&SweepResult, Option<&Error>),
) -> Result<Vec<SweepResult>> {
    spec.validate()?;
    let mut out = Vec::new();
    for p in spec.grid() {
        let (row, err) = match run_sweep_point(p, base) {
            Ok(r) => (r, None),
            Err(e) => (
                SweepResult {
                    beta_e: p.beta_e,
                    beta_a: p.beta_a,
                    der_percent: f64::INFINITY,
                    mean_kld_frames: None,
                    mean_kld_attractors: None,
                    run_seed: p.seed,
                },
                Some(e),
            ),
        };
        on_result(&row, err.as_ref());
        out.push(row);
    }
    Ok(out)
}

/// A row type of a plot-data file.
pub trait PlotRecord: Sized {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
    fn parse(fields: &[&str]) -> Result<Self>;
}

/// Six significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.5e}")
}

fn parse_num(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line: 0,
        msg: format!("bad number {s:?}"),
    })
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_num(s).map(Some)
    }
}

impl PlotRecord for EllipseRecord {
    const HEADER: &'static [&'static str] = &[
        "conversation_id",
        "category",
        "index",
        "center_x",
        "center_y",
        "cov_xx",
        "cov_xy",
        "cov_yy",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.conversation_id.clone(),
            self.category.to_string(),
            self.index.to_string(),
            fmt_num(self.center[0]),
            fmt_num(self.center[1]),
            fmt_num(self.covariance[0][0]),
            fmt_num(self.covariance[0][1]),
            fmt_num(self.covariance[1][1]),
        ]
    }

    fn parse(f: &[&str]) -> Result<Self> {
        let xy = parse_num(f[6])?;
        Ok(Self {
            conversation_id: f[0].to_string(),
            category: f[1].parse()?,
            index: f[2].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad index {:?}", f[2]),
            })?,
            center: [parse_num(f[3])?, parse_num(f[4])?],
            covariance: [[parse_num(f[5])?, xy], [xy, parse_num(f[7])?]],
        })
    }
}

impl PlotRecord for SweepResult {
    const HEADER: &'static [&'static str] = &[
        "beta_e",
        "beta_a",
        "der_percent",
        "mean_kld_frames",
        "mean_kld_attractors",
        "run_seed",
    ];

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        vec![
            fmt_num(self.beta_e),
            fmt_num(self.beta_a),
            fmt_num(self.der_percent),
            opt(self.mean_kld_frames),
            opt(self.mean_kld_attractors),
            self.run_seed.to_string(),
        ]
    }

    fn parse(f: &[&str]) -> Result<Self> {
        Ok(Self {
            beta_e: parse_num(f[0])?,
            beta_a: parse_num(f[1])?,
            der_percent: parse_num(f[2])?,
            mean_kld_frames: parse_opt(f[3])?,
            mean_kld_attractors: parse_opt(f[4])?,
            run_seed: f[5].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad seed {:?}", f[5]),
            })?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Comma-separated file with a header row, one record per line.
pub fn export_plot_data<R: PlotRecord>(records: &[R], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput("export_plot_data"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(R::HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_plot_data<R: PlotRecord>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(text.as_slice());
    let header = rd.headers().map_err(csv_err)?;
    if header.iter().collect::<Vec<_>>() != R::HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let fields: Vec<&str> = rec.iter().collect();
        out.push(R::parse(&fields).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { line: i + 2, msg },
            other => other,
        })?);
    }
    Ok(out)
}
