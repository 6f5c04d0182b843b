//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use eend_vib::data_sim::{self, DatasetKind, SimConfig};
use eend_vib::losses::{diarization_loss_pit_values, kld_loss_values};
use eend_vib::model::{count_speakers as count, EendEda, StochasticEncoding};
use eend_vib::pipeline::{self, Checkpoint, InferMode};
use eend_vib::scoring::{score_der, Timeline};
use eend_vib::{Error, SeededRng, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Json(_) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::GraphConsumed => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix has no rows"));
    }
    Tensor::from_rows(rows).map_err(py_err)
}

type Segment = (String, f64, f64);

fn timeline(segs: &[Segment]) -> PyResult<Timeline> {
    Timeline::from_segments(segs.iter().map(|(s, a, b)| (s.as_str(), *a, *b))).map_err(py_err)
}

/// Simulated conversations as dicts with `id`, `x` (`T × D`), `y` (`S × T`)
/// and `speakers`.
#[pyfunction]
#[pyo3(signature = (kind="sc2", n=1, seed=0, frames=200, feat_dim=16))]
fn simulate<'py>(
    py: Python<'py>,
    kind: &str,
    n: usize,
    seed: u64,
    frames: usize,
    feat_dim: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kind: DatasetKind = kind.parse().map_err(py_err)?;
    let base = SimConfig { frames, feat_dim, ..SimConfig::default() };
    let convs = data_sim::make_dataset(kind, n, &base, seed).map_err(py_err)?;
    convs
        .into_iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("id", c.id)?;
            d.set_item("x", c.x.to_rows())?;
            d.set_item("y", c.y.to_rows())?;
            d.set_item("speakers", c.speaker_ids)?;
            Ok(d)
        })
        .collect()
}

/// Minimum mean BCE over label permutations and the permutation attaining
/// it.
#[pyfunction]
fn pit_loss(p: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<(f64, Vec<usize>)> {
    let (loss, perm) = diarization_loss_pit_values(&tensor(&p)?, &tensor(&y)?, None).map_err(py_err)?;
    Ok((loss, perm.mapping().to_vec()))
}

/// Closed-form KL divergence to the standard normal, summed over all entries
/// and divided by `normalizer`.
#[pyfunction]
#[pyo3(signature = (mu, sigma, normalizer=1.0))]
fn kld(mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, normalizer: f64) -> PyResult<f64> {
    let enc = StochasticEncoding::new(tensor(&mu)?, tensor(&sigma)?).map_err(py_err)?;
    kld_loss_values(&enc, normalizer).map_err(py_err)
}

/// Diarization error of `(speaker, onset, offset)` segment lists.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, collar=0.25, score_overlap=true))]
fn score<'py>(
    py: Python<'py>,
    reference: Vec<Segment>,
    hypothesis: Vec<Segment>,
    collar: f64,
    score_overlap: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let d = score_der(&timeline(&reference)?, &timeline(&hypothesis)?, collar, score_overlap).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("missed", d.missed_speech_s)?;
    out.set_item("false_alarm", d.false_alarm_s)?;
    out.set_item("confusion", d.speaker_confusion_s)?;
    out.set_item("scored", d.scored_speech_s)?;
    out.set_item("der", d.der)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (q, tau=0.5, max_speakers=None))]
fn count_speakers(q: Vec<f64>, tau: f64, max_speakers: Option<usize>) -> usize {
    count(&q, tau, max_speakers.unwrap_or(q.len()))
}

#[pyfunction]
#[pyo3(signature = (file_id, y, speakers=None, frame_seconds=data_sim::FRAME_SECONDS))]
fn write_rttm(file_id: &str, y: Vec<Vec<f64>>, speakers: Option<Vec<String>>, frame_seconds: f64) -> PyResult<String> {
    let y = tensor(&y)?;
    let speakers = speakers.unwrap_or_else(|| (0..y.rows()).map(|s| format!("spk{s}")).collect());
    Ok(data_sim::write_rttm(file_id, &y, &speakers, frame_seconds))
}

/// `(file_id, speaker, onset, duration)` per `SPEAKER` line.
#[pyfunction]
fn read_rttm(text: &str) -> PyResult<Vec<(String, String, f64, f64)>> {
    let segs = data_sim::read_rttm(text).map_err(py_err)?;
    Ok(segs.into_iter().map(|s| (s.file_id, s.speaker, s.onset, s.duration)).collect())
}

/// A trained model loaded from a checkpoint file.
#[pyclass(frozen)]
struct Diarizer {
    model: EendEda,
}

#[pymethods]
impl Diarizer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(py_err)?;
        Ok(Self { model })
    }

    /// Fresh randomly initialised model, mostly useful for testing.
    #[staticmethod]
    #[pyo3(signature = (feat_dim, model_dim=32, n_blocks=1, n_heads=2, ffn_dim=64, seed=0))]
    fn random(
        feat_dim: usize,
        model_dim: usize,
        n_blocks: usize,
        n_heads: usize,
        ffn_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = eend_vib::model::ModelConfig {
            feat_dim,
            model_dim,
            n_blocks,
            n_heads,
            ffn_dim,
            ..Default::default()
        };
        let model = EendEda::new(cfg, &mut SeededRng::new(seed)).map_err(py_err)?;
        Ok(Self { model })
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.model.config().fingerprint()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.model.config().feat_dim
    }

    /// Diarize a `T × D` feature matrix. `mode` is `"mean"` or
    /// `"sample-avg"`, the latter averaging `m` draws.
    #[pyo3(signature = (x, mode="mean", m=100, tau=0.5, seed=0))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        mode: &str,
        m: usize,
        tau: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode = match mode {
            "mean" => InferMode::Mean,
            "sample-avg" | "sample_avg" => InferMode::SampleAvg { m },
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let x = tensor(&x)?;
        let inf = pipeline::infer(&self.model, &x, mode, tau, &mut SeededRng::new(seed)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("p", inf.output.p.to_rows())?;
        out.set_item("q", inf.output.q.data().to_vec())?;
        out.set_item("n_speakers", inf.n_speakers)?;
        out.set_item("decisions", inf.decisions.to_rows())?;
        Ok(out)
    }
}

#[pymodule]
fn eend_vib_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(pit_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(count_speakers, m)?)?;
    m.add_function(wrap_pyfunction!(write_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(read_rttm, m)?)?;
    m.add_class::<Diarizer>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_convert_and_ragged_input_is_rejected() {
        let t = tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert!(tensor(&[vec![1.0], vec![2.0, 3.0]]).is_err());
        assert!(tensor(&[]).is_err());
        assert!(timeline(&[("a".into(), 0.0, 1.0), ("a".into(), 0.5, 2.0)]).is_ok());
        assert_eq!(count_speakers(vec![0.9, 0.8, 0.2], 0.5, None), 2);
    }
}
