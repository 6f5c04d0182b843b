//! Toy simulated conversations: additive speaker-signature features with
//! turn-taking activity labels.
//!
//! Each conversation draws a fresh signature vector per speaker. A frame's
//! feature is the sum of the signatures of every active speaker plus
//! isotropic Gaussian noise, so silence is pure noise and overlap is a sum of
//! two or more signatures.

mod rttm;
mod store;

pub use rttm::{labels_from_segments, read_rttm, speaker_labels, write_rttm, RttmSegment};
pub use store::{read_dataset, read_npy, write_dataset, write_npy, ManifestEntry, MANIFEST_NAME};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Seconds per feature frame.
pub const FRAME_SECONDS: f64 = 0.1;

const MAX_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_speakers: usize,
    pub frames: usize,
    pub feat_dim: usize,
    /// Mean turn length in frames (geometric).
    pub mean_turn_len: f64,
    /// Mean pause between non-overlapping turns in frames (geometric).
    pub mean_pause_len: f64,
    /// Probability that the next turn starts before the current one ends.
    pub overlap_prob: f64,
    pub speaker_signature_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            frames: 200,
            feat_dim: 16,
            mean_turn_len: 20.0,
            mean_pause_len: 5.0,
            overlap_prob: 0.2,
            speaker_signature_scale: 1.0,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.frames == 0 || self.feat_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_speakers, frames and feat_dim must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::InvalidConfig(format!(
                "overlap_prob {} outside [0, 1]",
                self.overlap_prob
            )));
        }
        if !(self.mean_turn_len >= 1.0 && self.mean_pause_len >= 1.0) {
            return Err(Error::InvalidConfig(
                "mean turn and pause lengths must be >= 1".into(),
            ));
        }
        if !(self.speaker_signature_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    /// `[T × D_in]`
    pub x: Tensor,
    /// `[S × T]` binary activity
    pub y: Tensor,
    pub speaker_ids: Vec<String>,
}

impl Conversation {
    pub fn new(
        id: impl Into<String>,
        x: Tensor,
        y: Tensor,
        speaker_ids: Vec<String>,
    ) -> Result<Self> {
        let c = Self {
            id: id.into(),
            x,
            y,
            speaker_ids,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn n_speakers(&self) -> usize {
        self.y.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.x.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.ndim() != 2 || self.y.ndim() != 2 || self.x.rows() != self.y.cols() {
            return Err(Error::ShapeMismatch {
                op: "conversation",
                detail: format!("x {:?}, y {:?}", self.x.shape(), self.y.shape()),
            });
        }
        if self.speaker_ids.len() != self.y.rows() {
            return Err(Error::Precondition(format!(
                "{} speaker ids for {} label rows",
                self.speaker_ids.len(),
                self.y.rows()
            )));
        }
        if self.y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("labels must be binary".into()));
        }
        if (0..self.y.rows()).any(|s| self.y.row(s).iter().all(|&v| v == 0.0)) {
            return Err(Error::Precondition(format!(
                "{}: speaker without activity",
                self.id
            )));
        }
        if !self.x.is_finite() {
            return Err(Error::NonFinite { op: "conversation" });
        }
        Ok(())
    }

    /// Frames `start..end` with silent speakers dropped.
    pub fn chunk(&self, start: usize, end: usize) -> Option<Conversation> {
        let t = end - start;
        let d = self.x.cols();
        let x = Tensor::new(vec![t, d], self.x.data()[start * d..end * d].to_vec()).ok()?;
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for s in 0..self.y.rows() {
            let r = &self.y.row(s)[start..end];
            if r.iter().any(|&v| v > 0.0) {
                rows.push(r.to_vec());
                ids.push(self.speaker_ids[s].clone());
            }
        }
        if rows.is_empty() {
            return None;
        }
        let y = Tensor::from_rows(&rows).ok()?;
        Some(Conversation {
            id: format!("{}_{start}", self.id),
            x,
            y,
            speaker_ids: ids,
        })
    }
}

fn simulate_activity(cfg: &SimConfig, rng: &mut SeededRng) -> Vec<Vec<bool>> {
    let (s_n, t_n) = (cfg.n_speakers, cfg.frames);
    let mut act = vec![vec![false; t_n]; s_n];
    // Everybody speaks once, in random order, before speakers repeat.
    let mut first_round: Vec<usize> = (0..s_n).collect();
    rng.shuffle(&mut first_round);
    let mut t = rng.geometric(cfg.mean_pause_len) - 1;
    let mut prev: Option<usize> = None;
    let mut turn = 0;
    while t < t_n {
        let spk = if turn < s_n {
            first_round[turn]
        } else if s_n == 1 {
            0
        } else {
            let mut c = rng.below(s_n - 1);
            if Some(c) >= prev {
                c += 1;
            }
            c
        };
        let len = rng.geometric(cfg.mean_turn_len);
        let end = (t + len).min(t_n);
        act[spk][t..end].iter_mut().for_each(|a| *a = true);
        let overlap = s_n > 1 && rng.bernoulli(cfg.overlap_prob);
        t = if overlap {
            let o = rng.geometric(cfg.mean_turn_len / 4.0).min(len - 1);
            t + len - o
        } else {
            t + len + rng.geometric(cfg.mean_pause_len)
        };
        prev = Some(spk);
        turn += 1;
    }
    act
}

/// One conversation from `cfg` using `rng` for every draw.
pub fn simulate_conversation(
    cfg: &SimConfig,
    id: &str,
    rng: &mut SeededRng,
) -> Result<Conversation> {
    cfg.validate()?;
    let activity = (0..MAX_RETRIES)
        .map(|_| simulate_activity(cfg, rng))
        .find(|act| act.iter().all(|row| row.iter().any(|&a| a)))
        .ok_or_else(|| {
            Error::Precondition(format!(
                "no activity for some speaker after {MAX_RETRIES} attempts; increase frames or shorten pauses"
            ))
        })?;
    let (s_n, t_n, d) = (cfg.n_speakers, cfg.frames, cfg.feat_dim);
    let signatures: Vec<Vec<f64>> = (0..s_n)
        .map(|_| {
            (0..d)
                .map(|_| cfg.speaker_signature_scale * rng.normal())
                .collect()
        })
        .collect();
    let mut x = vec![0.0; t_n * d];
    for t in 0..t_n {
        let row = &mut x[t * d..(t + 1) * d];
        for (s, sig) in signatures.iter().enumerate() {
            if activity[s][t] {
                row.iter_mut().zip(sig).for_each(|(a, b)| *a += b);
            }
        }
        row.iter_mut()
            .for_each(|v| *v += cfg.noise_scale * rng.normal());
    }
    let y: Vec<f64> = activity
        .iter()
        .flatten()
        .map(|&a| if a { 1.0 } else { 0.0 })
        .collect();
    let ids = (0..s_n).map(|s| format!("spk{s}")).collect();
    Conversation::new(
        id,
        Tensor::new(vec![t_n, d], x)?,
        Tensor::new(vec![s_n, t_n], y)?,
        ids,
    )
}

/// Dataset flavours, mirroring the stages of the training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Two speakers per recording.
    #[serde(rename = "sc2")]
    Sc2,
    /// Uniform mix of 2, 3 and 4 speakers.
    #[serde(rename = "sc2-4")]
    Sc2To4,
    /// Small in-domain pool: 2-4 speakers, shorter turns, noisier features.
    #[serde(rename = "finetune")]
    Finetune,
}

impl DatasetKind {
    fn stream(self) -> u64 {
        match self {
            DatasetKind::Sc2 => 0x5c2,
            DatasetKind::Sc2To4 => 0x5c24,
            DatasetKind::Finetune => 0xf17e,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Sc2 => "sc2",
            DatasetKind::Sc2To4 => "sc2-4",
            DatasetKind::Finetune => "finetune",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc2" => Ok(DatasetKind::Sc2),
            "sc2-4" | "sc2_4" | "sc24" => Ok(DatasetKind::Sc2To4),
            "finetune" | "ft" => Ok(DatasetKind::Finetune),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset kind {other:?}"
            ))),
        }
    }
}

/// `n` conversations of the given kind. Conversation `i` uses its own RNG
/// stream split from `seed`, so datasets are reproducible and prefixes are
/// stable under changes of `n`.
pub fn make_dataset(
    kind: DatasetKind,
    n: usize,
    base: &SimConfig,
    seed: u64,
) -> Result<Vec<Conversation>> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "dataset needs at least one conversation".into(),
        ));
    }
    base.validate()?;
    let root = SeededRng::new(seed).fork(kind.stream());
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let mut cfg = base.clone();
            match kind {
                DatasetKind::Sc2 => cfg.n_speakers = 2,
                DatasetKind::Sc2To4 => cfg.n_speakers = 2 + rng.below(3),
                DatasetKind::Finetune => {
                    cfg.n_speakers = 2 + rng.below(3);
                    cfg.mean_turn_len = (base.mean_turn_len * 0.75).max(1.0);
                    cfg.noise_scale = base.noise_scale * 1.5;
                }
            }
            simulate_conversation(&cfg, &format!("{}_{i:05}", kind.name()), &mut rng)
        })
        .collect()
}

/// Fraction of turn onsets (after the first) that start while another
/// speaker is already talking.
pub fn overlapped_onset_fraction(y: &Tensor) -> Option<f64> {
    let (s_n, t_n) = (y.rows(), y.cols());
    let mut onsets = Vec::new();
    for s in 0..s_n {
        for t in 0..t_n {
            if y.get2(s, t) > 0.0 && (t == 0 || y.get2(s, t - 1) == 0.0) {
                onsets.push((t, s));
            }
        }
    }
    onsets.sort_unstable();
    if onsets.len() < 2 {
        return None;
    }
    let overlapped = onsets[1..]
        .iter()
        .filter(|&&(t, s)| {
            (0..s_n).any(|o| o != s && y.get2(o, t) > 0.0 && t > 0 && y.get2(o, t - 1) > 0.0)
        })
        .count();
    Some(overlapped as f64 / (onsets.len() - 1) as f64)
}

/// Number of frames where two or more speakers are active.
pub fn overlap_frames(y: &Tensor) -> usize {
    (0..y.cols())
        .filter(|&t| (0..y.rows()).filter(|&s| y.get2(s, t) > 0.0).count() >= 2)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_speaker_contract() {
        let cfg = SimConfig::default();
        let c = simulate_conversation(&cfg, "c", &mut SeededRng::new(1)).unwrap();
        assert_eq!(c.y.rows(), 2);
        assert_eq!(c.x.shape(), &[200, 16]);
        for s in 0..2 {
            assert!(c.y.row(s).iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn no_overlap_when_disabled() {
        let cfg = SimConfig {
            overlap_prob: 0.0,
            n_speakers: 4,
            ..SimConfig::default()
        };
        for seed in 0..50 {
            let c = simulate_conversation(&cfg, "c", &mut SeededRng::new(seed)).unwrap();
            assert_eq!(overlap_frames(&c.y), 0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SimConfig::default();
        let a = simulate_conversation(&cfg, "c", &mut SeededRng::new(42)).unwrap();
        let b = simulate_conversation(&cfg, "c", &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlap_statistic_tracks_target() {
        let cfg = SimConfig::default();
        let convs = make_dataset(DatasetKind::Sc2, 1000, &cfg, 7).unwrap();
        let fr: Vec<f64> = convs
            .iter()
            .filter_map(|c| overlapped_onset_fraction(&c.y))
            .collect();
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        assert!(
            (mean - cfg.overlap_prob).abs() <= 0.2 * cfg.overlap_prob,
            "measured {mean}"
        );
    }

    #[test]
    fn impossible_config_errors() {
        let cfg = SimConfig {
            n_speakers: 4,
            frames: 1,
            mean_pause_len: 50.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            simulate_conversation(&cfg, "c", &mut SeededRng::new(0)),
            Err(Error::Precondition(_))
        ));
        let bad = SimConfig {
            overlap_prob: 1.5,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_kinds() {
        let cfg = SimConfig::default();
        let sc2 = make_dataset(DatasetKind::Sc2, 10, &cfg, 1).unwrap();
        assert_eq!(sc2.len(), 10);
        assert!(sc2.iter().all(|c| c.n_speakers() == 2));

        let mix = make_dataset(DatasetKind::Sc2To4, 300, &cfg, 1).unwrap();
        for s in 2..=4 {
            let count = mix.iter().filter(|c| c.n_speakers() == s).count();
            assert!(count >= 80, "{s} speakers: {count}");
        }
        assert!(make_dataset(DatasetKind::Sc2, 0, &cfg, 1).is_err());
    }

    #[test]
    fn disjoint_seeds_give_disjoint_signatures() {
        let cfg = SimConfig {
            noise_scale: 0.0,
            overlap_prob: 0.0,
            ..SimConfig::default()
        };
        let a = make_dataset(DatasetKind::Sc2, 3, &cfg, 1).unwrap();
        let b = make_dataset(DatasetKind::Sc2, 3, &cfg, 2).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            // with no noise, any active frame is exactly one signature
            let sig = |c: &Conversation| {
                let t = (0..c.n_frames())
                    .find(|&t| c.y.get2(0, t) == 1.0 && c.y.get2(1, t) == 0.0)
                    .unwrap();
                c.x.row(t).to_vec()
            };
            assert_ne!(sig(ca), sig(cb));
        }
    }

    #[test]
    fn chunking_drops_silent_speakers() {
        let x = Tensor::zeros(vec![4, 2]);
        let y = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]).unwrap();
        let c = Conversation::new("c", x, y, vec!["a".into(), "b".into()]).unwrap();
        let ch = c.chunk(0, 2).unwrap();
        assert_eq!(ch.n_speakers(), 1);
        assert_eq!(ch.speaker_ids, vec!["a".to_string()]);
        assert_eq!(ch.n_frames(), 2);
    }
}
