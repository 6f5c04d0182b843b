use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RttmSegment {
    pub file_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl RttmSegment {
    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Serialise a `[S × T]` label matrix, one line per contiguous active run,
/// ordered by speaker then onset. Times use two decimals.
pub fn write_rttm(file_id: &str, y: &Tensor, speakers: &[String], frame_seconds: f64) -> String {
    let mut out = String::new();
    for (s, name) in speakers.iter().enumerate().take(y.rows()) {
        let row = y.row(s);
        let mut t = 0;
        while t < row.len() {
            if row[t] > 0.5 {
                let start = t;
                while t < row.len() && row[t] > 0.5 {
                    t += 1;
                }
                let onset = start as f64 * frame_seconds;
                let dur = (t - start) as f64 * frame_seconds;
                let _ = writeln!(
                    out,
                    "SPEAKER {file_id} 1 {onset:.2} {dur:.2} <NA> <NA> {name} <NA> <NA>"
                );
            } else {
                t += 1;
            }
        }
    }
    out
}

/// Parse `SPEAKER` records. Other record types and blank lines are skipped.
pub fn read_rttm(text: &str) -> Result<Vec<RttmSegment>> {
    let mut segs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with(';') {
            continue;
        }
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected >= 8 fields, got {}", fields.len()),
            });
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("bad {what} {:?}", fields[k]),
                })
        };
        segs.push(RttmSegment {
            file_id: fields[1].to_string(),
            onset: num(3, "onset")?,
            duration: num(4, "duration")?,
            speaker: fields[7].to_string(),
        });
    }
    Ok(segs)
}

/// Distinct speaker labels in natural order (`spk2` before `spk10`).
pub fn speaker_labels(segs: &[RttmSegment]) -> Vec<String> {
    let set: BTreeSet<&str> = segs.iter().map(|s| s.speaker.as_str()).collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    v.sort_by_key(|s| natural_key(s));
    v
}

fn natural_key(s: &str) -> (String, u64, String) {
    let digits_at = s.rfind(|c: char| !c.is_ascii_digit()).map_or(0, |i| i + 1);
    let (head, tail) = s.split_at(digits_at);
    (
        head.to_string(),
        tail.parse().unwrap_or(u64::MAX),
        s.to_string(),
    )
}

/// Rasterise segments onto a frame grid. Frame boundaries are obtained by
/// rounding times to the nearest frame.
pub fn labels_from_segments(
    segs: &[RttmSegment],
    speakers: &[String],
    n_frames: usize,
    frame_seconds: f64,
) -> Result<Tensor> {
    let mut y = Tensor::zeros(vec![speakers.len(), n_frames]);
    for seg in segs {
        let s = speakers
            .iter()
            .position(|n| *n == seg.speaker)
            .ok_or_else(|| {
                Error::Precondition(format!("speaker {:?} not in speaker list", seg.speaker))
            })?;
        let a = ((seg.onset / frame_seconds).round() as usize).min(n_frames);
        let b = ((seg.offset() / frame_seconds).round() as usize).min(n_frames);
        let data = y.data_mut();
        data[s * n_frames + a..s * n_frames + b]
            .iter_mut()
            .for_each(|v| *v = 1.0);
    }
    Ok(y)
}
