//! Diarization error rate with a forgiveness collar around reference
//! boundaries and optional scoring of overlapped speech.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_sim::RttmSegment;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COLLAR: f64 = 0.25;

/// Above this many speakers on the smaller side, the mapping switches from
/// exhaustive search to the Hungarian algorithm.
pub const EXHAUSTIVE_LIMIT: usize = 6;

/// Speech segments `(onset, offset)` in seconds per speaker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    speakers: BTreeMap<String, Vec<(f64, f64)>>,
}

impl Timeline {
    /// Segments must be finite, non-negative, non-empty, sorted and
    /// non-overlapping within each speaker.
    pub fn new(speakers: BTreeMap<String, Vec<(f64, f64)>>) -> Result<Self> {
        for (name, segs) in &speakers {
            let mut last_end = f64::NEG_INFINITY;
            for &(a, b) in segs {
                if !(a.is_finite() && b.is_finite() && a >= 0.0 && b > a) {
                    return Err(Error::Precondition(format!(
                        "{name}: bad segment ({a}, {b})"
                    )));
                }
                if a < last_end {
                    return Err(Error::Precondition(format!(
                        "{name}: segments overlap or are unsorted at {a}"
                    )));
                }
                last_end = b;
            }
        }
        Ok(Self { speakers })
    }

    /// Sorts each speaker's segments and merges those that touch or overlap.
    pub fn from_segments<'a>(segs: impl IntoIterator<Item = (&'a str, f64, f64)>) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (name, a, b) in segs {
            if b > a {
                map.entry(name.to_string()).or_default().push((a, b));
            }
        }
        for v in map.values_mut() {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
            let mut merged: Vec<(f64, f64)> = Vec::with_capacity(v.len());
            for &(a, b) in v.iter() {
                match merged.last_mut() {
                    Some(last) if a <= last.1 => last.1 = last.1.max(b),
                    _ => merged.push((a, b)),
                }
            }
            *v = merged;
        }
        Self::new(map)
    }

    pub fn from_rttm(segs: &[RttmSegment]) -> Result<Self> {
        Self::from_segments(
            segs.iter()
                .map(|s| (s.speaker.as_str(), s.onset, s.offset())),
        )
    }

    /// Contiguous runs of `y[s, t] > 0.5` on a frame grid.
    pub fn from_frames(y: &Tensor, speakers: &[String], frame_seconds: f64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (s, name) in speakers.iter().enumerate().take(y.rows()) {
            let row = y.row(s);
            let mut segs = Vec::new();
            let mut t = 0;
            while t < row.len() {
                if row[t] > 0.5 {
                    let start = t;
                    while t < row.len() && row[t] > 0.5 {
                        t += 1;
                    }
                    segs.push((start as f64 * frame_seconds, t as f64 * frame_seconds));
                } else {
                    t += 1;
                }
            }
            if !segs.is_empty() {
                map.insert(name.clone(), segs);
            }
        }
        Self::new(map)
    }

    pub fn speakers(&self) -> impl Iterator<Item = (&String, &Vec<(f64, f64)>)> {
        self.speakers.iter()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn total_speech(&self) -> f64 {
        self.speakers.values().flatten().map(|(a, b)| b - a).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub missed_speech_s: f64,
    pub false_alarm_s: f64,
    pub speaker_confusion_s: f64,
    pub scored_speech_s: f64,
    pub der: f64,
}

impl DerBreakdown {
    fn from_parts(missed: f64, fa: f64, conf: f64, scored: f64) -> Self {
        let errors = missed + fa + conf;
        let der = if scored > 0.0 {
            errors / scored
        } else if errors > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Self {
            missed_speech_s: missed,
            false_alarm_s: fa,
            speaker_confusion_s: conf,
            scored_speech_s: scored,
            der,
        }
    }

    /// Duration-weighted aggregate over recordings.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = &'a DerBreakdown>) -> Self {
        let (mut m, mut f, mut c, mut s) = (0.0, 0.0, 0.0, 0.0);
        for d in items {
            m += d.missed_speech_s;
            f += d.false_alarm_s;
            c += d.speaker_confusion_s;
            s += d.scored_speech_s;
        }
        Self::from_parts(m, f, c, s)
    }

    pub fn der_percent(&self) -> f64 {
        100.0 * self.der
    }
}

fn active(segs: &[(f64, f64)], t: f64) -> bool {
    let i = segs.partition_point(|&(_, b)| b <= t);
    i < segs.len() && segs[i].0 <= t
}

/// One-to-one partial assignment `ref -> hyp` maximising the summed overlap.
/// Entry `i` of the result is the hypothesis index mapped to reference `i`.
pub fn map_speakers(overlap: &[Vec<f64>]) -> Vec<Option<usize>> {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    if r == 0 || h == 0 {
        return vec![None; r];
    }
    if r.min(h) <= EXHAUSTIVE_LIMIT {
        map_exhaustive(overlap)
    } else {
        map_hungarian(overlap)
    }
}

/// Exhaustive search over injections of the smaller side into the larger.
/// Ties keep the first maximum in lexicographic order.
pub fn map_exhaustive(overlap: &[Vec<f64>]) -> Vec<Option<usize>> {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    let transpose = r > h;
    let (k, n) = if transpose { (h, r) } else { (r, h) };
    let w = |i: usize, j: usize| {
        if transpose {
            overlap[j][i]
        } else {
            overlap[i][j]
        }
    };

    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut cur = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(
        i: usize,
        k: usize,
        n: usize,
        acc: f64,
        cur: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (f64, Vec<usize>),
        w: &dyn Fn(usize, usize) -> f64,
    ) {
        if i == k {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(i + 1, k, n, acc + w(i, j), cur, used, best, w);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(0, k, n, 0.0, &mut cur, &mut used, &mut best, &w);

    let mut out = vec![None; r];
    for (i, &j) in best.1.iter().enumerate() {
        if transpose {
            out[j] = Some(i);
        } else {
            out[i] = Some(j);
        }
    }
    out
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// square zero-padded cost matrix `-overlap`.
pub fn map_hungarian(overlap: &[Vec<f64>]) -> Vec<Option<usize>> {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    let n = r.max(h);
    let cost = |i: usize, j: usize| if i < r && j < h { -overlap[i][j] } else { 0.0 };
    // 1-based rows/columns, column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; r];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= r && j <= h {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Interval-exact DER. The reference may be empty; the collar (seconds on
/// each side) applies around reference boundaries only.
pub fn score_der(
    reference: &Timeline,
    hyp: &Timeline,
    collar_s: f64,
    score_overlap: bool,
) -> Result<DerBreakdown> {
    if !(collar_s.is_finite() && collar_s >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "collar must be non-negative, got {collar_s}"
        )));
    }
    let refs: Vec<&Vec<(f64, f64)>> = reference.speakers.values().collect();
    let hyps: Vec<&Vec<(f64, f64)>> = hyp.speakers.values().collect();

    let mut no_score: Vec<(f64, f64)> = Vec::new();
    if collar_s > 0.0 {
        let mut zones: Vec<(f64, f64)> = refs
            .iter()
            .flat_map(|segs| segs.iter())
            .flat_map(|&(a, b)| [(a - collar_s, a + collar_s), (b - collar_s, b + collar_s)])
            .collect();
        zones.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for z in zones {
            match no_score.last_mut() {
                Some(last) if z.0 <= last.1 => last.1 = last.1.max(z.1),
                _ => no_score.push(z),
            }
        }
    }

    let mut points: Vec<f64> = refs
        .iter()
        .chain(hyps.iter())
        .flat_map(|segs| segs.iter().flat_map(|&(a, b)| [a, b]))
        .chain(no_score.iter().flat_map(|&(a, b)| [a, b]))
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();

    // Elementary intervals over which activity is constant.
    struct Piece {
        dur: f64,
        r: Vec<usize>,
        h: Vec<usize>,
    }
    let mut pieces = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        if active(&no_score, mid) {
            continue;
        }
        let r: Vec<usize> = (0..refs.len()).filter(|&i| active(refs[i], mid)).collect();
        if !score_overlap && r.len() >= 2 {
            continue;
        }
        let h: Vec<usize> = (0..hyps.len()).filter(|&j| active(hyps[j], mid)).collect();
        if r.is_empty() && h.is_empty() {
            continue;
        }
        pieces.push(Piece { dur: b - a, r, h });
    }

    let mut overlap = vec![vec![0.0; hyps.len()]; refs.len()];
    for p in &pieces {
        for &i in &p.r {
            for &j in &p.h {
                overlap[i][j] += p.dur;
            }
        }
    }
    let mapping = map_speakers(&overlap);

    let (mut missed, mut fa, mut conf, mut scored) = (0.0, 0.0, 0.0, 0.0);
    for p in &pieces {
        let (nr, nh) = (p.r.len(), p.h.len());
        let correct =
            p.r.iter()
                .filter(|&&i| mapping[i].is_some_and(|j| p.h.contains(&j)))
                .count();
        scored += p.dur * nr as f64;
        missed += p.dur * nr.saturating_sub(nh) as f64;
        fa += p.dur * nh.saturating_sub(nr) as f64;
        conf += p.dur * (nr.min(nh) - correct) as f64;
    }
    Ok(DerBreakdown::from_parts(missed, fa, conf, scored))
}

/// Tab-separated report: one row per recording plus an aggregate row.
pub fn score_report(rows: &[(String, DerBreakdown)]) -> String {
    let mut out =
        String::from("recording\tmissed_s\tfalse_alarm_s\tconfusion_s\tscored_s\tder_percent\n");
    let mut line = |name: &str, d: &DerBreakdown| {
        let _ = writeln!(
            out,
            "{name}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}",
            d.missed_speech_s,
            d.false_alarm_s,
            d.speaker_confusion_s,
            d.scored_speech_s,
            d.der_percent()
        );
    };
    for (name, d) in rows {
        line(name, d);
    }
    line(
        "*TOTAL*",
        &DerBreakdown::aggregate(rows.iter().map(|(_, d)| d)),
    );
    out
}
