//! Training objectives: attractor existence BCE, permutation-invariant
//! diarization BCE, Gaussian KL regularisers and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    activity_probs, activity_probs_values, reparameterize, EendEda, Encoded, EncodingVars,
    StochasticEncoding,
};
use crate::params::Bound;
use crate::tensor::{SeededRng, Tensor};

/// How the diarization-loss permutation is chosen when encodings are sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationStrategy {
    /// One permutation from the mean encodings, shared by every sample.
    #[default]
    MeanBased,
    /// Independent argmin for each sample.
    PerSample,
}

/// Normaliser of the attractor KL term. The sum always covers the invalid
/// attractor too.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldAttractorNorm {
    /// Divide by the number of valid attractors `S`.
    #[default]
    BySpeakers,
    /// Divide by the number of decoded attractors `S + 1`.
    ByCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_e: f64,
    pub beta_a: f64,
    pub n_samples: usize,
    pub permutation: PermutationStrategy,
    pub kld_attractor_norm: KldAttractorNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_e: 0.0,
            beta_a: 0.0,
            n_samples: 1,
            permutation: PermutationStrategy::MeanBased,
            kld_attractor_norm: KldAttractorNorm::BySpeakers,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta_e", self.beta_e),
            ("beta_a", self.beta_a),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// `mapping[s]` is the label row matched with prediction row `s`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Precondition(format!(
                    "{mapping:?} is not a permutation"
                )));
            }
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn mapping(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rows of `y` reordered so row `s` is `y[mapping[s]]`.
    pub fn apply_rows(&self, y: &Tensor) -> Tensor {
        let rows = y.to_rows();
        let permuted: Vec<Vec<f64>> = self.0.iter().map(|&i| rows[i].clone()).collect();
        Tensor::new(y.shape().to_vec(), permuted.concat()).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationChoice {
    pub mapping: Permutation,
    pub strategy: PermutationStrategy,
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
    out
}

/// `[S+1]` validity labels: `S` ones then a zero.
pub fn attractor_labels(n_speakers: usize) -> Vec<f64> {
    let mut l = vec![1.0; n_speakers];
    l.push(0.0);
    l
}

/// Mean BCE of existence probabilities `q` (`S+1` entries) against
/// `[1, …, 1, 0]`.
pub fn attractor_loss(g: &mut Graph, q: Var, n_speakers: usize) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let n: usize = shape.iter().product();
    if n != n_speakers + 1 {
        return Err(Error::ShapeMismatch {
            op: "attractor_loss",
            detail: format!("{n} probabilities for {n_speakers} speakers"),
        });
    }
    let target = Tensor::new(shape, attractor_labels(n_speakers))?;
    let per = g.bce(q, &target)?;
    g.mean(per)
}

pub fn attractor_loss_values(q: &[f64], n_speakers: usize) -> Result<f64> {
    if q.len() != n_speakers + 1 {
        return Err(Error::ShapeMismatch {
            op: "attractor_loss",
            detail: format!("{} probabilities for {n_speakers} speakers", q.len()),
        });
    }
    let labels = attractor_labels(n_speakers);
    let total: f64 = q.iter().zip(&labels).map(|(&p, &l)| bce(l, p)).sum();
    Ok(total / q.len() as f64)
}

fn check_pit_inputs(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() || p.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "diarization_loss_pit",
            detail: format!("p {:?} vs y {:?}", p.shape(), y.shape()),
        });
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Precondition("labels must be binary".into()));
    }
    if y.rows() == 0 || y.cols() == 0 {
        return Err(Error::EmptyInput("diarization_loss_pit"));
    }
    Ok(())
}

/// Mean BCE under `phi`, summed in row-major order.
fn pit_value(p: &Tensor, y: &Tensor, phi: &[usize]) -> f64 {
    let t = p.cols();
    let mut total = 0.0;
    for (s, &r) in phi.iter().enumerate() {
        for k in 0..t {
            total += bce(y.get2(r, k), p.get2(s, k));
        }
    }
    total / p.len() as f64
}

/// Exhaustive search for the label permutation with the lowest mean BCE.
/// Ties go to the lexicographically first permutation.
pub fn best_permutation(p: &Tensor, y: &Tensor) -> Result<(f64, Permutation)> {
    check_pit_inputs(p, y)?;
    let (s, t) = (p.rows(), p.cols());
    // bce table indexed [pred row][label row][frame]
    let mut table = vec![0.0; s * s * t];
    for i in 0..s {
        for r in 0..s {
            for k in 0..t {
                table[(i * s + r) * t + k] = bce(y.get2(r, k), p.get2(i, k));
            }
        }
    }
    let n = p.len() as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in all_permutations(s) {
        let mut total = 0.0;
        for (i, &r) in perm.iter().enumerate() {
            for k in 0..t {
                total += table[(i * s + r) * t + k];
            }
        }
        let v = total / n;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, perm));
        }
    }
    let (v, perm) = best.expect("at least one permutation");
    Ok((v, Permutation(perm)))
}

/// Value-level PIT loss. With `phi` the loss is evaluated at that mapping.
pub fn diarization_loss_pit_values(
    p: &Tensor,
    y: &Tensor,
    phi: Option<&Permutation>,
) -> Result<(f64, Permutation)> {
    check_pit_inputs(p, y)?;
    match phi {
        Some(perm) => {
            if perm.len() != p.rows() {
                return Err(Error::ShapeMismatch {
                    op: "diarization_loss_pit",
                    detail: format!("permutation of {} for {} speakers", perm.len(), p.rows()),
                });
            }
            Ok((pit_value(p, y, perm.mapping()), perm.clone()))
        }
        None => best_permutation(p, y),
    }
}

/// Permutation-invariant diarization loss on the graph. Returns the loss node
/// and the permutation it was evaluated at.
pub fn diarization_loss_pit(
    g: &mut Graph,
    p: Var,
    y: &Tensor,
    phi: Option<&Permutation>,
) -> Result<(Var, Permutation)> {
    let (_, perm) = diarization_loss_pit_values(g.value(p), y, phi)?;
    let target = perm.apply_rows(y);
    let per = g.bce(p, &target)?;
    Ok((g.mean(per)?, perm))
}

/// `sum_rows KL(N(mu, sigma²) || N(0, I)) / normalizer` on the graph.
pub fn kld_loss(g: &mut Graph, enc: &EncodingVars, normalizer: f64) -> Result<Var> {
    let (Some(log_sigma), Some(sigma)) = (enc.log_sigma, enc.sigma) else {
        return Err(Error::Precondition(
            "KL term needs a stochastic encoding".into(),
        ));
    };
    if !(normalizer > 0.0) {
        return Err(Error::Precondition(format!(
            "KL normaliser must be positive, got {normalizer}"
        )));
    }
    let mu2 = g.mul(enc.mu, enc.mu)?;
    let s2 = g.mul(sigma, sigma)?;
    let ln_s2 = g.scale(log_sigma, 2.0)?;
    let t = g.add(mu2, s2)?;
    let t = g.sub(t, ln_s2)?;
    let t = g.add_scalar(t, -1.0)?;
    let total = g.sum(t)?;
    g.scale(total, 0.5 / normalizer)
}

/// Closed-form KL of a value-level encoding to the standard normal.
pub fn kld_loss_values(enc: &StochasticEncoding, normalizer: f64) -> Result<f64> {
    if enc.sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Precondition(
            "sigma must be strictly positive".into(),
        ));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Precondition(format!(
            "KL normaliser must be positive, got {normalizer}"
        )));
    }
    let total: f64 = enc
        .mu
        .data()
        .iter()
        .zip(enc.sigma.data())
        .map(|(&m, &s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum();
    Ok(0.5 * total / normalizer)
}

/// Normaliser of the attractor KL term for `n_speakers` valid attractors.
pub fn attractor_kld_normalizer(norm: KldAttractorNorm, n_speakers: usize) -> f64 {
    match norm {
        KldAttractorNorm::BySpeakers => n_speakers as f64,
        KldAttractorNorm::ByCount => (n_speakers + 1) as f64,
    }
}

/// Graph nodes of the four loss components; KL terms absent for
/// deterministic branches.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_d: Var,
    pub l_a: Var,
    pub l_ekld: Option<Var>,
    pub l_akld: Option<Var>,
}

/// `L = L_d + beta_e L_eKLD + alpha L_a + beta_a L_aKLD`. Zero-weight KL terms
/// are left out of the graph entirely.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut total = terms.l_d;
    if let Some(e) = terms.l_ekld.filter(|_| w.beta_e != 0.0) {
        let we = g.scale(e, w.beta_e)?;
        total = g.add(total, we)?;
    }
    let wa = g.scale(terms.l_a, w.alpha)?;
    total = g.add(total, wa)?;
    if let Some(a) = terms.l_akld.filter(|_| w.beta_a != 0.0) {
        let wk = g.scale(a, w.beta_a)?;
        total = g.add(total, wk)?;
    }
    Ok(total)
}

pub fn total_loss_values(l_d: f64, l_a: f64, l_ekld: f64, l_akld: f64, w: &LossWeights) -> f64 {
    l_d + w.beta_e * l_ekld + w.alpha * l_a + w.beta_a * l_akld
}

/// Permutation(s) for the diarization loss. Returns one choice per sampled
/// matrix (at least one).
pub fn select_permutation(
    strategy: PermutationStrategy,
    mean_p: Option<&Tensor>,
    sampled_ps: &[Tensor],
    y: &Tensor,
) -> Result<Vec<PermutationChoice>> {
    match strategy {
        PermutationStrategy::MeanBased => {
            let mean_p = mean_p.ok_or(Error::EmptyInput("select_permutation"))?;
            let (_, perm) = best_permutation(mean_p, y)?;
            let n = sampled_ps.len().max(1);
            Ok(vec![
                PermutationChoice {
                    mapping: perm,
                    strategy
                };
                n
            ])
        }
        PermutationStrategy::PerSample => {
            if sampled_ps.is_empty() {
                return Err(Error::EmptyInput("select_permutation"));
            }
            sampled_ps
                .iter()
                .map(|p| {
                    Ok(PermutationChoice {
                        mapping: best_permutation(p, y)?.1,
                        strategy,
                    })
                })
                .collect()
        }
    }
}

/// Values of each component after a forward pass, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub l_ekld: f64,
    pub l_akld: f64,
}

/// Full VIB objective for one recording: `M` reparameterised samples of every
/// frame and attractor encoding, `L_d` and `L_a` averaged over samples, KL
/// terms in closed form once. `encoded` must hold `S + 1` attractors.
#[allow(clippy::too_many_arguments)]
pub fn multi_sample_losses(
    g: &mut Graph,
    model: &EendEda,
    b: &Bound,
    encoded: &Encoded,
    y: &Tensor,
    n_speakers: usize,
    w: &LossWeights,
    rng: &mut SeededRng,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let n_attr = g.shape(encoded.attractor_enc.mu)[0];
    if n_attr != n_speakers + 1 || y.rows() != n_speakers {
        return Err(Error::ShapeMismatch {
            op: "multi_sample_losses",
            detail: format!(
                "{n_attr} attractors, {} label rows, S = {n_speakers}",
                y.rows()
            ),
        });
    }
    let n_frames = g.shape(encoded.frames.mu)[0] as f64;

    let mean_p = match w.permutation {
        PermutationStrategy::MeanBased => {
            let mu_s = g.value(encoded.attractor_enc.mu).to_rows()[..n_speakers].concat();
            let mu_s = Tensor::new(vec![n_speakers, g.shape(encoded.attractor_enc.mu)[1]], mu_s)?;
            Some(activity_probs_values(g.value(encoded.frames.mu), &mu_s)?)
        }
        PermutationStrategy::PerSample => None,
    };
    let shared = match &mean_p {
        Some(mp) => Some(
            select_permutation(PermutationStrategy::MeanBased, Some(mp), &[], y)?
                .remove(0)
                .mapping,
        ),
        None => None,
    };

    let m = w.n_samples;
    let mut d_terms = Vec::with_capacity(m);
    let mut a_terms = Vec::with_capacity(m);
    for _ in 0..m {
        let z_t = reparameterize(g, &encoded.frames, rng)?;
        let z_s = reparameterize(g, &encoded.attractor_enc, rng)?;
        let q = model.attractor_existence(g, b, z_s)?;
        a_terms.push(attractor_loss(g, q, n_speakers)?);
        let valid = g.slice_rows(z_s, 0, n_speakers)?;
        let p = activity_probs(g, z_t, valid)?;
        let (l_d, _) = diarization_loss_pit(g, p, y, shared.as_ref())?;
        d_terms.push(l_d);
    }
    let average = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        if terms.len() == 1 {
            return Ok(terms[0]);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.scale(acc, 1.0 / terms.len() as f64)
    };
    let l_d = average(g, &d_terms)?;
    let l_a = average(g, &a_terms)?;

    let l_ekld = match encoded.frames.sigma {
        Some(_) => Some(kld_loss(g, &encoded.frames, n_frames)?),
        None => None,
    };
    let l_akld = match encoded.attractor_enc.sigma {
        Some(_) => {
            let norm = attractor_kld_normalizer(w.kld_attractor_norm, n_speakers);
            Some(kld_loss(g, &encoded.attractor_enc, norm)?)
        }
        None => None,
    };
    let terms = LossTerms {
        l_d,
        l_a,
        l_ekld,
        l_akld,
    };
    let total = total_loss(g, &terms, w)?;
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let breakdown = LossBreakdown {
        total: g.value(total).data()[0],
        l_d: g.value(l_d).data()[0],
        l_a: g.value(l_a).data()[0],
        l_ekld: val(g, l_ekld),
        l_akld: val(g, l_akld),
    };
    Ok((total, breakdown))
}
