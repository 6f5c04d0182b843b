//! EEND-EDA network with stochastic (VIB) heads on frame embeddings and
//! attractors.
//!
//! Data flow for one recording with `T` frames:
//!
//! ```text
//! x [T×D_in] ─ self-attention encoder ─> e [T×D] ─ LSTM enc/dec ─> a [n×D]
//!      e ─ FC_mu / exp(FC_sigma) ─> frame encodings  (mu_t, sigma_t)
//!      a ─ FC_mu / exp(FC_sigma) ─> attractor encodings (mu_s, sigma_s)
//!      z_s ─ FC + sigmoid ─> q [n]          z_s · z_tᵀ ─ sigmoid ─> p [S×T]
//! ```
//!
//! `z` is either the mean or a reparameterised sample `mu + eps ⊙ sigma`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{sample_standard_normal, SeededRng, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub model_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_attractors: usize,
    pub vib_frame_enabled: bool,
    pub vib_attractor_enabled: bool,
    /// Shuffle frame order before the attractor encoder LSTM.
    pub shuffle_frames: bool,
    /// Initial bias of the log-sigma heads.
    pub log_sigma_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            model_dim: 64,
            n_blocks: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_attractors: 4,
            vib_frame_enabled: true,
            vib_attractor_enabled: true,
            shuffle_frames: false,
            log_sigma_init: -2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_dim,
            self.model_dim,
            self.n_heads,
            self.ffn_dim,
            self.max_attractors,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !self.log_sigma_init.is_finite() {
            return Err(Error::InvalidConfig("log_sigma_init must be finite".into()));
        }
        Ok(())
    }

    /// Identifies the parameter layout. Only shape-relevant fields take part,
    /// so the same weights can be run with VIB branches toggled.
    pub fn fingerprint(&self) -> String {
        let key = format!(
            "feat={};dim={};blocks={};heads={};ffn={}",
            self.feat_dim, self.model_dim, self.n_blocks, self.n_heads, self.ffn_dim
        );
        let digest = Sha256::digest(key.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Which side of the network a VIB head belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Frame,
    Attractor,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Frame => "vib.frame",
            Branch::Attractor => "vib.attr",
        }
    }
}

/// Graph handles for a diagonal-Gaussian encoding. `sigma`/`log_sigma` are
/// absent when the branch is deterministic.
#[derive(Clone, Copy, Debug)]
pub struct EncodingVars {
    pub mu: Var,
    pub log_sigma: Option<Var>,
    pub sigma: Option<Var>,
}

/// Value-level diagonal Gaussian `N(mu, diag(sigma²))`, one row per vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticEncoding {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl StochasticEncoding {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "stochastic_encoding",
                detail: format!("{:?} vs {:?}", mu.shape(), sigma.shape()),
            });
        }
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Precondition(
                "sigma must be strictly positive".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    /// Point mass at `mu`, represented with a vanishing sigma.
    pub fn deterministic(mu: Tensor) -> Self {
        let sigma = Tensor::filled(mu.shape().to_vec(), f64::MIN_POSITIVE);
        Self { mu, sigma }
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }
}

/// Per-frame per-speaker activity probabilities and attractor existence
/// probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationOutput {
    /// `[S × T]`
    pub p: Tensor,
    /// `[n_attractors]`
    pub q: Tensor,
}

/// Output of the deterministic trunk plus both VIB heads.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub embeddings: Var,
    pub attractors: Var,
    pub frames: EncodingVars,
    pub attractor_enc: EncodingVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EendEda {
    cfg: ModelConfig,
    params: ParamSet,
}

impl EendEda {
    pub fn new(cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut p = ParamSet::new();
        p.init_linear(rng, "enc.in", cfg.feat_dim, d);
        for i in 0..cfg.n_blocks {
            let blk = format!("enc.blk{i}");
            p.init_layer_norm(&format!("{blk}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                p.init_linear(rng, &format!("{blk}.att.{proj}"), d, d);
            }
            p.init_layer_norm(&format!("{blk}.ln2"), d);
            p.init_linear(rng, &format!("{blk}.ff1"), d, cfg.ffn_dim);
            p.init_linear(rng, &format!("{blk}.ff2"), cfg.ffn_dim, d);
        }
        p.init_layer_norm("enc.ln_out", d);
        // LSTMs: gates stacked as [i | f | g | o], uniform ±1/sqrt(hidden).
        for name in ["eda.enc", "eda.dec"] {
            let bound = 1.0 / (d as f64).sqrt();
            let mut uni =
                |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform(-bound, bound)).collect() };
            if name == "eda.enc" {
                p.insert(
                    format!("{name}.w_ih"),
                    Tensor::new(vec![d, 4 * d], uni(4 * d * d))?,
                );
            }
            p.insert(
                format!("{name}.w_hh"),
                Tensor::new(vec![d, 4 * d], uni(4 * d * d))?,
            );
            p.insert(format!("{name}.b"), Tensor::vector(uni(4 * d)));
        }
        p.init_linear(rng, "exist", d, 1);
        for br in [Branch::Frame, Branch::Attractor] {
            p.init_linear(rng, &format!("{}.mu", br.prefix()), d, d);
            p.init_linear(rng, &format!("{}.sigma", br.prefix()), d, d);
            if let Some(b) = p.get_mut(&format!("{}.sigma.b", br.prefix())) {
                b.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += cfg.log_sigma_init);
            }
        }
        Ok(Self { cfg, params: p })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let reference = Self::new(cfg.clone(), &mut SeededRng::new(0))?;
        reference.params.check_compatible(&params)?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Toggles VIB branches without touching the weights.
    pub fn set_vib(&mut self, frame: bool, attractor: bool) {
        self.cfg.vib_frame_enabled = frame;
        self.cfg.vib_attractor_enabled = attractor;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }

    fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = b.var(&format!("{name}.w"));
        let bias = b.var(&format!("{name}.b"));
        let xw = g.matmul(x, w)?;
        g.add_row(xw, bias)
    }

    fn layer_norm(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS)?;
        let scaled = g.mul_row(n, b.var(&format!("{name}.g")))?;
        g.add_row(scaled, b.var(&format!("{name}.b")))
    }

    fn self_attention(&self, g: &mut Graph, b: &Bound, blk: &str, x: Var) -> Result<Var> {
        let q = Self::linear(g, b, &format!("{blk}.att.q"), x)?;
        let k = Self::linear(g, b, &format!("{blk}.att.k"), x)?;
        let v = Self::linear(g, b, &format!("{blk}.att.v"), x)?;
        let dk = self.cfg.model_dim / self.cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let att = g.softmax_rows(scores)?;
            heads.push(g.matmul(att, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Self::linear(g, b, &format!("{blk}.att.o"), ctx)
    }

    /// Self-attention encoder: `x [T×D_in] -> e [T×D]`. No positional
    /// encoding, so the map is equivariant to frame permutations.
    pub fn encode_frames(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feat_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_frames",
                detail: format!("expected [T x {}], got {shape:?}", self.cfg.feat_dim),
            });
        }
        if shape[0] == 0 {
            return Err(Error::EmptyInput("encode_frames"));
        }
        let mut e = Self::linear(g, b, "enc.in", x)?;
        for i in 0..self.cfg.n_blocks {
            let blk = format!("enc.blk{i}");
            e = Self::layer_norm(g, b, &format!("{blk}.ln1"), e)?;
            let s = self.self_attention(g, b, &blk, e)?;
            e = g.add(e, s)?;
            e = Self::layer_norm(g, b, &format!("{blk}.ln2"), e)?;
            let h = Self::linear(g, b, &format!("{blk}.ff1"), e)?;
            let h = g.relu(h)?;
            let s = Self::linear(g, b, &format!("{blk}.ff2"), h)?;
            e = g.add(e, s)?;
        }
        Self::layer_norm(g, b, "enc.ln_out", e)
    }

    fn lstm_cell(&self, g: &mut Graph, pre: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.cfg.model_dim;
        let i = g.slice_cols(pre, 0, d)?;
        let f = g.slice_cols(pre, d, 2 * d)?;
        let gg = g.slice_cols(pre, 2 * d, 3 * d)?;
        let o = g.slice_cols(pre, 3 * d, 4 * d)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let gg = g.tanh(gg)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c = g.add(fc, ig)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// LSTM encoder over the embeddings, then an LSTM decoder started from the
    /// encoder's final state and fed zero vectors; one attractor per step.
    ///
    /// The decoder's input projection is omitted since its input is always 0.
    pub fn decode_attractors(
        &self,
        g: &mut Graph,
        b: &Bound,
        e: Var,
        n_out: usize,
        shuffle: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let t = g.shape(e)[0];
        if t == 0 {
            return Err(Error::EmptyInput("decode_attractors"));
        }
        if n_out == 0 {
            return Err(Error::Precondition("n_out must be >= 1".into()));
        }
        let d = self.cfg.model_dim;
        let seq = match shuffle {
            Some(rng) if self.cfg.shuffle_frames => {
                let mut order: Vec<usize> = (0..t).collect();
                rng.shuffle(&mut order);
                g.gather_rows(e, &order)?
            }
            _ => e,
        };
        let xw = g.matmul(seq, b.var("eda.enc.w_ih"))?;
        let xw = g.add_row(xw, b.var("eda.enc.b"))?;
        let mut h = g.constant(Tensor::zeros(vec![1, d]));
        let mut c = g.constant(Tensor::zeros(vec![1, d]));
        let w_hh = b.var("eda.enc.w_hh");
        for step in 0..t {
            let xt = g.slice_rows(xw, step, step + 1)?;
            let hw = g.matmul(h, w_hh)?;
            let pre = g.add(xt, hw)?;
            (h, c) = self.lstm_cell(g, pre, c)?;
        }
        let w_hh = b.var("eda.dec.w_hh");
        let bias = b.var("eda.dec.b");
        let mut outs = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            let hw = g.matmul(h, w_hh)?;
            let pre = g.add_row(hw, bias)?;
            (h, c) = self.lstm_cell(g, pre, c)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }

    /// `q_s = sigmoid(FC(z_s))`, returned as `[n × 1]`.
    pub fn attractor_existence(&self, g: &mut Graph, b: &Bound, z_attr: Var) -> Result<Var> {
        let logits = Self::linear(g, b, "exist", z_attr)?;
        g.sigmoid(logits)
    }

    /// Value-level existence probabilities for `[n × D]` attractors.
    pub fn existence_values(&self, z_attr: &Tensor) -> Result<Vec<f64>> {
        let w = &self.params.get("exist.w").expect("exist.w");
        let b = self.params.get("exist.b").expect("exist.b").data()[0];
        let logits = z_attr.matmul(w)?;
        Ok(logits.data().iter().map(|&l| sigmoid(l + b)).collect())
    }

    fn branch_enabled(&self, br: Branch) -> bool {
        match br {
            Branch::Frame => self.cfg.vib_frame_enabled,
            Branch::Attractor => self.cfg.vib_attractor_enabled,
        }
    }

    /// `mu = FC_mu(h)`; `sigma = exp(FC_sigma(h))` when the branch is
    /// stochastic.
    pub fn vib_heads(&self, g: &mut Graph, b: &Bound, h: Var, br: Branch) -> Result<EncodingVars> {
        let mu = Self::linear(g, b, &format!("{}.mu", br.prefix()), h)?;
        if !self.branch_enabled(br) {
            return Ok(EncodingVars {
                mu,
                log_sigma: None,
                sigma: None,
            });
        }
        let log_sigma = Self::linear(g, b, &format!("{}.sigma", br.prefix()), h)?;
        let sigma = g.exp(log_sigma)?;
        Ok(EncodingVars {
            mu,
            log_sigma: Some(log_sigma),
            sigma: Some(sigma),
        })
    }

    /// Trunk plus VIB heads for `n_out` decoded attractors.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        n_out: usize,
        shuffle: Option<&mut SeededRng>,
    ) -> Result<Encoded> {
        let e = self.encode_frames(g, b, x)?;
        let a = self.decode_attractors(g, b, e, n_out, shuffle)?;
        let frames = self.vib_heads(g, b, e, Branch::Frame)?;
        let attractor_enc = self.vib_heads(g, b, a, Branch::Attractor)?;
        Ok(Encoded {
            embeddings: e,
            attractors: a,
            frames,
            attractor_enc,
        })
    }

    /// Deterministic EEND-EDA(+4FC) forward: the mean heads are applied and
    /// nothing is sampled. Returns `(p [S×T], q [n×1])` for the first
    /// `n_valid` attractors.
    pub fn forward_deterministic(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        n_out: usize,
        n_valid: usize,
    ) -> Result<(Var, Var)> {
        let e = self.encode_frames(g, b, x)?;
        let a = self.decode_attractors(g, b, e, n_out, None)?;
        let mu_t = Self::linear(g, b, "vib.frame.mu", e)?;
        let mu_s = Self::linear(g, b, "vib.attr.mu", a)?;
        let q = self.attractor_existence(g, b, mu_s)?;
        let valid = g.slice_rows(mu_s, 0, n_valid)?;
        let p = activity_probs(g, mu_t, valid)?;
        Ok((p, q))
    }

    pub fn infer_encodings(
        &self,
        x: &Tensor,
        n_out: usize,
    ) -> Result<(StochasticEncoding, StochasticEncoding)> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let enc = self.encode(&mut g, &b, xv, n_out, None)?;
        let to_value = |g: &Graph, ev: &EncodingVars| {
            let mu = g.value(ev.mu).clone();
            match ev.sigma {
                Some(s) => StochasticEncoding {
                    mu,
                    sigma: g.value(s).clone(),
                },
                None => StochasticEncoding::deterministic(mu),
            }
        };
        Ok((to_value(&g, &enc.frames), to_value(&g, &enc.attractor_enc)))
    }

    /// Parameters as constants, for gradient-free evaluation.
    pub fn bind_constants(&self, g: &mut Graph) -> Bound {
        self.params.bind_with(g, false)
    }

    /// Existence probabilities and activity probabilities for every decoded
    /// attractor, from encodings evaluated at their means or sampled.
    pub fn outputs_from_latents(
        &self,
        g: &mut Graph,
        b: &Bound,
        z_frames: Var,
        z_attr: Var,
    ) -> Result<(Var, Var)> {
        let q = self.attractor_existence(g, b, z_attr)?;
        let p = activity_probs(g, z_frames, z_attr)?;
        Ok((p, q))
    }
}

/// `z = mu + eps ⊙ sigma` with fresh `eps ~ N(0, I)`.
pub fn reparameterize(g: &mut Graph, enc: &EncodingVars, rng: &mut SeededRng) -> Result<Var> {
    match enc.sigma {
        Some(sigma) => {
            let shape = g.shape(enc.mu).to_vec();
            let eps = g.constant(sample_standard_normal(rng, &shape));
            let noise = g.mul(eps, sigma)?;
            g.add(enc.mu, noise)
        }
        None => Ok(enc.mu),
    }
}

/// Reparameterised value-level sample of a stochastic encoding.
pub fn sample_encoding(enc: &StochasticEncoding, rng: &mut SeededRng) -> Tensor {
    let eps = sample_standard_normal(rng, enc.mu.shape());
    let data = enc
        .mu
        .data()
        .iter()
        .zip(enc.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + e * s)
        .collect();
    Tensor::new(enc.mu.shape().to_vec(), data).unwrap()
}

/// `p_{s,t} = sigmoid(z_t · z_sᵀ)` as an `[S × T]` matrix.
pub fn activity_probs(g: &mut Graph, z_frames: Var, z_attr: Var) -> Result<Var> {
    let logits = g.matmul_nt(z_attr, z_frames)?;
    g.sigmoid(logits)
}

/// Value-level `sigmoid(z_attr · z_framesᵀ)`.
pub fn activity_probs_values(z_frames: &Tensor, z_attr: &Tensor) -> Result<Tensor> {
    if z_frames.cols() != z_attr.cols() {
        return Err(Error::ShapeMismatch {
            op: "activity_probs",
            detail: format!("{:?} vs {:?}", z_frames.shape(), z_attr.shape()),
        });
    }
    let logits = z_attr.matmul(&z_frames.transpose())?;
    Ok(logits.map(sigmoid))
}

/// Number of attractors decoded before the first existence probability below
/// `tau`, capped at `max`.
pub fn count_speakers(q: &[f64], tau: f64, max: usize) -> usize {
    q.iter().take(max).take_while(|&&v| v >= tau).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            model_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_attractors: 3,
            ..ModelConfig::default()
        }
    }

    fn run_embed(m: &EendEda, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let e = m.encode_frames(&mut g, &b, xv).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.max_attractors = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_frame_and_shape_contract() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(1)).unwrap();
        let x1 = sample_standard_normal(&mut SeededRng::new(2), &[1, 8]);
        assert_eq!(run_embed(&m, &x1).shape(), &[1, 8]);
        let x = sample_standard_normal(&mut SeededRng::new(3), &[12, 8]);
        let e = run_embed(&m, &x);
        assert_eq!(e.shape(), &[12, 8]);
        assert!(e.is_finite());
    }

    #[test]
    fn wrong_feature_dim_rejected() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(1)).unwrap();
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let x = g.constant(Tensor::zeros(vec![4, 5]));
        assert!(matches!(
            m.encode_frames(&mut g, &b, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(4)).unwrap();
        let x = sample_standard_normal(&mut SeededRng::new(5), &[6, 8]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let rows = x.to_rows();
        let xp =
            Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
        let e = run_embed(&m, &x);
        let ep = run_embed(&m, &xp);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in ep.row(k).iter().zip(e.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attractor_decoding_shapes_and_errors() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(6)).unwrap();
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let e = g.constant(sample_standard_normal(&mut SeededRng::new(7), &[10, 8]));
        let a = m.decode_attractors(&mut g, &b, e, 3, None).unwrap();
        assert_eq!(g.shape(a), &[3, 8]);
        let a2 = m.decode_attractors(&mut g, &b, e, 3, None).unwrap();
        assert_eq!(g.value(a), g.value(a2));
        let empty = g.constant(Tensor::zeros(vec![0, 8]));
        assert!(matches!(
            m.decode_attractors(&mut g, &b, empty, 3, None),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn existence_head_with_fixed_weights() {
        let mut m = EendEda::new(tiny_cfg(), &mut SeededRng::new(8)).unwrap();
        m.params_mut()
            .get_mut("exist.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        m.params_mut()
            .get_mut("exist.b")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let a = g.constant(sample_standard_normal(&mut SeededRng::new(9), &[4, 8]));
        let q = m.attractor_existence(&mut g, &b, a).unwrap();
        assert_eq!(g.shape(q), &[4, 1]);
        assert!(g.value(q).data().iter().all(|&v| v == 0.5));

        m.params_mut()
            .get_mut("exist.b")
            .unwrap()
            .data_mut()
            .fill(10.0);
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let a = g.constant(Tensor::zeros(vec![2, 8]));
        let q = m.attractor_existence(&mut g, &b, a).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!(g
            .value(q)
            .data()
            .iter()
            .all(|&v| (v - expect).abs() < 1e-15));
        assert!((expect - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn sigma_head_is_exponential() {
        let mut m = EendEda::new(tiny_cfg(), &mut SeededRng::new(10)).unwrap();
        m.params_mut()
            .get_mut("vib.frame.sigma.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        m.params_mut()
            .get_mut("vib.frame.sigma.b")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let h = g.constant(sample_standard_normal(&mut SeededRng::new(11), &[3, 8]));
        let enc = m.vib_heads(&mut g, &b, h, Branch::Frame).unwrap();
        assert!(g.value(enc.sigma.unwrap()).data().iter().all(|&s| s == 1.0));

        m.params_mut()
            .get_mut("vib.frame.sigma.b")
            .unwrap()
            .data_mut()
            .fill(-20.0);
        let mut g = Graph::new();
        let b = m.bind_constants(&mut g);
        let h = g.constant(Tensor::zeros(vec![2, 8]));
        let enc = m.vib_heads(&mut g, &b, h, Branch::Frame).unwrap();
        for &s in g.value(enc.sigma.unwrap()).data() {
            assert!(s > 0.0 && (s - 2.061_153_622_438_558e-9).abs() < 1e-20);
        }
    }

    #[test]
    fn mu_head_is_affine() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(12)).unwrap();
        let h = sample_standard_normal(&mut SeededRng::new(13), &[3, 8]);
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let b = m.bind_constants(&mut g);
            let hv = g.constant(input.clone());
            let enc = m.vib_heads(&mut g, &b, hv, Branch::Attractor).unwrap();
            g.value(enc.mu).clone()
        };
        let zero = run(&Tensor::zeros(vec![3, 8]));
        let one = run(&h);
        let two = run(&h.map(|v| 2.0 * v));
        // f(2h) - f(h) = f(h) - f(0)
        for i in 0..one.len() {
            let lhs = two.data()[i] - one.data()[i];
            let rhs = one.data()[i] - zero.data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterization_cases() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::vector(vec![1.0, 2.0]).reshape(vec![1, 2]).unwrap());
        let sig = g.param(Tensor::filled(vec![1, 2], 1.0));
        let eps = g.constant(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let noise = g.mul(eps, sig).unwrap();
        let z = g.add(mu, noise).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, 1.5]);
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(sig).unwrap().data(), &[0.5, -0.5]);

        let mut g = Graph::new();
        let mu = g.param(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let ls = g.param(Tensor::filled(vec![1, 3], (1e-12f64).ln()));
        let sigma = g.exp(ls).unwrap();
        let enc = EncodingVars {
            mu,
            log_sigma: Some(ls),
            sigma: Some(sigma),
        };
        let z = reparameterize(&mut g, &enc, &mut SeededRng::new(1)).unwrap();
        assert!(g.value(z).max_abs_diff(g.value(mu)) < 1e-10);
    }

    #[test]
    fn standard_normal_reparameterized_moments() {
        let enc = StochasticEncoding::new(
            Tensor::zeros(vec![100_000, 1]),
            Tensor::filled(vec![100_000, 1], 1.0),
        )
        .unwrap();
        let z = sample_encoding(&enc, &mut SeededRng::new(21));
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02);
        assert!((0.97..=1.03).contains(&var));
    }

    #[test]
    fn activity_probability_cases() {
        let zf = Tensor::zeros(vec![4, 3]);
        let za = sample_standard_normal(&mut SeededRng::new(1), &[2, 3]);
        let p = activity_probs_values(&zf, &za).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));

        let e = Tensor::new(vec![1, 2], vec![2.0f64.sqrt(), 2.0f64.sqrt()]).unwrap();
        let p = activity_probs_values(&e, &e).unwrap();
        let dot = 2.0f64.sqrt() * 2.0f64.sqrt() * 2.0;
        assert!((p.data()[0] - sigmoid(dot)).abs() < 1e-15);
        assert!((p.data()[0] - 0.982).abs() < 1e-3);

        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
        assert_eq!(activity_probs_values(&b, &a).unwrap().data(), &[0.5]);
        assert!(
            activity_probs_values(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 2])).is_err()
        );
    }

    #[test]
    fn speaker_counting_rule() {
        assert_eq!(count_speakers(&[0.9, 0.8, 0.3], 0.5, 4), 2);
        assert_eq!(count_speakers(&[0.4, 0.9, 0.9], 0.5, 4), 0);
        assert_eq!(count_speakers(&[0.9, 0.9, 0.9, 0.9, 0.9], 0.5, 4), 4);
    }

    #[test]
    fn parameter_shapes_reload() {
        let m = EendEda::new(tiny_cfg(), &mut SeededRng::new(1)).unwrap();
        let again = EendEda::from_parts(tiny_cfg(), m.params().clone()).unwrap();
        assert_eq!(again, m);
        let mut other = tiny_cfg();
        other.model_dim = 4;
        assert!(EendEda::from_parts(other, m.params().clone()).is_err());
    }
}
