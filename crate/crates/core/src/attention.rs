//! Attention building blocks: scaled dot-product attention, the multi-head
//! wrapper, the stem (a fixed set of m learnable queries attending over n
//! input tokens), and the trunk transformer block.
//!
//! The stem compresses n tokens to m in O(m*n) attention cost; the trunk
//! runs standard O(T^2) self-attention over the short fused sequence.

use crate::error::{Error, Result};
use crate::rng::{hash64, DeterministicRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!(
                "attention config must be positive: d_model={}, n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StemConfig {
    /// Number of learnable queries; independent of the input token count.
    pub m: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_width: usize,
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.ff_width == 0 {
            return Err(Error::Config(format!(
                "stem config must be positive: m={}, ff_width={}",
                self.m, self.ff_width
            )));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrunkConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_width: usize,
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.ff_width == 0 {
            return Err(Error::Config(format!(
                "trunk config must be positive: n_layers={}, ff_width={}",
                self.n_layers, self.ff_width
            )));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }
}

/// attn(K,V,Q) = softmax(Q K^T / sqrt(d_k)) V.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::BadShape {
            op: "scaled_dot_attention",
            shape: qs,
            why: "q, k, v must be 2-d".into(),
        });
    }
    if qs[1] != ks[1] {
        return Err(Error::DimMismatch {
            op: "scaled_dot_attention q/k",
            left: qs,
            right: ks,
        });
    }
    if ks[0] != vs[0] {
        return Err(Error::DimMismatch {
            op: "scaled_dot_attention k/v",
            left: ks,
            right: vs,
        });
    }
    let d_k = qs[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Attention weight matrix alone (right-stochastic rows), for inspection.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d_k = tape.shape(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    tape.softmax_rows(scaled)
}

// ── parameter containers ────────────────────────────────────────────

fn xavier(rows: usize, cols: usize, rng: &mut DeterministicRng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(vec![rows, cols], std, rng)
}

fn stream_rng(seed: u64, name: &str) -> DeterministicRng {
    DeterministicRng::new(seed, hash64(name.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub config: AttentionConfig,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhaParams {
    pub fn init(config: AttentionConfig, seed: u64, name: &str) -> Self {
        let d = config.d_model;
        let w = |suffix: &str| xavier(d, d, &mut stream_rng(seed, &format!("{name}.{suffix}")));
        Self {
            config,
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            bq: Tensor::zeros(vec![1, d]),
            bk: Tensor::zeros(vec![1, d]),
            bv: Tensor::zeros(vec![1, d]),
            bo: Tensor::zeros(vec![1, d]),
        }
    }

    /// Identity projections, single head. Reduces multi-head attention to
    /// plain scaled dot-product attention; used by tests.
    pub fn identity(d_model: usize) -> Self {
        let mut eye = Tensor::zeros(vec![d_model, d_model]);
        for i in 0..d_model {
            eye.set(&[i, i], 1.0);
        }
        Self {
            config: AttentionConfig {
                d_model,
                n_heads: 1,
            },
            wq: eye.clone(),
            bq: Tensor::zeros(vec![1, d_model]),
            wk: eye.clone(),
            bk: Tensor::zeros(vec![1, d_model]),
            wv: eye.clone(),
            bv: Tensor::zeros(vec![1, d_model]),
            wo: eye,
            bo: Tensor::zeros(vec![1, d_model]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.bq"), &self.bq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.bk"), &self.bk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.bv"), &self.bv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.bq"), &mut self.bq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.bk"), &mut self.bk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.bv"), &mut self.bv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.bo"), &mut self.bo);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MhaVars {
        MhaVars {
            config: self.config,
            wq: tape.leaf(&self.wq, trainable),
            bq: tape.leaf(&self.bq, trainable),
            wk: tape.leaf(&self.wk, trainable),
            bk: tape.leaf(&self.bk, trainable),
            wv: tape.leaf(&self.wv, trainable),
            bv: tape.leaf(&self.bv, trainable),
            wo: tape.leaf(&self.wo, trainable),
            bo: tape.leaf(&self.bo, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub config: AttentionConfig,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MhaVars {
    /// Per-head projections, per-head scaled dot-product attention over a
    /// contiguous d_model split, concatenation, output projection.
    pub fn forward(&self, tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        self.config.validate()?;
        let d = self.config.d_model;
        for (v, role) in [(q_in, "q"), (k_in, "k"), (v_in, "v")] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(Error::BadShape {
                    op: "multi_head_attention",
                    shape: s.to_vec(),
                    why: format!("{role} must be [tokens, {d}]"),
                });
            }
        }
        let q_proj = tape.matmul(q_in, self.wq)?;
        let q = tape.add_row(q_proj, self.bq)?;
        let k_proj = tape.matmul(k_in, self.wk)?;
        let k = tape.add_row(k_proj, self.bk)?;
        let v_proj = tape.matmul(v_in, self.wv)?;
        let v = tape.add_row(v_proj, self.bv)?;

        let dk = self.config.head_dim();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            heads.push(scaled_dot_attention(tape, qh, kh, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let out = tape.matmul(cat, self.wo)?;
        tape.add_row(out, self.bo)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForwardParams {
    pub fn init(d_model: usize, hidden: usize, seed: u64, name: &str) -> Self {
        Self {
            w1: xavier(d_model, hidden, &mut stream_rng(seed, &format!("{name}.w1"))),
            b1: Tensor::zeros(vec![1, hidden]),
            w2: xavier(hidden, d_model, &mut stream_rng(seed, &format!("{name}.w2"))),
            b2: Tensor::zeros(vec![1, d_model]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.leaf(&self.w1, trainable),
            b1: tape.leaf(&self.b1, trainable),
            w2: tape.leaf(&self.w2, trainable),
            b2: tape.leaf(&self.b2, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForwardVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, self.w2)?;
        tape.add_row(out, self.b2)
    }
}

// ── stem ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StemParams {
    pub config: StemConfig,
    /// Learnable query matrix, `[m, d_model]`.
    pub queries: Tensor,
    pub attn: MhaParams,
    pub ff: FeedForwardParams,
}

impl StemParams {
    pub fn init(config: StemConfig, seed: u64, name: &str) -> Self {
        let queries = Tensor::randn(
            vec![config.m, config.d_model],
            0.5,
            &mut stream_rng(seed, &format!("{name}.queries")),
        );
        Self {
            config,
            queries,
            attn: MhaParams::init(config.attention(), seed, &format!("{name}.attn")),
            ff: FeedForwardParams::init(
                config.d_model,
                config.ff_width,
                seed,
                &format!("{name}.ff"),
            ),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.queries"), &self.queries);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.queries"), &mut self.queries);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> StemVars {
        StemVars {
            config: self.config,
            queries: tape.leaf(&self.queries, trainable),
            attn: self.attn.bind(tape, trainable),
            ff: self.ff.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StemVars {
    pub config: StemConfig,
    pub queries: Var,
    pub attn: MhaVars,
    pub ff: FeedForwardVars,
}

impl StemVars {
    /// The m learnable queries attend over the n input tokens (keys and
    /// values both come from the tokens; no positional encoding), followed
    /// by a residual feed-forward on the m pooled outputs. Output is
    /// `[m, d_model]` regardless of n.
    pub fn forward(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[1] != self.config.d_model {
            return Err(Error::BadShape {
                op: "stem_forward",
                shape: s.to_vec(),
                why: format!("tokens must be [n, {}]", self.config.d_model),
            });
        }
        if s[0] == 0 {
            return Err(Error::BadShape {
                op: "stem_forward",
                shape: s.to_vec(),
                why: "empty input: n must be >= 1".into(),
            });
        }
        let pooled = self.attn.forward(tape, self.queries, tokens, tokens)?;
        let ff_out = self.ff.forward(tape, pooled)?;
        tape.add(pooled, ff_out)
    }
}

// ── trunk ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrunkLayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: MhaParams,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff: FeedForwardParams,
}

impl TrunkLayerParams {
    fn init(config: &TrunkConfig, seed: u64, name: &str) -> Self {
        let d = config.d_model;
        Self {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            attn: MhaParams::init(config.attention(), seed, &format!("{name}.attn")),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            ff: FeedForwardParams::init(d, config.ff_width, seed, &format!("{name}.ff")),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> TrunkLayerVars {
        TrunkLayerVars {
            ln1_gain: tape.leaf(&self.ln1_gain, trainable),
            ln1_bias: tape.leaf(&self.ln1_bias, trainable),
            attn: self.attn.bind(tape, trainable),
            ln2_gain: tape.leaf(&self.ln2_gain, trainable),
            ln2_bias: tape.leaf(&self.ln2_bias, trainable),
            ff: self.ff.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrunkParams {
    pub config: TrunkConfig,
    pub layers: Vec<TrunkLayerParams>,
}

impl TrunkParams {
    pub fn init(config: TrunkConfig, seed: u64, name: &str) -> Self {
        let layers = (0..config.n_layers)
            .map(|i| TrunkLayerParams::init(&config, seed, &format!("{name}.layer{i}")))
            .collect();
        Self { config, layers }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TrunkVars {
        TrunkVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrunkLayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn: MhaVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff: FeedForwardVars,
}

#[derive(Debug, Clone)]
pub struct TrunkVars {
    pub layers: Vec<TrunkLayerVars>,
}

impl TrunkVars {
    /// n_layers of pre-norm (layer_norm -> self-attention -> residual ->
    /// layer_norm -> feed-forward -> residual); shape preserved.
    pub fn forward(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.layers {
            let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
            let attn_out = layer.attn.forward(tape, normed, normed, normed)?;
            x = tape.add(x, attn_out)?;
            let normed = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
            let ff_out = layer.ff.forward(tape, normed)?;
            x = tape.add(x, ff_out)?;
        }
        Ok(x)
    }
}
