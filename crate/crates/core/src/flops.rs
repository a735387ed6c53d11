//! Analytic multiply-add accounting and a wall-clock scaling harness.
//!
//! `flop_count` returns closed-form multiply-add counts (one fused
//! multiply+add = 1) for the dot products a component executes: matrix
//! projections, attention score/value products, feed-forward layers and
//! convolutions. Elementwise work (bias adds, softmax exp/div,
//! normalization) is excluded, matching what an instruction-counting
//! interpreter of the dot products observes.
//!
//! Asymptotics: the stem is linear in the token count n (cost
//! `n*(2*d^2 + 2*m*d)` plus n-independent query/output projections and
//! feed-forward), while full self-attention carries the quadratic
//! `2*n^2*d` score/value term. Doubling ratios therefore approach 2x and
//! 4x from below as n grows.

use crate::attention::{MhaParams, StemConfig, StemParams, TrunkConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::DeterministicRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Stem,
    FullSelfAttention,
    Trunk,
    Model,
}

impl Component {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stem" => Ok(Self::Stem),
            "full_self_attention" => Ok(Self::FullSelfAttention),
            "trunk" => Ok(Self::Trunk),
            "model" => Ok(Self::Model),
            other => Err(Error::Config(format!(
                "unknown flop component {other:?}; expected stem | full_self_attention | trunk | model"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Stem => "stem",
            Self::FullSelfAttention => "full_self_attention",
            Self::Trunk => "trunk",
            Self::Model => "model",
        }
    }
}

/// Stem forward on n tokens:
/// k/v projections `2*n*d^2`, query projection `m*d^2`, attention core
/// `2*m*n*d`, output projection `m*d^2`, feed-forward `2*m*d*ff`.
pub fn stem_flops(cfg: &StemConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    let m = cfg.m as u64;
    let ff = cfg.ff_width as u64;
    2 * n * d * d + m * d * d + 2 * m * n * d + m * d * d + 2 * m * d * ff
}

/// One full self-attention layer on n tokens: q/k/v/output projections
/// `4*n*d^2` plus the quadratic score/value core `2*n^2*d`.
pub fn full_self_attention_flops(d_model: usize, n: u64) -> u64 {
    let d = d_model as u64;
    4 * n * d * d + 2 * n * n * d
}

/// Trunk on t tokens: n_layers full self-attention layers plus
/// feed-forwards `2*t*d*ff` each.
pub fn trunk_flops(cfg: &TrunkConfig, t: u64) -> u64 {
    let d = cfg.d_model as u64;
    let ff = cfg.ff_width as u64;
    cfg.n_layers as u64 * (full_self_attention_flops(cfg.d_model, t) + 2 * t * d * ff)
}

/// End-to-end forward cost of the full model on one sample: three shared
/// encoder applications, three stems, the volume encoder, the trunk over
/// 3m+1 tokens, and the head.
pub fn model_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let mut total = 0u64;

    // Encoder conv stages (im2col matmul cost: C_out * C_in * k^3 per
    // output position), applied once per view.
    let mut extents = [cfg.chunk.0 as u64, cfg.chunk.1 as u64, cfg.chunk.2 as u64];
    let mut c_in = 1u64;
    for &c_out in cfg
        .encoder_channels
        .iter()
        .chain(std::iter::once(&cfg.d_model))
    {
        for e in extents.iter_mut() {
            *e = (*e + 2 * ENCODER_PAD as u64 - ENCODER_KERNEL as u64) / ENCODER_STRIDE as u64 + 1;
        }
        let positions: u64 = extents.iter().product();
        total += 3 * (c_out as u64) * c_in * 27 * positions;
        c_in = c_out as u64;
    }
    let n_tokens: u64 = extents.iter().product();

    // Three stems over the encoder tokens.
    total += 3 * stem_flops(&cfg.stem(), n_tokens);

    // Volume encoder: R -> d -> d.
    total += cfg.regions as u64 * d + d * d;

    // Trunk over the fused sequence.
    total += trunk_flops(&cfg.trunk(), 3 * cfg.stem_queries as u64 + 1);

    // Head: d -> hidden -> 1.
    total += d * cfg.head_hidden as u64 + cfg.head_hidden as u64;
    total
}

pub const ENCODER_KERNEL: usize = 3;
pub const ENCODER_STRIDE: usize = 2;
pub const ENCODER_PAD: usize = 1;

/// Dispatch by component; `n` is the token count (ignored for `model`,
/// which has a fixed input size).
pub fn flop_count(component: Component, n: u64, model_cfg: &ModelConfig) -> u64 {
    match component {
        Component::Stem => stem_flops(&model_cfg.stem(), n),
        Component::FullSelfAttention => full_self_attention_flops(model_cfg.d_model, n),
        Component::Trunk => trunk_flops(&model_cfg.trunk(), n),
        Component::Model => model_flops(model_cfg),
    }
}

// ── wall-clock harness ──────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchPoint {
    pub component: String,
    pub n: usize,
    pub flops: u64,
    pub wall_ns: u128,
}

/// Median wall time of `reps` runs after one warmup.
fn time_median<F: FnMut()>(mut f: F, reps: usize) -> u128 {
    f();
    let mut times: Vec<u128> = (0..reps.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_nanos()
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

/// Time stem_forward over n random tokens.
pub fn bench_stem(cfg: &StemConfig, n: usize, reps: usize, seed: u64) -> BenchPoint {
    let params = StemParams::init(*cfg, seed, "bench.stem");
    let mut rng = DeterministicRng::new(seed, 1);
    let tokens = Tensor::randn(vec![n, cfg.d_model], 1.0, &mut rng);
    let wall_ns = time_median(
        || {
            let mut tape = Tape::new();
            let stem = params.bind(&mut tape, false);
            let t = tape.leaf(&tokens, false);
            let out = stem.forward(&mut tape, t).unwrap();
            std::hint::black_box(tape.value(out)[0]);
        },
        reps,
    );
    BenchPoint {
        component: "stem".into(),
        n,
        flops: stem_flops(cfg, n as u64),
        wall_ns,
    }
}

/// Time one full self-attention layer (multi-head, q=k=v over n tokens).
pub fn bench_full_self_attention(
    d_model: usize,
    n_heads: usize,
    n: usize,
    reps: usize,
    seed: u64,
) -> BenchPoint {
    let params = MhaParams::init(
        crate::attention::AttentionConfig { d_model, n_heads },
        seed,
        "bench.full",
    );
    let mut rng = DeterministicRng::new(seed, 2);
    let tokens = Tensor::randn(vec![n, d_model], 1.0, &mut rng);
    let wall_ns = time_median(
        || {
            let mut tape = Tape::new();
            let mha = params.bind(&mut tape, false);
            let t = tape.leaf(&tokens, false);
            let out = mha.forward(&mut tape, t, t, t).unwrap();
            std::hint::black_box(tape.value(out)[0]);
        },
        reps,
    );
    BenchPoint {
        component: "full_self_attention".into(),
        n,
        flops: full_self_attention_flops(d_model, n as u64),
        wall_ns,
    }
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
