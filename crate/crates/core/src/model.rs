//! The full brain-age regression model: a shared strided 3-d conv encoder
//! applied to three anatomical view chunks, per-view stems, a volume-vector
//! encoder, learned view/volume tags, the trunk, and a regression head.

use crate::attention::{FeedForwardVars, StemConfig, StemParams, StemVars, TrunkConfig, TrunkParams, TrunkVars};
use crate::error::{Error, Result};
use crate::flops::{ENCODER_KERNEL, ENCODER_PAD, ENCODER_STRIDE};
use crate::rng::{hash64, DeterministicRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
}

impl Group {
    pub fn label(&self) -> &'static str {
        match self {
            Group::Cn => "CN",
            Group::Mci => "MCI",
            Group::Ad => "AD",
        }
    }

    pub const ALL: [Group; 3] = [Group::Cn, Group::Mci, Group::Ad];
}

/// One subject-scan: three normalized view chunks, the region-volume
/// vector, and labels.
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub subject_id: String,
    pub scan_id: String,
    /// Sagittal / coronal / axial chunks, each `[c1, c2, t]`, values in [0,1].
    pub view_s: Tensor,
    pub view_c: Tensor,
    pub view_a: Tensor,
    /// Region volumes in mm^3, length R.
    pub region_volumes: Vec<f64>,
    /// Chronological age in years.
    pub age: f64,
    pub group: Group,
    /// Synthetic cognitive score in [0, 30].
    pub cog_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// View chunk shape (c1, c2, t).
    pub chunk: (usize, usize, usize),
    /// Region count R of the volume vector.
    pub regions: usize,
    /// Intermediate encoder channels; a final stage to d_model is implied.
    pub encoder_channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    /// Learnable stem queries m per view.
    pub stem_queries: usize,
    pub trunk_layers: usize,
    pub ff_width: usize,
    pub head_hidden: usize,
    /// Initial value of the head output bias (years).
    pub head_bias_init: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on CPU while exercising all
    /// paths.
    pub fn desk() -> Self {
        Self {
            chunk: (32, 32, 8),
            regions: 24,
            encoder_channels: vec![8, 16],
            d_model: 64,
            n_heads: 4,
            stem_queries: 16,
            trunk_layers: 2,
            ff_width: 128,
            head_hidden: 64,
            head_bias_init: 68.5,
            seed: 0,
        }
    }

    /// Paper-scale dimensions (128x128x30 chunks, 280 regions); accepted by
    /// validation, impractical to train here.
    pub fn paper_scale() -> Self {
        Self {
            chunk: (128, 128, 30),
            regions: 280,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.regions == 0 {
            violations.push("regions must be >= 1".to_string());
        }
        if self.chunk.0 == 0 || self.chunk.1 == 0 || self.chunk.2 == 0 {
            violations.push(format!("chunk extents must be positive: {:?}", self.chunk));
        }
        if self.head_hidden == 0 {
            violations.push("head_hidden must be >= 1".to_string());
        }
        if let Err(e) = self.stem().validate() {
            violations.push(e.to_string());
        }
        if let Err(e) = self.trunk().validate() {
            violations.push(e.to_string());
        }
        match self.encoder_output_extents() {
            Ok(_) => {}
            Err(e) => violations.push(e.to_string()),
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    pub fn stem(&self) -> StemConfig {
        StemConfig {
            m: self.stem_queries,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_width: self.ff_width,
        }
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            n_layers: self.trunk_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_width: self.ff_width,
        }
    }

    /// Channel schedule of the encoder stages, ending at d_model.
    pub fn encoder_stages(&self) -> Vec<usize> {
        let mut stages = self.encoder_channels.clone();
        stages.push(self.d_model);
        stages
    }

    /// Spatial extents of the final encoder feature map.
    pub fn encoder_output_extents(&self) -> Result<(usize, usize, usize)> {
        let mut e = [self.chunk.0, self.chunk.1, self.chunk.2];
        for _ in 0..self.encoder_stages().len() {
            for v in e.iter_mut() {
                let padded = *v + 2 * ENCODER_PAD;
                if padded < ENCODER_KERNEL {
                    return Err(Error::Config(format!(
                        "encoder downsamples chunk {:?} below one voxel",
                        self.chunk
                    )));
                }
                *v = (padded - ENCODER_KERNEL) / ENCODER_STRIDE + 1;
                if *v == 0 {
                    return Err(Error::Config(format!(
                        "encoder downsamples chunk {:?} below one voxel",
                        self.chunk
                    )));
                }
            }
        }
        Ok((e[0], e[1], e[2]))
    }

    /// Tokens produced per view: product of the final feature map extents.
    pub fn tokens_per_view(&self) -> Result<usize> {
        let (a, b, c) = self.encoder_output_extents()?;
        Ok(a * b * c)
    }

    /// Trunk sequence length: three stems of m tokens plus the volume token.
    pub fn trunk_tokens(&self) -> usize {
        3 * self.stem_queries + 1
    }
}

/// Per-feature z-score statistics computed on the train split and stored
/// in checkpoints so inference is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl VolumeStats {
    pub fn from_train_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no rows for volume statistics".into()));
        }
        let r = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; r];
        for row in rows {
            if row.len() != r {
                return Err(Error::Data("ragged volume rows".into()));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0; r];
        for row in rows {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            // Constant features standardize to zero rather than exploding.
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    /// Identity statistics (mean 0, std 1), for tests.
    pub fn identity(r: usize) -> Self {
        Self {
            mean: vec![0.0; r],
            std: vec![1.0; r],
        }
    }

    pub fn standardize(&self, volumes: &[f64]) -> Result<Vec<f64>> {
        if volumes.len() != self.mean.len() {
            return Err(Error::Data(format!(
                "volume vector length {} != stats length {}",
                volumes.len(),
                self.mean.len()
            )));
        }
        Ok(volumes
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

// ── encoder ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<ConvStage>,
}

impl EncoderParams {
    fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in config.encoder_stages().iter().enumerate() {
            let name = format!("encoder.stage{i}.w");
            let mut rng = DeterministicRng::new(seed, hash64(name.as_bytes()));
            let fan_in = (c_in * ENCODER_KERNEL * ENCODER_KERNEL * ENCODER_KERNEL) as f64;
            let std = (2.0 / fan_in).sqrt();
            stages.push(ConvStage {
                w: Tensor::randn(
                    vec![c_out, c_in, ENCODER_KERNEL, ENCODER_KERNEL, ENCODER_KERNEL],
                    std,
                    &mut rng,
                ),
                b: Tensor::zeros(vec![c_out]),
            });
            c_in = c_out;
        }
        Self { stages }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(format!("{prefix}.stage{i}.w"), &s.w);
            f(format!("{prefix}.stage{i}.b"), &s.b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(format!("{prefix}.stage{i}.w"), &mut s.w);
            f(format!("{prefix}.stage{i}.b"), &mut s.b);
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            stages: self
                .stages
                .iter()
                .map(|s| (tape.leaf(&s.w, trainable), tape.leaf(&s.b, trainable)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    stages: Vec<(Var, Var)>,
}

impl EncoderVars {
    /// Chunk `[1, c1, c2, t]` -> tokens `[n, d_model]`: strided conv+relu
    /// stages, then each spatial position of the final map becomes one
    /// token (the final stage's channel count is d_model).
    pub fn encode(&self, tape: &mut Tape, chunk: Var) -> Result<Var> {
        let mut x = chunk;
        for &(w, b) in &self.stages {
            let conv = tape.conv3d(x, w, b, ENCODER_STRIDE, ENCODER_PAD)?;
            x = tape.relu(conv);
        }
        let shape = tape.shape(x).to_vec();
        let d = shape[0];
        let n = shape[1] * shape[2] * shape[3];
        let flat = tape.reshape(x, vec![d, n])?;
        tape.transpose(flat)
    }
}

// ── volume encoder ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VolumeEncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl VolumeEncoderParams {
    fn init(config: &ModelConfig, seed: u64) -> Self {
        let (r, d) = (config.regions, config.d_model);
        let mut rng1 = DeterministicRng::new(seed, hash64(b"vol_encoder.w1"));
        let mut rng2 = DeterministicRng::new(seed, hash64(b"vol_encoder.w2"));
        Self {
            w1: Tensor::randn(vec![r, d], (2.0 / (r + d) as f64).sqrt(), &mut rng1),
            b1: Tensor::zeros(vec![1, d]),
            w2: Tensor::randn(vec![d, d], (1.0 / d as f64).sqrt(), &mut rng2),
            b2: Tensor::zeros(vec![1, d]),
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

    fn bind(&self, tape: &mut Tape, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.leaf(&self.w1, trainable),
            b1: tape.leaf(&self.b1, trainable),
            w2: tape.leaf(&self.w2, trainable),
            b2: tape.leaf(&self.b2, trainable),
        }
    }
}

// ── head ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    fn init(config: &ModelConfig, seed: u64) -> Self {
        let (d, h) = (config.d_model, config.head_hidden);
        let mut rng1 = DeterministicRng::new(seed, hash64(b"head.w1"));
        let mut rng2 = DeterministicRng::new(seed, hash64(b"head.w2"));
        Self {
            w1: Tensor::randn(vec![d, h], (2.0 / (d + h) as f64).sqrt(), &mut rng1),
            b1: Tensor::zeros(vec![1, h]),
            w2: Tensor::randn(vec![h, 1], (2.0 / (h + 1) as f64).sqrt(), &mut rng2),
            b2: Tensor::full(vec![1, 1], config.head_bias_init),
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

    fn bind(&self, tape: &mut Tape, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.leaf(&self.w1, trainable),
            b1: tape.leaf(&self.b1, trainable),
            w2: tape.leaf(&self.w2, trainable),
            b2: tape.leaf(&self.b2, trainable),
        }
    }
}

// ── full model ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BrainAgeModel {
    pub config: ModelConfig,
    /// One image encoder, shared across the three views.
    pub encoder: EncoderParams,
    pub vol_encoder: VolumeEncoderParams,
    /// Sagittal, coronal, axial stems.
    pub stems: [StemParams; 3],
    /// Additive view tags (s, c, a) and the volume tag, each `[1, d_model]`.
    pub tags: [Tensor; 4],
    pub trunk: TrunkParams,
    pub head: HeadParams,
    pub vol_stats: VolumeStats,
}

pub const VIEW_NAMES: [&str; 3] = ["sagittal", "coronal", "axial"];
const TAG_NAMES: [&str; 4] = ["tag_s", "tag_c", "tag_a", "tag_v"];

impl BrainAgeModel {
    pub fn init(config: ModelConfig, vol_stats: VolumeStats) -> Result<Self> {
        config.validate()?;
        if vol_stats.mean.len() != config.regions {
            return Err(Error::Config(format!(
                "volume stats length {} != regions {}",
                vol_stats.mean.len(),
                config.regions
            )));
        }
        let seed = config.seed;
        let stem_cfg = config.stem();
        let stems = [
            StemParams::init(stem_cfg, seed, "stem_s"),
            StemParams::init(stem_cfg, seed, "stem_c"),
            StemParams::init(stem_cfg, seed, "stem_a"),
        ];
        let tags = TAG_NAMES.map(|name| {
            let mut rng = DeterministicRng::new(seed, hash64(name.as_bytes()));
            Tensor::randn(vec![1, config.d_model], 0.02, &mut rng)
        });
        Ok(Self {
            encoder: EncoderParams::init(&config, seed),
            vol_encoder: VolumeEncoderParams::init(&config, seed),
            stems,
            tags,
            trunk: TrunkParams::init(config.trunk(), seed, "trunk"),
            head: HeadParams::init(&config, seed),
            vol_stats,
            config,
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder.visit("encoder", f);
        self.vol_encoder.visit("vol_encoder", f);
        for (stem, name) in self.stems.iter().zip(["stem_s", "stem_c", "stem_a"]) {
            stem.visit(name, f);
        }
        for (tag, name) in self.tags.iter().zip(TAG_NAMES) {
            f(name.to_string(), tag);
        }
        self.trunk.visit("trunk", f);
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut("encoder", f);
        self.vol_encoder.visit_mut("vol_encoder", f);
        for (stem, name) in self.stems.iter_mut().zip(["stem_s", "stem_c", "stem_a"]) {
            stem.visit_mut(name, f);
        }
        for (tag, name) in self.tags.iter_mut().zip(TAG_NAMES) {
            f(name.to_string(), tag);
        }
        self.trunk.visit_mut("trunk", f);
        self.head.visit_mut("head", f);
    }

    /// Number of stored parameter scalars.
    pub fn param_count_actual(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t| count += t.numel());
        count
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            config: self.config.clone(),
            encoder: self.encoder.bind(tape, trainable),
            vol_encoder: self.vol_encoder.bind(tape, trainable),
            stems: [
                self.stems[0].bind(tape, trainable),
                self.stems[1].bind(tape, trainable),
                self.stems[2].bind(tape, trainable),
            ],
            tags: [
                tape.leaf(&self.tags[0], trainable),
                tape.leaf(&self.tags[1], trainable),
                tape.leaf(&self.tags[2], trainable),
                tape.leaf(&self.tags[3], trainable),
            ],
            trunk: self.trunk.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    fn check_sample(&self, sample: &PseudoSample) -> Result<()> {
        let expect = [self.config.chunk.0, self.config.chunk.1, self.config.chunk.2];
        for (view, name) in [
            (&sample.view_s, "view_s"),
            (&sample.view_c, "view_c"),
            (&sample.view_a, "view_a"),
        ] {
            if view.shape() != expect {
                return Err(Error::Config(format!(
                    "{name} shape {:?} does not match config chunk {:?}",
                    view.shape(),
                    expect
                )));
            }
        }
        if sample.region_volumes.len() != self.config.regions {
            return Err(Error::Config(format!(
                "region vector length {} != configured {}",
                sample.region_volumes.len(),
                self.config.regions
            )));
        }
        Ok(())
    }

    /// Place one sample's inputs on the tape and run the forward pass,
    /// returning the prediction and the three chunk leaves (differentiable
    /// when `chunk_grads` is set, for attribution).
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        sample: &PseudoSample,
        chunk_grads: bool,
    ) -> Result<(Var, [Var; 3])> {
        self.check_sample(sample)?;
        let (c1, c2, t) = self.config.chunk;
        let as_input = |tape: &mut Tape, view: &Tensor| {
            tape.leaf_owned(vec![1, c1, c2, t], view.data().to_vec(), chunk_grads)
        };
        let chunks = [
            as_input(tape, &sample.view_s),
            as_input(tape, &sample.view_c),
            as_input(tape, &sample.view_a),
        ];
        let std_vols = self.vol_stats.standardize(&sample.region_volumes)?;
        let vol = tape.leaf_owned(vec![1, self.config.regions], std_vols, false);
        let yhat = vars.forward(tape, chunks, vol)?;
        Ok((yhat, chunks))
    }

    /// Convenience scalar prediction on a throwaway tape.
    pub fn predict(&self, sample: &PseudoSample) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let (yhat, _) = self.forward_sample(&mut tape, &vars, sample, false)?;
        Ok(tape.scalar_value(yhat))
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub encoder: EncoderVars,
    pub vol_encoder: FeedForwardVars,
    pub stems: [StemVars; 3],
    pub tags: [Var; 4],
    pub trunk: TrunkVars,
    pub head: FeedForwardVars,
}

impl ModelVars {
    /// Tape handles of every parameter, in exactly the order
    /// [`BrainAgeModel::visit_params`] walks them.
    pub fn visit_vars(&self, f: &mut dyn FnMut(Var)) {
        for (w, b) in &self.encoder.stages {
            f(*w);
            f(*b);
        }
        for v in [
            self.vol_encoder.w1,
            self.vol_encoder.b1,
            self.vol_encoder.w2,
            self.vol_encoder.b2,
        ] {
            f(v);
        }
        for stem in &self.stems {
            f(stem.queries);
            for v in [
                stem.attn.wq, stem.attn.bq, stem.attn.wk, stem.attn.bk, stem.attn.wv,
                stem.attn.bv, stem.attn.wo, stem.attn.bo,
            ] {
                f(v);
            }
            for v in [stem.ff.w1, stem.ff.b1, stem.ff.w2, stem.ff.b2] {
                f(v);
            }
        }
        for tag in self.tags {
            f(tag);
        }
        for layer in &self.trunk.layers {
            f(layer.ln1_gain);
            f(layer.ln1_bias);
            for v in [
                layer.attn.wq, layer.attn.bq, layer.attn.wk, layer.attn.bk, layer.attn.wv,
                layer.attn.bv, layer.attn.wo, layer.attn.bo,
            ] {
                f(v);
            }
            f(layer.ln2_gain);
            f(layer.ln2_bias);
            for v in [layer.ff.w1, layer.ff.b1, layer.ff.w2, layer.ff.b2] {
                f(v);
            }
        }
        for v in [self.head.w1, self.head.b1, self.head.w2, self.head.b2] {
            f(v);
        }
    }

    /// tokens = concat(stem_v(enc(chunk_v)) + tag_v for each view,
    /// vol_encode(vols) + tag_vol) -> trunk -> mean pool -> head -> scalar.
    pub fn forward(&self, tape: &mut Tape, chunks: [Var; 3], std_vols: Var) -> Result<Var> {
        let mut streams = Vec::with_capacity(4);
        for (i, &chunk) in chunks.iter().enumerate() {
            let tokens = self.encoder.encode(tape, chunk)?;
            let pooled = self.stems[i].forward(tape, tokens)?;
            streams.push(tape.add_row(pooled, self.tags[i])?);
        }
        let vol_hidden = tape.matmul(std_vols, self.vol_encoder.w1)?;
        let vol_hidden = tape.add_row(vol_hidden, self.vol_encoder.b1)?;
        let vol_hidden = tape.gelu(vol_hidden);
        let vol_token = tape.matmul(vol_hidden, self.vol_encoder.w2)?;
        let vol_token = tape.add_row(vol_token, self.vol_encoder.b2)?;
        streams.push(tape.add_row(vol_token, self.tags[3])?);

        let fused = tape.concat_rows(&streams)?;
        let fused = self.trunk.forward(tape, fused)?;
        let pooled = tape.mean_rows(fused)?;

        let h = tape.matmul(pooled, self.head.w1)?;
        let h = tape.add_row(h, self.head.b1)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, self.head.w2)?;
        tape.add_row(out, self.head.b2)
    }
}

/// Closed-form parameter count for a config. Per layer:
/// conv stages `c_out*(c_in*k^3 + 1)`; volume encoder `R*d + d + d*d + d`;
/// each stem `m*d + 4*(d^2 + d) + (d*ff + ff + ff*d + d)`; tags `4*d`;
/// trunk layers `4*d (norms) + 4*(d^2 + d) + d*ff + ff + ff*d + d`;
/// head `d*h + h + h + 1`.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.ff_width;
    let k3 = ENCODER_KERNEL * ENCODER_KERNEL * ENCODER_KERNEL;
    let mut count = 0;
    let mut c_in = 1;
    for c_out in config.encoder_stages() {
        count += c_out * (c_in * k3 + 1);
        c_in = c_out;
    }
    count += config.regions * d + d + d * d + d;
    let mha = 4 * (d * d + d);
    let ffn = d * ff + ff + ff * d + d;
    count += 3 * (config.stem_queries * d + mha + ffn);
    count += 4 * d;
    count += config.trunk_layers * (4 * d + mha + ffn);
    count += d * config.head_hidden + config.head_hidden + config.head_hidden + 1;
    count
}
