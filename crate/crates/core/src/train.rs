//! Training: MSE objective, Adam with bias-corrected moments, step-decay
//! learning rate, and the epoch loop with validation-MAE checkpoint
//! selection.
//!
//! Everything is deterministic given (corpus seed, train seed): shuffling,
//! augmentation streams and batch order all derive from fixed substreams.

use crate::error::{Error, Result};
use crate::model::{BrainAgeModel, PseudoSample};
use crate::rng::{hash64, mix_streams, DeterministicRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Apply train-split augmentation (off for overfit sanity runs).
    pub augment: bool,
    /// Optional global gradient-norm cap; disabled by default.
    pub clip: Option<f64>,
}

impl TrainConfig {
    /// Published full-scale recipe: lr 3e-5 decayed by 0.1 every 10
    /// epochs, batch 32, 200 epochs.
    pub fn paper() -> Self {
        Self {
            lr0: 3e-5,
            decay_factor: 0.1,
            decay_every: 10,
            batch_size: 32,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            augment: true,
            clip: None,
        }
    }

    /// Desk-scale override: fewer epochs, small batches, and a larger lr
    /// suited to from-scratch training at this size.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr0: 3e-3,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.lr0 <= 0.0 {
            violations.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            violations.push(format!(
                "decay_factor must be in (0,1], got {}",
                self.decay_factor
            ));
        }
        if self.decay_every == 0 {
            violations.push("decay_every must be >= 1".into());
        }
        if self.batch_size == 0 {
            violations.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            violations.push(format!(
                "adam betas must be in [0,1), got {}, {}",
                self.beta1, self.beta2
            ));
        }
        if self.eps <= 0.0 {
            violations.push(format!("adam eps must be positive, got {}", self.eps));
        }
        if let Some(c) = self.clip {
            if c <= 0.0 {
                violations.push(format!("clip must be positive when set, got {c}"));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }
}

/// lr0 * factor^floor(epoch / decay_every).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// (1/N) sum (pred_i - target_i)^2 on the tape; differentiable.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let np = tape.shape(pred).iter().product::<usize>();
    let nt = tape.shape(target).iter().product::<usize>();
    if np != nt {
        return Err(Error::DimMismatch {
            op: "mse_loss",
            left: tape.shape(pred).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    if np == 0 {
        return Err(Error::BadShape {
            op: "mse_loss",
            shape: vec![0],
            why: "empty prediction vector".into(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

// ── Adam ────────────────────────────────────────────────────────────

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One Adam update: m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam buffers disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.numel() != g.numel() {
            return Err(Error::DimMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── data access ─────────────────────────────────────────────────────

/// A corpus view the trainer can draw from. Train samples are produced
/// with the supplied rng driving augmentation (when enabled), so the
/// trainer owns all determinism.
pub trait SampleSource {
    fn train_len(&self) -> usize;
    fn valid_len(&self) -> usize;
    fn train_sample(
        &self,
        idx: usize,
        rng: &mut DeterministicRng,
        augment: bool,
    ) -> Result<PseudoSample>;
    fn valid_sample(&self, idx: usize) -> Result<PseudoSample>;
}

// ── fit ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub valid_mae: f64,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub log: Vec<EpochLog>,
    /// Checkpoint with the lowest validation MAE.
    pub best: BrainAgeModel,
    pub best_epoch: Option<usize>,
    pub best_valid_mae: f64,
    /// Parameters after the final epoch.
    pub final_model: BrainAgeModel,
}

/// Per epoch: deterministic shuffle(seed, epoch), batches of batch_size
/// (the last partial batch is kept), per-sample augment -> chunk ->
/// normalize, forward, MSE loss, backward, Adam with lr_at(epoch).
/// Keeps the checkpoint with the lowest validation MAE.
pub fn fit(
    mut model: BrainAgeModel,
    corpus: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(FitResult {
            log: Vec::new(),
            best: model.clone(),
            best_epoch: None,
            best_valid_mae: f64::INFINITY,
            final_model: model,
        });
    }
    if corpus.train_len() == 0 {
        return Err(Error::Data("empty train split".into()));
    }
    if corpus.valid_len() == 0 {
        return Err(Error::Data("empty validation split".into()));
    }

    let mut param_sizes = Vec::new();
    model.visit_params(&mut |_, t| param_sizes.push(t.numel()));
    let mut opt = OptimizerState::new(&param_sizes);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, BrainAgeModel)> = None;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(cfg, epoch);

        let mut order: Vec<usize> = (0..corpus.train_len()).collect();
        let mut shuffle_rng =
            DeterministicRng::new(cfg.seed, mix_streams(&[hash64(b"shuffle"), epoch as u64]));
        shuffle_rng.shuffle(&mut order);

        let mut sq_err_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss_val = train_batch(&mut model, corpus, cfg, epoch, batch, lr, &mut opt)?;
            sq_err_sum += loss_val * batch.len() as f64;
            n_seen += batch.len();
        }
        let train_mse = sq_err_sum / n_seen as f64;

        let mut abs_err_sum = 0.0;
        for i in 0..corpus.valid_len() {
            let sample = corpus.valid_sample(i)?;
            let yhat = model.predict(&sample)?;
            abs_err_sum += (yhat - sample.age).abs();
        }
        let valid_mae = abs_err_sum / corpus.valid_len() as f64;

        log.push(EpochLog {
            epoch,
            lr,
            train_mse,
            valid_mae,
            wall_s: t0.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| valid_mae < *b);
        if improved {
            best = Some((valid_mae, epoch, model.clone()));
        }
    }

    let (best_valid_mae, best_epoch, best_model) = best.expect("epochs >= 1");
    Ok(FitResult {
        log,
        best: best_model,
        best_epoch: Some(best_epoch),
        best_valid_mae,
        final_model: model,
    })
}

fn train_batch(
    model: &mut BrainAgeModel,
    corpus: &dyn SampleSource,
    cfg: &TrainConfig,
    epoch: usize,
    batch: &[usize],
    lr: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);

    let diagnose = |e: Error| match e {
        // Non-finite values surface inside ops before a NaN loss can form;
        // report them with the training context the spec asks for.
        Error::NonFinite { op } => Error::Diverged(format!(
            "non-finite values in {op} at epoch {epoch} (lr {lr:e}, batch {batch:?})"
        )),
        other => other,
    };

    let mut preds = Vec::with_capacity(batch.len());
    let mut ages = Vec::with_capacity(batch.len());
    for &idx in batch {
        let mut aug_rng = DeterministicRng::new(
            cfg.seed,
            mix_streams(&[hash64(b"augment"), epoch as u64, idx as u64]),
        );
        let sample = corpus.train_sample(idx, &mut aug_rng, cfg.augment)?;
        let (yhat, _) = model
            .forward_sample(&mut tape, &vars, &sample, false)
            .map_err(diagnose)?;
        preds.push(yhat);
        ages.push(sample.age);
    }
    let pred_cat = tape.concat_rows(&preds)?;
    let n = ages.len();
    let target = tape.leaf_owned(vec![n, 1], ages, false);
    let loss = mse_loss(&mut tape, pred_cat, target)?;
    let loss_val = tape.scalar_value(loss);
    if !loss_val.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss at epoch {epoch} (lr {lr:e}, batch {batch:?})"
        )));
    }
    tape.backward(loss)?;

    let mut grads: Vec<Tensor> = Vec::new();
    vars.visit_vars(&mut |v| {
        grads.push(
            tape.grad_tensor(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())),
        );
    });

    if let Some(cap) = cfg.clip {
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            let scale = cap / norm;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
        }
    }

    // Walk parameters out of the model, update them with adam_step in the
    // same order the gradients were collected, and put them back.
    let mut taken: Vec<Tensor> = Vec::with_capacity(grads.len());
    model.visit_params_mut(&mut |_, t| taken.push(std::mem::replace(t, Tensor::zeros(vec![0]))));
    let mut refs: Vec<&mut Tensor> = taken.iter_mut().collect();
    let step_result = adam_step(&mut refs, &grads, opt, lr, cfg);
    let mut it = taken.into_iter();
    model.visit_params_mut(&mut |_, t| *t = it.next().expect("same walk order"));
    step_result?;
    Ok(loss_val)
}
