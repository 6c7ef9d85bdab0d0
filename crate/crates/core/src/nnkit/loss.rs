use serde::{Deserialize, Serialize};

use super::{Batch, Gradients, Matrix, Model, NnError, Result};
use crate::exec::Exec;

/// Samples per gradient-accumulation chunk. Chunk partial sums are combined in
/// chunk order, so the result does not depend on the execution policy.
const CHUNK: usize = 8;

/// Per-sample tempered class distributions produced by a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelBatch {
    probs: Matrix,
    temperature: f64,
}

impl SoftLabelBatch {
    /// Validates that every row is a probability distribution (sums to 1 within 1e-9).
    pub fn new(probs: Matrix, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        for (i, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(NnError::InvalidArgument(format!(
                    "soft label row {i} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(NnError::InvalidArgument(format!(
                    "soft label row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { probs, temperature })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }
}

/// Optimisation hyperparameters shared by every training mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate.
    pub eta: f64,
    /// Weight of the hard-label cross-entropy.
    pub alpha: f64,
    /// Weight of the soft-label cross-entropy.
    pub beta: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            alpha: 0.5,
            beta: 0.5,
            temperature: 2.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(NnError::InvalidArgument(what.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be a positive finite number");
        }
        if !(self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.beta >= 0.0
            && self.beta.is_finite())
        {
            return bad("alpha and beta must be non-negative and finite");
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// `exp(z_i / T) / sum_j exp(z_j / T)`, computed with max-subtraction.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NnError::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(NnError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(NnError::InvalidArgument("logits must be finite".into()));
    }
    Ok(softmax_unchecked(logits, temperature))
}

/// Plain softmax (`T = 1`).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    tempered_softmax(logits, 1.0)
}

fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log(tempered_softmax(z, T))` without forming the probabilities.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Combined distillation objective, averaged over the batch:
///
/// `alpha * CE(onehot(y), softmax(z)) + beta * T^2 * CE(q, softmax(z / T))`
///
/// Both terms come from a single forward pass; the soft term applies the
/// temperature to the same logits. Returns the loss and its exact gradient.
pub fn kd_loss(
    model: &Model,
    batch: &Batch,
    soft: &SoftLabelBatch,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    kd_loss_with(Exec::default(), model, batch, soft, cfg)
}

pub fn kd_loss_with(
    exec: Exec,
    model: &Model,
    batch: &Batch,
    soft: &SoftLabelBatch,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    cfg.validate()?;
    check_batch(model, batch)?;
    if soft.len() != batch.len() || soft.probs().cols() != model.classes() {
        return Err(NnError::Shape(format!(
            "soft labels are {}x{}, batch needs {}x{}",
            soft.len(),
            soft.probs().cols(),
            batch.len(),
            model.classes()
        )));
    }
    if soft.temperature() != cfg.temperature {
        return Err(NnError::InvalidArgument(format!(
            "soft labels were produced at T={} but training uses T={}",
            soft.temperature(),
            cfg.temperature
        )));
    }
    let (alpha, beta, t) = (cfg.alpha, cfg.beta, cfg.temperature);
    accumulate(exec, model, batch, |i, z| {
        let y = batch.hard_labels()[i];
        let lp = log_softmax(z, 1.0);
        let lpt = log_softmax(z, t);
        let q = soft.probs().row(i);
        let hard = -lp[y];
        let soft_ce: f64 = -q.iter().zip(&lpt).map(|(q, l)| q * l).sum::<f64>();
        let loss = alpha * hard + beta * t * t * soft_ce;
        let dz = lp
            .iter()
            .zip(&lpt)
            .zip(q)
            .enumerate()
            .map(|(k, ((l, lt), qk))| {
                let onehot = if k == y { 1.0 } else { 0.0 };
                alpha * (l.exp() - onehot) + beta * t * (lt.exp() - qk)
            })
            .collect();
        (loss, dz)
    })
}

/// Hard-label cross-entropy, the objective of ordinary (non-distilled) training.
pub fn hard_loss(model: &Model, batch: &Batch) -> Result<(f64, Gradients)> {
    hard_loss_with(Exec::default(), model, batch)
}

pub fn hard_loss_with(exec: Exec, model: &Model, batch: &Batch) -> Result<(f64, Gradients)> {
    check_batch(model, batch)?;
    accumulate(exec, model, batch, |i, z| {
        let y = batch.hard_labels()[i];
        let lp = log_softmax(z, 1.0);
        let dz = lp
            .iter()
            .enumerate()
            .map(|(k, l)| l.exp() - if k == y { 1.0 } else { 0.0 })
            .collect();
        (-lp[y], dz)
    })
}

fn check_batch(model: &Model, batch: &Batch) -> Result<()> {
    model.check_input(batch.inputs())?;
    if let Some(&bad) = batch.hard_labels().iter().find(|&&y| y >= model.classes()) {
        return Err(NnError::Shape(format!(
            "label {bad} out of range for {} classes",
            model.classes()
        )));
    }
    Ok(())
}

/// Runs forward/backward per sample, summing loss and gradients in fixed chunks,
/// then averages over the batch.
fn accumulate<F>(exec: Exec, model: &Model, batch: &Batch, head: F) -> Result<(f64, Gradients)>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync + Send,
{
    let n = batch.len();
    let chunks = n.div_ceil(CHUNK);
    let partials = exec.map_indexed(chunks, |c| {
        let mut grads = Gradients::zeros_like(model);
        let mut loss = 0.0;
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let acts = model.trace(batch.inputs().row(i));
            let (l, dz) = head(i, acts.last().expect("trace includes logits"));
            loss += l;
            model.backward(&acts, dz, &mut grads);
        }
        (loss, grads)
    });
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter
        .next()
        .ok_or_else(|| NnError::InvalidArgument("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grads.scale(inv);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(NnError::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}
