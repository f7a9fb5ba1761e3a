//! Per-task losses with gradients with respect to the header outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TaskId;
use crate::error::{Error, Result};
use crate::nn::{softmax, Batch};

/// Argument order of the per-pixel Bernoulli KL term in the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KldOrder {
    /// `KL(prediction || target)`, the literal reading.
    #[default]
    PredTarget,
    TargetPred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the entropy term in the reconstruction regularizer.
    pub lambda: f64,
    pub kld_order: KldOrder,
    /// Smoothing applied to Bernoulli parameters before logs.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-3,
            kld_order: KldOrder::PredTarget,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskTarget {
    /// Same shape as the prediction (r, s, c).
    Dense(Batch),
    /// One permutation index per sample (j).
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionTerms {
    pub mse: f64,
    pub kld: f64,
    pub entropy: f64,
}

impl ReconstructionTerms {
    pub fn total(&self) -> f64 {
        self.mse + self.kld + self.entropy
    }
}

fn check_finite(b: &Batch, what: &str) -> Result<()> {
    if b.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("NaN or infinity in {what}")));
    }
    Ok(())
}

fn check_config(cfg: &LossConfig) -> Result<()> {
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("loss epsilon must be positive".into()));
    }
    Ok(())
}

fn dense_target<'a>(pred: &Batch, target: &'a TaskTarget) -> Result<&'a Batch> {
    match target {
        TaskTarget::Dense(t) if t.shape() == pred.shape() => Ok(t),
        TaskTarget::Dense(t) => Err(Error::Shape(format!(
            "target {:?} for prediction {:?}",
            t.shape(),
            pred.shape()
        ))),
        TaskTarget::Labels(_) => Err(Error::InvalidArgument("dense task given labels".into())),
    }
}

fn mse_and_grad(pred: &Batch, target: &Batch) -> (f64, Vec<f64>) {
    let e = pred.data.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&f, &y)| {
            loss += (f - y) * (f - y);
            2.0 * (f - y) / e
        })
        .collect();
    (loss / e, grad)
}

fn bernoulli_kl(a: f64, b: f64) -> f64 {
    a * (a.ln() - b.ln()) + (1.0 - a) * ((1.0 - a).ln() - (1.0 - b).ln())
}

/// Reconstruction loss split into its three terms, with the gradient of
/// their sum with respect to the (sigmoid) predictions.
fn reconstruction(pred: &Batch, target: &Batch, cfg: &LossConfig) -> (ReconstructionTerms, Vec<f64>) {
    let e = pred.data.len() as f64;
    let norm = 1.0 + 2.0 * cfg.epsilon;
    let (mse, mut grad) = mse_and_grad(pred, target);
    let mut kld = 0.0;
    let mut entropy = 0.0;
    for ((g, &f), &y) in grad.iter_mut().zip(&pred.data).zip(&target.data) {
        let a = (f + cfg.epsilon) / norm;
        let b = (y + cfg.epsilon) / norm;
        let (k, dk) = match cfg.kld_order {
            KldOrder::PredTarget => (
                bernoulli_kl(a, b),
                (a.ln() - (1.0 - a).ln()) - (b.ln() - (1.0 - b).ln()),
            ),
            KldOrder::TargetPred => (bernoulli_kl(b, a), -b / a + (1.0 - b) / (1.0 - a)),
        };
        kld += k;
        entropy += -cfg.lambda * a * a.ln();
        let de = -cfg.lambda * (a.ln() + 1.0);
        *g += (dk + de) / norm / e;
    }
    (
        ReconstructionTerms {
            mse,
            kld: kld / e,
            entropy: entropy / e,
        },
        grad,
    )
}

pub fn reconstruction_terms(
    pred: &Batch,
    target: &TaskTarget,
    cfg: &LossConfig,
) -> Result<ReconstructionTerms> {
    check_config(cfg)?;
    check_finite(pred, "prediction")?;
    let t = dense_target(pred, target)?;
    check_finite(t, "target")?;
    Ok(reconstruction(pred, t, cfg).0)
}

fn labels<'a>(n: usize, classes: usize, target: &'a TaskTarget) -> Result<&'a [usize]> {
    match target {
        TaskTarget::Labels(l) if l.len() == n => {
            if let Some(bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            Ok(l)
        }
        TaskTarget::Labels(l) => Err(Error::Shape(format!("{} labels for {n} samples", l.len()))),
        TaskTarget::Dense(_) => Err(Error::InvalidArgument("jigsaw task given dense target".into())),
    }
}

/// Loss value for header outputs in their public form: images for r/s,
/// chroma for c and probability vectors for j.
pub fn task_loss(task: TaskId, pred: &Batch, target: &TaskTarget, cfg: &LossConfig) -> Result<f64> {
    check_config(cfg)?;
    check_finite(pred, "prediction")?;
    match task {
        TaskId::Reconstruction => reconstruction_terms(pred, target, cfg).map(|t| t.total()),
        TaskId::Segmentation | TaskId::Colorization => {
            let t = dense_target(pred, target)?;
            check_finite(t, "target")?;
            Ok(mse_and_grad(pred, t).0)
        }
        TaskId::Jigsaw => {
            let classes = pred.sample_len();
            let l = labels(pred.n, classes, target)?;
            let total: f64 = l
                .iter()
                .enumerate()
                .map(|(i, &y)| -pred.sample(i)[y].max(f64::MIN_POSITIVE).ln())
                .sum();
            Ok(total / pred.n as f64)
        }
    }
}

/// Training form: for j the `output` is raw logits and the loss is the fused
/// log-softmax cross-entropy; other tasks take the activated predictions.
pub fn loss_and_grad(
    task: TaskId,
    output: &Batch,
    target: &TaskTarget,
    cfg: &LossConfig,
) -> Result<(f64, Batch)> {
    check_config(cfg)?;
    check_finite(output, "prediction")?;
    let (loss, grad) = match task {
        TaskId::Reconstruction => {
            let t = dense_target(output, target)?;
            let (terms, g) = reconstruction(output, t, cfg);
            (terms.total(), g)
        }
        TaskId::Segmentation | TaskId::Colorization => mse_and_grad(output, dense_target(output, target)?),
        TaskId::Jigsaw => {
            let classes = output.sample_len();
            let l = labels(output.n, classes, target)?;
            let n = output.n as f64;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(output.data.len());
            for (i, &y) in l.iter().enumerate() {
                let logits = output.sample(i);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - logits[y];
                let mut p = softmax(logits);
                p[y] -= 1.0;
                grad.extend(p.into_iter().map(|v| v / n));
            }
            (loss / n, grad)
        }
    };
    Ok((loss, Batch { data: grad, ..output.clone() }))
}

/// Sum of per-task losses over the enabled tasks.
pub fn total_loss(per_task: &BTreeMap<TaskId, f64>, enabled: &[TaskId]) -> Result<f64> {
    enabled
        .iter()
        .map(|t| {
            per_task
                .get(t)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no loss recorded for task {t}")))
        })
        .sum()
}
