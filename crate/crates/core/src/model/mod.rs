//! Classifier abstraction used by every other module, plus the reference
//! ConvNet and its ERM trainer.

mod checkpoint;
mod convnet;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointStore};
pub use convnet::{ConvBlockSpec, ConvNet, ConvNetSpec, ForwardPass};
pub(crate) use train::{check_labels, epoch_order, erm_step};
pub use train::{fit_erm, fit_erm_from, EpochLog, Optimizer, OptimizerConfig, OptimizerKind, TrainingCurve};

use crate::error::{Result, SadaError};
use crate::spectral::{Image, Shape};

/// Cross-entropy and its gradient with respect to the input pixels.
#[derive(Clone, Debug)]
pub struct PixelGradient {
    pub loss: f64,
    pub gradient: Image,
}

/// A differentiable classifier.
///
/// Implementations must return probability rows on the simplex and exact
/// gradients of the cross-entropy with respect to the input. An oracle that
/// reports [`ModelOracle::is_reentrant`] may be called from several threads at
/// once; otherwise callers serialize access.
pub trait ModelOracle: Send + Sync {
    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    fn predict_proba(&self, batch: &[&Image]) -> Result<Vec<Vec<f64>>>;

    /// Per-sample cross-entropy and pixel gradient. Samples are independent:
    /// the result for one image never depends on the rest of the batch.
    fn loss_and_gradient(&self, batch: &[&Image], labels: &[usize]) -> Result<Vec<PixelGradient>>;

    /// Content hash of architecture and weights.
    fn fingerprint(&self) -> String;

    fn is_reentrant(&self) -> bool {
        false
    }
}

fn check_shapes(model: &dyn ModelOracle, batch: &[&Image]) -> Result<()> {
    let want = model.input_shape();
    for (i, img) in batch.iter().enumerate() {
        if img.shape() != want {
            return Err(SadaError::shape(format!("model input {want}"), format!("image {i}: {}", img.shape())));
        }
    }
    Ok(())
}

pub fn predict_proba(model: &dyn ModelOracle, batch: &[&Image]) -> Result<Vec<Vec<f64>>> {
    check_shapes(model, batch)?;
    model.predict_proba(batch)
}

pub fn pixel_gradient(model: &dyn ModelOracle, image: &Image, label: usize) -> Result<PixelGradient> {
    check_shapes(model, &[image])?;
    if label >= model.num_classes() {
        return Err(SadaError::InvalidInput(format!("label {label} out of range for {} classes", model.num_classes())));
    }
    let mut out = model.loss_and_gradient(&[image], &[label])?;
    Ok(out.remove(0))
}

/// Top-1 class of each probability row (first maximum on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels(model: &dyn ModelOracle, images: &[&Image]) -> Result<Vec<usize>> {
    Ok(predict_proba(model, images)?.iter().map(|r| argmax(r)).collect())
}

/// Fraction of correctly classified images, evaluated in chunks.
pub fn accuracy(model: &dyn ModelOracle, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(SadaError::EmptyDataset);
    }
    let mut correct = 0;
    for (chunk, lab) in images.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        correct += predict_labels(model, &refs)?.iter().zip(lab).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

pub(crate) const EVAL_CHUNK: usize = 256;

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Cross-entropy of one logit row and `d loss / d logits`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    (-logp[label], grad)
}

impl ModelOracle for ConvNet {
    fn input_shape(&self) -> Shape {
        self.spec().input
    }

    fn num_classes(&self) -> usize {
        self.spec().classes
    }

    fn predict_proba(&self, batch: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let k = self.spec().classes;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_CHUNK) {
            let pass = self.forward(chunk)?;
            out.extend(pass.logits.chunks(k).map(softmax));
        }
        Ok(out)
    }

    fn loss_and_gradient(&self, batch: &[&Image], labels: &[usize]) -> Result<Vec<PixelGradient>> {
        if batch.len() != labels.len() {
            return Err(SadaError::shape(format!("{} labels", batch.len()), format!("{} labels", labels.len())));
        }
        let k = self.spec().classes;
        let mut out = Vec::with_capacity(batch.len());
        for (chunk, labs) in batch.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
            let pass = self.forward(chunk)?;
            let mut dlogits = Vec::with_capacity(pass.logits.len());
            let mut losses = Vec::with_capacity(chunk.len());
            for (row, &y) in pass.logits.chunks(k).zip(labs) {
                if y >= k {
                    return Err(SadaError::InvalidInput(format!("label {y} out of range for {k} classes")));
                }
                let (loss, g) = cross_entropy(row, y);
                losses.push(loss);
                dlogits.extend(g);
            }
            let grads = self.input_gradient(&pass, &dlogits);
            for (loss, gradient) in losses.into_iter().zip(grads) {
                out.push(PixelGradient { loss, gradient });
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        ConvNet::fingerprint(self)
    }

    fn is_reentrant(&self) -> bool {
        true
    }
}
