use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::convnet::{ConvNet, ConvNetSpec};
use super::{argmax, cross_entropy};
use crate::data::Dataset;
use crate::error::{Result, SadaError};
use crate::spectral::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    /// 0 disables the step schedule.
    pub decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            lr: 0.01,
            lr_decay: 0.1,
            decay_every: 20,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SadaError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(SadaError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(SadaError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.decay_every) {
            Some(k) => self.lr * self.lr_decay.powi(k as i32),
            None => self.lr,
        }
    }
}

/// Optimizer state for one parameter vector.
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { config, first: vec![0.0; n_params], second, steps: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    let g = g + wd * *p;
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grad).zip(self.first.iter_mut()).zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub train_acc: f64,
    pub lr: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochLog>,
}

/// Shuffled sample order for one epoch; shared by every trainer so runs with
/// the same seed visit batches in the same order.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean cross-entropy over a batch with its parameter gradient.
pub(crate) struct ErmStep {
    pub loss_sum: f64,
    pub correct: usize,
    pub grad: Vec<f64>,
}

pub(crate) fn erm_step(model: &ConvNet, images: &[&Image], labels: &[usize]) -> Result<ErmStep> {
    let k = model.spec().classes;
    let n = images.len() as f64;
    let pass = model.forward(images)?;
    let mut dlogits = Vec::with_capacity(pass.logits.len());
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (row, &y) in pass.logits.chunks(k).zip(labels) {
        let (loss, g) = cross_entropy(row, y);
        loss_sum += loss;
        if argmax(row) == y {
            correct += 1;
        }
        dlogits.extend(g.into_iter().map(|v| v / n));
    }
    let (grad, _) = model.backward(&pass, &dlogits, false);
    Ok(ErmStep { loss_sum, correct, grad })
}

pub(crate) fn check_labels(dataset: &Dataset, classes: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(SadaError::EmptyDataset);
    }
    if let Some(bad) = dataset.labels.iter().find(|&&y| y >= classes) {
        return Err(SadaError::InvalidInput(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Trains a freshly initialized network by minimizing mean cross-entropy with
/// mini-batch stochastic gradients.
pub fn fit_erm(spec: ConvNetSpec, dataset: &Dataset, config: &OptimizerConfig) -> Result<(ConvNet, TrainingCurve)> {
    let model = ConvNet::new(spec)?;
    fit_erm_from(model, dataset, config)
}

/// Continues ERM training from existing weights with a fresh optimizer.
pub fn fit_erm_from(
    mut model: ConvNet,
    dataset: &Dataset,
    config: &OptimizerConfig,
) -> Result<(ConvNet, TrainingCurve)> {
    config.validate()?;
    check_labels(dataset, model.spec().classes)?;
    let mut opt = Optimizer::new(config.clone(), model.n_params());
    let mut curve = TrainingCurve::default();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Image> = batch.iter().map(|&i| &dataset.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let s = erm_step(&model, &images, &labels)?;
            if !s.loss_sum.is_finite() {
                return Err(SadaError::Diverged { epoch, step, loss: s.loss_sum });
            }
            loss_sum += s.loss_sum;
            correct += s.correct;
            opt.step(model.params_mut(), &s.grad, lr);
        }
        let log = EpochLog {
            epoch,
            ce: loss_sum / dataset.len() as f64,
            train_acc: correct as f64 / dataset.len() as f64,
            lr,
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::info!("erm epoch {epoch}: ce {:.4} acc {:.4}", log.ce, log.train_acc);
        curve.epochs.push(log);
    }
    Ok((model, curve))
}
