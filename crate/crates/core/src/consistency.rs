//! Finetuning with cross-entropy plus Jensen-Shannon consistency across an
//! image and its augmented views.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentationConfig, AugmentationTrace};
use crate::data::Dataset;
use crate::error::{Result, SadaError};
use crate::model::{
    argmax, check_labels, cross_entropy, epoch_order, erm_step, log_softmax, ConvNet, Optimizer, OptimizerConfig,
};
use crate::sensitivity::{compute_map, MapKind, MapOptions, NoiseModel, SensitivityMap};
use crate::spectral::{mean_amplitude, Image};

const SIMPLEX_TOL: f64 = 1e-6;

/// `(1/K) * sum_i KL(p_i || mean)` in nats, for `K >= 2` distributions.
pub fn js_divergence(probs: &[&[f64]]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(SadaError::InvalidInput(format!("need at least 2 distributions, got {}", probs.len())));
    }
    let c = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        if p.len() != c {
            return Err(SadaError::shape(format!("{c} classes"), format!("distribution {i}: {}", p.len())));
        }
        if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SadaError::InvalidInput(format!("distribution {i} has a negative or non-finite entry")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(SadaError::InvalidInput(format!("distribution {i} sums to {sum}, not 1")));
        }
    }
    let k = probs.len() as f64;
    let mean: Vec<f64> = (0..c).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / k).collect();
    let mut total = 0.0;
    for p in probs {
        for (&pj, &mj) in p.iter().zip(&mean) {
            if pj > 0.0 {
                total += pj * (pj.ln() - mj.ln());
            }
        }
    }
    Ok((total / k).max(0.0))
}

/// JS divergence of softmax rows and its gradient with respect to each row of
/// logits.
fn js_from_logits(rows: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let k = rows.len() as f64;
    let logp: Vec<Vec<f64>> = rows.iter().map(|r| log_softmax(r)).collect();
    let p: Vec<Vec<f64>> = logp.iter().map(|l| l.iter().map(|v| v.exp()).collect()).collect();
    let c = rows[0].len();
    let log_m: Vec<f64> = (0..c).map(|j| (p.iter().map(|pi| pi[j]).sum::<f64>() / k).ln()).collect();
    let mut js = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (pi, li) in p.iter().zip(&logp) {
        // d JS / d p_ij = (log p_ij - log m_j) / K, then through the softmax
        let g: Vec<f64> = li.iter().zip(&log_m).map(|(a, b)| (a - b) / k).collect();
        js += pi.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let inner: f64 = pi.iter().zip(&g).map(|(a, b)| a * b).sum();
        grads.push(pi.iter().zip(&g).map(|(a, b)| a * (b - inner)).collect());
    }
    (js.max(0.0), grads)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Original,
    Sada,
    Mix,
}

/// An original image followed by its augmented views, all sharing one label.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub label: usize,
    pub views: Vec<(ViewKind, Image)>,
}

impl ViewSet {
    pub fn new(original: Image, label: usize) -> Self {
        ViewSet { label, views: vec![(ViewKind::Original, original)] }
    }

    pub fn push(&mut self, kind: ViewKind, image: Image) {
        self.views.push((kind, image));
    }

    pub fn original(&self) -> &Image {
        &self.views[0].1
    }

    pub fn n_augments(&self) -> usize {
        self.views.len() - 1
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy of the originals.
    pub ce: f64,
    /// Mean JS over view sets that have augments.
    pub js: f64,
    /// The optimized objective.
    pub total: f64,
    pub correct: usize,
}

/// Objective and parameter gradient for a batch of view sets:
/// mean CE over the ERM views (originals, or every view with
/// `erm_on_augments`) plus `lambda` times the mean JS over augmented sets.
pub fn total_loss(
    model: &ConvNet,
    sets: &[ViewSet],
    lambda: f64,
    erm_on_augments: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if sets.is_empty() {
        return Err(SadaError::EmptyDataset);
    }
    let k = model.spec().classes;
    if let Some(s) = sets.iter().find(|s| s.label >= k) {
        return Err(SadaError::InvalidInput(format!("label {} out of range for {k} classes", s.label)));
    }
    let images: Vec<&Image> = sets.iter().flat_map(|s| s.views.iter().map(|v| &v.1)).collect();
    let pass = model.forward(&images)?;
    let n_ce = if erm_on_augments { images.len() } else { sets.len() } as f64;
    let n_aug = sets.iter().filter(|s| s.n_augments() > 0).count();
    let mut dlogits = vec![0.0; pass.logits.len()];
    let (mut ce_orig, mut ce_term, mut js_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
    let mut row = 0;
    for s in sets {
        let rows: Vec<&[f64]> = (row..row + s.views.len()).map(|r| &pass.logits[r * k..(r + 1) * k]).collect();
        for (v, logits) in rows.iter().enumerate() {
            if v == 0 || erm_on_augments {
                let (loss, g) = cross_entropy(logits, s.label);
                if v == 0 {
                    ce_orig += loss;
                    if argmax(logits) == s.label {
                        correct += 1;
                    }
                }
                ce_term += loss;
                for (d, gv) in dlogits[(row + v) * k..(row + v + 1) * k].iter_mut().zip(g) {
                    *d += gv / n_ce;
                }
            }
        }
        if s.n_augments() > 0 {
            let (js, grads) = js_from_logits(&rows);
            js_sum += js;
            if lambda > 0.0 {
                let w = lambda / n_aug as f64;
                for (v, g) in grads.into_iter().enumerate() {
                    for (d, gv) in dlogits[(row + v) * k..(row + v + 1) * k].iter_mut().zip(g) {
                        *d += w * gv;
                    }
                }
            }
        }
        row += s.views.len();
    }
    let (grad, _) = model.backward(&pass, &dlogits, false);
    let js = if n_aug > 0 { js_sum / n_aug as f64 } else { 0.0 };
    Ok((LossBreakdown { ce: ce_orig / sets.len() as f64, js, total: ce_term / n_ce + lambda * js, correct }, grad))
}

/// Style augmentation supplied from outside the spectral pipeline.
pub trait MixAugmenter: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, image: &Image, rng: &mut ChaCha8Rng) -> Image;
}

/// Random chain of one to `max_depth` operations drawn from autocontrast,
/// solarize and affine jitter. A stand-in for AugMix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandInMix {
    pub max_depth: usize,
    /// Maximum translation in pixels.
    pub max_shift: f64,
    /// Maximum rotation in degrees.
    pub max_rotation: f64,
}

impl Default for StandInMix {
    fn default() -> Self {
        StandInMix { max_depth: 3, max_shift: 2.0, max_rotation: 15.0 }
    }
}

fn autocontrast(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.shape().channels {
        let ch = out.channel_mut(c);
        let (lo, hi) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > lo {
            ch.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

fn solarize(image: &Image, threshold: f64) -> Image {
    let data = image.data().iter().map(|&v| if v >= threshold { 1.0 - v } else { v }).collect();
    Image::new(image.shape(), data).expect("same shape")
}

/// Rotation about the center plus translation, bilinear, zero fill.
fn affine(image: &Image, angle: f64, dx: f64, dy: f64) -> Image {
    let s = image.shape();
    let (h, w) = (s.height, s.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Image::zeros(s);
    for c in 0..s.channels {
        let src = image.channel(c);
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                // inverse map from output to source coordinates
                let (ty, tx) = (y as f64 - cy - dy, x as f64 - cx - dx);
                let sy = cos * ty - sin * tx + cy;
                let sx = sin * ty + cos * tx + cx;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                dst[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            }
        }
    }
    out
}

impl MixAugmenter for StandInMix {
    fn name(&self) -> &str {
        "stand_in_mix"
    }

    fn apply(&self, image: &Image, rng: &mut ChaCha8Rng) -> Image {
        let depth = rng.random_range(1..=self.max_depth.max(1));
        let mut out = image.clone();
        for _ in 0..depth {
            out = match rng.random_range(0..3) {
                0 => autocontrast(&out),
                1 => solarize(&out, rng.random_range(0.5..1.0)),
                _ => {
                    let angle = rng.random_range(-1.0..=1.0) * self.max_rotation.to_radians();
                    let dx = rng.random_range(-1.0..=1.0) * self.max_shift;
                    let dy = rng.random_range(-1.0..=1.0) * self.max_shift;
                    affine(&out, angle, dx, dy)
                }
            };
        }
        out.clamp_unit()
    }
}

/// Which weights the adversarial loop differentiates during finetuning.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackModel {
    /// The model being trained.
    #[default]
    Live,
    /// The starting weights.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    /// Fraction of training samples that receive augmented views.
    pub aug_fraction: f64,
    /// Recompute the sensitivity map from the live model every this many
    /// epochs; 0 keeps the initial map.
    #[serde(default)]
    pub refresh_every: usize,
    #[serde(default = "default_refresh_fraction")]
    pub refresh_fraction: f64,
    #[serde(default)]
    pub erm_on_augments: bool,
    #[serde(default)]
    pub attack_model: AttackModel,
}

fn default_refresh_fraction() -> f64 {
    0.02
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.25,
            optimizer: OptimizerConfig { epochs: 3, lr: 0.005, ..Default::default() },
            augmentation: AugmentationConfig::default(),
            aug_fraction: 1.0,
            refresh_every: 0,
            refresh_fraction: default_refresh_fraction(),
            erm_on_augments: false,
            attack_model: AttackModel::Live,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SadaError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.aug_fraction > 0.0 && self.aug_fraction <= 1.0) {
            return Err(SadaError::Config(format!("aug_fraction must be in (0, 1], got {}", self.aug_fraction)));
        }
        if !(self.refresh_fraction > 0.0 && self.refresh_fraction <= 1.0) {
            return Err(SadaError::Config(format!(
                "refresh_fraction must be in (0, 1], got {}",
                self.refresh_fraction
            )));
        }
        self.optimizer.validate()?;
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SadaEpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub js: f64,
    pub train_acc: f64,
    pub lr: f64,
    /// Share of adversarial views whose prediction differs from the clean one.
    pub flip_rate: f64,
    pub mean_steps: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SadaCurve {
    pub epochs: Vec<SadaEpochLog>,
}

/// Stream seeds for view generation: one counter-based stream per
/// (epoch, sample, view), so views do not depend on batch composition.
fn view_rng(seed: u64, epoch: usize, sample: usize, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ada_5ada_5ada_5ada);
    rng.set_stream(((epoch as u64) << 40) | ((sample as u64) << 8) | view as u64);
    rng
}

/// Fixed subset of sample indices that receive augmented views.
fn augmented_subset(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let count = (fraction * n as f64).round() as usize;
    let mut mask = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_0ca7e);
    for i in rand::seq::index::sample(&mut rng, n, count.min(n)) {
        mask[i] = true;
    }
    mask
}

/// Finetunes `base` on `dataset` with consistency-regularized views.
///
/// Each batch builds `n_sada` adversarial views from the sensitivity map and
/// `n_mix` views from `mix` for the samples in the augmented subset; samples
/// outside it, and batches without any, follow the plain ERM step exactly.
/// One JSON object per epoch is written to `metrics` when given.
pub fn train_sada(
    base: ConvNet,
    dataset: &Dataset,
    map: Option<&SensitivityMap>,
    config: &TrainConfig,
    mix: &dyn MixAugmenter,
    mut metrics: Option<&mut dyn Write>,
) -> Result<(ConvNet, SadaCurve)> {
    config.validate()?;
    check_labels(dataset, base.spec().classes)?;
    let split = config.augmentation.mix_split;
    let shape = base.spec().input;
    let mut map_values = match map {
        Some(m) => {
            m.validate()?;
            if m.values.height != shape.height || m.values.width != shape.width {
                return Err(SadaError::shape(
                    format!("{}x{} sensitivity map", shape.height, shape.width),
                    format!("{}x{}", m.values.height, m.values.width),
                ));
            }
            Some(m.values.clone())
        }
        None if split.n_sada > 0 => return Err(SadaError::MissingSensitivityMap),
        None => None,
    };
    let frozen = (config.attack_model == AttackModel::Frozen).then(|| base.clone());
    let mut model = base;
    let opt_cfg = &config.optimizer;
    let mut opt = Optimizer::new(opt_cfg.clone(), model.n_params());
    let augmented = augmented_subset(dataset.len(), config.aug_fraction, opt_cfg.seed);
    let mut curve = SadaCurve::default();
    let start = Instant::now();

    for epoch in 0..opt_cfg.epochs {
        if config.refresh_every > 0 && epoch > 0 && epoch % config.refresh_every == 0 && split.n_sada > 0 {
            let old = map.expect("checked above");
            let noise = match old.meta.kind {
                MapKind::Original => NoiseModel::Original { epsilon: old.meta.epsilon.unwrap_or(0.0) },
                MapKind::AmplitudeModulated => NoiseModel::AmplitudeModulated {
                    d: mean_amplitude(dataset.images.iter(), &dataset.fingerprint())?,
                    scale: old.meta.d_scale.unwrap_or_default(),
                },
            };
            let options = MapOptions { seed: old.meta.seed, sample_fraction: config.refresh_fraction };
            let fresh = compute_map(&model, dataset, &noise, options).map_err(|e| SadaError::Stage {
                stage: format!("map refresh at epoch {epoch}"),
                message: e.to_string(),
            })?;
            map_values = Some(fresh.values);
        }
        let lr = opt_cfg.lr_at(epoch);
        let order = epoch_order(dataset.len(), opt_cfg.seed, epoch);
        let (mut ce_sum, mut js_sum, mut n_js, mut correct) = (0.0, 0.0, 0usize, 0usize);
        let (mut flips, mut steps, mut n_sada) = (0usize, 0usize, 0usize);
        for (step, batch) in order.chunks(opt_cfg.batch_size).enumerate() {
            let aug_idx: Vec<usize> = batch.iter().copied().filter(|&i| augmented[i]).collect();
            if aug_idx.is_empty() {
                let images: Vec<&Image> = batch.iter().map(|&i| &dataset.images[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
                let s = erm_step(&model, &images, &labels)?;
                if !s.loss_sum.is_finite() {
                    return Err(SadaError::Diverged { epoch, step, loss: s.loss_sum });
                }
                ce_sum += s.loss_sum;
                correct += s.correct;
                opt.step(model.params_mut(), &s.grad, lr);
                continue;
            }
            let mut sets: Vec<ViewSet> =
                batch.iter().map(|&i| ViewSet::new(dataset.images[i].clone(), dataset.labels[i])).collect();
            let pos: Vec<usize> = batch.iter().enumerate().filter(|(_, &i)| augmented[i]).map(|(p, _)| p).collect();
            let attacker = frozen.as_ref().unwrap_or(&model);
            for v in 0..split.n_sada {
                let imgs: Vec<&Image> = aug_idx.iter().map(|&i| &dataset.images[i]).collect();
                let labels: Vec<usize> = aug_idx.iter().map(|&i| dataset.labels[i]).collect();
                let mut rngs: Vec<ChaCha8Rng> = aug_idx.iter().map(|&i| view_rng(opt_cfg.seed, epoch, i, v)).collect();
                let mut refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
                let out = augment_batch(
                    &imgs,
                    &labels,
                    attacker,
                    map_values.as_ref().expect("map present"),
                    &config.augmentation,
                    &mut refs,
                )
                .map_err(|e| SadaError::Stage {
                    stage: format!("augmentation, epoch {epoch} batch {step}"),
                    message: e.to_string(),
                })?;
                for (&p, (img, trace)) in pos.iter().zip(out) {
                    tally(&trace, &mut flips, &mut steps, &mut n_sada);
                    sets[p].push(ViewKind::Sada, img);
                }
            }
            for v in 0..split.n_mix {
                for (&p, &i) in pos.iter().zip(&aug_idx) {
                    let img = mix.apply(&dataset.images[i], &mut view_rng(opt_cfg.seed, epoch, i, split.n_sada + v));
                    sets[p].push(ViewKind::Mix, img);
                }
            }
            let (loss, grad) = total_loss(&model, &sets, config.lambda, config.erm_on_augments)?;
            if !loss.total.is_finite() {
                return Err(SadaError::Diverged { epoch, step, loss: loss.total });
            }
            ce_sum += loss.ce * sets.len() as f64;
            js_sum += loss.js * pos.len() as f64;
            n_js += pos.len();
            correct += loss.correct;
            opt.step(model.params_mut(), &grad, lr);
        }
        let log = SadaEpochLog {
            epoch,
            ce: ce_sum / dataset.len() as f64,
            js: if n_js > 0 { js_sum / n_js as f64 } else { 0.0 },
            train_acc: correct as f64 / dataset.len() as f64,
            lr,
            flip_rate: if n_sada > 0 { flips as f64 / n_sada as f64 } else { 0.0 },
            mean_steps: if n_sada > 0 { steps as f64 / n_sada as f64 } else { 0.0 },
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "sada epoch {epoch}: ce {:.4} js {:.4} acc {:.4} flips {:.3}",
            log.ce,
            log.js,
            log.train_acc,
            log.flip_rate
        );
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&log)?;
            writeln!(w, "{line}")
                .map_err(|e| SadaError::Stage { stage: "metrics stream".into(), message: e.to_string() })?;
        }
        curve.epochs.push(log);
    }
    Ok((model, curve))
}

fn tally(trace: &AugmentationTrace, flips: &mut usize, steps: &mut usize, n: &mut usize) {
    *flips += trace.prediction_changed as usize;
    *steps += trace.steps_taken;
    *n += 1;
}
