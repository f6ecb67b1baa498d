//! Spectral adversarial augmentation: sign-gradient ascent on the amplitude
//! spectrum with the phase held fixed, weighted by a sensitivity map.

use std::path::Path;

use log::warn;
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SadaError};
use crate::grid::{write_json, Fingerprinter, Grid};
use crate::model::{argmax, ModelOracle};
use crate::spectral::{decompose, synthesize, Fft2, FrequencyGrid, Image, Shape};

/// Number of adversarial and mix views generated per sample.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSplit {
    pub n_sada: usize,
    pub n_mix: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub n_augments: usize,
    pub mix_split: MixSplit,
    /// Reconstruct from the amplitude after the final step when the loop
    /// runs out of steps, instead of returning the last checked image.
    #[serde(default)]
    pub materialize_last_step: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            epsilon: 0.2,
            delta: 0.08,
            steps: 5,
            n_augments: 3,
            mix_split: MixSplit { n_sada: 3, n_mix: 0 },
            materialize_last_step: false,
        }
    }
}

impl AugmentationConfig {
    pub fn with_split(n_sada: usize, n_mix: usize) -> Self {
        AugmentationConfig { n_augments: n_sada + n_mix, mix_split: MixSplit { n_sada, n_mix }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SadaError::Config(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if self.n_augments == 0 {
            return bad("n_augments must be >= 1; express mix-only runs as mix_split (0, n)".into());
        }
        if self.mix_split.n_sada + self.mix_split.n_mix != self.n_augments {
            return bad(format!(
                "mix_split ({}, {}) does not sum to n_augments {}",
                self.mix_split.n_sada, self.mix_split.n_mix, self.n_augments
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Fingerprinter::new("augmentation-config");
        h.str(&serde_json::to_string(self).expect("config serializes"));
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationTrace {
    pub steps_taken: usize,
    pub early_stopped: bool,
    /// Cross-entropy on the clean image.
    pub initial_ce: f64,
    /// Cross-entropy on the returned image.
    pub final_ce: f64,
    /// Returned image's top-1 prediction differs from the clean prediction.
    pub prediction_changed: bool,
    pub clean_prediction: usize,
    pub final_prediction: usize,
}

/// Multiplies every amplitude by `1 + u`, `u ~ Unif(-eps, eps)`, with one
/// draw per conjugate pair and channel so the result stays Hermitian.
/// Negative results (possible only for `eps > 1`) are clipped to 0.
pub fn init_amplitude<R: Rng + ?Sized>(amplitude: &[f64], shape: Shape, epsilon: f64, rng: &mut R) -> Result<Vec<f64>> {
    if amplitude.len() != shape.len() {
        return Err(SadaError::shape(format!("{} amplitudes for {shape}", shape.len()), amplitude.len().to_string()));
    }
    if let Some(a) = amplitude.iter().find(|a| !(**a >= 0.0)) {
        return Err(SadaError::InvalidInput(format!("amplitude {a} is negative")));
    }
    if !(epsilon >= 0.0) {
        return Err(SadaError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon > 1.0 {
        warn!("epsilon {epsilon} > 1 can produce negative amplitudes; they are clipped to 0");
    }
    let grid = FrequencyGrid::new(shape.height, shape.width);
    let pairs = grid.canonical_pairs();
    let unif = Uniform::new_inclusive(-epsilon, epsilon).expect("finite range");
    let n = shape.plane_len();
    let mut out = amplitude.to_vec();
    for c in 0..shape.channels {
        for pair in &pairs {
            let u = unif.sample(rng);
            let (a, b) = (pair.index.0 * shape.width + pair.index.1, pair.twin.0 * shape.width + pair.twin.1);
            out[c * n + a] = (amplitude[c * n + a] * (1.0 + u)).max(0.0);
            out[c * n + b] = (amplitude[c * n + b] * (1.0 + u)).max(0.0);
        }
    }
    Ok(out)
}

/// Gradient of cross-entropy on the unclamped reconstruction with respect to
/// the amplitude, averaged over each conjugate pair.
pub fn amplitude_gradient(
    model: &dyn ModelOracle,
    amplitude: &[f64],
    phase: &[f64],
    shape: Shape,
    label: usize,
) -> Result<Vec<f64>> {
    let recon = synthesize(shape, amplitude, phase)?.image;
    let g = model.loss_and_gradient(&[&recon], &[label])?.pop().expect("one gradient per input");
    Ok(gradient_from_pixels(&g.gradient, phase, shape))
}

/// Pulls a pixel-space gradient back to the amplitude: `Re(e^{-iP} F(g))`
/// with `F` the orthonormal centered transform, then pair-symmetrized.
pub(crate) fn gradient_from_pixels(pixel_grad: &Image, phase: &[f64], shape: Shape) -> Vec<f64> {
    let fft = Fft2::cached(shape.height, shape.width);
    let grid = FrequencyGrid::new(shape.height, shape.width);
    let n = shape.plane_len();
    let mut out = vec![0.0; shape.len()];
    for c in 0..shape.channels {
        let spec = fft.forward_centered(pixel_grad.channel(c));
        let ph = &phase[c * n..(c + 1) * n];
        let raw: Vec<f64> = spec.iter().zip(ph).map(|(g, &p)| g.re * p.cos() + g.im * p.sin()).collect();
        let dst = &mut out[c * n..(c + 1) * n];
        for u in 0..shape.height {
            for v in 0..shape.width {
                let (tu, tv) = grid.twin(u, v);
                dst[u * shape.width + v] = 0.5 * (raw[u * shape.width + v] + raw[tu * shape.width + tv]);
            }
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `A <- max(0, A * (1 + delta * sign(grad) * M))`, with `sign(0) = 0` and
/// the 2-D map broadcast over channels.
pub fn sign_step(amplitude: &mut [f64], grad: &[f64], map: &Grid, delta: f64, shape: Shape) -> Result<()> {
    if map.height != shape.height || map.width != shape.width {
        return Err(SadaError::shape(
            format!("{}x{} sensitivity grid", shape.height, shape.width),
            format!("{}x{}", map.height, map.width),
        ));
    }
    if amplitude.len() != shape.len() || grad.len() != shape.len() {
        return Err(SadaError::shape(format!("{} bins", shape.len()), format!("{} / {}", amplitude.len(), grad.len())));
    }
    let n = shape.plane_len();
    for (k, (a, g)) in amplitude.iter_mut().zip(grad).enumerate() {
        *a = (*a * (1.0 + delta * sign(*g) * map.values[k % n])).max(0.0);
    }
    Ok(())
}

/// One ascent step on the amplitude of `label`'s cross-entropy.
pub fn adversarial_step(
    model: &dyn ModelOracle,
    amplitude: &[f64],
    phase: &[f64],
    shape: Shape,
    label: usize,
    map: &Grid,
    delta: f64,
) -> Result<Vec<f64>> {
    let grad = amplitude_gradient(model, amplitude, phase, shape, label)?;
    let mut next = amplitude.to_vec();
    sign_step(&mut next, &grad, map, delta, shape)?;
    Ok(next)
}

fn ce_of(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

struct SampleState {
    label: usize,
    amplitude: Vec<f64>,
    clean_prediction: usize,
    initial_ce: f64,
    steps_taken: usize,
    early_stopped: bool,
    last: Option<(Image, Vec<f64>)>,
}

/// Augments one image; see [`augment_batch`].
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    label: usize,
    model: &dyn ModelOracle,
    map: &Grid,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Image, AugmentationTrace)> {
    let mut out = augment_batch(&[image], &[label], model, map, config, &mut [rng])?;
    Ok(out.pop().expect("one result per input"))
}

/// Runs the adversarial loop for several samples in lockstep so model calls
/// are batched. Per sample:
///
/// 1. decompose, perturb the amplitude randomly;
/// 2. up to `T` times: reconstruct and clamp, stop if the prediction differs
///    from the clean prediction, else take one sign-gradient step computed on
///    the unclamped reconstruction;
/// 3. return the last clamped reconstruction.
///
/// Each sample consumes randomness only from its own generator.
pub fn augment_batch<R: Rng + ?Sized>(
    images: &[&Image],
    labels: &[usize],
    model: &dyn ModelOracle,
    map: &Grid,
    config: &AugmentationConfig,
    rngs: &mut [&mut R],
) -> Result<Vec<(Image, AugmentationTrace)>> {
    if images.len() != labels.len() || images.len() != rngs.len() {
        return Err(SadaError::shape(
            format!("{} labels and generators", images.len()),
            format!("{} labels, {} generators", labels.len(), rngs.len()),
        ));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.input_shape();
    if map.height != shape.height || map.width != shape.width {
        return Err(SadaError::shape(
            format!("{}x{} sensitivity grid", shape.height, shape.width),
            format!("{}x{}", map.height, map.width),
        ));
    }
    let ctx = |k: usize, e: SadaError| SadaError::oracle(format!("augmenting sample {k}"), e);
    let clean = model.predict_proba(images).map_err(|e| ctx(0, e))?;
    // phases are bound immutably for the whole loop
    let mut phases = Vec::with_capacity(images.len());
    let mut states = Vec::with_capacity(images.len());
    for (k, ((img, &label), rng)) in images.iter().zip(labels).zip(rngs.iter_mut()).enumerate() {
        if img.shape() != shape {
            return Err(SadaError::shape(format!("model input {shape}"), format!("sample {k}: {}", img.shape())));
        }
        if label >= model.num_classes() {
            return Err(SadaError::InvalidInput(format!(
                "sample {k}: label {label} >= {} classes",
                model.num_classes()
            )));
        }
        let spectrum = decompose(img)?;
        let amplitude = init_amplitude(&spectrum.amplitude, shape, config.epsilon, &mut **rng)?;
        phases.push(spectrum.phase);
        states.push(SampleState {
            label,
            amplitude,
            clean_prediction: argmax(&clean[k]),
            initial_ce: ce_of(&clean[k], label),
            steps_taken: 0,
            early_stopped: false,
            last: None,
        });
    }
    let phases: &[Vec<f64>] = &phases;

    let mut active: Vec<usize> = (0..states.len()).collect();
    for _ in 0..config.steps {
        if active.is_empty() {
            break;
        }
        let checked: Vec<Image> = active
            .iter()
            .map(|&k| Ok(synthesize(shape, &states[k].amplitude, &phases[k])?.image.clamp_unit()))
            .collect::<Result<_>>()?;
        let probs = model.predict_proba(&checked.iter().collect::<Vec<_>>()).map_err(|e| ctx(active[0], e))?;
        let mut still = Vec::with_capacity(active.len());
        for ((&k, img), p) in active.iter().zip(checked).zip(probs) {
            let s = &mut states[k];
            let changed = argmax(&p) != s.clean_prediction;
            s.last = Some((img, p));
            if changed {
                s.early_stopped = true;
            } else {
                still.push(k);
            }
        }
        active = still;
        if active.is_empty() {
            break;
        }
        let raw: Vec<Image> = active
            .iter()
            .map(|&k| Ok(synthesize(shape, &states[k].amplitude, &phases[k])?.image))
            .collect::<Result<_>>()?;
        let lbl: Vec<usize> = active.iter().map(|&k| states[k].label).collect();
        let grads = model.loss_and_gradient(&raw.iter().collect::<Vec<_>>(), &lbl).map_err(|e| ctx(active[0], e))?;
        for (&k, g) in active.iter().zip(grads) {
            let s = &mut states[k];
            let grad = gradient_from_pixels(&g.gradient, &phases[k], shape);
            sign_step(&mut s.amplitude, &grad, map, config.delta, shape)?;
            s.steps_taken += 1;
        }
    }

    // samples whose output is the current amplitude still need a prediction
    let fresh: Vec<usize> = (0..states.len())
        .filter(|&k| !states[k].early_stopped && (states[k].last.is_none() || config.materialize_last_step))
        .collect();
    if !fresh.is_empty() {
        let imgs: Vec<Image> = fresh
            .iter()
            .map(|&k| Ok(synthesize(shape, &states[k].amplitude, &phases[k])?.image.clamp_unit()))
            .collect::<Result<_>>()?;
        let probs = model.predict_proba(&imgs.iter().collect::<Vec<_>>()).map_err(|e| ctx(fresh[0], e))?;
        for ((&k, img), p) in fresh.iter().zip(imgs).zip(probs) {
            states[k].last = Some((img, p));
        }
    }

    Ok(states
        .into_iter()
        .map(|s| {
            let (img, p) = s.last.expect("every sample has an output");
            let final_prediction = argmax(&p);
            let trace = AugmentationTrace {
                steps_taken: s.steps_taken,
                early_stopped: s.early_stopped,
                initial_ce: s.initial_ce,
                final_ce: ce_of(&p, s.label),
                prediction_changed: final_prediction != s.clean_prediction,
                clean_prediction: s.clean_prediction,
                final_prediction,
            };
            (img, trace)
        })
        .collect())
}

/// Random amplitude perturbation with the original phase, clamped: the
/// adversarial loop with zero steps.
pub fn random_spectral_perturb<R: Rng + ?Sized>(image: &Image, epsilon: f64, rng: &mut R) -> Result<Image> {
    let spectrum = decompose(image)?;
    let amplitude = init_amplitude(&spectrum.amplitude, image.shape(), epsilon, rng)?;
    Ok(synthesize(image.shape(), &amplitude, &spectrum.phase)?.image.clamp_unit())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedItem {
    pub file: String,
    pub source_index: usize,
    pub label: usize,
    pub trace: AugmentationTrace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub config: AugmentationConfig,
    pub config_hash: String,
    pub model_fingerprint: String,
    pub items: Vec<AugmentedItem>,
}

/// Writes one 8-bit PNG per image plus `manifest.json`.
pub fn save_augmented(
    dir: &Path,
    outputs: &[(usize, usize, Image, AugmentationTrace)],
    manifest_base: (&AugmentationConfig, &str),
) -> Result<AugmentManifest> {
    std::fs::create_dir_all(dir).map_err(|e| SadaError::io(dir, e))?;
    let mut items = Vec::with_capacity(outputs.len());
    for (n, (source_index, label, img, trace)) in outputs.iter().enumerate() {
        let file = format!("{n:06}.png");
        save_png(img, &dir.join(&file))?;
        items.push(AugmentedItem { file, source_index: *source_index, label: *label, trace: trace.clone() });
    }
    let manifest = AugmentManifest {
        config: manifest_base.0.clone(),
        config_hash: manifest_base.0.fingerprint(),
        model_fingerprint: manifest_base.1.to_string(),
        items,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Quantizes a `[0, 1]` image to an 8-bit grayscale or RGB PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let s = img.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (s.width as u32, s.height as u32);
    if s.channels == 1 {
        let buf = image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(img.data()[(y * w + x) as usize])]));
        buf.save_with_format(path, image::ImageFormat::Png)?;
    } else {
        let n = s.plane_len();
        let buf = image::RgbImage::from_fn(w, h, |x, y| {
            let p = (y * w + x) as usize;
            image::Rgb([q(img.data()[p]), q(img.data()[n + p]), q(img.data()[2 * n + p])])
        });
        buf.save_with_format(path, image::ImageFormat::Png)?;
    }
    Ok(())
}
