//! Frequency-space sensitivity maps: the error rate of a model on images
//! perturbed by one Fourier basis image at a time.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SadaError};
use crate::grid::{read_json, write_json, Grid};
use crate::model::{argmax, ModelOracle};
use crate::spectral::{BasisBank, Image, MeanAmplitudeSpectrum};

/// How the per-bin noise magnitude is chosen.
#[derive(Clone, Debug)]
pub enum NoiseModel {
    /// Constant l2 norm `epsilon` at every frequency.
    Original { epsilon: f64 },
    /// Norm `D(i, j)` taken from the mean source amplitude spectrum.
    AmplitudeModulated { d: MeanAmplitudeSpectrum, scale: DScale },
}

impl NoiseModel {
    pub fn modulated(d: MeanAmplitudeSpectrum) -> Self {
        NoiseModel::AmplitudeModulated { d, scale: DScale::default() }
    }
}

/// Magnitude convention for `D` when it is used as a noise norm.
///
/// Spectra are stored orthonormally; an unnormalized forward transform
/// reports amplitudes `sqrt(H * W)` times larger. Only the unnormalized
/// magnitude produces perturbations strong enough to separate frequencies
/// on small grayscale digits, so it is the default.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DScale {
    Orthonormal,
    #[default]
    Unnormalized,
}

impl DScale {
    pub fn gain(self, height: usize, width: usize) -> f64 {
        match self {
            DScale::Orthonormal => 1.0,
            DScale::Unnormalized => ((height * width) as f64).sqrt(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Original,
    AmplitudeModulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub kind: MapKind,
    pub epsilon: Option<f64>,
    #[serde(rename = "D_fingerprint")]
    pub d_fingerprint: Option<String>,
    #[serde(rename = "D_scale", default, skip_serializing_if = "Option::is_none")]
    pub d_scale: Option<DScale>,
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub fraction: f64,
    pub n_samples_per_bin: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub values: Grid,
    pub meta: MapMetadata,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MapOptions {
    pub seed: u64,
    /// Fraction of the dataset evaluated per bin, in `(0, 1]`.
    pub sample_fraction: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { seed: 0, sample_fraction: 1.0 }
    }
}

/// Evaluates the model's error rate under basis noise at every frequency.
///
/// Conjugate bins share one basis image, so each pair is evaluated once and
/// mirrored. Each pair draws its subsample and signs from its own ChaCha
/// stream, which makes the map independent of evaluation order and worker
/// count. Workers run in parallel only for reentrant oracles.
pub fn compute_map(
    model: &dyn ModelOracle,
    dataset: &Dataset,
    noise: &NoiseModel,
    options: MapOptions,
) -> Result<SensitivityMap> {
    if dataset.is_empty() {
        return Err(SadaError::EmptyDataset);
    }
    if !(options.sample_fraction > 0.0 && options.sample_fraction <= 1.0) {
        return Err(SadaError::Config(format!("sample_fraction must be in (0, 1], got {}", options.sample_fraction)));
    }
    let shape = model.input_shape();
    if let Some((i, img)) = dataset.images.iter().enumerate().find(|(_, im)| im.shape() != shape) {
        return Err(SadaError::shape(format!("model input {shape}"), format!("image {i}: {}", img.shape())));
    }
    if let NoiseModel::AmplitudeModulated { d, .. } = noise {
        if d.values.height != shape.height || d.values.width != shape.width {
            return Err(SadaError::shape(
                format!("{}x{} mean amplitude grid", shape.height, shape.width),
                format!("{}x{}", d.values.height, d.values.width),
            ));
        }
    }
    if let NoiseModel::Original { epsilon } = noise {
        if !(*epsilon >= 0.0) {
            return Err(SadaError::Config(format!("epsilon must be >= 0, got {epsilon}")));
        }
    }

    let bank = BasisBank::new(shape.height, shape.width);
    let n = dataset.len();
    let per_bin = ((options.sample_fraction * n as f64).round() as usize).clamp(1, n);

    let evaluate = |pair_idx: usize| -> Result<f64> {
        let pair = bank.pairs[pair_idx];
        let basis = &bank.pixels[pair_idx];
        let scale = match noise {
            NoiseModel::Original { epsilon } => *epsilon,
            NoiseModel::AmplitudeModulated { d, scale } => {
                d.values.get(pair.index.0, pair.index.1) * scale.gain(shape.height, shape.width)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(pair_idx as u64);
        let chosen: Vec<usize> = if per_bin == n {
            (0..n).collect()
        } else {
            let mut v = index::sample(&mut rng, n, per_bin).into_vec();
            v.sort_unstable();
            v
        };
        let mut errors = 0usize;
        for chunk in chosen.chunks(crate::model::EVAL_CHUNK) {
            let perturbed: Vec<Image> = chunk
                .iter()
                .map(|&k| {
                    let mut img = dataset.images[k].clone();
                    for c in 0..shape.channels {
                        let r = if rng.random::<bool>() { scale } else { -scale };
                        for (p, b) in img.channel_mut(c).iter_mut().zip(basis) {
                            *p += r * b;
                        }
                    }
                    img
                })
                .collect();
            let refs: Vec<&Image> = perturbed.iter().collect();
            let probs = model.predict_proba(&refs).map_err(|e| {
                let (i, j) = bank.grid.frequency_of(pair.index.0, pair.index.1);
                SadaError::oracle(format!("sensitivity bin ({i}, {j})"), e)
            })?;
            errors += probs.iter().zip(chunk).filter(|(row, &k)| argmax(row) != dataset.labels[k]).count();
        }
        Ok(errors as f64 / chosen.len() as f64)
    };

    let n_pairs = bank.pairs.len();
    let workers =
        if model.is_reentrant() { std::thread::available_parallelism().map_or(1, |p| p.get()).min(n_pairs) } else { 1 };
    let rates: Vec<f64> = if workers <= 1 {
        (0..n_pairs).map(evaluate).collect::<Result<_>>()?
    } else {
        let per = n_pairs.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let eval = &evaluate;
                    s.spawn(move || (w * per..((w + 1) * per).min(n_pairs)).map(eval).collect::<Result<Vec<f64>>>())
                })
                .collect();
            let mut all = Vec::with_capacity(n_pairs);
            for h in handles {
                all.extend(h.join().expect("sensitivity worker panicked")?);
            }
            Ok::<_, SadaError>(all)
        })?
    };

    let mut values = Grid::zeros(shape.height, shape.width);
    for (pair, rate) in bank.pairs.iter().zip(rates) {
        values.set(pair.index.0, pair.index.1, rate);
        values.set(pair.twin.0, pair.twin.1, rate);
    }
    let (kind, epsilon, d_fingerprint, d_scale) = match noise {
        NoiseModel::Original { epsilon } => (MapKind::Original, Some(*epsilon), None, None),
        NoiseModel::AmplitudeModulated { d, scale } => {
            (MapKind::AmplitudeModulated, None, Some(d.fingerprint()), Some(*scale))
        }
    };
    Ok(SensitivityMap {
        values,
        meta: MapMetadata {
            kind,
            epsilon,
            d_fingerprint,
            d_scale,
            model_fingerprint: model.fingerprint(),
            dataset_fingerprint: dataset.fingerprint(),
            seed: options.seed,
            fraction: options.sample_fraction,
            n_samples_per_bin: per_bin,
        },
    })
}

/// Mean absolute bin value.
pub fn map_l1_summary(map: &SensitivityMap) -> f64 {
    map.values.values.iter().map(|v| v.abs()).sum::<f64>() / map.values.values.len() as f64
}

/// Mean over the central `H/2 x W/2` block (low frequencies) and over its
/// complement.
pub fn central_and_outer_means(grid: &Grid) -> (f64, f64) {
    let (h, w) = (grid.height, grid.width);
    let (r0, c0) = (h / 2 - h / 4, w / 2 - w / 4);
    let (r1, c1) = (r0 + h / 2, c0 + w / 2);
    let (mut inner, mut ni, mut outer, mut no) = (0.0, 0usize, 0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            let v = grid.get(r, c);
            if (r0..r1).contains(&r) && (c0..c1).contains(&c) {
                inner += v;
                ni += 1;
            } else {
                outer += v;
                no += 1;
            }
        }
    }
    (inner / ni.max(1) as f64, outer / no.max(1) as f64)
}

impl SensitivityMap {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.values.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SadaError::InvalidInput(format!("sensitivity value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.png`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.values.write_csv(&dir.join(format!("{stem}.csv")))?;
        write_json(&dir.join(format!("{stem}.json")), &self.meta)?;
        map_to_heatmap(self, &dir.join(format!("{stem}.png")), HEATMAP_CELL)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let csv = dir.join(format!("{stem}.csv"));
        if !csv.exists() {
            return Err(SadaError::MissingSensitivityMap);
        }
        let map = SensitivityMap { values: Grid::read_csv(&csv)?, meta: read_json(&dir.join(format!("{stem}.json")))? };
        map.validate()?;
        Ok(map)
    }
}

/// Heatmap pixels per frequency bin.
pub const HEATMAP_CELL: u32 = 8;

const COLORMAP: [[f64; 3]; 5] =
    [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];

/// Maps `[0, 1]` onto a viridis-like ramp; values outside are clamped.
pub fn colormap(value: f64) -> [u8; 3] {
    let t = value.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let lo = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - lo as f64;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = (COLORMAP[lo][ch] * (1.0 - f) + COLORMAP[lo + 1][ch] * f).round() as u8;
    }
    out
}

/// Renders the map as a PNG with DC at the center and a fixed `[0, 1]` scale.
pub fn map_to_heatmap(map: &SensitivityMap, path: &Path, cell: u32) -> Result<()> {
    let g = &map.values;
    let img = image::RgbImage::from_fn(g.width as u32 * cell, g.height as u32 * cell, |x, y| {
        image::Rgb(colormap(g.get((y / cell) as usize, (x / cell) as usize)))
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
