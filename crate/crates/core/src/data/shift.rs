//! Synthetic domain shifts and stand-in corruptions.
//!
//! The corruption kernels are parameterized stand-ins for the noise, blur and
//! digital families of common corruption benchmarks, not exact ports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Result, SadaError};
use crate::spectral::{decompose, synthesize, FrequencyGrid, Image, SpectrumPair};

/// Amplitude multiplier for the low-frequency band, by severity 1..=5.
pub const LOWFREQ_SCALE: [f64; 5] = [2.0, 2.5, 3.0, 3.5, 4.0];
/// Gaussian noise standard deviation, by severity.
pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
/// Gaussian blur standard deviation in pixels, by severity.
pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
/// Contrast retained around the image mean, by severity.
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
/// Side of the downsampled grid relative to the original, by severity.
pub const PIXELATE_FRACTION: [f64; 5] = [0.75, 0.6, 0.5, 0.4, 0.3];
/// Half-width of the centered low-frequency band (in frequency bins).
pub const DEFAULT_BAND_RADIUS: usize = 2;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Scale amplitudes inside the centered low-frequency band.
    AmplitudeScaleLowfreq,
    /// Replace band amplitudes with those of another image of the dataset.
    AmplitudeSwap,
    GaussianNoise,
    Blur,
    Contrast,
    Pixelate,
}

impl std::str::FromStr for ShiftKind {
    type Err = SadaError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| SadaError::Config(format!("unknown shift kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub kind: ShiftKind,
    /// 1..=5; 0 is the identity.
    pub severity: u8,
    /// Half-width of the low-frequency band for the amplitude kinds.
    #[serde(default)]
    pub band_radius: Option<usize>,
}

impl DomainShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8) -> Self {
        DomainShiftSpec { kind, severity, band_radius: None }
    }

    pub fn label(&self) -> String {
        let kind =
            serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        format!("{kind}-s{}", self.severity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > 5 {
            return Err(SadaError::Config(format!("severity must be in 0..=5, got {}", self.severity)));
        }
        if self.band_radius == Some(0) {
            return Err(SadaError::Config("band radius must be positive".into()));
        }
        Ok(())
    }

    fn level(&self, table: &[f64; 5]) -> f64 {
        table[self.severity as usize - 1]
    }

    fn band(&self, grid: &FrequencyGrid) -> Result<usize> {
        let r = self.band_radius.unwrap_or(DEFAULT_BAND_RADIUS);
        if r > grid.height / 2 || r > grid.width / 2 {
            return Err(SadaError::InvalidInput(format!(
                "band radius {r} exceeds the {}x{} frequency grid",
                grid.height, grid.width
            )));
        }
        Ok(r)
    }
}

fn in_band(grid: &FrequencyGrid, u: usize, v: usize, r: usize) -> bool {
    let (i, j) = grid.frequency_of(u, v);
    i.unsigned_abs() as usize <= r && j.unsigned_abs() as usize <= r
}

/// Amplitude-domain shift applied to one image's spectrum, before clamping.
/// `reference` supplies the donor amplitudes for [`ShiftKind::AmplitudeSwap`].
pub fn shift_spectrum(image: &Image, spec: &DomainShiftSpec, reference: Option<&Image>) -> Result<SpectrumPair> {
    spec.validate()?;
    let mut spectrum = decompose(image)?;
    if spec.severity == 0 {
        return Ok(spectrum);
    }
    let shape = spectrum.shape;
    let grid = FrequencyGrid::new(shape.height, shape.width);
    let r = spec.band(&grid)?;
    let n = shape.plane_len();
    match spec.kind {
        ShiftKind::AmplitudeScaleLowfreq => {
            let factor = spec.level(&LOWFREQ_SCALE);
            for c in 0..shape.channels {
                for u in 0..shape.height {
                    for v in 0..shape.width {
                        if in_band(&grid, u, v, r) {
                            spectrum.amplitude[c * n + u * shape.width + v] *= factor;
                        }
                    }
                }
            }
        }
        ShiftKind::AmplitudeSwap => {
            let donor = decompose(
                reference.ok_or_else(|| SadaError::InvalidInput("amplitude swap needs a reference image".into()))?,
            )?;
            if donor.shape != shape {
                return Err(SadaError::shape(shape.to_string(), donor.shape.to_string()));
            }
            // severity widens the swapped band from 1 bin up to the configured radius
            let radius = ((r * spec.severity as usize) / 5).max(1);
            for c in 0..shape.channels {
                for u in 0..shape.height {
                    for v in 0..shape.width {
                        if in_band(&grid, u, v, radius) {
                            let k = c * n + u * shape.width + v;
                            spectrum.amplitude[k] = donor.amplitude[k];
                        }
                    }
                }
            }
        }
        other => {
            return Err(SadaError::InvalidInput(format!("{other:?} is not an amplitude-domain shift")));
        }
    }
    Ok(spectrum)
}

/// Applies one shift to one image. `rng` drives the stochastic kinds.
pub fn shift_image(
    image: &Image,
    spec: &DomainShiftSpec,
    reference: Option<&Image>,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    spec.validate()?;
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let out = match spec.kind {
        ShiftKind::AmplitudeScaleLowfreq | ShiftKind::AmplitudeSwap => {
            let s = shift_spectrum(image, spec, reference)?;
            synthesize(s.shape, &s.amplitude, &s.phase)?.image
        }
        ShiftKind::GaussianNoise => {
            let noise = Normal::new(0.0, spec.level(&NOISE_SIGMA)).expect("positive sigma");
            let data = image.data().iter().map(|&p| p + noise.sample(rng)).collect();
            Image::new(image.shape(), data)?
        }
        ShiftKind::Blur => gaussian_blur(image, spec.level(&BLUR_SIGMA)),
        ShiftKind::Contrast => {
            let factor = spec.level(&CONTRAST_FACTOR);
            let mut out = image.clone();
            for c in 0..image.shape().channels {
                let ch = out.channel_mut(c);
                let mean = ch.iter().sum::<f64>() / ch.len() as f64;
                ch.iter_mut().for_each(|p| *p = (*p - mean) * factor + mean);
            }
            out
        }
        ShiftKind::Pixelate => pixelate(image, spec.level(&PIXELATE_FRACTION)),
    };
    Ok(out.clamp_unit())
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let s = image.shape();
    let (h, w) = (s.height as isize, s.width as isize);
    let mut out = image.clone();
    for c in 0..s.channels {
        let src = image.channel(c);
        let mut tmp = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(y * w + (x + k as isize - radius).clamp(0, w - 1)) as usize])
                    .sum();
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[((y + k as isize - radius).clamp(0, h - 1) * w + x) as usize])
                    .sum();
            }
        }
    }
    out
}

/// Box-average down to `fraction` of the side, then nearest-neighbour back up.
fn pixelate(image: &Image, fraction: f64) -> Image {
    let s = image.shape();
    let sh = ((s.height as f64 * fraction).round() as usize).max(1);
    let sw = ((s.width as f64 * fraction).round() as usize).max(1);
    let mut out = image.clone();
    for c in 0..s.channels {
        let src = image.channel(c);
        let mut small = vec![0.0; sh * sw];
        let mut count = vec![0usize; sh * sw];
        for y in 0..s.height {
            for x in 0..s.width {
                let k = (y * sh / s.height) * sw + x * sw / s.width;
                small[k] += src[y * s.width + x];
                count[k] += 1;
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..s.height {
            for x in 0..s.width {
                let k = (y * sh / s.height) * sw + x * sw / s.width;
                dst[y * s.width + x] = small[k] / count[k] as f64;
            }
        }
    }
    out
}

fn apply(dataset: &Dataset, spec: &DomainShiftSpec, seed: u64) -> Result<Vec<Image>> {
    spec.validate()?;
    let n = dataset.len();
    // donor for amplitude swap: a seeded derangement-ish pairing
    let donors: Vec<usize> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edd0_u64);
        (0..n).map(|i| if n > 1 { (i + 1 + rng.random_range(0..n - 1)) % n } else { i }).collect()
    };
    dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            shift_image(img, spec, Some(&dataset.images[donors[i]]), &mut rng)
        })
        .collect()
}

/// Returns `(source, target)`: the base data and a copy with every image
/// shifted. Labels are shared.
pub fn synth_domain_pair(base: &Dataset, shift: &DomainShiftSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if base.is_empty() {
        return Err(SadaError::EmptyDataset);
    }
    let images = apply(base, shift, seed)?;
    let target = Dataset::new(format!("{}-{}", base.name, shift.label()), base.split, images, base.labels.clone())?;
    Ok((base.clone(), target))
}

/// Corrupted copy of `dataset`; deterministic in `(spec, seed)`.
pub fn corrupt(dataset: &Dataset, spec: &DomainShiftSpec, seed: u64) -> Result<Dataset> {
    let images = apply(dataset, spec, seed)?;
    Dataset::new(format!("{}-{}", dataset.name, spec.label()), dataset.split, images, dataset.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::spectral::{Fft2, Shape};

    fn digits_like(n: usize, seed: u64) -> Dataset {
        rings(n, seed, 16)
    }

    /// Rings of radius 3 near the center of a `size x size` canvas.
    fn rings(n: usize, seed: u64, size: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = size as f64 / 2.0;
        let images = (0..n)
            .map(|_| {
                let cy = rng.random_range(mid - 1.0..mid + 1.0);
                let cx = rng.random_range(mid - 1.0..mid + 1.0);
                let data = (0..size * size)
                    .map(|p| {
                        let (y, x) = ((p / size) as f64, (p % size) as f64);
                        let ring = (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - 3.0).abs();
                        (1.0 - ring / 1.5).clamp(0.0, 1.0)
                    })
                    .collect();
                Image::new(Shape::new(1, size, size), data).unwrap()
            })
            .collect();
        Dataset::new("rings", Split::Test, images, (0..n).map(|k| k % 10).collect()).unwrap()
    }

    #[test]
    fn severity_zero_is_identity() {
        let d = digits_like(4, 1);
        for kind in [ShiftKind::AmplitudeScaleLowfreq, ShiftKind::GaussianNoise, ShiftKind::Blur] {
            let (src, tgt) = synth_domain_pair(&d, &DomainShiftSpec::new(kind, 0), 3).unwrap();
            for (a, b) in src.images.iter().zip(&tgt.images) {
                assert!(a.max_abs_diff(b) < 1e-5);
            }
            assert_eq!(src.labels, tgt.labels);
            assert_eq!(corrupt(&d, &DomainShiftSpec::new(kind, 0), 3).unwrap().fingerprint(), d.fingerprint());
        }
    }

    #[test]
    fn lowfreq_scaling_only_touches_the_band() {
        let d = digits_like(3, 2);
        let spec = DomainShiftSpec::new(ShiftKind::AmplitudeScaleLowfreq, 5);
        let grid = FrequencyGrid::new(16, 16);
        for img in &d.images {
            let before = decompose(img).unwrap();
            let after = shift_spectrum(img, &spec, None).unwrap();
            for u in 0..16 {
                for v in 0..16 {
                    let k = u * 16 + v;
                    if in_band(&grid, u, v, DEFAULT_BAND_RADIUS) {
                        assert!((after.amplitude[k] - 4.0 * before.amplitude[k]).abs() < 1e-6);
                    } else {
                        assert!((after.amplitude[k] - before.amplitude[k]).abs() < 1e-6);
                    }
                    assert_eq!(after.phase[k], before.phase[k]);
                }
            }
            // synthesized (pre-clamp) image keeps the phase wherever amplitude is nonzero
            let rec = synthesize(after.shape, &after.amplitude, &after.phase).unwrap();
            let again = decompose(&rec.image).unwrap();
            for k in 0..256 {
                if after.amplitude[k] > 1e-6 {
                    let dphi = (again.phase[k] - after.phase[k] + std::f64::consts::PI)
                        .rem_euclid(2.0 * std::f64::consts::PI)
                        - std::f64::consts::PI;
                    assert!(dphi.abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn oversized_band_is_rejected() {
        let d = digits_like(1, 2);
        let spec = DomainShiftSpec { kind: ShiftKind::AmplitudeScaleLowfreq, severity: 2, band_radius: Some(9) };
        assert!(synth_domain_pair(&d, &spec, 0).is_err());
    }

    #[test]
    fn noise_psnr_decreases_with_severity() {
        let d = digits_like(20, 3);
        let mut last = f64::INFINITY;
        for s in 1..=5 {
            let c = corrupt(&d, &DomainShiftSpec::new(ShiftKind::GaussianNoise, s), 7).unwrap();
            let mse: f64 = d
                .images
                .iter()
                .zip(&c.images)
                .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
                .sum::<f64>()
                / (20.0 * 256.0);
            let psnr = -10.0 * mse.log10();
            assert!(psnr < last, "severity {s}: psnr {psnr} >= {last}");
            last = psnr;
            assert!(c.images.iter().all(|i| i.is_unit_range()));
        }
    }

    fn high_frequency_energy(d: &Dataset) -> f64 {
        let n = d.shape().unwrap().height;
        let grid = FrequencyGrid::new(n, n);
        let fft = Fft2::new(n, n);
        d.images
            .iter()
            .map(|img| {
                let s = fft.forward_centered(img.data());
                (0..n * n).filter(|&k| !in_band(&grid, k / n, k % n, n / 4)).map(|k| s[k].norm_sqr()).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn blur_removes_high_frequencies_with_severity() {
        // wide margin keeps the blur away from the periodic boundary
        let d = rings(10, 4, 32);
        let mut last = high_frequency_energy(&d);
        for s in 1..=5 {
            let c = corrupt(&d, &DomainShiftSpec::new(ShiftKind::Blur, s), 0).unwrap();
            let e = high_frequency_energy(&c);
            assert!(e < last, "severity {s}: {e} vs {last}");
            last = e;
        }
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let d = digits_like(5, 5);
        for kind in [ShiftKind::GaussianNoise, ShiftKind::AmplitudeSwap, ShiftKind::Contrast, ShiftKind::Pixelate] {
            let spec = DomainShiftSpec::new(kind, 3);
            let a = corrupt(&d, &spec, 11).unwrap();
            let b = corrupt(&d, &spec, 11).unwrap();
            assert_eq!(a.fingerprint(), b.fingerprint());
            assert!(a.images.iter().all(|i| i.is_unit_range()));
        }
        let a = corrupt(&d, &DomainShiftSpec::new(ShiftKind::GaussianNoise, 3), 1).unwrap();
        let b = corrupt(&d, &DomainShiftSpec::new(ShiftKind::GaussianNoise, 3), 2).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!("wobble".parse::<ShiftKind>().is_err());
        assert_eq!("gaussian_noise".parse::<ShiftKind>().unwrap(), ShiftKind::GaussianNoise);
        assert!(DomainShiftSpec::new(ShiftKind::Blur, 6).validate().is_err());
    }
}
