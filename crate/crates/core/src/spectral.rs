//! Fourier conventions shared by every other module.
//!
//! All transforms are orthonormal (unitary) in both directions, and spectra
//! are stored in the centered layout: frequency `(0, 0)` sits at grid index
//! `(H / 2, W / 2)`, row `u` holds vertical frequency `u - H / 2`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SadaError};
use crate::grid::{read_json, write_json, Fingerprinter, Grid};

/// Channel/height/width of an image or spectrum.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channels == 1 || self.channels == 3) {
            return Err(SadaError::InvalidInput(format!("images must have 1 or 3 channels, got {}", self.channels)));
        }
        if self.height < 2 || self.width < 2 {
            return Err(SadaError::InvalidInput(format!(
                "images must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real-valued `C x H x W` pixel grid, channel-major.
///
/// Source images live in `[0, 1]`; perturbed copies (image plus basis noise,
/// unclamped reconstructions) may leave that range, so the range is checked by
/// [`Image::validate`] rather than enforced by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(SadaError::shape(
                format!("{shape} = {} pixels", shape.len()),
                format!("{} pixels", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SadaError::InvalidInput(format!("non-finite pixel at flat index {pos}")));
        }
        Ok(Image { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Image { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Image { shape, data: vec![value; shape.len()] }
    }

    /// Builds a single-channel image from an `H x W` grid.
    pub fn from_grid(grid: &Grid) -> Self {
        Image { shape: Shape::new(1, grid.height, grid.width), data: grid.values.clone() }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Checks the full source-image invariants: supported shape, finite
    /// pixels, values in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if let Some(pos) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(SadaError::InvalidInput(format!("pixel {pos} = {} outside [0, 1]", self.data[pos])));
        }
        Ok(())
    }

    pub fn clamp_unit(&self) -> Image {
        Image { shape: self.shape, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Adds the same `H x W` plane to every channel.
    pub fn add_plane(&self, plane: &[f64]) -> Image {
        let n = self.shape.plane_len();
        assert_eq!(plane.len(), n, "plane size mismatch");
        let mut out = self.clone();
        for c in 0..self.shape.channels {
            for (p, v) in out.channel_mut(c).iter_mut().zip(plane) {
                *p += v;
            }
        }
        out
    }

    /// Replicates a grayscale image into three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.shape.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image { shape: Shape::new(3, self.shape.height, self.shape.width), data }
    }
}

/// Per-channel amplitude and phase spectra in the centered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPair {
    pub shape: Shape,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectrumPair {
    pub fn new(shape: Shape, amplitude: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        if amplitude.len() != shape.len() || phase.len() != shape.len() {
            return Err(SadaError::shape(
                format!("amplitude and phase of {} values ({shape})", shape.len()),
                format!("amplitude {} / phase {}", amplitude.len(), phase.len()),
            ));
        }
        Ok(SpectrumPair { shape, amplitude, phase })
    }

    pub fn amplitude_channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.amplitude[c * n..(c + 1) * n]
    }

    pub fn phase_channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.phase[c * n..(c + 1) * n]
    }
}

/// Result of an inverse transform, with the imaginary part that was dropped.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    /// Largest `|Im|` over all pixels of the complex inverse transform.
    pub max_imag_residual: f64,
}

// ---------------------------------------------------------------------------
// Transform plans

/// Cached row/column FFT plans for one grid size.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2>>> = RefCell::new(HashMap::new());
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    /// Thread-local shared plan for the given size.
    pub fn cached(height: usize, width: usize) -> Rc<Fft2> {
        PLANS.with(|plans| {
            plans.borrow_mut().entry((height, width)).or_insert_with(|| Rc::new(Fft2::new(height, width))).clone()
        })
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Orthonormal forward transform of a real plane, returned centered.
    pub fn forward_centered(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        shift(&data, self.height, self.width, Direction::Center)
    }

    /// Orthonormal forward transform of a complex plane, returned centered.
    pub fn forward_complex_centered(&self, plane: &[Complex64]) -> Vec<Complex64> {
        let mut data = plane.to_vec();
        self.transform(&mut data, false);
        shift(&data, self.height, self.width, Direction::Center)
    }

    /// Orthonormal inverse transform of a centered spectrum.
    pub fn inverse_centered(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut data = shift(spectrum, self.height, self.width, Direction::Uncenter);
        self.transform(&mut data, true);
        data
    }
}

#[derive(Copy, Clone)]
enum Direction {
    Center,
    Uncenter,
}

fn shift(data: &[Complex64], h: usize, w: usize, dir: Direction) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for u in 0..h {
        for v in 0..w {
            // centered index u holds raw index (u + H - H/2) mod H
            let a = (u + h - h / 2) % h;
            let b = (v + w - w / 2) % w;
            match dir {
                Direction::Center => out[u * w + v] = data[a * w + b],
                Direction::Uncenter => out[a * w + b] = data[u * w + v],
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Frequency indexing

/// Index arithmetic for a centered `H x W` frequency grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct FrequencyGrid {
    pub height: usize,
    pub width: usize,
}

/// A conjugate bin pair `(i, j)` / `(-i, -j)`, identified by its canonical
/// (lexicographically smaller) grid index.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinPair {
    pub index: (usize, usize),
    pub twin: (usize, usize),
}

impl BinPair {
    pub fn is_self_paired(&self) -> bool {
        self.index == self.twin
    }
}

impl FrequencyGrid {
    pub fn new(height: usize, width: usize) -> Self {
        FrequencyGrid { height, width }
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Grid index of centered frequency `(i, j)`.
    pub fn index_of(&self, i: i64, j: i64) -> Result<(usize, usize)> {
        let (h, w) = (self.height as i64, self.width as i64);
        let (ci, cj) = (h / 2, w / 2);
        let (u, v) = (i + ci, j + cj);
        if u < 0 || u >= h || v < 0 || v >= w {
            return Err(SadaError::FrequencyOutOfRange { i, j, height: self.height, width: self.width });
        }
        Ok((u as usize, v as usize))
    }

    /// Centered frequency of grid index `(u, v)`.
    pub fn frequency_of(&self, u: usize, v: usize) -> (i64, i64) {
        (u as i64 - (self.height / 2) as i64, v as i64 - (self.width / 2) as i64)
    }

    /// Grid index of the conjugate frequency, wrapping modulo the grid.
    #[inline]
    pub fn twin(&self, u: usize, v: usize) -> (usize, usize) {
        (twin_1d(u, self.height), twin_1d(v, self.width))
    }

    pub fn pair(&self, u: usize, v: usize) -> BinPair {
        let t = self.twin(u, v);
        let index = (u, v).min(t);
        BinPair { index, twin: (u, v).max(t) }
    }

    /// One representative per conjugate pair, in row-major order of the
    /// representative.
    pub fn canonical_pairs(&self) -> Vec<BinPair> {
        let mut out = Vec::with_capacity(self.height * self.width / 2 + 2);
        for u in 0..self.height {
            for v in 0..self.width {
                let t = self.twin(u, v);
                if (u, v) <= t {
                    out.push(BinPair { index: (u, v), twin: t });
                }
            }
        }
        out
    }
}

#[inline]
fn twin_1d(u: usize, n: usize) -> usize {
    let raw = (u + n - n / 2) % n;
    let raw_twin = (n - raw) % n;
    (raw_twin + n / 2) % n
}

// ---------------------------------------------------------------------------
// Decomposition and reconstruction

/// Amplitude/phase decomposition of every channel.
pub fn decompose(image: &Image) -> Result<SpectrumPair> {
    let shape = image.shape();
    shape.validate()?;
    if let Some(pos) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(SadaError::InvalidInput(format!("non-finite pixel at flat index {pos}")));
    }
    let fft = Fft2::cached(shape.height, shape.width);
    let mut amplitude = Vec::with_capacity(shape.len());
    let mut phase = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        for z in fft.forward_centered(image.channel(c)) {
            amplitude.push(z.norm());
            phase.push(z.arg());
        }
    }
    Ok(SpectrumPair { shape, amplitude, phase })
}

/// Inverse transform of `amplitude * exp(i * phase)` with the real part kept
/// and no clamping.
pub fn synthesize(shape: Shape, amplitude: &[f64], phase: &[f64]) -> Result<Reconstruction> {
    if amplitude.len() != shape.len() || phase.len() != shape.len() {
        return Err(SadaError::shape(
            format!("{} spectrum values ({shape})", shape.len()),
            format!("amplitude {} / phase {}", amplitude.len(), phase.len()),
        ));
    }
    let fft = Fft2::cached(shape.height, shape.width);
    let n = shape.plane_len();
    let mut data = Vec::with_capacity(shape.len());
    let mut residual = 0.0f64;
    for c in 0..shape.channels {
        let spectrum: Vec<Complex64> = amplitude[c * n..(c + 1) * n]
            .iter()
            .zip(&phase[c * n..(c + 1) * n])
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        for z in fft.inverse_centered(&spectrum) {
            residual = residual.max(z.im.abs());
            data.push(z.re);
        }
    }
    Ok(Reconstruction { image: Image::new(shape, data)?, max_imag_residual: residual })
}

/// Reconstruction with diagnostics, clamped to `[0, 1]`.
pub fn reconstruct_with_diagnostics(spectrum: &SpectrumPair) -> Result<Reconstruction> {
    if let Some(pos) = spectrum.amplitude.iter().position(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(SadaError::InvalidInput(format!(
            "amplitude {pos} = {} is not a finite nonnegative value",
            spectrum.amplitude[pos]
        )));
    }
    let rec = synthesize(spectrum.shape, &spectrum.amplitude, &spectrum.phase)?;
    Ok(Reconstruction { image: rec.image.clamp_unit(), max_imag_residual: rec.max_imag_residual })
}

pub fn reconstruct(spectrum: &SpectrumPair) -> Result<Image> {
    Ok(reconstruct_with_diagnostics(spectrum)?.image)
}

// ---------------------------------------------------------------------------
// Fourier basis images and noise

/// Unit-norm real image whose spectrum is nonzero only on one conjugate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasisImage {
    pub frequency: (i64, i64),
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Sign of a basis perturbation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

pub fn basis_image(i: i64, j: i64, height: usize, width: usize) -> Result<FourierBasisImage> {
    let grid = FrequencyGrid::new(height, width);
    let (u, v) = grid.index_of(i, j)?;
    let pair = grid.pair(u, v);
    Ok(FourierBasisImage { frequency: (i, j), height, width, pixels: basis_pixels(&grid, pair) })
}

/// Pixels of the basis image for a pair. Built from the canonical index only,
/// so both members of a pair get bit-identical pixels.
pub fn basis_pixels(grid: &FrequencyGrid, pair: BinPair) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); h * w];
    let (u, v) = pair.index;
    let (tu, tv) = pair.twin;
    spectrum[u * w + v] = Complex64::new(1.0, 0.0);
    spectrum[tu * w + tv] = Complex64::new(1.0, 0.0);
    let pixels: Vec<f64> = Fft2::cached(h, w).inverse_centered(&spectrum).iter().map(|z| z.re).collect();
    let norm = pixels.iter().map(|p| p * p).sum::<f64>().sqrt();
    pixels.into_iter().map(|p| p / norm).collect()
}

/// All basis images of a grid, one per conjugate pair.
#[derive(Clone, Debug)]
pub struct BasisBank {
    pub grid: FrequencyGrid,
    pub pairs: Vec<BinPair>,
    pub pixels: Vec<Vec<f64>>,
}

impl BasisBank {
    pub fn new(height: usize, width: usize) -> Self {
        let grid = FrequencyGrid::new(height, width);
        let pairs = grid.canonical_pairs();
        let pixels = pairs.iter().map(|&p| basis_pixels(&grid, p)).collect();
        BasisBank { grid, pairs, pixels }
    }
}

/// `r * epsilon * U(i, j)`.
pub fn basis_noise(i: i64, j: i64, height: usize, width: usize, epsilon: f64, r: Sign) -> Result<Grid> {
    if !(epsilon >= 0.0) {
        return Err(SadaError::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let basis = basis_image(i, j, height, width)?;
    let scale = r.value() * epsilon;
    Grid::new(height, width, basis.pixels.iter().map(|p| scale * p).collect())
}

/// `r * D(i, j) * U(i, j)`.
pub fn amplitude_modulated_noise(i: i64, j: i64, d: &MeanAmplitudeSpectrum, r: Sign) -> Result<Grid> {
    let grid = FrequencyGrid::new(d.values.height, d.values.width);
    let (u, v) = grid.index_of(i, j)?;
    basis_noise(i, j, grid.height, grid.width, d.values.get(u, v), r)
}

// ---------------------------------------------------------------------------
// Mean amplitude spectrum

/// How per-channel mean amplitudes collapse to one grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelsPolicy {
    ChannelAveraged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAmplitudeSpectrum {
    pub values: Grid,
    pub channels_policy: ChannelsPolicy,
    pub source_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct MeanAmplitudeSidecar {
    height: usize,
    width: usize,
    channels_policy: ChannelsPolicy,
    source_fingerprint: String,
}

impl MeanAmplitudeSpectrum {
    pub fn fingerprint(&self) -> String {
        let mut h = Fingerprinter::new("mean-amplitude");
        h.str(&self.source_fingerprint).f64s(&self.values.values);
        h.finish()
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.values.write_csv(&dir.join(format!("{stem}.csv")))?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &MeanAmplitudeSidecar {
                height: self.values.height,
                width: self.values.width,
                channels_policy: self.channels_policy,
                source_fingerprint: self.source_fingerprint.clone(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let values = Grid::read_csv(&dir.join(format!("{stem}.csv")))?;
        let meta: MeanAmplitudeSidecar = read_json(&dir.join(format!("{stem}.json")))?;
        if meta.height != values.height || meta.width != values.width {
            return Err(SadaError::shape(
                format!("{}x{} (sidecar)", meta.height, meta.width),
                format!("{}x{} (csv)", values.height, values.width),
            ));
        }
        Ok(MeanAmplitudeSpectrum {
            values,
            channels_policy: meta.channels_policy,
            source_fingerprint: meta.source_fingerprint,
        })
    }
}

/// Elementwise mean of the amplitude spectra of `images`, averaged over
/// channels. `source_fingerprint` names the dataset the images came from.
pub fn mean_amplitude<'a, I>(images: I, source_fingerprint: &str) -> Result<MeanAmplitudeSpectrum>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut sum: Option<(Shape, Vec<f64>)> = None;
    let mut count = 0usize;
    for image in images {
        let spec = decompose(image)?;
        match &mut sum {
            None => sum = Some((spec.shape, spec.amplitude)),
            Some((shape, acc)) => {
                if *shape != spec.shape {
                    return Err(SadaError::shape(shape.to_string(), spec.shape.to_string()));
                }
                for (a, b) in acc.iter_mut().zip(&spec.amplitude) {
                    *a += b;
                }
            }
        }
        count += 1;
    }
    let (shape, acc) = sum.ok_or(SadaError::EmptyDataset)?;
    let n = shape.plane_len();
    let denom = (count * shape.channels) as f64;
    let values: Vec<f64> = (0..n).map(|k| (0..shape.channels).map(|c| acc[c * n + k]).sum::<f64>() / denom).collect();
    Ok(MeanAmplitudeSpectrum {
        values: Grid::new(shape.height, shape.width, values)?,
        channels_policy: ChannelsPolicy::ChannelAveraged,
        source_fingerprint: source_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) DFT with orthonormal scaling, centered output.
    fn dft_oracle(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let grid = FrequencyGrid::new(h, w);
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let (fi, fj) = grid.frequency_of(u, v);
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..h {
                    for m in 0..w {
                        let theta = -2.0
                            * std::f64::consts::PI
                            * (fi as f64 * n as f64 / h as f64 + fj as f64 * m as f64 / w as f64);
                        acc += plane[n * w + m] * Complex64::from_polar(1.0, theta);
                    }
                }
                out[u * w + v] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> Image {
        Image::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_only_dc_energy() {
        let img = Image::filled(Shape::new(1, 4, 4), 0.5);
        let spec = decompose(&img).unwrap();
        let dc = 2 * 4 + 2;
        // orthonormal: DC = sum / sqrt(HW) = 0.5 * 16 / 4
        assert!((spec.amplitude[dc] - 2.0).abs() < 1e-12);
        for (k, a) in spec.amplitude.iter().enumerate() {
            if k != dc {
                assert!(a.abs() < 1e-12, "bin {k} = {a}");
            }
        }
    }

    #[test]
    fn forward_transform_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(8, 8), (5, 7), (6, 4)] {
            let img = random_image(&mut rng, Shape::new(1, h, w));
            let fast = Fft2::new(h, w).forward_centered(img.data());
            let slow = dft_oracle(img.data(), h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn amplitude_is_point_symmetric_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, Shape::new(1, 8, 8));
        let oracle = dft_oracle(img.data(), 8, 8);
        let spec = decompose(&img).unwrap();
        let grid = FrequencyGrid::new(8, 8);
        for u in 0..8 {
            for v in 0..8 {
                let (tu, tv) = grid.twin(u, v);
                assert!((spec.amplitude[u * 8 + v] - spec.amplitude[tu * 8 + tv]).abs() < 1e-12);
                assert!((oracle[u * 8 + v].norm() - oracle[tu * 8 + tv].norm()).abs() < 1e-12);
                assert!((spec.amplitude[u * 8 + v] - oracle[u * 8 + v].norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &shape in &[Shape::new(1, 8, 8), Shape::new(3, 9, 12), Shape::new(1, 2, 2)] {
            let img = random_image(&mut rng, shape);
            let spec = decompose(&img).unwrap();
            let back = reconstruct(&spec).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-5);
            let energy: f64 = spec.amplitude.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((energy - img.l2_norm()).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut img = Image::zeros(Shape::new(1, 4, 4));
        img.data_mut()[3] = f64::NAN;
        assert!(matches!(decompose(&img), Err(SadaError::InvalidInput(_))));
    }

    #[test]
    fn reconstruct_rejects_shape_mismatch() {
        let spec = SpectrumPair { shape: Shape::new(1, 4, 4), amplitude: vec![0.0; 16], phase: vec![0.0; 15] };
        assert!(matches!(reconstruct(&spec), Err(SadaError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_amplitude_reconstructs_to_black() {
        let spec = SpectrumPair::new(Shape::new(1, 4, 4), vec![0.0; 16], vec![0.3; 16]).unwrap();
        assert!(reconstruct(&spec).unwrap().data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn broken_symmetry_reports_imaginary_residual() {
        let (h, w) = (8, 8);
        let mut amplitude = vec![0.0; 64];
        amplitude[3 * w + 5] = 1.0; // no twin
        let phase = vec![0.0; 64];
        let shape = Shape::new(1, h, w);
        let rec = synthesize(shape, &amplitude, &phase).unwrap();
        // oracle: complex inverse of a single unit bin has |Im| max = max |sin| / sqrt(HW)
        let spectrum: Vec<Complex64> = amplitude.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        let complex = Fft2::new(h, w).inverse_centered(&spectrum);
        let expected = complex.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        assert!((rec.max_imag_residual - expected).abs() < 1e-15);
        assert!(rec.max_imag_residual > 0.1);
        for (p, z) in rec.image.data().iter().zip(&complex) {
            assert_eq!(*p, z.re);
        }
    }

    #[test]
    fn dc_basis_is_constant() {
        let b = basis_image(0, 0, 4, 4).unwrap();
        for p in &b.pixels {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_matches_cosine_construction() {
        let (h, w) = (8, 8);
        let b = basis_image(1, 0, h, w).unwrap();
        // brute force: inverse DFT of the two unit bins is (2 / 8) cos(2 pi n / 8)
        let mut oracle: Vec<f64> = (0..h * w)
            .map(|k| {
                let n = (k / w) as f64;
                (2.0 * std::f64::consts::PI * n / h as f64).cos()
            })
            .collect();
        let norm = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        oracle.iter_mut().for_each(|v| *v /= norm);
        for (a, b) in b.pixels.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // pure vertical sinusoid: constant along rows
        for r in 0..h {
            let row = &b.pixels[r * w..(r + 1) * w];
            assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn basis_twins_are_bit_identical() {
        let (h, w) = (6, 5);
        let grid = FrequencyGrid::new(h, w);
        for u in 0..h {
            for v in 0..w {
                let (i, j) = grid.frequency_of(u, v);
                let (tu, tv) = grid.twin(u, v);
                let (ti, tj) = grid.frequency_of(tu, tv);
                let a = basis_image(i, j, h, w).unwrap();
                let b = basis_image(ti, tj, h, w).unwrap();
                assert_eq!(a.pixels, b.pixels);
                let norm = a.pixels.iter().map(|p| p * p).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_frequency_is_rejected() {
        assert!(basis_image(4, 0, 8, 8).is_err());
        assert!(basis_image(-4, 0, 8, 8).is_ok());
        assert!(basis_image(0, -5, 8, 8).is_err());
    }

    #[test]
    fn basis_noise_scaling_and_sign() {
        let zero = basis_noise(1, 2, 8, 8, 0.0, Sign::Plus).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let minus = basis_noise(1, 2, 8, 8, 0.2, Sign::Minus).unwrap();
        let plus = basis_noise(1, 2, 8, 8, 0.2, Sign::Plus).unwrap();
        let norm = minus.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.2).abs() < 1e-12);
        for (a, b) in minus.values.iter().zip(&plus.values) {
            assert_eq!(*a, -*b);
        }
        assert!(basis_noise(0, 0, 8, 8, -0.1, Sign::Plus).is_err());
    }

    #[test]
    fn basis_noise_touches_only_its_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (8, 8);
        let img = random_image(&mut rng, Shape::new(1, h, w));
        let grid = FrequencyGrid::new(h, w);
        let base = Fft2::new(h, w).forward_centered(img.data());
        let noise = basis_noise(2, -3, h, w, 0.2, Sign::Minus).unwrap();
        let perturbed = img.add_plane(&noise.values);
        let spec = Fft2::new(h, w).forward_centered(perturbed.data());
        let (u, v) = grid.index_of(2, -3).unwrap();
        let t = grid.twin(u, v);
        for a in 0..h {
            for b in 0..w {
                let d = (spec[a * w + b] - base[a * w + b]).norm();
                if (a, b) == (u, v) || (a, b) == t {
                    assert!(d > 1e-3);
                } else {
                    assert!(d < 1e-6);
                }
            }
        }
    }

    #[test]
    fn modulated_noise_uses_d_entry() {
        let mut values = Grid::zeros(8, 8);
        values.set(4, 5, 0.7);
        let d = MeanAmplitudeSpectrum {
            values,
            channels_policy: ChannelsPolicy::ChannelAveraged,
            source_fingerprint: "x".into(),
        };
        let n = amplitude_modulated_noise(0, 1, &d, Sign::Plus).unwrap();
        let norm = n.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.7).abs() < 1e-12);
        let z = amplitude_modulated_noise(1, 1, &d, Sign::Plus).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(amplitude_modulated_noise(4, 0, &d, Sign::Plus).is_err());
    }

    #[test]
    fn mean_amplitude_of_image_and_its_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(&mut rng, Shape::new(1, 6, 6));
        let neg = Image::new(x.shape(), x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let d = mean_amplitude([&x, &neg], "pair").unwrap();
        let ox = dft_oracle(x.data(), 6, 6);
        let on = dft_oracle(neg.data(), 6, 6);
        let dc = 3 * 6 + 3;
        for k in 0..36 {
            let expected = (ox[k].norm() + on[k].norm()) / 2.0;
            assert!((d.values.values[k] - expected).abs() < 1e-12);
            if k != dc {
                assert!((ox[k].norm() - on[k].norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_amplitude_errors() {
        let empty: Vec<&Image> = vec![];
        assert!(matches!(mean_amplitude(empty, "e"), Err(SadaError::EmptyDataset)));
        let a = Image::zeros(Shape::new(1, 4, 4));
        let b = Image::zeros(Shape::new(1, 4, 6));
        assert!(matches!(mean_amplitude([&a, &b], "m"), Err(SadaError::ShapeMismatch { .. })));
    }

    #[test]
    fn mean_amplitude_round_trips_through_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, Shape::new(3, 5, 4))).collect();
        let d = mean_amplitude(&imgs, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), "mean_amplitude").unwrap();
        let back = MeanAmplitudeSpectrum::load(dir.path(), "mean_amplitude").unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn twin_mapping_is_an_involution() {
        for &(h, w) in &[(4, 4), (5, 5), (6, 3), (2, 2)] {
            let grid = FrequencyGrid::new(h, w);
            let mut covered = 0;
            for pair in grid.canonical_pairs() {
                covered += if pair.is_self_paired() { 1 } else { 2 };
            }
            assert_eq!(covered, h * w);
            for u in 0..h {
                for v in 0..w {
                    let (a, b) = grid.twin(u, v);
                    assert_eq!(grid.twin(a, b), (u, v));
                    let (i, j) = grid.frequency_of(u, v);
                    let (ti, tj) = grid.frequency_of(a, b);
                    assert_eq!((i + ti).rem_euclid(h as i64), 0);
                    assert_eq!((j + tj).rem_euclid(w as i64), 0);
                }
            }
        }
    }
}
