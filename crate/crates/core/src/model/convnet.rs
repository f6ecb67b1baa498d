//! Small LeNet-style ConvNet with hand-written backpropagation.
//!
//! Convolution activations are stored channel-major across the batch
//! (`[C, N, H, W]`), so each convolution is one im2col GEMM over the whole
//! batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SadaError};
use crate::grid::Fingerprinter;
use crate::spectral::{Image, Shape};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Max-pool window (and stride); 1 disables pooling.
    #[serde(default = "two")]
    pub pool: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub input: Shape,
    pub conv: Vec<ConvBlockSpec>,
    /// Width of the fully connected hidden layer; 0 connects the last conv
    /// block straight to the classifier.
    pub hidden: usize,
    pub classes: usize,
    pub init_seed: u64,
}

impl ConvNetSpec {
    /// Two 5x5 conv blocks (32, 64 channels) with 2x2 max-pooling and a
    /// 128-unit hidden layer.
    pub fn reference(input: Shape, classes: usize, init_seed: u64) -> Self {
        ConvNetSpec {
            input,
            conv: vec![
                ConvBlockSpec { channels: 32, kernel: 5, stride: 1, pool: 2 },
                ConvBlockSpec { channels: 64, kernel: 5, stride: 1, pool: 2 },
            ],
            hidden: 128,
            classes,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SadaError::Config("a classifier needs at least 2 classes".into()));
        }
        self.layout().map(|_| ())
    }

    fn layout(&self) -> Result<Layout> {
        let mut convs = Vec::new();
        let mut offset = 0;
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        for (idx, block) in self.conv.iter().enumerate() {
            if block.kernel == 0 || block.stride == 0 || block.pool == 0 || block.channels == 0 {
                return Err(SadaError::Config(format!("conv block {idx}: zero-sized parameter")));
            }
            if block.kernel > h || block.kernel > w {
                return Err(SadaError::Config(format!(
                    "conv block {idx}: kernel {} does not fit a {h}x{w} input",
                    block.kernel
                )));
            }
            let ho = (h - block.kernel) / block.stride + 1;
            let wo = (w - block.kernel) / block.stride + 1;
            let (ph, pw) = (ho / block.pool, wo / block.pool);
            if ph == 0 || pw == 0 {
                return Err(SadaError::Config(format!("conv block {idx}: pooling leaves an empty map")));
            }
            let fan_in = c * block.kernel * block.kernel;
            let geom = ConvGeom {
                cin: c,
                cout: block.channels,
                k: block.kernel,
                stride: block.stride,
                pool: block.pool,
                h,
                w,
                ho,
                wo,
                ph,
                pw,
                w_off: offset,
                b_off: offset + block.channels * fan_in,
            };
            offset = geom.b_off + block.channels;
            convs.push(geom);
            c = block.channels;
            h = ph;
            w = pw;
        }
        let flat = c * h * w;
        let mut dense = Vec::new();
        let mut din = flat;
        for dout in [self.hidden, self.classes] {
            if dout == 0 {
                continue;
            }
            dense.push(DenseGeom { din, dout, w_off: offset, b_off: offset + din * dout });
            offset += din * dout + dout;
            din = dout;
        }
        Ok(Layout { convs, dense, flat, n_params: offset })
    }
}

#[derive(Clone, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pool: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ph: usize,
    pw: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug)]
struct DenseGeom {
    din: usize,
    dout: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<ConvGeom>,
    dense: Vec<DenseGeom>,
    flat: usize,
    n_params: usize,
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    spec: ConvNetSpec,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations retained for backpropagation.
pub struct ForwardPass {
    batch: usize,
    /// Row-major `[N, classes]`.
    pub logits: Vec<f64>,
    conv: Vec<ConvCache>,
    /// Inputs to each dense layer, `[N, din]`.
    dense_inputs: Vec<Vec<f64>>,
}

struct ConvCache {
    /// Layer input, `[Cin, N, H, W]`; im2col columns are rebuilt from it
    /// per sub-batch instead of being kept.
    input: Vec<f64>,
    /// Post-ReLU conv output (before pooling), `[Cout, N, Ho, Wo]`.
    activ: Vec<f64>,
    /// Flat index into `activ` of each pooled maximum.
    argmax: Vec<u32>,
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl ConvNet {
    /// He-normal weights and zero biases, deterministic in `spec.init_seed`.
    pub fn new(spec: ConvNetSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout()?;
        let mut params = vec![0.0; layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        for g in &layout.convs {
            let fan_in = (g.cin * g.k * g.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[g.w_off..g.b_off] {
                *p = normal.sample(&mut rng);
            }
        }
        let last = layout.dense.len() - 1;
        for (idx, g) in layout.dense.iter().enumerate() {
            let gain = if idx == last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / g.din as f64).sqrt()).expect("valid std");
            for p in &mut params[g.w_off..g.b_off] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(ConvNet { spec, layout, params })
    }

    pub fn from_params(spec: ConvNetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout()?;
        if params.len() != layout.n_params {
            return Err(SadaError::shape(
                format!("{} parameters", layout.n_params),
                format!("{} parameters", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SadaError::InvalidInput("non-finite model parameter".into()));
        }
        Ok(ConvNet { spec, layout, params })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    pub fn fingerprint(&self) -> String {
        let spec = serde_json::to_string(&self.spec).expect("spec serializes");
        Fingerprinter::new("convnet").str(&spec).f64s(&self.params).finish()
    }

    /// Zeroes the classifier head so every input maps to equal logits.
    pub fn zero_head(&mut self) {
        let g = self.layout.dense.last().expect("classifier layer").clone();
        self.params[g.w_off..g.b_off + g.dout].iter_mut().for_each(|p| *p = 0.0);
    }

    fn check_batch(&self, images: &[&Image]) -> Result<()> {
        for (i, img) in images.iter().enumerate() {
            if img.shape() != self.spec.input {
                return Err(SadaError::shape(
                    format!("input {}", self.spec.input),
                    format!("image {i} of shape {}", img.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass keeping everything needed by [`ConvNet::backward`].
    pub fn forward(&self, images: &[&Image]) -> Result<ForwardPass> {
        self.check_batch(images)?;
        let n = images.len();
        let input = self.spec.input;
        // pack into [C, N, H, W]
        let plane = input.plane_len();
        let mut x = vec![0.0; input.len() * n];
        for (b, img) in images.iter().enumerate() {
            for c in 0..input.channels {
                x[(c * n + b) * plane..(c * n + b + 1) * plane].copy_from_slice(img.channel(c));
            }
        }
        let mut conv = Vec::with_capacity(self.layout.convs.len());
        for g in &self.layout.convs {
            let p = n * g.ho * g.wo;
            let rows = g.cin * g.k * g.k;
            let mut out = vec![0.0; g.cout * p];
            for co in 0..g.cout {
                out[co * p..(co + 1) * p].fill(self.params[g.b_off + co]);
            }
            let w = &self.params[g.w_off..g.b_off];
            with_scratch(|cols| {
                for (b0, b1) in sub_batches(g, n) {
                    let pc = (b1 - b0) * g.ho * g.wo;
                    im2col(&x, g, n, b0, b1, cols);
                    let c0 = b0 * g.ho * g.wo;
                    gemm_ld(g.cout, rows, pc, w, false, cols, false, &mut out[c0..], p, 1.0);
                }
            });
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            let (pooled, argmax) = max_pool(&out, g, n);
            let input = std::mem::replace(&mut x, pooled);
            conv.push(ConvCache { input, activ: out, argmax });
        }
        // [C, N, H, W] -> [N, C*H*W]
        let mut h = if self.layout.convs.is_empty() {
            let mut flat = vec![0.0; n * self.layout.flat];
            for (b, img) in images.iter().enumerate() {
                flat[b * self.layout.flat..(b + 1) * self.layout.flat].copy_from_slice(img.data());
            }
            flat
        } else {
            let g = self.layout.convs.last().expect("conv layer");
            cnhw_to_rows(&x, g.cout, g.ph * g.pw, n)
        };
        let mut dense_inputs = Vec::with_capacity(self.layout.dense.len());
        let last = self.layout.dense.len() - 1;
        for (idx, g) in self.layout.dense.iter().enumerate() {
            let mut out = vec![0.0; n * g.dout];
            for b in 0..n {
                out[b * g.dout..(b + 1) * g.dout].copy_from_slice(&self.params[g.b_off..g.b_off + g.dout]);
            }
            gemm(n, g.din, g.dout, &h, false, &self.params[g.w_off..g.b_off], true, &mut out, 1.0);
            if idx != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            dense_inputs.push(std::mem::replace(&mut h, out));
        }
        Ok(ForwardPass { batch: n, logits: h, conv, dense_inputs })
    }

    /// Backpropagates `dlogits` (`[N, classes]`). Returns the parameter
    /// gradient and, if requested, the gradient with respect to each input.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64], input_grad: bool) -> (Vec<f64>, Option<Vec<Image>>) {
        self.backprop(pass, dlogits, true, input_grad)
    }

    /// Gradient with respect to each input only; skips every weight-gradient
    /// product, which is about a third of the backward cost.
    pub fn input_gradient(&self, pass: &ForwardPass, dlogits: &[f64]) -> Vec<Image> {
        self.backprop(pass, dlogits, false, true).1.expect("input gradients requested")
    }

    fn backprop(
        &self,
        pass: &ForwardPass,
        dlogits: &[f64],
        param_grad: bool,
        input_grad: bool,
    ) -> (Vec<f64>, Option<Vec<Image>>) {
        let n = pass.batch;
        let mut grad = if param_grad { vec![0.0; self.layout.n_params] } else { Vec::new() };
        let mut delta = dlogits.to_vec();
        let last = self.layout.dense.len() - 1;
        let mut flat_grad = None;
        for (idx, g) in self.layout.dense.iter().enumerate().rev() {
            let input = &pass.dense_inputs[idx];
            if idx != last {
                // ReLU mask from this layer's output, which is the next layer's input
                let out = &pass.dense_inputs[idx + 1];
                for (d, o) in delta.iter_mut().zip(out) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if param_grad {
                // dW = delta^T X
                gemm(g.dout, n, g.din, &delta, true, input, false, &mut grad[g.w_off..g.b_off], 0.0);
                for b in 0..n {
                    for o in 0..g.dout {
                        grad[g.b_off + o] += delta[b * g.dout + o];
                    }
                }
            }
            let need_dx = idx > 0 || !self.layout.convs.is_empty() || input_grad;
            if need_dx {
                let mut dx = vec![0.0; n * g.din];
                gemm(n, g.dout, g.din, &delta, false, &self.params[g.w_off..g.b_off], false, &mut dx, 0.0);
                delta = dx;
            } else {
                delta.clear();
            }
            if idx == 0 {
                flat_grad = Some(std::mem::take(&mut delta));
            }
        }
        let flat_grad = flat_grad.expect("at least one dense layer");
        if self.layout.convs.is_empty() {
            let grads = input_grad.then(|| {
                flat_grad
                    .chunks(self.layout.flat)
                    .map(|c| Image::new(self.spec.input, c.to_vec()).expect("finite gradient"))
                    .collect()
            });
            return (grad, grads);
        }
        let top = self.layout.convs.last().expect("conv layer");
        let mut d = rows_to_cnhw(&flat_grad, top.cout, top.ph * top.pw, n);
        for (idx, g) in self.layout.convs.iter().enumerate().rev() {
            let cache = &pass.conv[idx];
            let p = n * g.ho * g.wo;
            let mut dout = vec![0.0; g.cout * p];
            for (pos, &src) in cache.argmax.iter().enumerate() {
                dout[src as usize] += d[pos];
            }
            for (dv, a) in dout.iter_mut().zip(&cache.activ) {
                if *a <= 0.0 {
                    *dv = 0.0;
                }
            }
            let rows = g.cin * g.k * g.k;
            if param_grad {
                for co in 0..g.cout {
                    grad[g.b_off + co] = dout[co * p..(co + 1) * p].iter().sum();
                }
            }
            let need_dx = idx > 0 || input_grad;
            let mut dx = if need_dx { vec![0.0; g.cin * n * g.h * g.w] } else { Vec::new() };
            let w = &self.params[g.w_off..g.b_off];
            with_scratch(|cols| {
                for (b0, b1) in sub_batches(g, n) {
                    let pc = (b1 - b0) * g.ho * g.wo;
                    let c0 = b0 * g.ho * g.wo;
                    if param_grad {
                        im2col(&cache.input, g, n, b0, b1, cols);
                        // dW accumulates over sub-batches
                        let beta = if b0 == 0 { 0.0 } else { 1.0 };
                        gemm_strided(
                            (g.cout, pc, rows),
                            (&dout[c0..], p as isize, 1),
                            (cols.as_slice(), 1, pc as isize),
                            (&mut grad[g.w_off..g.b_off], rows as isize),
                            beta,
                        );
                    }
                    if need_dx {
                        cols.resize(rows * pc, 0.0);
                        gemm_strided(
                            (rows, g.cout, pc),
                            (w, 1, rows as isize),
                            (&dout[c0..], p as isize, 1),
                            (cols.as_mut_slice(), pc as isize),
                            0.0,
                        );
                        col2im(cols, g, n, b0, b1, &mut dx);
                    }
                }
            });
            if need_dx {
                d = dx;
            }
        }
        let grads = input_grad.then(|| {
            let input = self.spec.input;
            let plane = input.plane_len();
            (0..n)
                .map(|b| {
                    let mut data = Vec::with_capacity(input.len());
                    for c in 0..input.channels {
                        data.extend_from_slice(&d[(c * n + b) * plane..(c * n + b + 1) * plane]);
                    }
                    Image::new(input, data).expect("finite gradient")
                })
                .collect()
        });
        (grad, grads)
    }
}

/// Images per im2col block; keeps the column buffer a few MB so it is
/// reused instead of freshly mapped on every call.
const COLS_BUDGET: usize = 1 << 19;

fn sub_batches(g: &ConvGeom, n: usize) -> impl Iterator<Item = (usize, usize)> {
    let per_image = g.cin * g.k * g.k * g.ho * g.wo;
    let step = (COLS_BUDGET / per_image.max(1)).clamp(1, n.max(1));
    (0..n).step_by(step).map(move |b0| (b0, (b0 + step).min(n)))
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_scratch<T>(f: impl FnOnce(&mut Vec<f64>) -> T) -> T {
    SCRATCH.with(|s| f(&mut s.borrow_mut()))
}

/// Columns for images `b0..b1` of `x` (`[Cin, N, H, W]`), written as
/// `[Cin*k*k, (b1-b0)*Ho*Wo]` into `cols`.
fn im2col(x: &[f64], g: &ConvGeom, n: usize, b0: usize, b1: usize, cols: &mut Vec<f64>) {
    let pc = (b1 - b0) * g.ho * g.wo;
    let rows = g.cin * g.k * g.k;
    cols.resize(rows * pc, 0.0);
    let in_plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * pc..(r + 1) * pc];
                for b in b0..b1 {
                    let src = &x[(ci * n + b) * in_plane..(ci * n + b + 1) * in_plane];
                    let bl = b - b0;
                    for ho in 0..g.ho {
                        let row = ho * g.stride + ki;
                        let out = &mut dst[(bl * g.ho + ho) * g.wo..(bl * g.ho + ho + 1) * g.wo];
                        if g.stride == 1 {
                            out.copy_from_slice(&src[row * g.w + kj..row * g.w + kj + g.wo]);
                        } else {
                            for (wo, o) in out.iter_mut().enumerate() {
                                *o = src[row * g.w + wo * g.stride + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds sub-batch columns back into `dx` (`[Cin, N, H, W]`).
fn col2im(dcols: &[f64], g: &ConvGeom, n: usize, b0: usize, b1: usize, dx: &mut [f64]) {
    let pc = (b1 - b0) * g.ho * g.wo;
    let in_plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let src = &dcols[r * pc..(r + 1) * pc];
                for b in b0..b1 {
                    let dst = &mut dx[(ci * n + b) * in_plane..(ci * n + b + 1) * in_plane];
                    let bl = b - b0;
                    for ho in 0..g.ho {
                        let row = ho * g.stride + ki;
                        let s = &src[(bl * g.ho + ho) * g.wo..(bl * g.ho + ho + 1) * g.wo];
                        for (wo, v) in s.iter().enumerate() {
                            dst[row * g.w + wo * g.stride + kj] += v;
                        }
                    }
                }
            }
        }
    }
}

fn max_pool(x: &[f64], g: &ConvGeom, n: usize) -> (Vec<f64>, Vec<u32>) {
    let s = g.pool;
    let planes = g.cout * n;
    let mut out = vec![0.0; planes * g.ph * g.pw];
    let mut argmax = vec![0u32; out.len()];
    for pl in 0..planes {
        let base = pl * g.ho * g.wo;
        for i in 0..g.ph {
            for j in 0..g.pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..s {
                    for dj in 0..s {
                        let idx = base + (i * s + di) * g.wo + j * s + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (pl * g.ph + i) * g.pw + j;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

/// `[C, N, P]` to `[N, C*P]`.
fn cnhw_to_rows(x: &[f64], channels: usize, plane: usize, n: usize) -> Vec<f64> {
    let flat = channels * plane;
    let mut out = vec![0.0; n * flat];
    for c in 0..channels {
        for b in 0..n {
            out[b * flat + c * plane..b * flat + (c + 1) * plane]
                .copy_from_slice(&x[(c * n + b) * plane..(c * n + b + 1) * plane]);
        }
    }
    out
}

/// `[N, C*P]` to `[C, N, P]`.
fn rows_to_cnhw(rows: &[f64], channels: usize, plane: usize, n: usize) -> Vec<f64> {
    let flat = channels * plane;
    let mut out = vec![0.0; n * flat];
    for c in 0..channels {
        for b in 0..n {
            out[(c * n + b) * plane..(c * n + b + 1) * plane]
                .copy_from_slice(&rows[b * flat + c * plane..b * flat + (c + 1) * plane]);
        }
    }
    out
}

/// `C = A * B + beta * C` with `A: m x k`, `B: k x n`, row-major `C`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    gemm_ld(m, k, n, a, a_t, b, b_t, c, n, beta);
}

/// [`gemm`] writing into a column block of a wider `C` whose rows are
/// `ldc` apart.
#[allow(clippy::too_many_arguments)]
fn gemm_ld(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    ldc: usize,
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided((m, k, n), (a, rsa, csa), (b, rsb, csb), (c, ldc as isize), beta);
}

/// Fully strided `C = A * B + beta * C`; strides are in elements.
fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    (c, rsc): (&mut [f64], isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rs: isize, cs: isize, r: usize, cc: usize| {
        if r == 0 || cc == 0 {
            0
        } else {
            ((r - 1) as isize * rs + (cc - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(rsa, csa, m, k) && b.len() >= span(rsb, csb, k, n) && c.len() >= span(rsc, 1, m, n));
    // SAFETY: the asserts above bound every element addressed through
    // these strides inside the slices.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
    }
}
