//! Deterministic imaging primitives shared by both networks.
//!
//! Three families live here:
//!   * the Gaussian-pyramid downsampling function that maps high-resolution
//!     micro-CT patches onto the clinical-CT grid (successive blur +
//!     decimate-by-2 levels),
//!   * the SSIM statistic and its loss form `1 - SSIM`, with an analytic
//!     gradient so SSIM terms can sit inside training objectives,
//!   * bicubic upsampling, used only as the reference baseline the trained
//!     SR generator has to beat.
//!
//! Everything is pure f64 math on 2D arrays; no RNG, no state.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Gaussian pyramid
// ---------------------------------------------------------------------------

/// Parameters of the pyramid downsampling function.
///
/// `factor` is the total reduction; each pyramid level blurs with a
/// normalized Gaussian kernel and keeps every second pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub factor: usize,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            factor: 8,
            kernel_size: 5,
            kernel_sigma: 1.0,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8, 16].contains(&self.factor) {
            return Err(Error::InvalidInput(format!(
                "pyramid factor must be one of 2, 4, 8, 16 (got {})",
                self.factor
            )));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "pyramid kernel_size must be odd and >= 3 (got {})",
                self.kernel_size
            )));
        }
        if !(self.kernel_sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "pyramid kernel_sigma must be > 0 (got {})",
                self.kernel_sigma
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        self.factor.trailing_zeros()
    }
}

/// Normalized 1D Gaussian kernel of odd length.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array1<f64> {
    assert!(size % 2 == 1 && size >= 1, "kernel size must be odd");
    let radius = (size / 2) as isize;
    let mut k = Array1::zeros(size);
    for i in 0..size {
        let d = i as isize - radius;
        k[i] = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    }
    let sum = k.sum();
    k /= sum;
    k
}

/// Mirror index without repeating the edge sample (…, 2, 1, 0, 1, 2, …).
fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n >= 2);
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable convolution with reflect padding, rows then columns.
pub fn convolve_separable(img: &ArrayView2<f64>, kernel: &Array1<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut rows = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let src = reflect(c as isize + t as isize - radius, w);
                acc += kv * img[[r, src]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let src = reflect(r as isize + t as isize - radius, h);
                acc += kv * rows[[src, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Gaussian blur with an odd kernel sized to cover +-3 sigma.
pub fn gaussian_blur(img: &ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius.max(1) + 1;
    let kernel = gaussian_kernel(size, sigma);
    convolve_separable(img, &kernel)
}

/// One pyramid level: blur, then keep even-indexed rows and columns.
fn blur_decimate(img: &ArrayView2<f64>, kernel: &Array1<f64>) -> Array2<f64> {
    let blurred = convolve_separable(img, kernel);
    let (h, w) = blurred.dim();
    let mut out = Array2::<f64>::zeros((h / 2, w / 2));
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            out[[r, c]] = blurred[[2 * r, 2 * c]];
        }
    }
    out
}

/// Gaussian-pyramid downsampling by `spec.factor` (powers of two only).
///
/// Both image dimensions must be divisible by the factor so every level
/// halves cleanly.
pub fn gaussian_downsample(img: &ArrayView2<f64>, spec: &PyramidSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let (h, w) = img.dim();
    if h % spec.factor != 0 || w % spec.factor != 0 {
        return Err(Error::InvalidInput(format!(
            "image dims {}x{} not divisible by pyramid factor {}",
            h, w, spec.factor
        )));
    }
    let kernel = gaussian_kernel(spec.kernel_size, spec.kernel_sigma);
    let mut current = img.to_owned();
    for _ in 0..spec.levels() {
        current = blur_decimate(&current.view(), &kernel);
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Window over which the SSIM statistics are gathered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "mode")]
pub enum SsimWindow {
    /// One set of statistics over the whole image.
    Global,
    /// Mean SSIM over full windows placed on a stride grid.
    Sliding { size: usize, stride: usize },
}

/// SSIM stabilizers and windowing; the stabilizers assume inputs already
/// normalized to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            c1: 0.02,
            c2: 0.06,
            window: SsimWindow::Global,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ssim stabilizers must be > 0 (got c1={}, c2={})",
                self.c1, self.c2
            )));
        }
        if let SsimWindow::Sliding { size, stride } = self.window {
            if size < 2 || stride == 0 {
                return Err(Error::InvalidInput(format!(
                    "sliding window needs size >= 2 and stride >= 1 (got {}x stride {})",
                    size, stride
                )));
            }
        }
        Ok(())
    }
}

struct SsimStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    n: f64,
}

/// Two-pass statistics: means first, then centered second moments gathered in
/// one shared loop so `var_a` and `cov` are bit-identical when `a == b`
/// (that is what makes SSIM(a, a) == 1 exact).
fn ssim_stats(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> SsimStats {
    let n = a.len() as f64;
    let mu_a = a.sum() / n;
    let mu_b = b.sum() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let da = x - mu_a;
        let db = y - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    SsimStats {
        mu_a,
        mu_b,
        var_a: var_a / n,
        var_b: var_b / n,
        cov: cov / n,
        n,
    }
}

fn ssim_from_stats(s: &SsimStats, c1: f64, c2: f64) -> f64 {
    let num = (2.0 * s.mu_a * s.mu_b + c1) * (2.0 * s.cov + c2);
    let den = (s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2);
    num / den
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "ssim dimension mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(
            "ssim needs at least 2 pixels".to_string(),
        ));
    }
    Ok(())
}

fn sliding_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=extent - size).step_by(stride).collect()
}

/// Structural similarity between two images of identical shape.
pub fn ssim(a: &ArrayView2<f64>, b: &ArrayView2<f64>, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    check_pair(a, b)?;
    match p.window {
        SsimWindow::Global => Ok(ssim_from_stats(&ssim_stats(a, b), p.c1, p.c2)),
        SsimWindow::Sliding { size, stride } => {
            let (h, w) = a.dim();
            if size > h || size > w {
                return Err(Error::InvalidInput(format!(
                    "sliding window {} larger than image {}x{}",
                    size, h, w
                )));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for &r in &sliding_offsets(h, size, stride) {
                for &c in &sliding_offsets(w, size, stride) {
                    let wa = a.slice(ndarray::s![r..r + size, c..c + size]);
                    let wb = b.slice(ndarray::s![r..r + size, c..c + size]);
                    total += ssim_from_stats(&ssim_stats(&wa, &wb), p.c1, p.c2);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

/// SSIM loss `1 - SSIM(a, b)`; zero iff the two images agree structurally.
pub fn ssim_loss(a: &ArrayView2<f64>, b: &ArrayView2<f64>, p: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim(a, b, p)?)
}

/// Gradient of SSIM with respect to one window of `a` and `b`, accumulated
/// into the output arrays with weight `scale`.
fn accumulate_ssim_grad(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    c1: f64,
    c2: f64,
    scale: f64,
    ga: &mut ndarray::ArrayViewMut2<f64>,
    gb: &mut ndarray::ArrayViewMut2<f64>,
) {
    let s = ssim_stats(a, b);
    let n1 = 2.0 * s.mu_a * s.mu_b + c1;
    let n2 = 2.0 * s.cov + c2;
    let d1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1;
    let d2 = s.var_a + s.var_b + c2;
    let val = (n1 * n2) / (d1 * d2);
    // dS/da_i = (2/n) [ (mu_b n2 + n1 (b_i - mu_b)) / (d1 d2)
    //                   - S (mu_a / d1 + (a_i - mu_a) / d2) ]
    let k = 2.0 / s.n * scale;
    for ((&x, &y), (gx, gy)) in a
        .iter()
        .zip(b.iter())
        .zip(ga.iter_mut().zip(gb.iter_mut()))
    {
        let da = x - s.mu_a;
        let db = y - s.mu_b;
        *gx += k * ((s.mu_b * n2 + n1 * db) / (d1 * d2) - val * (s.mu_a / d1 + da / d2));
        *gy += k * ((s.mu_a * n2 + n1 * da) / (d1 * d2) - val * (s.mu_b / d1 + db / d2));
    }
}

/// SSIM loss together with its gradient with respect to both images.
pub fn ssim_loss_grad(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    p: &SsimParams,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let loss = ssim_loss(a, b, p)?;
    let mut ga = Array2::<f64>::zeros(a.dim());
    let mut gb = Array2::<f64>::zeros(b.dim());
    match p.window {
        SsimWindow::Global => {
            // d(1 - S)/dx = -dS/dx
            accumulate_ssim_grad(a, b, p.c1, p.c2, -1.0, &mut ga.view_mut(), &mut gb.view_mut());
        }
        SsimWindow::Sliding { size, stride } => {
            let (h, w) = a.dim();
            let rows = sliding_offsets(h, size, stride);
            let cols = sliding_offsets(w, size, stride);
            let scale = -1.0 / (rows.len() * cols.len()) as f64;
            for &r in &rows {
                for &c in &cols {
                    let span = ndarray::s![r..r + size, c..c + size];
                    accumulate_ssim_grad(
                        &a.slice(span),
                        &b.slice(span),
                        p.c1,
                        p.c2,
                        scale,
                        &mut ga.slice_mut(span),
                        &mut gb.slice_mut(span),
                    );
                }
            }
        }
    }
    Ok((loss, ga, gb))
}

// ---------------------------------------------------------------------------
// Bicubic upsampling (reference baseline only)
// ---------------------------------------------------------------------------

/// Keys cubic kernel with a = -0.5 (Catmull-Rom).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic interpolation by an integer factor with edge clamping.
///
/// Pixel centers are aligned (`src = (dst + 0.5) / factor - 0.5`), matching
/// the usual resampling convention. Used as the untrained baseline in the
/// round-trip evaluation.
pub fn bicubic_upsample(img: &ArrayView2<f64>, factor: usize) -> Array2<f64> {
    assert!(factor >= 1);
    let (h, w) = img.dim();
    let (oh, ow) = (h * factor, w * factor);

    // Horizontal pass.
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            let src = (c as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor() as isize;
            let frac = src - base as f64;
            let mut acc = 0.0;
            for t in -1..=2isize {
                let wgt = cubic_weight(frac - t as f64);
                let idx = (base + t).clamp(0, w as isize - 1) as usize;
                acc += wgt * img[[r, idx]];
            }
            rows[[r, c]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        let src = (r as f64 + 0.5) / factor as f64 - 0.5;
        let base = src.floor() as isize;
        let frac = src - base as f64;
        for t in -1..=2isize {
            let wgt = cubic_weight(frac - t as f64);
            let idx = (base + t).clamp(0, h as isize - 1) as usize;
            out.index_axis_mut(Axis(0), r)
                .iter_mut()
                .zip(rows.index_axis(Axis(0), idx).iter())
                .for_each(|(o, &v)| *o += wgt * v);
        }
    }
    out
}
