//! Layer primitives: convolution (im2col + GEMM), activations, pixel
//! shuffle, and global average pooling, each with an explicit backward.

use ndarray::{Array1, Array2, Array4, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2D convolution (cross-correlation) with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

/// Per-sample im2col matrices kept for the backward pass.
pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

pub struct ConvGrads {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    /// Kaiming-normal initialization, std = sqrt(2 / fan_in).
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let w = Array4::from_shape_fn((out_c, in_c, k, k), |_| dist.sample(rng));
        Self {
            w,
            b: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let (n, in_c, h, w) = x.dim();
        let (out_c, wc_in, k, _) = self.w.dim();
        assert_eq!(in_c, wc_in, "channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weights");
        let mut y = Array4::zeros((n, out_c, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(
                &x.index_axis(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
                oh,
                ow,
            );
            let mut out = wmat.dot(&col); // (out_c, oh*ow)
            for (oc, mut row) in out.outer_iter_mut().enumerate() {
                row += self.b[oc];
            }
            y.index_axis_mut(ndarray::Axis(0), i).assign(
                &out.into_shape_with_order((out_c, oh, ow))
                    .expect("conv output reshape"),
            );
            cols.push(col);
        }
        (
            y,
            ConvCache {
                cols,
                in_dim: (n, in_c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache, gy: &Tensor) -> (Tensor, ConvGrads) {
        let (n, in_c, h, w) = cache.in_dim;
        let (out_c, _, k, _) = self.w.dim();
        let (oh, ow) = cache.out_hw;
        assert_eq!(gy.dim(), (n, out_c, oh, ow), "grad shape mismatch");
        let wmat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weights");
        let mut gw = Array2::<f64>::zeros((out_c, in_c * k * k));
        let mut gb = Array1::<f64>::zeros(out_c);
        let mut gx = Array4::zeros((n, in_c, h, w));
        for i in 0..n {
            let gy_mat = gy
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((out_c, oh * ow))
                .expect("grad reshape");
            gw = gw + gy_mat.dot(&cache.cols[i].t());
            for (oc, row) in gy_mat.outer_iter().enumerate() {
                gb[oc] += row.sum();
            }
            let gcol = wmat.t().dot(&gy_mat); // (in_c*k*k, oh*ow)
            col2im(
                &gcol,
                &mut gx.index_axis_mut(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
                oh,
                ow,
            );
        }
        let gw = gw
            .into_shape_with_order((out_c, in_c, k, k))
            .expect("weight grad reshape");
        (gx, ConvGrads { w: gw, b: gb })
    }
}

fn im2col(
    x: &ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = gx.dim();
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ch, iy as usize, ix as usize]] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let mut g = gy.clone();
    g.zip_mut_with(y, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

pub fn lrelu(x: &Tensor, slope: f64) -> Tensor {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn lrelu_backward(y: &Tensor, gy: &Tensor, slope: f64) -> Tensor {
    let mut g = gy.clone();
    g.zip_mut_with(y, |g, &y| {
        if y <= 0.0 {
            *g *= slope;
        }
    });
    g
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.mapv(f64::tanh)
}

pub fn tanh_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let mut g = gy.clone();
    g.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y);
    g
}

pub fn sigmoid(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Array1<f64>, gy: &Array1<f64>) -> Array1<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(y, |g, &y| *g *= y * (1.0 - y));
    g
}

// ---------------------------------------------------------------------------
// Pixel shuffle
// ---------------------------------------------------------------------------

/// Rearrange `(n, c*r^2, h, w)` into `(n, c, h*r, w*r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let (n, c_in, h, w) = x.dim();
    assert!(c_in % (r * r) == 0, "channels not divisible by r^2");
    let c = c_in / (r * r);
    let mut y = Array4::zeros((n, c, h * r, w * r));
    for i in 0..n {
        for oc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = oc * r * r + dy * r + dx;
                    for hh in 0..h {
                        for ww in 0..w {
                            y[[i, oc, hh * r + dy, ww * r + dx]] = x[[i, ic, hh, ww]];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn pixel_shuffle_backward(gy: &Tensor, r: usize) -> Tensor {
    let (n, c, hr, wr) = gy.dim();
    let (h, w) = (hr / r, wr / r);
    let mut gx = Array4::zeros((n, c * r * r, h, w));
    for i in 0..n {
        for oc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = oc * r * r + dy * r + dx;
                    for hh in 0..h {
                        for ww in 0..w {
                            gx[[i, ic, hh, ww]] = gy[[i, oc, hh * r + dy, ww * r + dx]];
                        }
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

/// Mean over channels and pixels, one scalar per sample.
pub fn global_mean(x: &Tensor) -> Array1<f64> {
    let (n, c, h, w) = x.dim();
    let denom = (c * h * w) as f64;
    Array1::from_iter(
        (0..n).map(|i| x.index_axis(ndarray::Axis(0), i).sum() / denom),
    )
}

pub fn global_mean_backward(gy: &Array1<f64>, dim: (usize, usize, usize, usize)) -> Tensor {
    let (n, c, h, w) = dim;
    let denom = (c * h * w) as f64;
    let mut gx = Array4::zeros(dim);
    for i in 0..n {
        gx.index_axis_mut(ndarray::Axis(0), i).fill(gy[i] / denom);
    }
    gx
}
