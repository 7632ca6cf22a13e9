//! Minimal convolution layers with hand-written backward passes.
//!
//! Tensors are `B x C x H x W` in standard (row-major) layout. Every sample
//! is processed with its own GEMM, so a sample's result never depends on
//! what else is in the batch.

use ndarray::{Array1, Array4};
use rand::Rng;

/// Runtime multiplier on every convolution's weights and bias. Stored
/// parameters are initialized `1 / CONV_GAIN` smaller, so the effective
/// layer is unchanged at initialization while plain SGD steps act
/// `CONV_GAIN^2` times larger on it.
pub(crate) const CONV_GAIN: f64 = 3.1622776601683795; // sqrt(10)

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents used by every caller
    // (row-major or transposed-row-major views of exactly m*k, k*n, m*n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel convolution with replicate (edge-clamped) padding of
/// `ksize / 2` pixels, computing `CONV_GAIN * (weight * x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, ksize: usize, stride: usize) -> Self {
        Self { weight: Array4::zeros((cout, cin, ksize, ksize)), bias: Array1::zeros(cout), stride }
    }

    /// Fan-in scaled uniform effective weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero bias.
    pub fn init<R: Rng>(cin: usize, cout: usize, ksize: usize, stride: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(cin, cout, ksize, stride);
        let bound = (6.0 / (cin * ksize * ksize) as f64).sqrt() / CONV_GAIN;
        conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        conv
    }

    pub fn cin(&self) -> usize {
        self.weight.dim().1
    }

    pub fn cout(&self) -> usize {
        self.weight.dim().0
    }

    fn ksize(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize) -> usize {
        let k = self.ksize();
        (h + 2 * (k / 2) - k) / self.stride + 1
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let (k, s) = (self.ksize(), self.stride);
        let pad = (k / 2) as isize;
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut row = 0;
        for ci in 0..self.cin() {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = clamp((oy * s) as isize + ky as isize - pad, h);
                        let src = &plane[iy * w..(iy + 1) * w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[clamp((ox * s) as isize + kx as isize - pad, w)];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (k, s) = (self.ksize(), self.stride);
        let pad = (k / 2) as isize;
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut row = 0;
        for ci in 0..self.cin() {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = clamp((oy * s) as isize + ky as isize - pad, h);
                        for ox in 0..ow {
                            let ix = clamp((ox * s) as isize + kx as isize - pad, w);
                            plane[iy * w + ix] += src[oy * ow + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin(), "conv input channels");
        let (oh, ow, cout) = (self.out_size(h), self.out_size(w), self.cout());
        let kk = cin * self.ksize() * self.ksize();
        let mut out = Array4::zeros((b, cout, oh, ow));
        let xs = x.as_slice().expect("standard layout");
        let weight = self.weight.as_slice().expect("standard layout");
        let mut col = vec![0.0; kk * oh * ow];
        let os = out.as_slice_mut().expect("standard layout");
        for i in 0..b {
            self.im2col(&xs[i * cin * h * w..(i + 1) * cin * h * w], h, w, &mut col);
            let dst = &mut os[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for (co, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.fill(CONV_GAIN * self.bias[co]);
            }
            gemm(cout, kk, oh * ow, CONV_GAIN, weight, (kk as isize, 1), &col, ((oh * ow) as isize, 1), 1.0, dst);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Array4<f64>, dout: &Array4<f64>, grad: &mut Conv2d) -> Array4<f64> {
        let (b, cin, h, w) = x.dim();
        let (_, cout, oh, ow) = dout.dim();
        let kk = cin * self.ksize() * self.ksize();
        let xs = x.as_slice().expect("standard layout");
        let ds = dout.as_slice().expect("standard layout");
        let weight = self.weight.as_slice().expect("standard layout");
        let mut dx = Array4::zeros((b, cin, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        let mut col = vec![0.0; kk * oh * ow];
        let mut dcol = vec![0.0; kk * oh * ow];
        for i in 0..b {
            let d = &ds[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for (co, plane) in d.chunks(oh * ow).enumerate() {
                grad.bias[co] += CONV_GAIN * plane.iter().sum::<f64>();
            }
            self.im2col(&xs[i * cin * h * w..(i + 1) * cin * h * w], h, w, &mut col);
            // dW += dout (cout x ohw) * col^T (ohw x kk)
            let gw = grad.weight.as_slice_mut().expect("standard layout");
            gemm(cout, oh * ow, kk, CONV_GAIN, d, ((oh * ow) as isize, 1), &col, (1, (oh * ow) as isize), 1.0, gw);
            // dcol = W^T (kk x cout) * dout (cout x ohw)
            gemm(kk, cout, oh * ow, CONV_GAIN, weight, (1, kk as isize), d, ((oh * ow) as isize, 1), 0.0, &mut dcol);
            self.col2im(&dcol, h, w, &mut dxs[i * cin * h * w..(i + 1) * cin * h * w]);
        }
        dx
    }
}

pub(crate) fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through relu given the pre-activation.
pub(crate) fn relu_backward(pre: &Array4<f64>, dout: &Array4<f64>) -> Array4<f64> {
    let mut d = dout.clone();
    d.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    d
}

pub(crate) fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub(crate) fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(i, j, y, xx)| x[[i, j, y / 2, xx / 2]])
}

pub(crate) fn upsample2_backward(dout: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dout.dim();
    let mut dx = Array4::zeros((b, c, h2 / 2, w2 / 2));
    for ((i, j, y, x), &g) in dout.indexed_iter() {
        dx[[i, j, y / 2, x / 2]] += g;
    }
    dx
}
