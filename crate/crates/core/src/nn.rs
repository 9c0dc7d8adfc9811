//! Dense kernels with hand-written backward passes.
//!
//! Everything is per-sample, row-major `f64`. Two affine shapes cover the
//! whole model: `Y = W X + b` with a per-row bias (convolutions after
//! im2col, 1x1 convolutions) and `Y = X W + b` with a per-column bias
//! (fully connected layers applied to every keypoint row).

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Named-shape parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Four independent accumulators so the reduction vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = W x + b`, `W: m x k`, `x: k x n`, `b: m`.
pub(crate) fn left_affine(w: &[f64], b: &[f64], x: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        yr.fill(b[i]);
        for p in 0..k {
            let wip = w[i * k + p];
            if wip != 0.0 {
                axpy(wip, &x[p * n..(p + 1) * n], yr);
            }
        }
    }
    y
}

/// Accumulates parameter gradients of [`left_affine`]; returns `dx` when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn left_affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    m: usize,
    k: usize,
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        db[i] += dyr.iter().sum::<f64>();
        for p in 0..k {
            dw[i * k + p] += dot(dyr, &x[p * n..(p + 1) * n]);
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; k * n];
        for i in 0..m {
            let dyr = &dy[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(w[i * k + p], dyr, &mut dx[p * n..(p + 1) * n]);
            }
        }
        dx
    })
}

/// `y = x W + b`, `x: r x k`, `W: k x m`, `b: m`.
pub(crate) fn right_affine(x: &[f64], w: &[f64], b: &[f64], r: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; r * m];
    for i in 0..r {
        let yr = &mut y[i * m..(i + 1) * m];
        yr.copy_from_slice(b);
        for p in 0..k {
            let xip = x[i * k + p];
            if xip != 0.0 {
                axpy(xip, &w[p * m..(p + 1) * m], yr);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn right_affine_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    r: usize,
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    for i in 0..r {
        let dyr = &dy[i * m..(i + 1) * m];
        axpy(1.0, dyr, db);
        for p in 0..k {
            let xip = x[i * k + p];
            if xip != 0.0 {
                axpy(xip, dyr, &mut dw[p * m..(p + 1) * m]);
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; r * k];
        for i in 0..r {
            let dyr = &dy[i * m..(i + 1) * m];
            for p in 0..k {
                dx[i * k + p] = dot(dyr, &w[p * m..(p + 1) * m]);
            }
        }
        dx
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|x| x * sigmoid(*x)).collect()
}

/// `dpre = dy * silu'(pre)`, in place on `dy`.
pub(crate) fn silu_backward(pre: &[f64], dy: &mut [f64]) {
    for (g, x) in dy.iter_mut().zip(pre) {
        let s = sigmoid(*x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

/// Geometry of a square-kernel convolution over a `cin x h x w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// `(cin*k*k) x (ho*wo)` patch matrix.
pub(crate) fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut col = vec![0.0; g.col_rows() * n];
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

pub(crate) fn col2im(col: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}
