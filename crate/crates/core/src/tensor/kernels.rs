//! Slice-level numeric kernels shared by the graph ops and the plain tensor API.

use super::Tensor;
use crate::error::{Error, Result};

/// Decomposes `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn validate_distribution(data: &[f64], outer: usize, n: usize, inner: usize) -> Result<()> {
    for o in 0..outer {
        for i in 0..inner {
            let mut s = 0.0;
            for k in 0..n {
                let v = data[(o * n + k) * inner + i];
                if !(v >= 0.0) {
                    return Err(Error::Distribution {
                        row: o * inner + i,
                        reason: format!("entry {v} is negative or NaN"),
                    });
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Distribution {
                    row: o * inner + i,
                    reason: format!("row sums to {s}"),
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

/// `c[m x n] = alpha * A[m x k] * B[k x n] + beta * c`, with arbitrary strides
/// on the operands and a contiguous row-major output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_inplace(x: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n {
                mx = mx.max(x[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = (x[base + k * inner] - mx).exp();
                x[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                x[base + k * inner] /= s;
            }
        }
    }
}

pub(crate) fn log_softmax_inplace(x: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n {
                mx = mx.max(x[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                s += (x[base + k * inner] - mx).exp();
            }
            let lse = mx + s.ln();
            for k in 0..n {
                x[base + k * inner] -= lse;
            }
        }
    }
}

/// Returns the per-slice norms (before clamping to `eps`).
pub(crate) fn l2_normalize_inplace(x: &mut [f64], outer: usize, n: usize, inner: usize, eps: f64) -> Vec<f64> {
    let mut norms = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut ss = 0.0;
            for k in 0..n {
                ss += x[base + k * inner] * x[base + k * inner];
            }
            let r = ss.sqrt();
            norms.push(r);
            let d = if r > eps { r } else { eps };
            for k in 0..n {
                x[base + k * inner] /= d;
            }
        }
    }
    norms
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[src]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(Error::shape("conv2d", x, k));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, k));
        }
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

/// Unfolds `x[B,C,H,W]` into `cols[C*kh*kw, B*Ho*Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.rows() * ncols];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let y = (oy * g.stride + i) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * g.w..][..g.w];
                        let dst = &mut row[b * hw + oy * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = (ox * g.stride + j) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                *d = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols` back into an image-shaped buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let y = (oy * g.stride + i) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * g.w..][..g.w];
                        let src = &row[b * hw + oy * g.wo..][..g.wo];
                        for (ox, s) in src.iter().enumerate() {
                            let xx = (ox * g.stride + j) as isize - g.pad as isize;
                            if xx >= 0 && xx < g.w as isize {
                                dst[xx as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Averages `x[B,C,w,w]` over the `m x m` grid of equal cells, giving
/// `[B, m*m, C]` with cells enumerated row-major.
pub(crate) fn cell_pool(x: &[f64], batch: usize, ch: usize, width: usize, m: usize) -> Vec<f64> {
    let s = width / m;
    let inv = 1.0 / (s * s) as f64;
    let cells = m * m;
    let mut out = vec![0.0; batch * cells * ch];
    for b in 0..batch {
        for c in 0..ch {
            let plane = &x[(b * ch + c) * width * width..][..width * width];
            for ci in 0..m {
                for cj in 0..m {
                    let mut acc = 0.0;
                    for y in ci * s..(ci + 1) * s {
                        for xx in cj * s..(cj + 1) * s {
                            acc += plane[y * width + xx];
                        }
                    }
                    out[(b * cells + ci * m + cj) * ch + c] = acc * inv;
                }
            }
        }
    }
    out
}

pub(crate) fn cell_pool_backward(g: &[f64], batch: usize, ch: usize, width: usize, m: usize) -> Vec<f64> {
    let s = width / m;
    let inv = 1.0 / (s * s) as f64;
    let cells = m * m;
    let mut dx = vec![0.0; batch * ch * width * width];
    for b in 0..batch {
        for c in 0..ch {
            let plane = &mut dx[(b * ch + c) * width * width..][..width * width];
            for y in 0..width {
                for xx in 0..width {
                    let n = (y / s) * m + xx / s;
                    plane[y * width + xx] = g[(b * cells + n) * ch + c] * inv;
                }
            }
        }
    }
    dx
}
