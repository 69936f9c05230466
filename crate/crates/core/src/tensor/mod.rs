//! Dense f64 tensors, a define-by-run reverse-mode graph, a finite-difference
//! gradient checker and the `ICDT` binary container.

mod graph;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;

pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, GradCheckReport, GraphFn, ScalarFn};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Row-major dense array of `f64` values.
///
/// Rank-0 tensors (empty shape) hold a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to match `data`; internal fast path.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Plain matrix product without graph tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n, p) = kernels::matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![0.0; m * p];
        kernels::gemm(m, n, p, 1.0, &self.data, n, 1, &other.data, p, 1, 0.0, &mut out);
        Ok(Tensor::from_parts(vec![m, p], out))
    }

    /// 2-D transpose without graph tracking.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", self.shape)));
        }
        Ok(kernels::permute(self, &[1, 0]))
    }
}

/// `KL(p || q)` averaged over all rows along `axis`.
///
/// Both operands must be distributions along `axis` (entries `>= 0`, rows
/// summing to one within `1e-9`). Terms with `p == 0` contribute nothing.
pub fn kl_divergence(p: &Tensor, q: &Tensor, axis: usize) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    let (outer, n, inner) = kernels::split_axis(p.shape(), axis, "kl_divergence")?;
    for t in [p, q] {
        kernels::validate_distribution(t.data(), outer, n, inner)?;
    }
    let mut total = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            let mut row = 0.0;
            for k in 0..n {
                let idx = (o * n + k) * inner + i;
                let (pv, qv) = (p.data[idx], q.data[idx]);
                if pv == 0.0 {
                    continue;
                }
                if qv == 0.0 {
                    return Err(Error::Distribution {
                        row: o * inner + i,
                        reason: "q is zero where p has mass".into(),
                    });
                }
                row += pv * (pv.ln() - qv.ln());
            }
            total += row;
        }
    }
    Ok(total / (outer * inner) as f64)
}

/// Numerically stable softmax along `axis`, no graph tracking.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = kernels::split_axis(x.shape(), axis, "softmax")?;
    let mut out = x.data.clone();
    kernels::softmax_inplace(&mut out, outer, n, inner);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// L2 normalization along `axis`; slices with norm `<= eps` are divided by `eps`.
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let (outer, n, inner) = kernels::split_axis(x.shape(), axis, "l2_normalize")?;
    let mut out = x.data.clone();
    kernels::l2_normalize_inplace(&mut out, outer, n, inner, eps);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_pair() {
        let s = softmax(&Tensor::zeros(&[4]), 0).unwrap();
        for v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(vec![2], vec![0.36, 0.48]).unwrap(), 0).unwrap();
        // 1 / (1 + e^{0.12})
        let e = 1.0 / (1.0 + 0.12f64.exp());
        assert!((s.data()[0] - e).abs() < 1e-15);
        assert!((s.data()[0] - 0.470).abs() < 1e-3);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        assert!(softmax(&Tensor::zeros(&[3]), 1).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize(&x, 0, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&y, 0, 1e-12).unwrap();
        assert!(again.max_abs_diff(&y) < 1e-15);
        let z = l2_normalize(&Tensor::zeros(&[2]), 0, 1e-12).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
        assert!(kl_divergence(&p, &p, 1).unwrap().abs() < 1e-15);
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let got = kl_divergence(&p, &q, 1).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_row() {
        let p = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.6, 0.6]).unwrap();
        match kl_divergence(&p, &p, 1) {
            Err(Error::Distribution { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected distribution error, got {other:?}"),
        }
    }
}
