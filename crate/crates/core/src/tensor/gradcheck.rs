//! Central-difference gradient verification.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use serde::Serialize;

/// Finite-difference step used by [`grad_check`].
pub const STEP: f64 = 1e-5;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failed(op_name: &str, tolerance: f64, diagnostic: String) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_abs_err: f64::INFINITY,
            max_rel_err: f64::INFINITY,
            passed: false,
            tolerance,
            diagnostic: Some(diagnostic),
        }
    }
}

/// A scalar-valued function of one tensor that can report its own gradient.
pub trait ScalarFn {
    fn name(&self) -> &str;
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn gradient(&self, x: &Tensor) -> Result<Tensor>;
}

/// Adapts a graph-building closure `(graph, input) -> scalar` to [`ScalarFn`].
pub struct GraphFn<F> {
    name: String,
    build: F,
}

impl<F> GraphFn<F>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    pub fn new(name: impl Into<String>, build: F) -> Self {
        GraphFn {
            name: name.into(),
            build,
        }
    }
}

impl<F> ScalarFn for GraphFn<F>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn value(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = (self.build)(&mut g, v)?;
        Ok(g.value(out).item())
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = (self.build)(&mut g, v)?;
        g.backward(out)?;
        Ok(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

/// Compares `op.gradient(input)` with elementwise central differences.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`; the check
/// passes when the largest relative error is within `tolerance`.
pub fn grad_check(op: &dyn ScalarFn, input: &Tensor, tolerance: f64) -> GradCheckReport {
    let name = op.name();
    if !(tolerance > 0.0) {
        return GradCheckReport::failed(name, tolerance, format!("tolerance must be positive, got {tolerance}"));
    }
    let analytic = match op.gradient(input) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(name, tolerance, format!("analytic gradient failed: {e}")),
    };
    if analytic.shape() != input.shape() {
        return GradCheckReport::failed(
            name,
            tolerance,
            format!("gradient shape {:?} != input shape {:?}", analytic.shape(), input.shape()),
        );
    }
    if let Some(i) = analytic.data().iter().position(|v| !v.is_finite()) {
        return GradCheckReport::failed(
            name,
            tolerance,
            format!("non-finite analytic gradient at flat index {i}: {}", analytic.data()[i]),
        );
    }

    let mut probe = input.clone();
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for i in 0..input.numel() {
        let x0 = input.data()[i];
        probe.data_mut()[i] = x0 + STEP;
        let plus = op.value(&probe);
        probe.data_mut()[i] = x0 - STEP;
        let minus = op.value(&probe);
        probe.data_mut()[i] = x0;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                return GradCheckReport::failed(name, tolerance, format!("evaluation failed at index {i}: {e}"))
            }
        };
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        op_name: name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        passed: max_rel <= tolerance,
        tolerance,
        diagnostic: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct DoubledSquare;

    impl ScalarFn for DoubledSquare {
        fn name(&self) -> &str {
            "sum_of_squares_wrong_grad"
        }
        fn value(&self, x: &Tensor) -> Result<f64> {
            Ok(x.data().iter().map(|v| v * v).sum())
        }
        fn gradient(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.map(|v| 4.0 * v))
        }
    }

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let f = GraphFn::new("sum", |g: &mut Graph, x| Ok(g.sum(x)));
        let r = grad_check(&f, &x, 1e-4);
        assert!(r.passed && r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(&DoubledSquare, &x, 1e-4);
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_reports_failure() {
        struct Nan;
        impl ScalarFn for Nan {
            fn name(&self) -> &str {
                "nan"
            }
            fn value(&self, _: &Tensor) -> Result<f64> {
                Ok(0.0)
            }
            fn gradient(&self, x: &Tensor) -> Result<Tensor> {
                Ok(x.map(|_| f64::NAN))
            }
        }
        let r = grad_check(&Nan, &Tensor::zeros(&[2]), 1e-4);
        assert!(!r.passed);
        assert!(r.diagnostic.unwrap().contains("non-finite"));
    }
}
