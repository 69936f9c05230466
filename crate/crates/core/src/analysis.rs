//! Teacher/student logit-correlation discrepancy.
//!
//! The class-correlation matrix of a model is the Pearson correlation
//! between its global-logit columns over an evaluation set. The discrepancy
//! is the entrywise absolute difference of the teacher and student matrices.

use crate::data::{eval_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{icd_loss_per_scale, DistillConfig};
use crate::nn::ConvNet;
use crate::scale::{pool_cells, ScaleSpec};
use crate::tensor::{Graph, Tensor};
use crate::train::predict;
use serde::Serialize;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// `[K, K]`, symmetric; unit diagonal except for constant classes.
    pub matrix: Tensor,
    /// Classes whose logit column is constant; their rows and columns are 0.
    pub constant_classes: Vec<usize>,
}

/// Two-pass Pearson correlation between the columns of `logits[N, K]`.
pub fn pearson_correlation(logits: &Tensor) -> Result<Correlation> {
    let s = logits.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::dim("pearson_correlation", format!("need [N>=2, K] logits, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    let x = logits.data();
    let mean: Vec<f64> = (0..k).map(|j| (0..n).map(|i| x[i * k + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; k * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in a..k {
                cov[a * k + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let sd: Vec<f64> = (0..k).map(|a| cov[a * k + a].sqrt()).collect();
    let constant_classes: Vec<usize> = (0..k).filter(|&a| !(sd[a] > 0.0)).collect();
    let mut m = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            if constant_classes.contains(&a) || constant_classes.contains(&b) {
                continue;
            }
            let r = if a == b { 1.0 } else { cov[a * k + b] / (sd[a] * sd[b]) };
            m[a * k + b] = r;
            m[b * k + a] = r;
        }
    }
    Ok(Correlation {
        matrix: Tensor::new(vec![k, k], m)?,
        constant_classes,
    })
}

/// Global logits of `net` over all of `ds`, `[N, K]`.
pub fn collect_logits(net: &ConvNet, ds: &Dataset, batch_size: usize) -> Result<Tensor> {
    let mut all = Vec::with_capacity(ds.len() * net.spec.num_classes);
    for b in eval_batches(ds, batch_size)? {
        all.extend_from_slice(predict(net, &b.images)?.data());
    }
    Tensor::new(vec![ds.len(), net.spec.num_classes], all)
}

pub fn logit_correlation(net: &ConvNet, ds: &Dataset, batch_size: usize) -> Result<Correlation> {
    pearson_correlation(&collect_logits(net, ds, batch_size)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleComponent {
    pub scale: usize,
    pub icd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyReport {
    /// `|corr_T - corr_S|`, `[K, K]`.
    pub matrix: Tensor,
    pub mean: f64,
    /// Weighted iCD loss per scale, averaged over evaluation batches.
    pub per_scale: Vec<ScaleComponent>,
    pub teacher_constant_classes: Vec<usize>,
    pub student_constant_classes: Vec<usize>,
}

impl DiscrepancyReport {
    pub fn from_correlations(t: &Correlation, s: &Correlation) -> Result<Self> {
        if t.matrix.shape() != s.matrix.shape() {
            return Err(Error::config(format!(
                "class count mismatch: {:?} vs {:?}",
                t.matrix.shape(),
                s.matrix.shape()
            )));
        }
        let d: Vec<f64> = t.matrix.data().iter().zip(s.matrix.data()).map(|(a, b)| (a - b).abs()).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        Ok(DiscrepancyReport {
            matrix: Tensor::new(t.matrix.shape().to_vec(), d)?,
            mean,
            per_scale: Vec::new(),
            teacher_constant_classes: t.constant_classes.clone(),
            student_constant_classes: s.constant_classes.clone(),
        })
    }

    /// The matrix as CSV with a `class` column and one column per class.
    pub fn to_csv(&self) -> String {
        let k = self.matrix.shape()[0];
        let mut out = String::from("class");
        for j in 0..k {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for i in 0..k {
            let _ = write!(out, "{i}");
            for j in 0..k {
                let _ = write!(out, ",{}", self.matrix.at(&[i, j]));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean": self.mean,
            "per_scale": self.per_scale,
            "teacher_constant_classes": self.teacher_constant_classes,
            "student_constant_classes": self.student_constant_classes,
            "warning": !(self.teacher_constant_classes.is_empty() && self.student_constant_classes.is_empty()),
        })
    }
}

/// Correlation discrepancy plus the per-scale iCD loss over `ds`.
pub fn discrepancy(
    teacher: &ConvNet,
    student: &ConvNet,
    ds: &Dataset,
    cfg: &DistillConfig,
    batch_size: usize,
) -> Result<DiscrepancyReport> {
    let (ts, ss) = (&teacher.spec, &student.spec);
    if ts.num_classes != ss.num_classes || ts.spatial_size != ss.spatial_size {
        return Err(Error::config(format!(
            "teacher (K={}, w={}) and student (K={}, w={}) do not match",
            ts.num_classes, ts.spatial_size, ss.num_classes, ss.spatial_size
        )));
    }
    let mut report = DiscrepancyReport::from_correlations(
        &logit_correlation(teacher, ds, batch_size)?,
        &logit_correlation(student, ds, batch_size)?,
    )?;
    let spec = ScaleSpec::new(cfg.scales.clone(), ts.spatial_size)?;
    let mut sums = vec![0.0; spec.scales().len()];
    for b in eval_batches(ds, batch_size)? {
        let mut g = Graph::new();
        let t = g.constant(teacher.logit_map(&b.images)?.into_values());
        let s = g.constant(student.logit_map(&b.images)?.into_values());
        let tc = pool_cells(&mut g, t, &spec)?;
        let sc = pool_cells(&mut g, s, &spec)?;
        for (acc, (_, v)) in sums.iter_mut().zip(icd_loss_per_scale(&mut g, &tc, &sc, cfg)?) {
            *acc += g.value(v).item() * b.labels.len() as f64;
        }
    }
    report.per_scale = spec
        .scales()
        .iter()
        .zip(sums)
        .map(|(&scale, s)| ScaleComponent {
            scale,
            icd: s / ds.len() as f64,
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corr_ref(x: &[Vec<f64>], a: usize, b: usize) -> f64 {
        let n = x.len() as f64;
        let ma = x.iter().map(|r| r[a]).sum::<f64>() / n;
        let mb = x.iter().map(|r| r[b]).sum::<f64>() / n;
        let cov: f64 = x.iter().map(|r| (r[a] - ma) * (r[b] - mb)).sum();
        let va: f64 = x.iter().map(|r| (r[a] - ma).powi(2)).sum();
        let vb: f64 = x.iter().map(|r| (r[b] - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[40, 5], 2.0, &mut rng);
        let rows: Vec<Vec<f64>> = t.data().chunks(5).map(|r| r.to_vec()).collect();
        let c = pearson_correlation(&t).unwrap();
        assert!(c.constant_classes.is_empty());
        for a in 0..5 {
            assert!((c.matrix.at(&[a, a]) - 1.0).abs() < 1e-10);
            for b in 0..5 {
                assert!((c.matrix.at(&[a, b]) - corr_ref(&rows, a, b)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_column_is_flagged() {
        let t = Tensor::new(vec![3, 3], vec![1.0, 5.0, 0.0, 2.0, 5.0, 1.0, 4.0, 5.0, 3.0]).unwrap();
        let c = pearson_correlation(&t).unwrap();
        assert_eq!(c.constant_classes, vec![1]);
        assert!((0..3).all(|j| c.matrix.at(&[1, j]) == 0.0 && c.matrix.at(&[j, 1]) == 0.0));
        assert!(c.matrix.at(&[0, 2]).is_finite());
        let rep = DiscrepancyReport::from_correlations(&c, &c).unwrap();
        assert_eq!(rep.to_json()["warning"], true);
    }

    #[test]
    fn class_count_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = pearson_correlation(&Tensor::randn(&[10, 3], 1.0, &mut rng)).unwrap();
        let b = pearson_correlation(&Tensor::randn(&[10, 4], 1.0, &mut rng)).unwrap();
        assert!(matches!(DiscrepancyReport::from_correlations(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = pearson_correlation(&Tensor::randn(&[10, 2], 1.0, &mut rng)).unwrap();
        let rep = DiscrepancyReport::from_correlations(&a, &a).unwrap();
        assert_eq!(rep.to_csv(), "class,0,1\n0,0,0\n1,0,0\n");
    }

    proptest! {
        #[test]
        fn discrepancy_is_symmetric_with_oracle_mean(seed in 0u64..5000, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = pearson_correlation(&Tensor::randn(&[12, k], 1.0, &mut rng)).unwrap();
            let b = pearson_correlation(&Tensor::randn(&[12, k], 1.0, &mut rng)).unwrap();
            let ab = DiscrepancyReport::from_correlations(&a, &b).unwrap();
            let ba = DiscrepancyReport::from_correlations(&b, &a).unwrap();
            prop_assert_eq!(&ab.matrix, &ba.matrix);
            let mut total = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let d = ab.matrix.at(&[i, j]);
                    prop_assert!(d >= 0.0);
                    prop_assert!((d - ab.matrix.at(&[j, i])).abs() <= 1e-12);
                    total += (a.matrix.at(&[i, j]) - b.matrix.at(&[i, j])).abs();
                }
            }
            prop_assert!((ab.mean - total / (k * k) as f64).abs() <= 1e-12);
        }
    }
}
