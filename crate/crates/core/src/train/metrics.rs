use crate::losses::{LossValues, Method};
use serde::Serialize;
use std::fmt::Write as _;

/// Columns of `metrics.csv`, one row per epoch. Loss columns are
/// sample-weighted means over the epoch's training batches; `warmup` is the
/// factor applied to `sdd` and `icd` in `total`.
pub const CSV_HEADER: &str = "epoch,lr,warmup,ce,kd,sdd,icd,total,train_acc,test_acc";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub warmup: f64,
    pub losses: LossValues,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Wall-clock seconds; kept out of the CSV and JSON outputs.
    #[serde(skip)]
    pub seconds: f64,
}

/// One invariant checked at the end of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub role: String,
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub checks: Vec<Check>,
}

impl RunMetrics {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for e in &self.epochs {
            let l = &e.losses;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch, e.lr, e.warmup, l.ce, l.kd, l.sdd, l.icd, l.total, e.train_acc, e.test_acc
            );
        }
        out
    }

    /// Summary with the final epoch, every check and the full history.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "role": self.role,
            "method": self.method,
            "seed": self.seed,
            "final_test_acc": self.final_test_acc(),
            "final": self.epochs.last(),
            "checks_passed": self.checks_passed(),
            "checks": self.checks,
            "epochs": self.epochs,
        })
    }
}
