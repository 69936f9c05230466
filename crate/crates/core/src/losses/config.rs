use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

/// Orientation of the Gram matrix built from a cell's `[batch, K]` logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GramMode {
    /// `Xᵀ X`, `K x K`: class co-activation, independent of batch size.
    ClassCorrelation,
    /// `X Xᵀ`, `batch x batch`: cosine similarity between samples.
    SampleSimilarity,
}

impl GramMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GramMode::ClassCorrelation => "class_correlation",
            GramMode::SampleSimilarity => "sample_similarity",
        }
    }
}

impl fmt::Display for GramMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GramMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_correlation" => Ok(GramMode::ClassCorrelation),
            "sample_similarity" => Ok(GramMode::SampleSimilarity),
            other => Err(Error::config(format!("unknown gram_mode `{other}`"))),
        }
    }
}

/// Which objective a student is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Labels only.
    #[serde(rename = "ce")]
    CeOnly,
    /// CE plus globally pooled KD.
    Kd,
    /// CE plus warmed-up scale-decoupled KD.
    Sdd,
    /// CE plus warmed-up scale-decoupled KD and Gram-structure loss.
    Icd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::CeOnly => "ce",
            Method::Kd => "kd",
            Method::Sdd => "sdd",
            Method::Icd => "icd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "ce_only" => Ok(Method::CeOnly),
            "kd" => Ok(Method::Kd),
            "sdd" => Ok(Method::Sdd),
            "icd" => Ok(Method::Icd),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Distillation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillConfig {
    pub scales: Vec<usize>,
    pub temperature: f64,
    /// Weight of the scale-decoupled KD term.
    pub alpha: f64,
    /// Weight of the Gram-structure term.
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub gram_mode: GramMode,
    pub eps: f64,
    /// Weight of plain KD for [`Method::Kd`]; `None` means use `alpha`.
    pub kd_weight: Option<f64>,
    /// Multiply tempered KL terms by `temperature²`.
    pub tau_squared: bool,
    /// Divide each scale's cell sum by its cell count.
    pub icd_cell_mean: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            scales: vec![1, 2, 4],
            temperature: 4.0,
            alpha: 1.0,
            gamma: 2.0,
            warmup_epochs: 30,
            gram_mode: GramMode::ClassCorrelation,
            eps: 1e-12,
            kd_weight: None,
            tau_squared: true,
            icd_cell_mean: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("kd_weight", self.kd_weight())] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.scales.is_empty() || !self.scales.windows(2).all(|w| w[0] < w[1]) || self.scales[0] == 0 {
            return Err(Error::config(format!("scales {:?} must be positive and strictly increasing", self.scales)));
        }
        Ok(())
    }

    pub fn kd_weight(&self) -> f64 {
        self.kd_weight.unwrap_or(self.alpha)
    }

    pub(crate) fn kl_factor(&self) -> f64 {
        if self.tau_squared {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}
