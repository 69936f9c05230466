use crate::data::{DatasetKind, DatasetSpec, Normalization};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::nn::checkpoint::parse_manifest;
use serde::Serialize;
use std::path::PathBuf;

/// Optimizer and schedule settings. `epochs` and the decay milestones are
/// multiplied by `schedule_scale` (then rounded); the distillation warm-up
/// is not.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule_scale: f64,
    /// Random flip + reflect-pad crop on training batches.
    pub augment: bool,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 240,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            schedule_scale: 1.0,
            augment: false,
            distill: DistillConfig::default(),
        }
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    (n as f64 * scale).round() as usize
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.schedule_scale > 0.0) || !self.schedule_scale.is_finite() {
            return Err(Error::config(format!("schedule_scale must be > 0, got {}", self.schedule_scale)));
        }
        if self.scaled_epochs() == 0 {
            return Err(Error::config("schedule has zero epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr and lr_decay_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0, 1) and weight_decay >= 0"));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(format!(
                "lr_decay_epochs {:?} must be strictly increasing",
                self.lr_decay_epochs
            )));
        }
        if self.lr_decay_epochs.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::config("lr_decay_epochs must all be < epochs"));
        }
        self.distill.validate()
    }

    pub fn scaled_epochs(&self) -> usize {
        scaled(self.epochs, self.schedule_scale)
    }

    pub fn scaled_milestones(&self) -> Vec<usize> {
        self.lr_decay_epochs.iter().map(|&m| scaled(m, self.schedule_scale)).collect()
    }
}

/// Everything a command needs: data, optimization and the logit-map width.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
    /// Side `w` of the spatial logit map.
    pub map_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetSpec::default(),
            train: TrainConfig::default(),
            map_width: 4,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("`{key}`: bad list entry `{s}`"))))
        .collect()
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = list(key, v)?;
    xs.try_into().map_err(|_| Error::config(format!("`{key}` needs three values")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut mean = None;
        let mut std = None;
        for (k, v) in parse_manifest(text)? {
            let (t, data) = (&mut cfg.train, &mut cfg.data);
            let v = v.as_str();
            match k.as_str() {
                "epochs" => t.epochs = value(&k, v)?,
                "batch_size" => t.batch_size = value(&k, v)?,
                "lr" => t.lr = value(&k, v)?,
                "lr_decay_epochs" => t.lr_decay_epochs = list(&k, v)?,
                "lr_decay_factor" => t.lr_decay_factor = value(&k, v)?,
                "momentum" => t.momentum = value(&k, v)?,
                "weight_decay" => t.weight_decay = value(&k, v)?,
                "seed" => t.seed = value(&k, v)?,
                "schedule_scale" => t.schedule_scale = value(&k, v)?,
                "augment" => t.augment = value(&k, v)?,
                "scales" => t.distill.scales = list(&k, v)?,
                "temperature" => t.distill.temperature = value(&k, v)?,
                "alpha" => t.distill.alpha = value(&k, v)?,
                "gamma" => t.distill.gamma = value(&k, v)?,
                "warmup_epochs" => t.distill.warmup_epochs = value(&k, v)?,
                "gram_mode" => t.distill.gram_mode = v.parse()?,
                "eps" => t.distill.eps = value(&k, v)?,
                "kd_weight" => t.distill.kd_weight = if v == "alpha" { None } else { Some(value(&k, v)?) },
                "tau_squared" => t.distill.tau_squared = value(&k, v)?,
                "icd_cell_mean" => t.distill.icd_cell_mean = value(&k, v)?,
                "map_width" => cfg.map_width = value(&k, v)?,
                "dataset" => data.kind = v.parse::<DatasetKind>()?,
                "num_classes" => data.num_classes = value(&k, v)?,
                "image_size" => data.image_size = value(&k, v)?,
                "train_size" => data.train_size = value(&k, v)?,
                "test_size" => data.test_size = value(&k, v)?,
                "data_seed" => data.seed = value(&k, v)?,
                "noise_std" => data.noise_std = value(&k, v)?,
                "max_shift" => data.max_shift = value(&k, v)?,
                "data_path" => data.path = Some(PathBuf::from(v)),
                "norm_mean" => mean = Some(triple(&k, v)?),
                "norm_std" => std = Some(triple(&k, v)?),
                other => return Err(Error::config(format!("unknown config key `{other}`"))),
            }
        }
        cfg.data.normalization = match (mean, std) {
            (Some(mean), Some(std)) => Some(Normalization { mean, std }),
            (None, None) => None,
            _ => return Err(Error::config("norm_mean and norm_std must be given together")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.map_width == 0 || !self.map_width.is_power_of_two() {
            return Err(Error::config(format!("map_width must be a power of two, got {}", self.map_width)));
        }
        Ok(())
    }

    /// The config as `key = value` text that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let (t, d, data) = (&self.train, &self.train.distill, &self.data);
        let mut lines = vec![
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay_epochs", join(&t.lr_decay_epochs)),
            ("lr_decay_factor", t.lr_decay_factor.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("schedule_scale", t.schedule_scale.to_string()),
            ("augment", t.augment.to_string()),
            ("scales", join(&d.scales)),
            ("temperature", d.temperature.to_string()),
            ("alpha", d.alpha.to_string()),
            ("gamma", d.gamma.to_string()),
            ("warmup_epochs", d.warmup_epochs.to_string()),
            ("gram_mode", d.gram_mode.to_string()),
            ("eps", d.eps.to_string()),
            ("kd_weight", d.kd_weight.map_or("alpha".into(), |w| w.to_string())),
            ("tau_squared", d.tau_squared.to_string()),
            ("icd_cell_mean", d.icd_cell_mean.to_string()),
            ("map_width", self.map_width.to_string()),
            ("dataset", data.kind.as_str().into()),
            ("num_classes", data.num_classes.to_string()),
            ("image_size", data.image_size.to_string()),
            ("train_size", data.train_size.to_string()),
            ("test_size", data.test_size.to_string()),
            ("data_seed", data.seed.to_string()),
            ("noise_std", data.noise_std.to_string()),
            ("max_shift", data.max_shift.to_string()),
        ];
        if let Some(p) = &data.path {
            lines.push(("data_path", p.display().to_string()));
        }
        if let Some(n) = &data.normalization {
            lines.push(("norm_mean", join(&n.mean)));
            lines.push(("norm_std", join(&n.std)));
        }
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
