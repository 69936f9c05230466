//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.txt` (`key = value` lines)
//! and one `ICDT` blob per parameter, named `<param>.icdt`. Parameters are
//! listed in the manifest's `params` key in canonical order:
//! `stage0.weight, stage0.bias, ..., stageN.bias, classifier.weight`.

use super::{ConvNet, ConvNetSpec};
use crate::error::{Error, Result};
use crate::tensor::io;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub net: ConvNet,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form entries such as `test_accuracy`; written sorted by key.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(role: impl Into<String>, net: ConvNet, epoch: usize, seed: u64) -> Self {
        Checkpoint {
            role: role.into(),
            net,
            epoch,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> String {
        let spec = &self.net.spec;
        let stages: Vec<String> = spec.stages.iter().map(|(c, s)| format!("{c}:{s}")).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("format", "icd-checkpoint-1".into());
        kv("role", self.role.clone());
        kv("stages", stages.join(","));
        kv("feature_channels", spec.feature_channels.to_string());
        kv("spatial_size", spec.spatial_size.to_string());
        kv("num_classes", spec.num_classes.to_string());
        kv("input_channels", spec.input_channels.to_string());
        kv("input_size", spec.input_size.to_string());
        kv("epoch", self.epoch.to_string());
        kv("seed", self.seed.to_string());
        kv("params", spec.param_names().join(","));
        for (k, v) in &self.extra {
            kv(k, v.clone());
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), self.manifest())?;
        for (name, t) in self.net.spec.param_names().iter().zip(&self.net.params) {
            io::save(dir.join(format!("{name}.icdt")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut map = parse_manifest(&text)?;
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::config(format!("checkpoint manifest missing `{k}`")))
        };
        let num = |k: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("manifest `{k}`: not a count: {v}")))
        };
        let format = take("format")?;
        if format != "icd-checkpoint-1" {
            return Err(Error::config(format!("unknown checkpoint format {format}")));
        }
        let role = take("role")?;
        let stages = take("stages")?
            .split(',')
            .map(|s| {
                let (c, st) = s
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("bad stage entry {s}")))?;
                Ok((num("stages", c.trim().into())?, num("stages", st.trim().into())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ConvNetSpec {
            stages,
            feature_channels: num("feature_channels", take("feature_channels")?)?,
            spatial_size: num("spatial_size", take("spatial_size")?)?,
            num_classes: num("num_classes", take("num_classes")?)?,
            input_channels: num("input_channels", take("input_channels")?)?,
            input_size: num("input_size", take("input_size")?)?,
        };
        spec.validate()?;
        let epoch = num("epoch", take("epoch")?)?;
        let seed_text = take("seed")?;
        let seed = seed_text
            .parse()
            .map_err(|_| Error::config(format!("manifest `seed`: {seed_text}")))?;
        let names: Vec<String> = take("params")?.split(',').map(|s| s.trim().to_string()).collect();
        if names != spec.param_names() {
            return Err(Error::config(format!("parameter list {names:?} does not match the spec")));
        }
        let params = names
            .iter()
            .map(|n| io::load(dir.join(format!("{n}.icdt"))))
            .collect::<Result<Vec<_>>>()?;
        let net = ConvNet::from_params(spec, params)?;
        Ok(Checkpoint {
            role,
            net,
            epoch,
            seed,
            extra: map,
        })
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
