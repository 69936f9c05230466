//! Datasets and seeded batching.
//!
//! Images are stored flat as `[N, 3, H, W]` f64 in row-major order. Every
//! random choice (synthetic sampling, per-epoch shuffles, augmentation) is
//! drawn from a ChaCha8 stream keyed by an explicit seed.

mod cifar;
mod synth;

pub use cifar::{cifar_read, CifarVariant};
pub use synth::synth_generate;

use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => Err(Error::config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Pixel noise standard deviation for synthetic data.
    pub noise_std: f64,
    /// Maximum synthetic translation in pixels (each axis).
    pub max_shift: usize,
    /// Directory holding the CIFAR binary files.
    pub path: Option<PathBuf>,
    /// Per-channel normalization; `None` fits it on the training split.
    pub normalization: Option<Normalization>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            num_classes: 8,
            image_size: 32,
            train_size: 2000,
            test_size: 500,
            seed: 0,
            noise_std: 0.25,
            max_shift: 2,
            path: None,
            normalization: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.image_size == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("image and split sizes must be > 0"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        match self.kind {
            DatasetKind::Synthetic => {}
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let want = if self.kind == DatasetKind::Cifar10 { 10 } else { 100 };
                if self.num_classes != want || self.image_size != 32 {
                    return Err(Error::config(format!(
                        "{} needs num_classes = {want} and image_size = 32",
                        self.kind.as_str()
                    )));
                }
                if self.path.is_none() {
                    return Err(Error::config("cifar datasets need a path"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, num_classes: usize, image_size: usize) -> Result<Self> {
        let per = CHANNELS * image_size * image_size;
        if images.len() != labels.len() * per {
            return Err(Error::dim(
                "dataset",
                format!("{} pixels for {} images of {per}", images.len(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Writes `images.icdt` (`[N, 3, H, W]`) and `labels.icdt` (`[N]`).
    pub fn export_icdt(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let s = self.image_size;
        io::save(
            dir.join("images.icdt"),
            &Tensor::new(vec![self.len(), CHANNELS, s, s], self.images.clone())?,
        )?;
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        io::save(dir.join("labels.icdt"), &Tensor::new(vec![self.len()], labels)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    /// Per-channel mean and (population) standard deviation.
    pub fn fit(ds: &Dataset) -> Self {
        let hw = ds.image_size * ds.image_size;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        let count = (ds.len() * hw) as f64;
        for c in 0..CHANNELS {
            let plane = |i: usize| &ds.image(i)[c * hw..(c + 1) * hw];
            let m = (0..ds.len()).map(|i| plane(i).iter().sum::<f64>()).sum::<f64>() / count;
            let v = (0..ds.len())
                .map(|i| plane(i).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let hw = ds.image_size * ds.image_size;
        for img in ds.images.chunks_mut(CHANNELS * hw) {
            for (c, plane) in img.chunks_mut(hw).enumerate() {
                for x in plane {
                    *x = (*x - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Normalized train and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

/// Loads (or generates) both splits and normalizes them with the spec's
/// constants, fitting them on the training split when unset.
pub fn load(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let (mut train, mut test) = match spec.kind {
        DatasetKind::Synthetic => synth_generate(spec)?,
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if spec.kind == DatasetKind::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let dir = spec.path.as_ref().expect("validated");
            let mut train = None::<Dataset>;
            for f in variant.train_files() {
                let part = cifar_read(dir.join(f), variant)?;
                train = Some(match train {
                    None => part,
                    Some(mut acc) => {
                        acc.images.extend(part.images);
                        acc.labels.extend(part.labels);
                        acc
                    }
                });
            }
            let test = cifar_read(dir.join(variant.test_file()), variant)?;
            (
                truncate(train.expect("at least one train file"), spec.train_size),
                truncate(test, spec.test_size),
            )
        }
    };
    let normalization = spec.normalization.unwrap_or_else(|| Normalization::fit(&train));
    normalization.apply(&mut train);
    normalization.apply(&mut test);
    Ok(Splits {
        train,
        test,
        normalization,
    })
}

fn truncate(mut ds: Dataset, n: usize) -> Dataset {
    if n < ds.len() {
        let per = ds.image_len();
        ds.labels.truncate(n);
        ds.images.truncate(n * per);
    }
    ds
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, 3, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// The batches of one training epoch.
///
/// The order is a seeded shuffle keyed by `(seed, epoch)`. With `augment`
/// each image is flipped horizontally with probability 1/2 and then cropped
/// back to size from a 4-pixel reflect-padded copy.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize, augment: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|idx| assemble(ds, idx, augment.then_some(&mut rng)))
        .collect()
}

/// Unshuffled, unaugmented batches for evaluation.
pub fn eval_batches(ds: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    order.chunks(batch_size).map(|idx| assemble(ds, idx, None)).collect()
}

const PAD: usize = 4;

fn assemble(ds: &Dataset, idx: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Batch> {
    let per = ds.image_len();
    let s = ds.image_size;
    let mut images = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        match rng.as_deref_mut() {
            None => images.extend_from_slice(ds.image(i)),
            Some(r) => {
                let flip = r.random_bool(0.5);
                let dy = r.random_range(0..=2 * PAD);
                let dx = r.random_range(0..=2 * PAD);
                augment_into(ds.image(i), s, flip, dy, dx, &mut images);
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(vec![idx.len(), CHANNELS, s, s], images)?,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        indices: idx.to_vec(),
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Flip, then take the `s x s` window at `(dy, dx)` of the padded image.
fn augment_into(img: &[f64], s: usize, flip: bool, dy: usize, dx: usize, out: &mut Vec<f64>) {
    for c in 0..CHANNELS {
        let plane = &img[c * s * s..(c + 1) * s * s];
        for y in 0..s {
            let sy = reflect(y as isize + dy as isize - PAD as isize, s);
            for x in 0..s {
                let mut sx = reflect(x as isize + dx as isize - PAD as isize, s);
                if flip {
                    sx = s - 1 - sx;
                }
                out.push(plane[sy * s + sx]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let s = 4;
        let images = (0..n * CHANNELS * s * s).map(|v| v as f64).collect();
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, s).unwrap()
    }

    #[test]
    fn epoch_is_a_permutation() {
        let ds = tiny(23);
        let bs = batches(&ds, 5, 9, 2, false).unwrap();
        assert_eq!(bs.len(), 5);
        assert_eq!(bs.last().unwrap().labels.len(), 3);
        let mut seen: Vec<usize> = bs.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn shuffles_are_seeded_per_epoch() {
        let ds = tiny(30);
        let a = batches(&ds, 7, 1, 0, true).unwrap();
        assert_eq!(a, batches(&ds, 7, 1, 0, true).unwrap());
        assert_ne!(a, batches(&ds, 7, 1, 1, true).unwrap());
        assert_ne!(a, batches(&ds, 7, 2, 0, true).unwrap());
    }

    #[test]
    fn unaugmented_batches_copy_source_pixels() {
        let ds = tiny(10);
        for b in batches(&ds, 4, 3, 0, false).unwrap() {
            for (row, &i) in b.indices.iter().enumerate() {
                let per = ds.image_len();
                assert_eq!(&b.images.data()[row * per..(row + 1) * per], ds.image(i));
            }
        }
        let ev = eval_batches(&ds, 4).unwrap();
        assert_eq!(ev[0].indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let ds = tiny(1);
        let mut out = Vec::new();
        augment_into(ds.image(0), 4, false, PAD, PAD, &mut out);
        assert_eq!(out, ds.image(0));
        out.clear();
        augment_into(ds.image(0), 4, true, PAD, PAD, &mut out);
        assert_eq!(out[0], ds.image(0)[3]);
    }

    #[test]
    fn normalization_standardizes_channels() {
        let mut ds = tiny(6);
        let norm = Normalization::fit(&ds);
        norm.apply(&mut ds);
        let again = Normalization::fit(&ds);
        for c in 0..CHANNELS {
            assert!(again.mean[c].abs() < 1e-12);
            assert!((again.std[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn export_writes_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(3);
        ds.export_icdt(dir.path()).unwrap();
        let imgs = io::load(dir.path().join("images.icdt")).unwrap();
        assert_eq!(imgs.shape(), &[3, 3, 4, 4]);
        assert_eq!(imgs.data(), &ds.images[..]);
        let labels = io::load(dir.path().join("labels.icdt")).unwrap();
        assert_eq!(labels.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let bad = DatasetSpec {
            num_classes: 1,
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetSpec {
            kind: DatasetKind::Cifar10,
            num_classes: 10,
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
