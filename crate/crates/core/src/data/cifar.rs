use super::{Dataset, CHANNELS};
use crate::error::{Error, Result};
use std::path::Path;

const PIXELS: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn train_files(self) -> Vec<String> {
        match self {
            CifarVariant::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarVariant::Cifar100 => vec!["train.bin".into()],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

/// Reads a CIFAR binary file into `[0, 1]` pixels.
///
/// CIFAR-10 records are `label, 3072 pixels`; CIFAR-100 records are
/// `coarse, fine, 3072 pixels` and the fine label is used. Pixels are the
/// R, G and B planes of a 32x32 image, each row-major.
pub fn cifar_read(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / rec * rec) as u64,
            reason: format!("{} bytes is not a multiple of the {rec}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / rec;
    let k = variant.num_classes();
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let at = variant.label_bytes() - 1;
        let label = r[at] as usize;
        if label >= k {
            return Err(Error::Format {
                offset: (i * rec + at) as u64,
                reason: format!("label {label} >= {k}"),
            });
        }
        labels.push(label);
        images.extend(r[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    debug_assert_eq!(PIXELS, CHANNELS * 32 * 32);
    Dataset::new(images, labels, k, 32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(variant: CifarVariant, labels: &[u8], seed: u8) -> Vec<u8> {
        let mut r = labels.to_vec();
        assert_eq!(r.len(), variant.label_bytes());
        r.extend((0..PIXELS).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)));
        r
    }

    fn write(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn single_cifar100_record_uses_fine_label() {
        let f = write(&record(CifarVariant::Cifar100, &[3, 42], 0));
        let ds = cifar_read(f.path(), CifarVariant::Cifar100).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![42]);
        assert_eq!(ds.num_classes, 100);
    }

    #[test]
    fn pixels_roundtrip_through_bytes() {
        let recs: Vec<Vec<u8>> = (0..3).map(|i| record(CifarVariant::Cifar10, &[i * 3], i)).collect();
        let f = write(&recs.concat());
        let ds = cifar_read(f.path(), CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.labels, vec![0, 3, 6]);
        for (i, r) in recs.iter().enumerate() {
            for (got, &byte) in ds.image(i).iter().zip(&r[1..]) {
                assert!((got * 255.0 - byte as f64).abs() < 1e-9);
            }
        }
        // red plane first, row-major
        assert_eq!(ds.image(1)[1], r(&recs[1], 2));
        assert_eq!(ds.image(1)[1024], r(&recs[1], 1025));
    }

    fn r(rec: &[u8], i: usize) -> f64 {
        rec[i] as f64 / 255.0
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(CifarVariant::Cifar10, &[1], 0);
        bytes.extend(&record(CifarVariant::Cifar10, &[1], 0)[..100]);
        let f = write(&bytes);
        match cifar_read(f.path(), CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_a_format_error() {
        let mut bytes = record(CifarVariant::Cifar10, &[2], 0);
        bytes.extend(record(CifarVariant::Cifar10, &[10], 0));
        let f = write(&bytes);
        match cifar_read(f.path(), CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
