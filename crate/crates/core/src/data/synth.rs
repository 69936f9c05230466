use super::{Dataset, DatasetKind, DatasetSpec, CHANNELS};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const PATCHES: usize = 4;

/// One fixed pattern per class: a dim background colour with a few
/// coloured rectangles on top.
fn prototypes(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    (0..spec.num_classes)
        .map(|_| {
            let mut img = vec![0.0; CHANNELS * s * s];
            let bg: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
            for c in 0..CHANNELS {
                img[c * s * s..(c + 1) * s * s].fill(bg[c]);
            }
            for _ in 0..PATCHES {
                let h = rng.random_range((s / 5).max(1)..=(s / 2).max(1));
                let w = rng.random_range((s / 5).max(1)..=(s / 2).max(1));
                let y0 = rng.random_range(0..=s - h);
                let x0 = rng.random_range(0..=s - w);
                let color: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                for c in 0..CHANNELS {
                    for y in y0..y0 + h {
                        img[c * s * s + y * s + x0..c * s * s + y * s + x0 + w].fill(color[c]);
                    }
                }
            }
            img
        })
        .collect()
}

fn sample_split(spec: &DatasetSpec, protos: &[Vec<f64>], n: usize, stream: u64) -> Result<Dataset> {
    let s = spec.image_size;
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(format!("noise_std: {e}")))?;
    let shift = spec.max_shift as i64;
    let mut images = Vec::with_capacity(n * CHANNELS * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let dy = rng.random_range(-shift..=shift) as isize;
        let dx = rng.random_range(-shift..=shift) as isize;
        let proto = &protos[label];
        for c in 0..CHANNELS {
            for y in 0..s as isize {
                for x in 0..s as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if (0..s as isize).contains(&sy) && (0..s as isize).contains(&sx) {
                        proto[c * s * s + sy as usize * s + sx as usize]
                    } else {
                        0.0
                    };
                    let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    images.push(base + eps);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, k, s)
}

/// Generates the raw (unnormalized) train and test splits.
///
/// Labels cycle through the classes so both splits are balanced. Each
/// sample is its class prototype translated by up to `max_shift` pixels
/// (uncovered pixels are 0) plus i.i.d. Gaussian pixel noise.
pub fn synth_generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.kind != DatasetKind::Synthetic {
        return Err(Error::config("synth_generate needs a synthetic dataset spec"));
    }
    spec.validate()?;
    let protos = prototypes(spec);
    Ok((
        sample_split(spec, &protos, spec.train_size, 1)?,
        sample_split(spec, &protos, spec.test_size, 2)?,
    ))
}
