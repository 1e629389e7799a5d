//! Synthetic stand-ins for SAR chip datasets.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Image, LabeledImage, Result, Split};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Flattened images are Gaussian clusters around class-dependent means.
    Blobs,
    /// Rank-2 class structure under multiplicative speckle plus sparse spikes.
    LowrankSpeckle,
}

impl std::str::FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "lowrank_speckle" => Ok(Self::LowrankSpeckle),
            other => Err(DataError::InvalidArgument(format!(
                "unknown synthetic kind `{other}`"
            ))),
        }
    }
}

const BLOB_SIGMA: f64 = 0.05;
const SPECKLE_LOOKS: f64 = 4.0;
const SPIKE_FRACTION: f64 = 0.05;

pub fn class_name(index: usize) -> String {
    format!("c{index:02}")
}

pub fn synth_dataset(
    kind: SynthKind,
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_dataset_with_clean(
        kind,
        num_classes,
        per_class_train,
        per_class_test,
        image_size,
        seed,
    )
    .map(|(d, _)| d)
}

/// Like [`synth_dataset`], also returning each sample's noise-free image.
pub fn synth_dataset_with_clean(
    kind: SynthKind,
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Image>)> {
    if num_classes < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if per_class_train == 0 || per_class_test == 0 || image_size == 0 {
        return Err(DataError::InvalidArgument(
            "per-class counts and image size must be at least 1".into(),
        ));
    }
    let classes: Vec<String> = (0..num_classes).map(class_name).collect();
    let mut samples = Vec::with_capacity(num_classes * (per_class_train + per_class_test));
    let mut clean = Vec::with_capacity(samples.capacity());
    for (k, label) in classes.iter().enumerate() {
        let mut class_rng = seed::rng(seed::derive_indexed(seed, "synth-class", k as u64));
        let mut sample_rng = seed::rng(seed::derive_indexed(seed, "synth-sample", k as u64));
        let generator = ClassGenerator::new(kind, image_size, &mut class_rng);
        for (split, count) in [
            (Split::Train, per_class_train),
            (Split::Test, per_class_test),
        ] {
            for _ in 0..count {
                let (noisy, noise_free) = generator.sample(&mut sample_rng);
                samples.push(LabeledImage {
                    image: noisy,
                    label: label.clone(),
                    split,
                });
                clean.push(noise_free);
            }
        }
    }
    let name = match kind {
        SynthKind::Blobs => "synthetic-blobs",
        SynthKind::LowrankSpeckle => "synthetic-lowrank-speckle",
    };
    Ok((
        Dataset {
            name: name.to_string(),
            classes,
            samples,
        },
        clean,
    ))
}

enum ClassGenerator {
    Blobs {
        size: usize,
        mean: Vec<f64>,
    },
    Lowrank {
        size: usize,
        /// Two separable factors (row profile, column profile).
        factors: [(Vec<f64>, Vec<f64>); 2],
    },
}

fn bump(size: usize, center: f64, width: f64) -> Vec<f64> {
    (0..size)
        .map(|i| {
            let d = (i as f64 + 0.5) / size as f64 - center;
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect()
}

impl ClassGenerator {
    fn new(kind: SynthKind, size: usize, rng: &mut impl Rng) -> Self {
        match kind {
            SynthKind::Blobs => Self::Blobs {
                size,
                mean: (0..size * size)
                    .map(|_| rng.random_range(0.2..0.8))
                    .collect(),
            },
            SynthKind::LowrankSpeckle => {
                let factor = |rng: &mut dyn rand::RngCore| {
                    let rc = rng.random_range(0.25..0.75);
                    let cc = rng.random_range(0.25..0.75);
                    let rw = rng.random_range(0.06..0.2);
                    let cw = rng.random_range(0.06..0.2);
                    (bump(size, rc, rw), bump(size, cc, cw))
                };
                Self::Lowrank {
                    size,
                    factors: [factor(rng), factor(rng)],
                }
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> (Image, Image) {
        match self {
            Self::Blobs { size, mean } => {
                let noise = Normal::new(0.0, BLOB_SIGMA).expect("valid sigma");
                let pixels: Vec<f64> = mean
                    .iter()
                    .map(|m| (m + noise.sample(rng)).clamp(0.0, 1.0))
                    .collect();
                let clean = Image::new(*size, *size, mean.clone()).expect("finite mean");
                (
                    Image::new(*size, *size, pixels).expect("finite pixels"),
                    clean,
                )
            }
            Self::Lowrank { size, factors } => {
                let amps = [rng.random_range(0.35..0.45), rng.random_range(0.25..0.35)];
                let clean = Image::from_fn(*size, *size, |r, c| {
                    factors
                        .iter()
                        .zip(amps)
                        .map(|((u, v), a)| a * u[r] * v[c])
                        .sum()
                });
                let speckle = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma");
                let pixels = clean
                    .pixels()
                    .iter()
                    .map(|&p| {
                        let v = (p * speckle.sample(rng)).clamp(0.0, 1.0);
                        if rng.random::<f64>() < SPIKE_FRACTION {
                            rng.random_range(0.5..1.0)
                        } else {
                            v
                        }
                    })
                    .collect();
                (
                    Image::new(*size, *size, pixels).expect("finite pixels"),
                    clean,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(SynthKind::Blobs, 10, 20, 10, 16, 1).unwrap();
        let b = synth_dataset(SynthKind::Blobs, 10, 20, 10, 16, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 300);
        a.validate().unwrap();
        let c = synth_dataset(SynthKind::Blobs, 10, 20, 10, 16, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clean_lowrank_images_have_rank_at_most_two() {
        let (ds, clean) =
            synth_dataset_with_clean(SynthKind::LowrankSpeckle, 3, 10, 5, 64, 7).unwrap();
        ds.validate().unwrap();
        assert_eq!(clean.len(), 45);
        for img in &clean {
            let m = DMatrix::from_row_slice(64, 64, img.pixels());
            let sv = m.singular_values();
            let top = sv.max();
            let rank = sv.iter().filter(|&&s| s > 1e-10 * top).count();
            assert!(rank <= 2, "rank {rank}");
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(synth_dataset(SynthKind::Blobs, 1, 2, 2, 8, 0).is_err());
        assert!(synth_dataset(SynthKind::Blobs, 2, 0, 2, 8, 0).is_err());
        assert!(synth_dataset(SynthKind::LowrankSpeckle, 2, 2, 2, 0, 0).is_err());
    }
}
