//! Mix-ratio sampling and the per-epoch batch stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Dirichlet, Distribution};

use super::{one_hot, DataError, LabeledImage, MixBatch};
use crate::tensor::Tensor;

/// Draws a mix-ratio vector from the symmetric Dirichlet law with the given
/// concentration: nonnegative, summing to 1. For two images this is the
/// usual Beta(c, c) mixup draw.
pub fn sample_mix_ratios(
    n: usize,
    concentration: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("ratio vector needs at least one entry".into()));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(DataError::Invalid(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let dist = Dirichlet::new_with_size(concentration, n)
        .map_err(|e| DataError::Invalid(format!("dirichlet: {e}")))?;
    let mut v = dist.sample(rng);
    // Guard renormalization: the sampler's output is already simplex-close,
    // this pins the sum to 1 at f64 resolution.
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    Ok(v)
}

/// Settings that shape an epoch's batch stream.
#[derive(Clone, Debug)]
pub struct BatchSettings {
    pub batch_size: usize,
    pub images_per_set: usize,
    /// Mix sets drawn per batch. `None` means `floor(batch_size / images_per_set)`.
    pub sets_per_batch: Option<usize>,
    pub concentration: f64,
    pub num_classes: usize,
    pub augment_flip: bool,
    pub augment_crop: bool,
    pub crop_padding: usize,
    pub seed: u64,
}

/// One augmented batch: the plain images plus the mix sets drawn from them.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub sets: Vec<MixBatch>,
}

pub struct EpochBatches<'a> {
    data: &'a [LabeledImage],
    order: Vec<usize>,
    cursor: usize,
    settings: BatchSettings,
    rng: ChaCha20Rng,
}

/// Streams one epoch of batches over a seeded permutation of `data`. The
/// stream is a pure function of `(settings.seed, epoch)`.
pub fn epoch_batches<'a>(
    data: &'a [LabeledImage],
    settings: &BatchSettings,
    epoch: u64,
) -> Result<EpochBatches<'a>, DataError> {
    if settings.images_per_set == 0 {
        return Err(DataError::Invalid("images_per_set must be positive".into()));
    }
    if settings.batch_size < settings.images_per_set {
        return Err(DataError::Invalid(format!(
            "batch size {} smaller than images per set {}",
            settings.batch_size, settings.images_per_set
        )));
    }
    let max_sets = settings.batch_size / settings.images_per_set;
    if let Some(k) = settings.sets_per_batch {
        if k > max_sets {
            return Err(DataError::Invalid(format!(
                "sets_per_batch {} exceeds floor(B/N) = {}",
                k, max_sets
            )));
        }
    }
    let mut rng =
        ChaCha20Rng::seed_from_u64(settings.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    Ok(EpochBatches { data, order, cursor: 0, settings: settings.clone(), rng })
}

impl EpochBatches<'_> {
    fn augment(&mut self, img: &Tensor) -> Tensor {
        let mut out = img.clone();
        let shape = img.shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if self.settings.augment_flip && self.rng.gen_bool(0.5) {
            let mut flipped = out.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        flipped.data_mut()[(ci * h + y) * w + x] = out.data()[(ci * h + y) * w + (w - 1 - x)];
                    }
                }
            }
            out = flipped;
        }
        if self.settings.augment_crop && self.settings.crop_padding > 0 {
            let p = self.settings.crop_padding;
            let dy = self.rng.gen_range(0..=2 * p);
            let dx = self.rng.gen_range(0..=2 * p);
            let mut cropped = Tensor::zeros(&shape);
            for ci in 0..c {
                for y in 0..h {
                    let sy = y as isize + dy as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx as isize - p as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cropped.data_mut()[(ci * h + y) * w + x] =
                            out.data()[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
            out = cropped;
        }
        out
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = TrainBatch;

    fn next(&mut self) -> Option<TrainBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.settings.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;

        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            images.push(self.augment(&self.data[i].pixels));
            labels.push(self.data[i].label);
        }

        let n = self.settings.images_per_set;
        let k = self
            .settings
            .sets_per_batch
            .unwrap_or(indices.len() / n)
            .min(indices.len() / n);
        let mut sets = Vec::with_capacity(k);
        for s in 0..k {
            let members = s * n..(s + 1) * n;
            let ratios = sample_mix_ratios(n, self.settings.concentration, &mut self.rng)
                .expect("settings validated at construction");
            sets.push(MixBatch {
                images: members.clone().map(|i| images[i].clone()).collect(),
                labels: members.map(|i| one_hot(labels[i], self.settings.num_classes)).collect(),
                ratios,
            });
        }
        Some(TrainBatch { images, labels, sets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, DataSource, DatasetSpec};

    fn tiny_dataset(count: usize) -> Vec<LabeledImage> {
        let spec = DatasetSpec {
            source: DataSource::Synthetic,
            num_classes: 2,
            channels: 1,
            height: 4,
            width: 4,
            train_size: count,
            test_size: 1,
            noise: 0.05,
            seed: 11,
        };
        make_synthetic(&spec).unwrap().0
    }

    fn settings(b: usize, n: usize) -> BatchSettings {
        BatchSettings {
            batch_size: b,
            images_per_set: n,
            sets_per_batch: None,
            concentration: 1.0,
            num_classes: 2,
            augment_flip: false,
            augment_crop: false,
            crop_padding: 4,
            seed: 3,
        }
    }

    #[test]
    fn ratio_vector_lies_on_simplex() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..200 {
            let v = sample_mix_ratios(3, 1.0, &mut rng).unwrap();
            assert!(v.iter().all(|x| *x >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_image_ratio_is_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(sample_mix_ratios(1, 2.0, &mut rng).unwrap(), vec![1.0]);
    }

    #[test]
    fn nonpositive_concentration_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(sample_mix_ratios(2, 0.0, &mut rng).is_err());
        assert!(sample_mix_ratios(2, -1.0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_one_marginal_is_uniform() {
        // Kolmogorov-Smirnov against Uniform[0,1] at significance 0.01:
        // critical value 1.6276 / sqrt(n) for large n.
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let n = 10_000;
        let mut draws: Vec<f64> =
            (0..n).map(|_| sample_mix_ratios(2, 1.0, &mut rng).unwrap()[0]).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d = 0.0f64;
        for (i, x) in draws.iter().enumerate() {
            d = d.max(((i + 1) as f64 / n as f64 - x).abs());
            d = d.max((x - i as f64 / n as f64).abs());
        }
        let critical = 1.6276 / (n as f64).sqrt();
        assert!(d < critical, "KS statistic {d} exceeds {critical}");
    }

    #[test]
    fn floor_division_set_count() {
        let data = tiny_dataset(12);
        let batches: Vec<_> = epoch_batches(&data, &settings(6, 3), 0).unwrap().collect();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.sets.len() == 2));
    }

    #[test]
    fn fixed_seed_reproduces_stream() {
        let data = tiny_dataset(20);
        let s = settings(5, 2);
        let a: Vec<_> = epoch_batches(&data, &s, 4).unwrap().collect();
        let b: Vec<_> = epoch_batches(&data, &s, 4).unwrap().collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            for (ix, iy) in x.images.iter().zip(&y.images) {
                assert!(ix.bits_eq(iy));
            }
            for (sx, sy) in x.sets.iter().zip(&y.sets) {
                assert_eq!(sx.ratios, sy.ratios);
            }
        }
    }

    #[test]
    fn epoch_covers_every_image_exactly_once() {
        let data = tiny_dataset(1000);
        let batches: Vec<_> = epoch_batches(&data, &settings(100, 2), 1).unwrap().collect();
        assert_eq!(batches.len(), 10);
        assert!(batches.iter().all(|b| b.sets.len() == 50));
        let mut counts = vec![0usize; 2];
        let mut total = 0;
        for b in &batches {
            total += b.images.len();
            for &l in &b.labels {
                counts[l] += 1;
            }
        }
        assert_eq!(total, 1000);
        // the synthetic set alternates labels, so coverage of each class is exact
        assert_eq!(counts, vec![500, 500]);
    }

    #[test]
    fn batch_smaller_than_set_size_rejected() {
        let data = tiny_dataset(10);
        assert!(epoch_batches(&data, &settings(2, 3), 0).is_err());
    }

    #[test]
    fn set_members_are_distinct_positions() {
        let data = tiny_dataset(30);
        for batch in epoch_batches(&data, &settings(10, 3), 2).unwrap() {
            assert_eq!(batch.sets.len(), 3);
            // chunked membership uses 3 distinct batch positions per set by
            // construction; verify via label/image correspondence
            for set in &batch.sets {
                assert_eq!(set.images.len(), 3);
                assert_eq!(set.labels.len(), 3);
                assert_eq!(set.ratios.len(), 3);
            }
        }
    }
}
