//! Procedural class-conditional images: each class gets a fixed geometric
//! base pattern, and samples are the pattern plus seeded pixel noise.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DataSource, DatasetSpec, LabeledImage};
use crate::tensor::Tensor;

/// Base pattern value for one pixel, in roughly `[0.15, 0.85]` so additive
/// noise rarely clips.
fn pattern(class: usize, channel: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let fy = y as f64 / h as f64;
    let fx = x as f64 / w as f64;
    // Higher class indices reuse the base shapes at higher frequency.
    let octave = (class / 6 + 1) as f64;
    let phase = channel as f64 * 0.7;
    let tau = std::f64::consts::TAU;
    match class % 6 {
        0 => 0.5 + 0.35 * (tau * (2.0 * octave * fy + phase)).sin(),
        1 => 0.5 + 0.35 * (tau * (2.0 * octave * fx + phase)).sin(),
        2 => 0.5 + 0.35 * (tau * (octave * (fy + fx) + phase)).sin(),
        3 => {
            let dy = fy - 0.5;
            let dx = fx - 0.5;
            if (dy * dy + dx * dx).sqrt() < 0.3 / octave {
                0.85
            } else {
                0.15
            }
        }
        4 => {
            let cells = 2 * octave as usize;
            let block = (y * cells / h + x * cells / w) % 2;
            if block == 0 {
                0.2
            } else {
                0.8
            }
        }
        _ => 0.15 + 0.7 * fy * fx * octave.min(1.0),
    }
}

pub fn make_synthetic(spec: &DatasetSpec) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), DataError> {
    if spec.source != DataSource::Synthetic {
        return Err(DataError::Invalid("spec source is not synthetic".into()));
    }
    if spec.num_classes < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |count: usize| -> Vec<LabeledImage> {
        (0..count)
            .map(|i| {
                let label = i % spec.num_classes;
                let mut data = Vec::with_capacity(spec.channels * spec.height * spec.width);
                for c in 0..spec.channels {
                    for y in 0..spec.height {
                        for x in 0..spec.width {
                            let base = pattern(label, c, y, x, spec.height, spec.width);
                            let v = base + spec.noise * noise.sample(&mut rng);
                            data.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                let pixels = Tensor::from_vec(data, &[spec.channels, spec.height, spec.width])
                    .expect("shape matches data");
                LabeledImage { pixels, label }
            })
            .collect()
    };
    let train = draw(spec.train_size);
    let test = draw(spec.test_size);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: DataSource::Synthetic,
            num_classes: 3,
            channels: 1,
            height: 8,
            width: 8,
            train_size: 300,
            test_size: 300,
            noise,
            seed,
        }
    }

    #[test]
    fn same_seed_reproduces_identical_arrays() {
        let (a_train, a_test) = make_synthetic(&spec(0.1, 42)).unwrap();
        let (b_train, b_test) = make_synthetic(&spec(0.1, 42)).unwrap();
        for (a, b) in a_train.iter().zip(&b_train).chain(a_test.iter().zip(&b_test)) {
            assert_eq!(a.label, b.label);
            assert!(a.pixels.bits_eq(&b.pixels));
        }
    }

    #[test]
    fn zero_noise_makes_same_class_images_identical() {
        let (train, _) = make_synthetic(&spec(0.0, 1)).unwrap();
        for img in &train {
            assert!(img.pixels.bits_eq(&train[img.label].pixels));
        }
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        let mut s = spec(0.1, 0);
        s.num_classes = 1;
        assert!(make_synthetic(&s).is_err());
    }

    #[test]
    fn nearest_centroid_separates_classes_at_default_noise() {
        let (train, test) = make_synthetic(&spec(0.1, 7)).unwrap();
        let classes = 3;
        let dim = train[0].pixels.numel();
        let mut centroids = vec![vec![0.0f64; dim]; classes];
        let mut counts = vec![0usize; classes];
        for img in &train {
            counts[img.label] += 1;
            for (c, v) in centroids[img.label].iter_mut().zip(img.pixels.data()) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for img in &test {
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(img.pixels.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(img.pixels.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == img.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }
}
