//! Property tests over the simplex and convexity invariants.

use admix::data::sample_mix_ratios;
use admix::diffmath::Tape;
use admix::mixblock::{mix_images, mix_labels, normalize_and_upsample, PolicyMasks};
use admix::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = 1.0;
    t
}

proptest! {
    #[test]
    fn sampled_ratios_lie_on_the_simplex(
        n in 1usize..6,
        concentration in 0.2f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let v = sample_mix_ratios(n, concentration, &mut rng).unwrap();
        prop_assert_eq!(v.len(), n);
        prop_assert!(v.iter().all(|x| *x >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixed_labels_stay_distributions(
        labels in proptest::collection::vec(0usize..5, 2..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ratios = sample_mix_ratios(labels.len(), 1.0, &mut rng).unwrap();
        let one_hots: Vec<Tensor> = labels.iter().map(|&l| one_hot(l, 5)).collect();
        let mixed = mix_labels(&one_hots, &ratios).unwrap();
        prop_assert!(mixed.data().iter().all(|v| *v >= 0.0));
        prop_assert!((mixed.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalized_masks_mix_convexly(
        n in 2usize..5,
        raw in proptest::collection::vec(-3.0f64..3.0, 4 * 5),
        pixels in proptest::collection::vec(0.0f64..1.0, 5 * 16),
    ) {
        let mut tape = Tape::new();
        let maps: Vec<_> = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|j| raw[i * 4 + j]).collect();
                tape.leaf(Tensor::from_vec(v, &[2, 2]).unwrap())
            })
            .collect();
        let masks = normalize_and_upsample(&mut tape, &maps, (4, 4)).unwrap();
        PolicyMasks::new(tape.value(masks).clone()).unwrap();

        let imgs: Vec<Tensor> = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..16).map(|j| pixels[i * 16 + j]).collect();
                Tensor::from_vec(v, &[1, 4, 4]).unwrap()
            })
            .collect();
        let img_vars: Vec<_> = imgs.iter().map(|t| tape.leaf(t.clone())).collect();
        let mixed = mix_images(&mut tape, &img_vars, masks).unwrap();
        let out = tape.value(mixed);
        for p in 0..16 {
            let lo = imgs.iter().map(|i| i.data()[p]).fold(f64::INFINITY, f64::min);
            let hi = imgs.iter().map(|i| i.data()[p]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[p] >= lo - 1e-6 && out.data()[p] <= hi + 1e-6);
        }
    }

    #[test]
    fn softmax_lanes_sum_to_one(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        axis in 0usize..2,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vals, &[3, 4]).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let t = tape.value(y);
        let (outer, len, inner) = if axis == 0 { (1, 3, 4) } else { (3, 4, 1) };
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..len).map(|k| t.data()[(o * len + k) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for k in 0..len {
                    prop_assert!(t.data()[(o * len + k) * inner + i] > 0.0);
                }
            }
        }
    }
}
