//! Property tests for the spectral, divergence, augmentation and map
//! invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sada::augment::{augment, init_amplitude, sign_step, AugmentationConfig};
use sada::consistency::js_divergence;
use sada::data::{Dataset, Split};
use sada::grid::Grid;
use sada::model::{ConvBlockSpec, ConvNet, ConvNetSpec};
use sada::sensitivity::{compute_map, MapOptions, NoiseModel};
use sada::spectral::{decompose, reconstruct, FrequencyGrid, Image, Shape};

fn image_strategy() -> impl Strategy<Value = Image> {
    (prop_oneof![Just(1usize), Just(3usize)], 2usize..=9, 2usize..=9).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(0.0f64..=1.0, c * h * w)
            .prop_map(move |data| Image::new(Shape::new(c, h, w), data).unwrap())
    })
}

fn distributions(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, k), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let r: Vec<f64> = r.iter().map(|v| v + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

/// Entropy of the mixture minus mean entropy, computed directly.
fn js_reference(rows: &[Vec<f64>]) -> f64 {
    let h = |p: &[f64]| -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let k = rows[0].len();
    let m: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
    h(&m) - rows.iter().map(|r| h(r)).sum::<f64>() / rows.len() as f64
}

fn tiny_net(side: usize, seed: u64) -> ConvNet {
    ConvNet::new(ConvNetSpec {
        input: Shape::new(1, side, side),
        conv: vec![ConvBlockSpec { channels: 3, kernel: 3, stride: 1, pool: 2 }],
        hidden: 6,
        classes: 3,
        init_seed: seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_reconstruct_round_trip(img in image_strategy()) {
        let back = reconstruct(&decompose(&img).unwrap()).unwrap();
        prop_assert!(img.max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn amplitude_is_conjugate_symmetric(img in image_strategy()) {
        let s = img.shape();
        let spec = decompose(&img).unwrap();
        let grid = FrequencyGrid::new(s.height, s.width);
        for c in 0..s.channels {
            let a = spec.amplitude_channel(c);
            for u in 0..s.height {
                for v in 0..s.width {
                    let (tu, tv) = grid.twin(u, v);
                    prop_assert!((a[u * s.width + v] - a[tu * s.width + tv]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn js_is_bounded_and_matches_entropy_form(rows in (2usize..6, 2usize..8).prop_flat_map(|(n, k)| distributions(n, k))) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let js = js_divergence(&refs).unwrap();
        prop_assert!(js >= 0.0);
        prop_assert!(js <= (rows.len() as f64).ln() + 1e-12);
        prop_assert!((js - js_reference(&rows)).abs() < 1e-10);
    }

    #[test]
    fn js_ignores_view_order(rows in distributions(4, 5), rot in 0usize..4) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot);
        rotated.swap(0, 3);
        prop_assert!((js_divergence(&refs).unwrap() - js_divergence(&rotated).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn init_stays_within_relative_band(img in image_strategy(), eps in 0.0f64..1.0, seed in any::<u64>()) {
        let spec = decompose(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = init_amplitude(&spec.amplitude, img.shape(), eps, &mut rng).unwrap();
        for (a, b) in spec.amplitude.iter().zip(&a0) {
            prop_assert!(*b >= a * (1.0 - eps) - 1e-12 && *b <= a * (1.0 + eps) + 1e-12);
        }
    }

    #[test]
    fn sign_step_is_a_bounded_multiplicative_update(
        img in image_strategy(),
        delta in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let s = img.shape();
        let spec = decompose(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grad: Vec<f64> = (0..s.len()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let map = Grid::new(s.height, s.width, (0..s.plane_len()).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect()).unwrap();
        let mut next = spec.amplitude.clone();
        sign_step(&mut next, &grad, &map, delta, s).unwrap();
        for k in 0..s.len() {
            let (a, m, g) = (spec.amplitude[k], map.values[k % s.plane_len()], grad[k]);
            prop_assert!(next[k] >= 0.0);
            prop_assert!((next[k] - a).abs() <= delta * m * a + 1e-12);
            // Moves in the gradient's direction, or stays put.
            prop_assert!((next[k] - a) * g >= -1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn augmentations_stay_in_unit_range(seed in any::<u64>(), label in 0usize..3, delta in 0.0f64..0.5) {
        let side = 8;
        let net = tiny_net(side, seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..side * side).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let img = Image::new(Shape::new(1, side, side), px).unwrap();
        let cfg = AugmentationConfig { delta, ..AugmentationConfig::default() };
        let map = Grid::filled(side, side, 1.0);
        let (out, trace) = augment(&img, label, &net, &map, &cfg, &mut rng).unwrap();
        prop_assert!(out.is_unit_range());
        prop_assert!(trace.steps_taken <= cfg.steps);
        prop_assert_eq!(trace.prediction_changed, trace.final_prediction != trace.clean_prediction);
    }

    #[test]
    fn map_entries_are_error_rates(seed in any::<u64>(), eps in 0.0f64..6.0) {
        let side = 6;
        let net = tiny_net(side, seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Image> = (0..5)
            .map(|_| Image::new(Shape::new(1, side, side), (0..side * side).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect()).unwrap())
            .collect();
        let labels = (0..5).map(|k| k % 3).collect();
        let data = Dataset::new("p", Split::Train, images, labels).unwrap();
        let map = compute_map(&net, &data, &NoiseModel::Original { epsilon: eps }, MapOptions { seed, sample_fraction: 1.0 }).unwrap();
        let grid = FrequencyGrid::new(side, side);
        for u in 0..side {
            for v in 0..side {
                let x = map.values.get(u, v);
                prop_assert!((0.0..=1.0).contains(&x));
                // Five samples: every rate is a multiple of 1/5.
                prop_assert!((x * 5.0 - (x * 5.0).round()).abs() < 1e-9);
                let (tu, tv) = grid.twin(u, v);
                prop_assert_eq!(x, map.values.get(tu, tv));
            }
        }
    }
}
