use dca_tensor::{ParamStore, Tape, Tensor};
use dcanet::augment::{apply, augment, mirror, AugmentConfig, AugmentParams};
use dcanet::check::random_tensor;
use dcanet::data::{generate_sample, present_vector, Sample, SynthSpec};
use dcanet::dca::{compute_mask, context_pool};
use dcanet::layers::Ctx;
use dcanet::oracles::{grad_check, oracle_context_pool, GradCheckOptions};
use dcanet::train::{poly_lr, TrainConfig};
use dcanet::{ConfusionMatrix, IGNORE_INDEX};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;
const BLOCK: usize = 4;

/// Channels 0 and 1 encode each pixel's own center coordinate; labels are
/// ids of 4x4 blocks, so an output pixel's label can be checked against the
/// source position its color says it came from.
fn coordinate_sample() -> Sample {
    let n = SIDE * SIDE;
    let s = SIDE as f32;
    let image = Tensor::from_fn(&[3, SIDE, SIDE], |i| {
        let (c, y, x) = (i / n, i % n / SIDE, i % SIDE);
        match c {
            0 => (y as f32 + 0.5) / s,
            1 => (x as f32 + 0.5) / s,
            _ => 0.0,
        }
    });
    let per_row = SIDE / BLOCK;
    let labels: Vec<u8> = (0..n).map(|i| ((i / SIDE / BLOCK) * per_row + i % SIDE / BLOCK) as u8).collect();
    let present = present_vector(&labels, per_row * per_row);
    Sample { image, labels, present }
}

fn params() -> impl Strategy<Value = AugmentParams> {
    (any::<bool>(), 0.5f64..2.0, -10.0f64..10.0, 0.0f64..16.0, 0.0f64..16.0).prop_map(|(mirror, scale, angle_deg, oy, ox)| {
        AugmentParams { mirror, scale, angle_deg, offset: (oy, ox), out_size: (SIDE, SIDE), blur_sigma: None }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_follow_the_image(p in params()) {
        let src = coordinate_sample();
        let out = apply(&src, &p, [0.0; 3], 64).unwrap();
        let n = SIDE * SIDE;
        let tol = 1e-3;
        for o in 0..n {
            let label = out.labels[o];
            if label == IGNORE_INDEX {
                continue;
            }
            let sy = out.image.data()[o] as f64 * SIDE as f64;
            let sx = out.image.data()[n + o] as f64 * SIDE as f64;
            // Bilinear sampling clamps within half a pixel of the border.
            let inner = 0.5 + tol..SIDE as f64 - 0.5 - tol;
            if !inner.contains(&sy) || !inner.contains(&sx) {
                continue;
            }
            let (by, bx) = ((label as usize / (SIDE / BLOCK) * BLOCK) as f64, (label as usize % (SIDE / BLOCK) * BLOCK) as f64);
            prop_assert!(
                sy >= by - tol && sy <= by + BLOCK as f64 + tol && sx >= bx - tol && sx <= bx + BLOCK as f64 + tol,
                "pixel {o}: source ({sy:.3}, {sx:.3}) outside block of label {label}"
            );
        }
    }

    #[test]
    fn augmented_presence_matches_labels(seed in 0u64..1000) {
        let spec = SynthSpec { image_size: 32, seed, ..SynthSpec::default() };
        let s = generate_sample(&spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugmentConfig { crop: 24, ..AugmentConfig::default() };
        let out = augment(&s, &cfg, &mut rng, [0.5; 3], spec.num_classes).unwrap();
        prop_assert_eq!(out.image.shape(), &[3, 24, 24]);
        prop_assert_eq!(&out.present, &present_vector(&out.labels, spec.num_classes));
    }

    #[test]
    fn sampled_scale_and_angle_stay_in_range(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = AugmentParams::sample(&AugmentConfig::default(), &mut rng, 64, 64);
            prop_assert!((0.5..=2.0).contains(&p.scale));
            prop_assert!((-10.0..=10.0).contains(&p.angle_deg));
        }
    }

    #[test]
    fn mirror_is_an_involution(seed in 0u64..1000) {
        let spec = SynthSpec { image_size: 24, seed, ..SynthSpec::default() };
        let s = generate_sample(&spec, 1).unwrap();
        prop_assert_eq!(&mirror(&mirror(&s)), &s);
    }

    #[test]
    fn iou_is_invariant_to_pixel_order_and_bounded(
        pairs in prop::collection::vec((0u8..4, prop_oneof![0u8..4, Just(IGNORE_INDEX)]), 1..200),
        rotate in 0usize..200,
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
        let k = rotate % pairs.len();
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.rotate_left(k);
        t2.rotate_left(k);
        p2.reverse();
        t2.reverse();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&p2, &t2, IGNORE_INDEX).unwrap();
        prop_assert_eq!(&a, &b);
        for iou in a.per_class_iou().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
        if let Ok(m) = a.mean_iou() {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn poly_lr_strictly_decreases(max_iter in 2usize..5000, power in 0.1f64..3.0, base in 1e-4f64..1.0) {
        let cfg = TrainConfig { max_iter, power, base_lr: base, ..TrainConfig::default() };
        let step = (max_iter / 50).max(1);
        let mut prev = poly_lr(0, &cfg);
        prop_assert_eq!(prev, base);
        for i in (step..=max_iter).step_by(step) {
            let lr = poly_lr(i, &cfg);
            prop_assert!(lr < prev, "lr({i}) = {lr} not below {prev}");
            prev = lr;
        }
    }

    #[test]
    fn masks_stay_in_the_unit_interval(seed in 0u64..1000, scale in 0.1f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Tensor<f32> = random_tensor(&mut rng, &[1, 3, 4, 4]);
        let g = g.map(|v| v * scale);
        let tape = Tape::inference();
        let store = ParamStore::new();
        let cx = Ctx::new(&tape, &store);
        let m = tape.value(compute_mask(&cx, tape.input(g, false)));
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pooling_matches_the_oracle(seed in 0u64..1000, n in 1usize..3, c in 1usize..4, h in 1usize..12, w in 1usize..12, r in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Tensor<f32> = random_tensor(&mut rng, &[n, c, h, w]);
        let tape = Tape::inference();
        let got = tape.value(context_pool(&tape, tape.input(f.clone(), false), r).unwrap());
        prop_assert_eq!(got.shape(), &[n, c, r, r]);
        prop_assert!(got.cast::<f64>().max_abs_diff(&oracle_context_pool(&f, r).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn grad_check_accepts_exact_quadratic_gradients(
        coeffs in prop::collection::vec(-3.0f64..3.0, 1..8),
        point in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let x = &point[..coeffs.len()];
        // f(x) = sum a_i x_i^2 + x_i, so df/dx_i = 2 a_i x_i + 1.
        let f = |x: &[f64]| Ok(coeffs.iter().zip(x).map(|(a, v)| a * v * v + v).sum());
        let grad: Vec<f64> = coeffs.iter().zip(x).map(|(a, v)| 2.0 * a * v + 1.0).collect();
        let opts = GradCheckOptions { epsilon: 1e-4, tolerance: 1e-8, floor: 1.0 };
        let report = grad_check(f, x, &grad, opts).unwrap();
        prop_assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }
}
