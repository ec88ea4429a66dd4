mod support;

use std::collections::BTreeMap;

use ftn::autograd::Graph;
use ftn::data::{augment, difference_mask, resize, synth_generate_with_noise, tile, SamplePair, SYNTH_CHANGE_FLOOR};
use ftn::decoder::PredictionSet;
use ftn::harness::checkpoint::TensorContainer;
use ftn::harness::Sgd;
use ftn::losses::{
    siou_grad, siou_loss, ssim_grad, ssim_loss, total_loss, wbce_grad, wbce_loss, wbce_weights, LossConfig,
};
use ftn::metrics::{accumulate, compute, ConfusionCounts};
use ftn::nn::{Init, ParamBuilder, ParamStore};
use ndarray::{concatenate, Array2, Array3, ArrayD, Axis, IxDyn};
use proptest::prelude::*;
use rand::Rng;
use support::{check_function, rng};

fn prob_map(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((h, w), |_| r.random_range(0.02..0.98))
}

fn binary_map(h: usize, w: usize, seed: u64, density: f64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((h, w), |_| if r.random_bool(density) { 1.0 } else { 0.0 })
}

fn mask_u8(h: usize, w: usize, seed: u64) -> Array2<u8> {
    binary_map(h, w, seed, 0.3).mapv(|v| v as u8)
}

fn small_ssim() -> LossConfig {
    LossConfig {
        ssim_window: 5,
        ..LossConfig::default()
    }
}

fn pair_with_mask(mask: Array2<u8>, seed: u64) -> SamplePair {
    let (h, w) = mask.dim();
    let mut r = rng(seed);
    let a = Array3::from_shape_fn((h, w, 3), |_| r.random_range(0.0f32..1.0));
    let b = Array3::from_shape_fn((h, w, 3), |_| r.random_range(0.0f32..1.0));
    SamplePair::new("p", a, b, mask).unwrap()
}

fn is_binary(m: &Array2<u8>) -> bool {
    m.iter().all(|&v| v <= 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_values_are_bounded(seed in any::<u64>(), density in 0.0f64..1.0) {
        let cfg = small_ssim();
        let p = prob_map(8, 8, seed);
        let g = binary_map(8, 8, seed ^ 1, density);
        let w = wbce_weights(g.view(), &cfg);
        prop_assert!(wbce_loss(p.view(), g.view(), w.view()).unwrap() >= 0.0);
        let siou = siou_loss(p.view(), g.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&siou));
        let ssim = ssim_loss(p.view(), g.view(), &cfg).unwrap();
        prop_assert!((0.0..=2.0).contains(&ssim), "ssim loss {ssim}");
    }

    #[test]
    fn siou_decreases_toward_the_target(seed in any::<u64>(), y in 0usize..6, x in 0usize..6, step in 0.01f64..0.5) {
        let mut g = binary_map(6, 6, seed, 0.4);
        g[[0, 0]] = 1.0;
        let p = prob_map(6, 6, seed ^ 2);
        let mut q = p.clone();
        let target = g[[y, x]];
        q[[y, x]] += (target - q[[y, x]]) * step;
        let before = siou_loss(p.view(), g.view()).unwrap();
        let after = siou_loss(q.view(), g.view()).unwrap();
        prop_assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn single_pixel_siou_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let g = Array2::from_elem((1, 1), 1.0);
        let at = |v: f64| siou_loss(Array2::from_elem((1, 1), v).view(), g.view()).unwrap();
        prop_assert!(at(hi) < at(lo));
    }

    #[test]
    fn uniform_weights_give_plain_bce(seed in any::<u64>()) {
        let cfg = LossConfig {
            boundary_weight: 0.0,
            ..LossConfig::default()
        };
        let p = prob_map(7, 9, seed);
        let g = binary_map(7, 9, seed ^ 3, 0.5);
        let w = wbce_weights(g.view(), &cfg);
        prop_assert!(w.iter().all(|&v| v == 1.0));
        let mut sum = 0.0;
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            let pc = pv.clamp(1e-7, 1.0 - 1e-7);
            sum -= gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln();
        }
        prop_assert_eq!(wbce_loss(p.view(), g.view(), w.view()).unwrap(), sum / 63.0);
        let doubled = w.mapv(|v| 2.0 * v);
        prop_assert_eq!(wbce_loss(p.view(), g.view(), doubled.view()).unwrap(), 2.0 * sum / 63.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn loss_gradients_match_finite_differences(seed in any::<u64>()) {
        let cfg = small_ssim();
        let p = prob_map(8, 8, seed);
        let g = binary_map(8, 8, seed ^ 4, 0.4);
        let w = wbce_weights(g.view(), &cfg);
        let dyn2 = |a: &Array2<f64>| a.clone().into_dyn();
        let back = |a: &ArrayD<f64>| a.clone().into_dimensionality::<ndarray::Ix2>().unwrap();

        let err = check_function(&dyn2(&p), &dyn2(&wbce_grad(p.view(), g.view(), w.view())), |x| {
            wbce_loss(back(x).view(), g.view(), w.view()).unwrap()
        });
        prop_assert!(err <= 1e-4, "wbce {err}");
        let err = check_function(&dyn2(&p), &dyn2(&ssim_grad(p.view(), g.view(), &cfg).unwrap()), |x| {
            ssim_loss(back(x).view(), g.view(), &cfg).unwrap()
        });
        prop_assert!(err <= 1e-4, "ssim {err}");
        let err = check_function(&dyn2(&p), &dyn2(&siou_grad(p.view(), g.view())), |x| {
            siou_loss(back(x).view(), g.view()).unwrap()
        });
        prop_assert!(err <= 1e-4, "siou {err}");
    }

    #[test]
    fn side_output_order_does_not_matter(seed in any::<u64>(), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = small_ssim();
        let mut r = rng(seed);
        let mut logits = || ArrayD::from_shape_fn(IxDyn(&[2, 8, 8, 1]), |_| r.random_range(-3.0..3.0));
        let fused = logits();
        let sides: Vec<_> = (0..5).map(|_| logits()).collect();
        let masks = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
        let value = |order: &[usize]| -> f64 {
            let g = Graph::new();
            let preds = PredictionSet {
                side_logits: order.iter().map(|&i| g.leaf(sides[i].clone())).collect(),
                fused_logits: g.leaf(fused.clone()),
            };
            total_loss(&preds, &masks, &cfg).unwrap().value()
        };
        let a = value(&[0, 1, 2, 3, 4]);
        let b = value(&perm);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    }
}

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000)
        .prop_filter("non-empty", |c| c.0 + c.1 + c.2 + c.3 > 0)
        .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts::new(tp, fp, fn_, tn))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_and_iou_are_linked(c in counts()) {
        let m = compute(&c).unwrap();
        prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12);
        prop_assert!(m.f1 >= m.iou - 1e-15);
        for (_, v) in m.entries() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn accumulation_is_order_free(seed in any::<u64>(), h1 in 1usize..6, h2 in 1usize..6, w in 1usize..6) {
        let (p1, g1) = (mask_u8(h1, w, seed), mask_u8(h1, w, seed ^ 5));
        let (p2, g2) = (mask_u8(h2, w, seed ^ 6), mask_u8(h2, w, seed ^ 7));
        let zero = ConfusionCounts::default();
        let first = accumulate(p1.view(), g1.view(), zero).unwrap();
        let second = accumulate(p2.view(), g2.view(), zero).unwrap();
        let joined = accumulate(
            concatenate![Axis(0), p1, p2].view(),
            concatenate![Axis(0), g1, g2].view(),
            zero,
        )
        .unwrap();
        prop_assert_eq!(first.merge(second), joined);
        prop_assert_eq!(second.merge(first), joined);
        let chained = accumulate(p2.view(), g2.view(), first).unwrap();
        prop_assert_eq!(chained, joined);
        prop_assert_eq!(joined.total(), ((h1 + h2) * w) as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_preserves_masks(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let pair = pair_with_mask(mask_u8(h, w, seed), seed);
        let out = augment(&pair, seed ^ 9);
        prop_assert!(out.validate().is_ok());
        prop_assert!(is_binary(&out.mask));
        prop_assert_eq!(out.change_pixels(), pair.change_pixels());
        let (oh, ow) = out.dims();
        prop_assert!((oh, ow) == (h, w) || (oh, ow) == (w, h));
    }

    #[test]
    fn tiling_counts_and_aligns(seed in any::<u64>(), h in 4usize..40, w in 4usize..40, size in 1usize..4) {
        let pair = pair_with_mask(mask_u8(h, w, seed), seed);
        let tiles = tile(&pair, size).unwrap();
        prop_assert_eq!(tiles.len(), (h / size) * (w / size));
        for t in &tiles {
            prop_assert!(t.validate().is_ok());
            prop_assert_eq!(t.dims(), (size, size));
        }
    }

    #[test]
    fn resize_keeps_masks_binary(seed in any::<u64>(), h in 8usize..48, w in 8usize..48, target in 32usize..80) {
        let pair = pair_with_mask(mask_u8(h, w, seed), seed);
        let out = resize(&pair, target).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert!(is_binary(&out.mask));
        prop_assert_eq!(out.dims(), (target, target));
    }

    #[test]
    fn sgd_step_is_bounded(seed in any::<u64>(), lr in 1e-4f64..1.0, wd in 0.0f64..1e-2) {
        let mut pb = ParamBuilder::new();
        pb.trainable("w", &[4, 5], Init::TruncNormal(0.5));
        let mut store = ParamStore::<f64>::init(&pb.into_decls(), seed);
        let before = store.value("w").clone();
        let mut r = rng(seed);
        let grad = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |_| r.random_range(-2.0..2.0));
        let grads = BTreeMap::from([("w".to_string(), grad.clone())]);
        Sgd::new(0.9, wd).step(&mut store, &grads, |_, _| lr);
        for ((&p0, &p1), &g) in before.iter().zip(store.value("w").iter()).zip(grad.iter()) {
            let bound = lr * (g.abs() + wd * p0.abs());
            prop_assert!((p1 - p0).abs() <= bound * (1.0 + 1e-12));
            prop_assert!(p1.abs() <= p0.abs() + bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 1..40), dims in (1usize..4, 1usize..4)) {
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let n = values.len();
        let mut c = TensorContainer::<f64>::new(Default::default());
        c.tensors.push(("flat".into(), ArrayD::from_shape_vec(IxDyn(&[n]), values.clone()).unwrap()));
        let (a, b) = dims;
        let grid: Vec<f64> = values.iter().cycle().take(a * b).copied().collect();
        c.tensors.push(("grid".into(), ArrayD::from_shape_vec(IxDyn(&[a, b]), grid).unwrap()));
        let back = TensorContainer::<f64>::from_bytes(&c.to_bytes()).unwrap();
        for (name, t) in &c.tensors {
            let u = back.get(name).unwrap();
            prop_assert_eq!(t.shape(), u.shape());
            prop_assert!(t.iter().zip(u.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn synthetic_masks_are_the_clean_difference(seed in any::<u64>()) {
        let clean = synth_generate_with_noise(seed, 2, 32, 0.0).unwrap();
        let noisy = synth_generate_with_noise(seed, 2, 32, 0.02).unwrap();
        let again = synth_generate_with_noise(seed, 2, 32, 0.02).unwrap();
        prop_assert_eq!(&noisy, &again);
        for (c, n) in clean.iter().zip(&noisy) {
            prop_assert_eq!(&c.mask, &difference_mask(c.image_a.view(), c.image_b.view(), SYNTH_CHANGE_FLOOR));
            prop_assert_eq!(&c.mask, &n.mask);
            prop_assert!(is_binary(&n.mask));
            prop_assert!(n.change_pixels() > 0);
        }
    }
}
