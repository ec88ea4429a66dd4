mod support;

use std::collections::BTreeMap;

use ftn::autograd::Graph;
use ftn::backbone::{swin_block_pair, PatchMerge, SwinBlock, SwinBlockParams};
use ftn::decoder::{Decoder, DecoderConfig, DecoderKind, Pam};
use ftn::enhancement::{contrast, FuseBranch, FuseMode};
use ftn::grid::{TokenGrid, PYRAMID_STRIDES};
use ftn::losses::{total_loss, LossConfig};
use ftn::nn::{ParamBuilder, ParamKind, ParamStore, Session};
use ftn::{Ftn64, ModelConfig};
use ndarray::{ArrayD, Axis};
use proptest::prelude::*;
use support::{randomized_store, uniform};

fn block_pair(c: usize, ws: usize, heads: usize) -> (SwinBlock, SwinBlock, ParamStore<f64>) {
    let mut pb = ParamBuilder::new();
    let params = |shift| SwinBlockParams {
        channels: c,
        window_size: ws,
        shift,
        num_heads: heads,
        mlp_ratio: 2,
    };
    let regular = SwinBlock::new(&mut pb, "w", params(0)).unwrap();
    let shifted = SwinBlock::new(&mut pb, "sw", params(ws / 2)).unwrap();
    let store = randomized_store(&pb.into_decls(), 5);
    (regular, shifted, store)
}

fn model_images(seed: u64) -> (ArrayD<f64>, ArrayD<f64>) {
    (uniform(&[2, 64, 64, 3], -1.0, 1.0, seed), uniform(&[2, 64, 64, 3], -1.0, 1.0, seed + 1))
}

#[test]
fn attention_rows_sum_to_one() {
    let (regular, shifted, store) = block_pair(16, 4, 2);
    let g = Graph::new();
    let s = Session::new(&g, &store, false);
    let x = TokenGrid::new(g.constant(uniform(&[2, 8, 12, 16], -2.0, 2.0, 1)), 4);
    for block in [&regular, &shifted] {
        let maps = block.attention_maps(&s, x).unwrap().value();
        let n = *maps.shape().last().unwrap();
        for row in maps.lanes(Axis(maps.ndim() - 1)) {
            assert_eq!(row.len(), n);
            assert!((row.sum() - 1.0).abs() <= 1e-6, "row sums to {}", row.sum());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn blocks_and_merge_stay_finite(scale in 1.0f64..1e3, seed in 0u64..1000, h in 3usize..10, w in 3usize..10) {
        let (regular, shifted, mut store) = block_pair(16, 4, 2);
        let mut pb = ParamBuilder::new();
        let merge = PatchMerge::new(&mut pb, "merge", 16);
        for (name, e) in ParamStore::<f64>::init(&pb.into_decls(), 1).iter() {
            store.insert(name.clone(), e.clone());
        }
        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let x = TokenGrid::new(g.constant(uniform(&[1, h, w, 16], -scale, scale, seed)), 4);
        let y = swin_block_pair(&s, x, &regular, &shifted).unwrap();
        prop_assert!(y.is_finite());
        prop_assert_eq!(y.dims(), x.dims());
        let m = merge.forward(&s, x);
        prop_assert!(m.is_finite());
        prop_assert_eq!(m.dims(), [1, h.div_ceil(2), w.div_ceil(2), 32]);
    }

    #[test]
    fn contrast_is_linear(a in -5.0f64..5.0, seed in 0u64..1000) {
        let g = Graph::new();
        let e = uniform(&[1, 5, 6, 4], -1.0, 1.0, seed);
        let lhs = contrast(TokenGrid::new(g.constant(e.mapv(|v| a * v)), 4)).var.value();
        let rhs = contrast(TokenGrid::new(g.constant(e), 4)).var.value();
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - a * r).abs() <= 1e-12 * (1.0 + l.abs()));
        }
        prop_assert_eq!(lhs.shape(), &[1, 5, 6, 8]);
    }

    #[test]
    fn fuse_is_nonnegative_and_sum_is_symmetric(seed in 0u64..1000, train in any::<bool>()) {
        let mut pb = ParamBuilder::new();
        let sum = FuseBranch::new(&mut pb, "sum", 6, FuseMode::Sum);
        let diff = FuseBranch::new(&mut pb, "diff", 6, FuseMode::Diff);
        let store = randomized_store(&pb.into_decls(), seed);
        let g = Graph::new();
        let s = Session::new(&g, &store, train);
        let e1 = TokenGrid::new(g.constant(uniform(&[2, 4, 4, 6], -1.0, 1.0, seed)), 8);
        let e2 = TokenGrid::new(g.constant(uniform(&[2, 4, 4, 6], -1.0, 1.0, seed + 1)), 8);
        let ab = sum.fuse(&s, e1, e2).unwrap().var.value();
        let ba = sum.fuse(&s, e2, e1).unwrap().var.value();
        prop_assert_eq!(&*ab, &*ba);
        let d = diff.fuse(&s, e1, e2).unwrap().var.value();
        prop_assert!(ab.iter().chain(d.iter()).all(|&v| v >= 0.0));
        prop_assert_eq!(d.shape(), &[2, 4, 4, 6]);
    }
}

#[test]
fn identical_pyramids_give_interior_uniform_difference() {
    let model = Ftn64::new(&ModelConfig::desk(), 2).unwrap();
    let g = Graph::new();
    let s = model.session(&g, false);
    let x = g.constant(uniform(&[1, 64, 64, 3], -1.0, 1.0, 9));
    let (pa, pb) = model.arch.encoder.encode_siamese(&s, x, x).unwrap();
    let levels = model.arch.enhancer.as_ref().unwrap().enhance_pyramid(&s, &pa, &pb).unwrap();
    assert_eq!(levels.len(), 5);
    for level in &levels {
        assert_eq!(level.sum.channels(), 64);
        assert!(level.sum.same_shape(&level.diff));
        let d = level.diff.var.value();
        let (h, w) = (d.shape()[1], d.shape()[2]);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                for c in 0..d.shape()[3] {
                    assert_eq!(d[[0, y, x, c]], d[[0, 1, 1, c]]);
                }
            }
        }
    }
}

#[test]
fn siamese_branches_share_weights() {
    let model = Ftn64::new(&ModelConfig::desk(), 4).unwrap();
    let g = Graph::new();
    let s = model.session(&g, false);
    let (a, b) = model_images(3);
    let (a, b) = (g.constant(a), g.constant(b));
    let (pa, pb) = model.arch.encoder.encode_siamese(&s, a, b).unwrap();
    let (qb, qa) = model.arch.encoder.encode_siamese(&s, b, a).unwrap();
    let (xa, xb) = model.arch.encoder.encode_siamese(&s, a, a).unwrap();
    for k in 0..5 {
        assert_eq!(*pa.levels[k].var.value(), *qa.levels[k].var.value());
        assert_eq!(*pb.levels[k].var.value(), *qb.levels[k].var.value());
        assert_eq!(*xa.levels[k].var.value(), *xb.levels[k].var.value());
    }
    assert_eq!(pa.strides(), PYRAMID_STRIDES.to_vec());
    assert!(pa.levels.iter().all(|l| l.channels() == 32));
    assert!(model.arch.encoder.encode_siamese(&s, a, g.constant(uniform(&[2, 32, 32, 3], 0.0, 1.0, 1))).is_err());
}

#[test]
fn every_parameter_group_receives_gradient() {
    let model = Ftn64::new(&ModelConfig::desk(), 6).unwrap();
    let g = Graph::new();
    let s = model.session(&g, true);
    let (a, b) = model_images(11);
    let preds = model.forward(&s, g.constant(a), g.constant(b)).unwrap();
    let masks = uniform(&[2, 64, 64], 0.0, 1.0, 12).mapv(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let loss = total_loss(&preds, &masks, &LossConfig::default()).unwrap();
    let grads = s.param_grads(&g.backward(loss.total));

    // a group is one layer: a conv bias ahead of batch norm has an exactly
    // zero gradient by construction, its weight does not
    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for (name, e) in model.store.iter() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g).to_string();
        let sq: f64 = grads.get(name).map_or(0.0, |t| t.iter().map(|v| v * v).sum());
        *norms.entry(group).or_default() += sq;
    }
    let dead: Vec<_> = norms.iter().filter(|(_, &n)| n == 0.0 || n.is_nan()).map(|(g, _)| g.clone()).collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

#[test]
fn training_step_keeps_branches_identical() {
    let mut model = Ftn64::new(&ModelConfig::desk(), 8).unwrap();
    let (a, b) = model_images(21);
    let grads = {
        let g = Graph::new();
        let s = model.session(&g, true);
        let preds = model.forward(&s, g.constant(a.clone()), g.constant(b)).unwrap();
        let masks = uniform(&[2, 64, 64], 0.0, 1.0, 22).mapv(|v| if v > 0.8 { 1.0 } else { 0.0 });
        let loss = total_loss(&preds, &masks, &LossConfig::default()).unwrap();
        s.param_grads(&g.backward(loss.total))
    };
    for (name, e) in model.store.iter_mut() {
        if let Some(gr) = grads.get(name) {
            e.value.scaled_add(-0.1, gr);
        }
    }
    let g = Graph::new();
    let s = model.session(&g, false);
    let x = g.constant(a);
    let (pa, pb) = model.arch.encoder.encode_siamese(&s, x, x).unwrap();
    for k in 0..5 {
        assert_eq!(*pa.levels[k].var.value(), *pb.levels[k].var.value());
    }
}

fn attended_levels<'g>(g: &'g Graph<f64>, c: usize, seed: u64) -> Vec<TokenGrid<'g, f64>> {
    [16, 8, 4, 2, 2]
        .iter()
        .zip(PYRAMID_STRIDES)
        .enumerate()
        .map(|(k, (&n, stride))| TokenGrid::new(g.constant(uniform(&[2, n, n, c], -1.0, 1.0, seed + k as u64)), stride))
        .collect()
}

#[test]
fn coarsest_level_reaches_every_decoded_level() {
    let c = 16;
    let mut pb = ParamBuilder::new();
    let cfg = DecoderConfig {
        depths: [2, 2, 2, 2],
        ..DecoderConfig::desk()
    };
    let decoder = Decoder::new(&mut pb, &cfg, c, DecoderKind::Pcp).unwrap();
    let store = randomized_store(&pb.into_decls(), 3);
    let g = Graph::new();
    let s = Session::new(&g, &store, false);
    let base = attended_levels(&g, c, 40);
    let mut probe = base.clone();
    let bumped = base[4].var.value().mapv(|v| v + 0.1);
    probe[4] = TokenGrid::new(g.constant(bumped), 32);
    let d0 = decoder.decode(&s, &base).unwrap();
    let d1 = decoder.decode(&s, &probe).unwrap();
    for k in 0..4 {
        assert_eq!(d0[k].dims(), base[k].dims());
        let diff = (&*d0[k].var.value() - &*d1[k].var.value()).mapv(f64::abs);
        assert!(diff.iter().any(|&v| v > 1e-9), "level {} ignores the coarsest input", k + 1);
    }
}

#[test]
fn attention_module_keeps_level_shape() {
    let c = 8;
    for gated in [false, true] {
        let mut pb = ParamBuilder::new();
        let pam = Pam::new(&mut pb, "pam", 4 * c, c, gated);
        let store = randomized_store(&pb.into_decls(), 1);
        let g = Graph::new();
        let s = Session::new(&g, &store, true);
        for (k, level) in attended_levels(&g, 4 * c, 7).into_iter().enumerate() {
            let out = pam.forward(&s, level).unwrap();
            assert_eq!(out.dims(), [2, level.height(), level.width(), c], "level {}", k + 1);
            assert_eq!(out.stride, level.stride);
        }
        let wrong = TokenGrid::new(g.constant(uniform(&[2, 4, 4, c], 0.0, 1.0, 0)), 4);
        assert!(pam.forward(&s, wrong).is_err());
    }
}

#[test]
fn fused_head_starts_as_side_average_and_probabilities_are_open_interval() {
    let model = Ftn64::new(&ModelConfig::desk(), 12).unwrap();
    let g = Graph::new();
    let s = model.session(&g, false);
    let (a, b) = model_images(31);
    let preds = model.forward(&s, g.constant(a), g.constant(b)).unwrap();
    let mut mean = ArrayD::zeros(preds.fused_logits.shape());
    for side in &preds.side_logits {
        mean += &*side.value();
    }
    mean /= 5.0;
    let fused = preds.fused_logits.value();
    for (f, m) in fused.iter().zip(mean.iter()) {
        assert!((f - m).abs() <= 1e-12 * (1.0 + m.abs()));
    }
    for v in preds.all() {
        assert!(v.value().iter().all(|z| z.is_finite()));
        assert!(v.sigmoid().value().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
