use ftn::autograd::Graph;
use ftn::decoder::DecoderKind;
use ftn::grid::PYRAMID_STRIDES;
use ftn::losses::{total_loss, LossConfig};
use ftn::{Ftn64, ModelConfig};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(b: usize, size: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(&[b, size, size, 3]), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn outputs_match_input_resolution() {
    let model = Ftn64::new(&ModelConfig::desk(), 3).unwrap();
    for size in [64, 96] {
        let g = Graph::new();
        let s = model.session(&g, false);
        let a = g.constant(random_images(2, size, 1));
        let b = g.constant(random_images(2, size, 2));
        let (pa, _) = model.arch.encoder.encode_siamese(&s, a, b).unwrap();
        assert_eq!(pa.strides(), PYRAMID_STRIDES.to_vec());
        let preds = model.forward(&s, a, b).unwrap();
        assert_eq!(preds.side_logits.len(), 5);
        for v in preds.all() {
            assert_eq!(v.shape(), vec![2, size, size, 1]);
        }
    }
}

#[test]
fn variant_parameter_sets_are_nested() {
    let count = |use_dfe, kind| {
        let cfg = ModelConfig {
            use_dfe,
            decoder_kind: kind,
            ..ModelConfig::desk()
        };
        Ftn64::new(&cfg, 0).unwrap().store.trainable_elements()
    };
    let fp = count(false, DecoderKind::Fp);
    let fp_dfe = count(true, DecoderKind::Fp);
    let pcp_dfe = count(true, DecoderKind::Pcp);
    assert!(fp < fp_dfe && fp_dfe < pcp_dfe, "{fp} {fp_dfe} {pcp_dfe}");
}

#[test]
fn training_step_produces_finite_gradients() {
    let model = Ftn64::new(&ModelConfig::desk(), 5).unwrap();
    let g = Graph::new();
    let s = model.session(&g, true);
    let a = g.constant(random_images(2, 64, 1));
    let b = g.constant(random_images(2, 64, 2));
    let preds = model.forward(&s, a, b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let masks = ArrayD::from_shape_fn(IxDyn(&[2, 64, 64]), |_| f64::from(rng.random_bool(0.2) as u8));
    let loss = total_loss(&preds, &masks, &LossConfig::default()).unwrap();
    assert!(loss.value().is_finite() && loss.value() > 0.0);
    let grads = g.backward(loss.total);
    let pg = s.param_grads(&grads);
    assert!(pg.values().all(|t| t.iter().all(|v| v.is_finite())));
    let nonzero = pg.values().filter(|t| t.iter().any(|&v| v != 0.0)).count();
    assert!(nonzero * 10 >= pg.len() * 9, "{nonzero}/{}", pg.len());
}
