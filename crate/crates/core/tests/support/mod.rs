//! Finite-difference gradient checking and small fixtures shared by test targets.
#![allow(dead_code)]

use ftn::autograd::{Graph, Var};
use ftn::nn::{ParamDecl, ParamKind, ParamStore, Session};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(lo..hi))
}

/// Magnitude below which a central difference is indistinguishable from
/// zero: rounding of O(100) objectives divided by the step gives ~1e-10.
pub const FD_NOISE_FLOOR: f64 = 1e-6;

/// Elementwise `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor only matters for gradients that are exactly zero by
/// construction (a bias feeding batch norm, the key bias under softmax).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = analytic.abs().max(numeric.abs()).max(FD_NOISE_FLOOR);
    (analytic - numeric).abs() / d
}

/// Central difference of `f` at every element of `x`; returns the worst relative error.
pub fn check_function(
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    f: impl Fn(&ArrayD<f64>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.as_slice().unwrap()[i], numeric));
    }
    worst
}

/// Builds a scalar objective from a session and leaf inputs.
pub type Objective = dyn for<'g> Fn(&Session<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>;

/// Parameters with every trainable tensor perturbed away from its structured init.
pub fn randomized_store(decls: &[ParamDecl], seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::init(decls, seed);
    let mut r = rng(seed ^ 0x5eed);
    for (_, e) in store.iter_mut() {
        if e.kind == ParamKind::Trainable {
            e.value.mapv_inplace(|v| v + r.random_range(-0.3..0.3));
        }
    }
    store
}

fn evaluate(store: &ParamStore<f64>, inputs: &[ArrayD<f64>], objective: &Objective) -> f64 {
    let g = Graph::new();
    let s = Session::new(&g, store, true);
    let leaves: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    objective(&s, &leaves).scalar()
}

/// Worst relative error between graph gradients and central differences, over
/// every input element and up to `per_param` sampled elements of each parameter.
pub fn check_module(store: &ParamStore<f64>, inputs: &[ArrayD<f64>], objective: &Objective, per_param: usize) -> f64 {
    let g = Graph::new();
    let s = Session::new(&g, store, true);
    let leaves: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = objective(&s, &leaves);
    let grads = g.backward(out);
    let param_grads = s.param_grads(&grads);

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaves[k]);
        let err = check_function(x, &analytic, |probe| {
            let mut ins = inputs.to_vec();
            ins[k] = probe.clone();
            evaluate(store, &ins, objective)
        });
        worst = worst.max(err);
    }

    let mut r = rng(77);
    for (name, analytic) in &param_grads {
        let n = analytic.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            let eval_at = |delta: f64| {
                let mut st = store.clone();
                st.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] += delta;
                evaluate(&st, inputs, objective)
            };
            let numeric = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[i], numeric));
        }
    }
    worst
}

/// Pins a closure to the higher-ranked [`Objective`] signature.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&Session<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    f
}
