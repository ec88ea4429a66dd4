//! Named parameter storage, the forward session binding parameters onto a
//! graph, and the small layer descriptors everything else is assembled from.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved and loaded but never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
    /// Belongs to the Siamese encoder (eligible for pretrained import).
    pub backbone: bool,
}

/// Collects parameter declarations while an architecture is assembled.
#[derive(Default)]
pub struct ParamBuilder {
    decls: Vec<ParamDecl>,
    backbone: bool,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_backbone(&mut self, backbone: bool) {
        self.backbone = backbone;
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init, kind: ParamKind) -> String {
        let name = name.into();
        assert!(
            !self.decls.iter().any(|d| d.name == name),
            "duplicate parameter name {name}"
        );
        self.decls.push(ParamDecl {
            name: name.clone(),
            shape: shape.to_vec(),
            init,
            kind,
            backbone: self.backbone,
        });
        name
    }

    pub fn trainable(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        self.declare(name, shape, init, ParamKind::Trainable)
    }

    pub fn into_decls(self) -> Vec<ParamDecl> {
        self.decls
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: ArrayD<T>,
    pub kind: ParamKind,
    pub backbone: bool,
    /// Loaded from an external container rather than randomly initialized.
    pub pretrained: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Scalar> ParamStore<T> {
    /// Initializes every declared tensor. Each tensor draws from its own
    /// stream keyed by `(seed, name)`, so declaration order is irrelevant.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Self {
        let entries = decls
            .iter()
            .map(|d| {
                let value = init_tensor(&d.shape, d.init, seed ^ name_hash(&d.name));
                (
                    d.name.clone(),
                    ParamEntry {
                        value,
                        kind: d.kind,
                        backbone: d.backbone,
                        pretrained: false,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry<T>) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of trainable tensors.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let m = T::lit(u.momentum);
            for (name, batch) in [(&u.mean, &u.batch_mean), (&u.var, &u.batch_var)] {
                let entry = self.entries.get_mut(name).expect("bn buffer");
                let flat = entry.value.as_slice_mut().unwrap();
                for (r, &b) in flat.iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

fn init_tensor<T: Scalar>(shape: &[usize], init: Init, seed: u64) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Constant(v) => vec![T::lit(v); n],
        Init::TruncNormal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::lit(z * std);
                    }
                })
                .collect()
        }
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Pending running-statistics update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: String,
    pub var: String,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
    pub momentum: f64,
}

/// Binds a parameter store onto a graph for one forward/backward pass.
///
/// Each parameter becomes a single leaf no matter how often it is read, so
/// shared weights (the two encoder branches) accumulate into one gradient.
pub struct Session<'g, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    train: bool,
    leaves: RefCell<HashMap<String, Var<'g, T>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, train: bool) -> Self {
        Session {
            graph,
            store,
            train,
            leaves: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }

    pub fn param(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let entry = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let var = match entry.kind {
            ParamKind::Trainable => self.graph.leaf(entry.value.clone()),
            ParamKind::Buffer => self.graph.constant(entry.value.clone()),
        };
        self.leaves.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// The leaf bound to `name`, if this session has read it.
    pub fn bound(&self, name: &str) -> Option<Var<'g, T>> {
        self.leaves.borrow().get(name).copied()
    }

    pub fn record_bn(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradients of every trainable parameter, zeros for those unused by this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        let leaves = self.leaves.borrow();
        self.store
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(name, e)| {
                let g = leaves
                    .get(name)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| ArrayD::zeros(e.value.raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Affine map over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(pb, name, in_dim, out_dim, bias, Init::TruncNormal(0.02))
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = pb.trainable(format!("{name}.weight"), &[in_dim, out_dim], init);
        let bias = bias.then(|| pb.trainable(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = s.param(&self.weight);
        let b = self.bias.as_ref().map(|b| s.param(b));
        x.linear(w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.trainable(format!("{name}.weight"), &[dim], Init::Ones),
            beta: pb.trainable(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(s.param(&self.gamma), s.param(&self.beta), T::lit(NORM_EPS))
    }
}

/// Channels-last batch normalization: batch statistics while training,
/// running statistics otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: pb.trainable(format!("{name}.weight"), &[dim], Init::Ones),
            beta: pb.trainable(format!("{name}.bias"), &[dim], Init::Zeros),
            running_mean: pb.declare(format!("{name}.running_mean"), &[dim], Init::Zeros, ParamKind::Buffer),
            running_var: pb.declare(format!("{name}.running_var"), &[dim], Init::Ones, ParamKind::Buffer),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let gamma = s.param(&self.gamma);
        let beta = s.param(&self.beta);
        let eps = T::lit(NORM_EPS);
        if s.is_training() {
            let (y, batch_mean, batch_var) = x.batch_norm_train(gamma, beta, eps);
            s.record_bn(BnUpdate {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
                batch_mean,
                batch_var,
                momentum: BN_MOMENTUM,
            });
            y
        } else {
            let store = s.store();
            x.batch_norm_eval(
                gamma,
                beta,
                store.value(&self.running_mean),
                store.value(&self.running_var),
                eps,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent_and_seeded() {
        let mut a = ParamBuilder::new();
        Linear::new(&mut a, "x", 3, 4, true);
        Linear::new(&mut a, "y", 2, 2, false);
        let mut b = ParamBuilder::new();
        Linear::new(&mut b, "y", 2, 2, false);
        Linear::new(&mut b, "x", 3, 4, true);
        let sa = ParamStore::<f64>::init(&a.into_decls(), 7);
        let sb = ParamStore::<f64>::init(&b.into_decls(), 7);
        assert_eq!(sa.value("x.weight"), sb.value("x.weight"));
        assert_eq!(sa.value("y.weight"), sb.value("y.weight"));
        assert!(sa.value("x.weight").iter().all(|v| v.abs() <= 0.04));
        assert!(sa.value("x.bias").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_parameter_is_a_single_leaf() {
        let mut pb = ParamBuilder::new();
        let lin = Linear::new(&mut pb, "l", 2, 1, false);
        let store = ParamStore::<f64>::init(&pb.into_decls(), 1);
        let g = Graph::new();
        let s = Session::new(&g, &store, true);
        let x1 = s.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 2.0]).unwrap());
        let x2 = s.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, 4.0]).unwrap());
        let y = lin.forward(&s, x1).add(lin.forward(&s, x2)).sum_all();
        let grads = s.param_grads(&g.backward(y));
        assert_eq!(grads["l.weight"].as_slice().unwrap(), &[4.0, 6.0]);
    }
}
