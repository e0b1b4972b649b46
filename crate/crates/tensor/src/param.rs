//! Named parameter storage and per-step binding.
//!
//! Parameters live in a [`ParamStore`] keyed by name (a `BTreeMap`, so every
//! iteration order is deterministic). A [`Session`] wraps one recording
//! graph and binds each parameter to a single leaf on first use, so modules
//! that share weights (for example one image encoder applied to several
//! views) accumulate gradients into the same node.
//!
//! Initialization draws from a stream seeded by `global_seed ^ fnv1a(name)`,
//! which makes a parameter's initial value a function of its name alone:
//! adding or removing other parameters does not shift it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Tensor};

#[derive(Default, Clone)]
pub struct ParamStore {
    values: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.values.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: ArrayD<f64>) {
        self.values.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.values.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }
}

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Gaussian init with the given standard deviation.
pub fn normal_init(shape: &[usize], std: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He / Kaiming init for ReLU stacks: `std = sqrt(2 / fan_in)` where
/// `fan_in` is the product of all non-leading axes.
pub fn kaiming_init(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), seed)
}

/// Uniform init in `[-a, a]`.
pub fn uniform_init(shape: &[usize], a: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros_init(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones_init(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// One recording pass over a parameter store.
pub struct Session {
    graph: Graph,
    store: Rc<RefCell<ParamStore>>,
    seed: u64,
    bound: RefCell<BTreeMap<String, Tensor>>,
}

impl Session {
    pub fn new(store: Rc<RefCell<ParamStore>>, seed: u64) -> Self {
        Self::on_graph(Graph::new(), store, seed)
    }

    /// Binds parameters onto an existing graph instead of a fresh one.
    /// Useful when the recording graph is owned by a caller, such as a
    /// numeric gradient checker that replays the same closure.
    pub fn on_graph(graph: Graph, store: Rc<RefCell<ParamStore>>, seed: u64) -> Self {
        Self {
            graph,
            store,
            seed,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> Rc<RefCell<ParamStore>> {
        self.store.clone()
    }

    /// Bind (creating on first ever use) the named parameter. `init`
    /// receives the name-derived seed.
    pub fn param(&self, name: &str, init: impl FnOnce(u64) -> ArrayD<f64>) -> Tensor {
        if let Some(t) = self.bound.borrow().get(name) {
            return t.clone();
        }
        let value = {
            let mut store = self.store.borrow_mut();
            if !store.contains(name) {
                let v = init(self.seed ^ fnv1a(name));
                store.insert(name.to_string(), v);
            }
            store.get(name).unwrap().clone()
        };
        let t = self.graph.leaf(value);
        self.bound
            .borrow_mut()
            .insert(name.to_string(), t.clone());
        t
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Gradients for every parameter bound in this session, by name.
    /// Parameters that did not influence the loss get zeros.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, t)| (name.clone(), grads.get_or_zeros(t)))
            .collect()
    }
}
