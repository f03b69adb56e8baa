//! Named parameter storage, graph bindings, layer helpers and optimizers.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of parameter name to value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Entries whose name starts with `prefix`, prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every entry of `other` under `prefix`.
    pub fn extend_scoped(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Require a parameter with the given shape.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> crate::Result<()> {
        match self.params.get(name) {
            None => Err(crate::Error::Checkpoint(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape => Err(crate::Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Require exactly the names and shapes of `layout`.
    pub fn expect_layout(&self, layout: &ParamStore<T>) -> crate::Result<()> {
        for (name, t) in &layout.params {
            self.expect_shape(name, t.shape())?;
        }
        if let Some(extra) = self.params.keys().find(|k| !layout.params.contains_key(*k)) {
            return Err(crate::Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// He-normal convolution kernel `[out, in, k, k]` plus zero bias.
    pub fn init_conv(&mut self, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.insert(format!("{name}.weight"), rng::normal_tensor(rng, &[cout, cin, k, k], std));
        self.insert(format!("{name}.bias"), Tensor::zeros([cout]));
    }

    /// Scaled-normal dense layer `[out, in]` plus zero bias.
    pub fn init_linear(&mut self, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
        let std = (1.0 / fan_in as f64).sqrt();
        self.insert(format!("{name}.weight"), rng::normal_tensor(rng, &[fan_out, fan_in], std));
        self.insert(format!("{name}.bias"), Tensor::zeros([fan_out]));
    }
}

/// Binding of a [`ParamStore`] to a graph: each parameter becomes a leaf
/// on first use.
pub struct Params<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<BTreeMap<String, Var<'g, T>>>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
}

impl<'g, 's, T: Scalar> Params<'g, 's, T> {
    /// Every parameter tracked for gradients.
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_trainable(graph, store, |_| true)
    }

    /// Every parameter a constant (inference).
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_trainable(graph, store, |_| false)
    }

    pub fn with_trainable(graph: &'g Graph<T>, store: &'s ParamStore<T>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Params {
            graph,
            store,
            vars: RefCell::new(BTreeMap::new()),
            trainable: Box::new(trainable),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Leaf for parameter `name`. Panics when absent: parameter names are
    /// fixed by the model code and validated when checkpoints load.
    pub fn get(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self.store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let var = if (self.trainable)(name) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients of every trainable parameter used so far.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, &var)| (name.clone(), grads.wrt(var)))
            .collect()
    }

    pub fn linear(&self, name: &str, x: Var<'g, T>) -> Var<'g, T> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        w.matmul(x) + b
    }

    pub fn conv(&self, name: &str, x: Var<'g, T>, stride: usize) -> Var<'g, T> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let k = w.shape()[2];
        x.conv2d(w, Some(b), stride, k / 2)
    }
}

pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Sum gradient maps (used to accumulate per-sample gradients).
pub fn accumulate<T: Scalar>(acc: &mut GradMap<T>, grads: GradMap<T>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

pub fn scale_grads<T: Scalar>(grads: &mut GradMap<T>, c: T) {
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= c;
        }
    }
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: T) -> T {
    let norm = grads.values().map(Tensor::sq_norm).sum::<T>().sqrt();
    if norm > max_norm {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>);
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) {
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
