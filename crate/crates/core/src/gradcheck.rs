//! Central finite-difference verification of graph gradients.
//!
//! All checks run at 64-bit precision. The relative error of an entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, so entries
//! whose true gradient is below `floor` are judged on absolute error.

use std::collections::BTreeMap;

use crate::graph::{Graph, Var};
use crate::nn::{ParamStore, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            floor: 1e-6,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Tensor label and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < rel_tol
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((label.to_string(), index));
        }
    }

    fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn entry_indices(n: usize, max_entries: usize) -> Vec<usize> {
    if n <= max_entries {
        (0..n).collect()
    } else {
        let stride = n.div_ceil(max_entries);
        (0..n).step_by(stride).collect()
    }
}

/// Check d f / d inputs, where `f` builds a scalar from parameter leaves
/// holding `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheck, f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|v| g.constant(v.clone())).collect();
        f(&g, &vars).item()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        for i in entry_indices(input.numel(), cfg.max_entries) {
            let x = input.data()[i];
            probe[t].data_mut()[i] = x + cfg.eps;
            let up = eval(&probe);
            probe[t].data_mut()[i] = x - cfg.eps;
            let down = eval(&probe);
            probe[t].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * cfg.eps);
            report.record(&format!("input{t}"), i, analytic[t].data()[i], numeric, cfg.floor);
        }
    }
    report
}

/// Check d f / d params for every tensor in `store`, with `f` given a
/// trainable binding of the store.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, cfg: GradCheck, f: F) -> GradReport
where
    F: for<'g, 's> Fn(&'g Graph<f64>, &Params<'g, 's, f64>) -> Var<'g, f64>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let g = Graph::new();
        let p = Params::frozen(&g, s);
        f(&g, &p).item()
    };

    let analytic: BTreeMap<String, Tensor<f64>> = {
        let g = Graph::new();
        let p = Params::new(&g, store);
        let loss = f(&g, &p);
        let grads = g.backward(loss);
        p.gradients(&grads)
    };

    let mut report = GradReport::default();
    let mut probe = store.clone();
    for (name, tensor) in store.iter() {
        let mut sub = GradReport::default();
        let zeros = Tensor::zeros(tensor.shape().to_vec());
        let grad = analytic.get(name).unwrap_or(&zeros);
        for i in entry_indices(tensor.numel(), cfg.max_entries) {
            let x = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + cfg.eps;
            let up = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x - cfg.eps;
            let down = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            sub.record(name, i, grad.data()[i], (up - down) / (2.0 * cfg.eps), cfg.floor);
        }
        report.merge(sub);
    }
    report
}
