//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles in
//! creation order, which is already a topological order, so the backward
//! pass is a single reverse sweep. Graphs are cheap and single-use: build
//! one per forward pass, call [`Graph::backward`], drop it.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Backward<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(std::ptr::eq(loss.graph, self), "loss from a different graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![T::one()]));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&grad, &parent_values, &node.value, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

fn some<T>(t: T) -> Option<T> {
    Some(t)
}

#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    /// Owned copy of the value.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(self, value: Tensor<T>, back: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static) -> Var<'g, T> {
        self.graph
            .push(value, vec![self.id], Box::new(move |g, p, out, _| vec![Some(back(g, p[0], out))]))
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn check_same_shape(&self, other: &Var<'g, T>, op: &str) {
        self.same_graph(other);
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same_shape(&other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, _, _, _| vec![some(g.clone()), some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same_shape(&other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, _, _, _| vec![some(g.clone()), some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same_shape(&other, "mul");
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| g.zip_map(p[1], |g, b| g * b)),
                    need[1].then(|| g.zip_map(p[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.check_same_shape(&other, "div");
        let v = self.value().zip_map(&other.value(), |a, b| a / b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, p, out, need| {
                vec![
                    need[0].then(|| g.zip_map(p[1], |g, b| g / b)),
                    need[1].then(|| {
                        let t = g.zip_map(out, |g, y| g * y);
                        t.zip_map(p[1], |t, b| -t / b)
                    }),
                ]
            }),
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, move |g, _, _| g.map(|x| x * c))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g, _, _| g.clone())
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(T::exp);
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| g * y))
    }

    pub fn ln(self) -> Var<'g, T> {
        let v = self.value().map(T::ln);
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| g / x))
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let v = self.value().map(T::sqrt);
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| g / (y + y)))
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, move |g, x, _| g.zip_map(x, |g, x| g * p * x.powf(p - T::one())))
    }

    pub fn square(self) -> Var<'g, T> {
        let v = self.value().map(|x| x * x);
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| g * (x + x)))
    }

    pub fn tanh(self) -> Var<'g, T> {
        let v = self.value().map(T::tanh);
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| g * (T::one() - y * y)))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let v = self.value().map(sigmoid);
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| g * y * (T::one() - y)))
    }

    pub fn relu(self) -> Var<'g, T> {
        // NaN passes through so divergence stays visible
        let v = self.value().map(|x| if x < T::zero() { T::zero() } else { x });
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }))
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { slope * x });
        self.unary(v, move |g, x, _| g.zip_map(x, |g, x| if x > T::zero() { g } else { slope * g }))
    }

    // ---- reductions and shape ----------------------------------------------

    pub fn sum(self) -> Var<'g, T> {
        let v = Tensor::scalar(self.value().sum());
        let shape = self.shape();
        self.unary(v, move |g, _, _| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g, T> {
        let shape = shape.into();
        let old = self.shape();
        let v = self
            .value()
            .reshape(shape.clone())
            .unwrap_or_else(|e| panic!("reshape {old:?} -> {shape:?}: {e}"));
        self.unary(v, move |g, _, _| g.clone().reshaped(old.clone()))
    }

    /// Flatten to 1-D.
    pub fn flatten(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.reshape([n])
    }

    pub fn transpose(self) -> Var<'g, T> {
        let v = self.value().transpose2();
        self.unary(v, |g, _, _| g.transpose2())
    }

    /// 2-D matrix product. A 1-D right operand is treated as a column.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let vector_rhs = b.ndim() == 1;
        let (k2, n) = if vector_rhs { (b.shape()[0], 1) } else { b.dims2() };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let out = kernels::matmul(a.data(), b.data(), m, k, n, false, false);
        let out_shape = if vector_rhs { vec![m] } else { vec![m, n] };
        let b_shape = b.shape().to_vec();
        self.graph.push(
            Tensor::new(out_shape, out),
            vec![self.id, other.id],
            Box::new(move |g, p, _, need| {
                let ga = need[0].then(|| Tensor::new([m, k], kernels::matmul(g.data(), p[1].data(), m, n, k, false, true)));
                let gb = need[1].then(|| Tensor::new(b_shape.clone(), kernels::matmul(p[0].data(), g.data(), k, m, n, true, false)));
                vec![ga, gb]
            }),
        )
    }

    /// `[N] -> [R, N]`, repeating the vector as every row.
    pub fn expand_rows(self, rows: usize) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(v.ndim(), 1, "expand_rows needs a vector");
        let n = v.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        self.unary(Tensor::new([rows, n], data), move |g, _, _| {
            let mut acc = vec![T::zero(); n];
            for r in 0..rows {
                for (a, &x) in acc.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                    *a += x;
                }
            }
            Tensor::new([n], acc)
        })
    }

    /// `[R] -> [R, N]`, repeating each entry along its row.
    pub fn expand_cols(self, cols: usize) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(v.ndim(), 1, "expand_cols needs a vector");
        let r = v.numel();
        let mut data = Vec::with_capacity(r * cols);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        self.unary(Tensor::new([r, cols], data), move |g, _, _| {
            Tensor::new(
                [r],
                (0..r).map(|i| g.data()[i * cols..(i + 1) * cols].iter().copied().sum()).collect(),
            )
        })
    }

    /// A one-element tensor broadcast to `shape`.
    pub fn broadcast(self, shape: impl Into<Vec<usize>>) -> Var<'g, T> {
        let shape = shape.into();
        let x = self.value();
        assert_eq!(x.numel(), 1, "broadcast needs a one-element tensor");
        let old = x.shape().to_vec();
        self.unary(Tensor::full(shape, x.item()), move |g, _, _| {
            Tensor::new(old.clone(), vec![g.sum()])
        })
    }

    /// Sum over the last axis of an `[R, N]` matrix, giving `[R]`.
    pub fn sum_rows(self) -> Var<'g, T> {
        let v = self.value();
        let (r, n) = v.dims2();
        let out = (0..r).map(|i| v.row(i).iter().copied().sum()).collect();
        self.unary(Tensor::new([r], out), move |g, _, _| {
            let mut d = Vec::with_capacity(r * n);
            for &x in g.data() {
                d.extend(std::iter::repeat_n(x, n));
            }
            Tensor::new([r, n], d)
        })
    }

    /// Sum over the first axis of an `[R, N]` matrix, giving `[N]`.
    pub fn sum_cols(self) -> Var<'g, T> {
        let v = self.value();
        let (r, n) = v.dims2();
        let mut out = vec![T::zero(); n];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        self.unary(Tensor::new([n], out), move |g, _, _| {
            let mut d = Vec::with_capacity(r * n);
            for _ in 0..r {
                d.extend_from_slice(g.data());
            }
            Tensor::new([r, n], d)
        })
    }

    fn rows_view(shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("softmax over rows needs a 1-D or 2-D tensor, got {shape:?}"),
        }
    }

    /// Softmax over the last axis (1-D or 2-D input).
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let (r, n) = Self::rows_view(x.shape());
        let y = kernels::softmax_rows(x.data(), r, n);
        self.unary(Tensor::new(x.shape().to_vec(), y), move |g, _, y| {
            let mut d = vec![T::zero(); r * n];
            for i in 0..r {
                let gy = &g.data()[i * n..(i + 1) * n];
                let yy = &y.data()[i * n..(i + 1) * n];
                let dot: T = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = yy[j] * (gy[j] - dot);
                }
            }
            Tensor::new(y.shape().to_vec(), d)
        })
    }

    /// Log-softmax over the last axis (1-D or 2-D input).
    pub fn log_softmax(self) -> Var<'g, T> {
        let x = self.value();
        let (r, n) = Self::rows_view(x.shape());
        let mut out = vec![T::zero(); r * n];
        for i in 0..r {
            let row = &x.data()[i * n..(i + 1) * n];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        self.unary(Tensor::new(x.shape().to_vec(), out), move |g, _, y| {
            let mut d = vec![T::zero(); r * n];
            for i in 0..r {
                let gy = &g.data()[i * n..(i + 1) * n];
                let total: T = gy.iter().copied().sum();
                for j in 0..n {
                    d[i * n + j] = gy[j] - y.data()[i * n + j].exp() * total;
                }
            }
            Tensor::new(y.shape().to_vec(), d)
        })
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[0], "slice {start}+{len} out of {shape:?}");
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let data = x.data()[start * inner..(start + len) * inner].to_vec();
        self.unary(Tensor::new(out_shape, data), move |g, _, _| {
            let mut d = vec![T::zero(); shape.iter().product()];
            d[start * inner..(start + len) * inner].copy_from_slice(g.data());
            Tensor::new(shape.clone(), d)
        })
    }

    /// Select rows (first-axis entries) by index, with repetition allowed.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < shape[0], "gather index {i} out of {}", shape[0]);
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        self.unary(Tensor::new(out_shape, data), move |g, _, _| {
            let mut d = vec![T::zero(); shape.iter().product()];
            for (k, &i) in indices.iter().enumerate() {
                for (dst, &src) in d[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                    *dst += src;
                }
            }
            Tensor::new(shape.clone(), d)
        })
    }

    /// Select flat elements by index, giving a vector.
    pub fn pick(self, flat: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let data = flat.iter().map(|&i| x.data()[i]).collect();
        let flat = flat.to_vec();
        self.unary(Tensor::new([flat.len()], data), move |g, _, _| {
            let mut d = Tensor::zeros(shape.clone());
            for (k, &i) in flat.iter().enumerate() {
                d.data_mut()[i] += g.data()[k];
            }
            d
        })
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,k,k]` weights and
    /// optional `[O]` bias, zero padding.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        self.same_graph(&weight);
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = x.dims3();
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,k,k]");
        let (o, kc, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(kc, c, "conv: input has {c} channels, weight expects {kc}");
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv: input {h}x{wd} smaller than kernel {k}"
        );
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let p = oh * ow;
        let r = geom.col_rows();
        let cols = kernels::im2col(x.data(), &geom);
        let mut out = kernels::matmul(w.data(), &cols, o, r, p, false, false);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), [o], "conv bias must be [{o}]");
            for (oc, &bb) in bv.data().iter().enumerate() {
                for v in &mut out[oc * p..(oc + 1) * p] {
                    *v += bb;
                }
            }
            parents.push(b.id);
        }
        let w_shape = ws.to_vec();
        self.graph.push(
            Tensor::new([o, oh, ow], out),
            parents,
            Box::new(move |g, pv, _, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let dcols = kernels::matmul(pv[1].data(), gd, r, o, p, true, false);
                    Tensor::new([c, h, wd], kernels::col2im(&dcols, &geom))
                });
                let gw = need[1].then(|| {
                    let cols = kernels::im2col(pv[0].data(), &geom);
                    Tensor::new(w_shape.clone(), kernels::matmul(gd, &cols, o, p, r, false, true))
                });
                let mut grads = vec![gx, gw];
                if need.len() > 2 {
                    grads.push(need[2].then(|| Tensor::new([o], (0..o).map(|i| gd[i * p..(i + 1) * p].iter().copied().sum()).collect())));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling of a `[C,H,W]` tensor.
    pub fn upsample2x(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let v = Tensor::new([c, 2 * h, 2 * w], kernels::upsample_nearest2(x.data(), c, h, w));
        self.unary(v, move |g, _, _| {
            Tensor::new([c, h, w], kernels::upsample_nearest2_backward(g.data(), c, h, w))
        })
    }

    /// Per-channel spatial mean of a `[C,H,W]` tensor, giving `[C]`.
    pub fn channel_mean(self) -> Var<'g, T> {
        let (c, h, w) = self.value().dims3();
        let n = T::from_usize(h * w).unwrap();
        self.reshape([c, h * w]).sum_rows().scale(T::one() / n)
    }

    /// Add a per-channel bias `[C]` to a `[C,H,W]` tensor.
    pub fn add_channel(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (c, h, w) = self.value().dims3();
        self.reshape([c, h * w]).add(bias.expand_cols(h * w)).reshape([c, h, w])
    }

    /// Multiply each channel of a `[C,H,W]` tensor by a per-channel `[C]` factor.
    pub fn mul_channel(self, factor: Var<'g, T>) -> Var<'g, T> {
        let (c, h, w) = self.value().dims3();
        self.reshape([c, h * w]).mul(factor.expand_cols(h * w)).reshape([c, h, w])
    }

    /// Dot product of two equally shaped tensors.
    pub fn dot(self, other: Var<'g, T>) -> Var<'g, T> {
        self.mul(other).sum()
    }
}

/// Concatenate along the first axis.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let inner_shape = values[0].shape()[1..].to_vec();
    let inner: usize = inner_shape.iter().product();
    let mut lens = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for v in &values {
        assert_eq!(&v.shape()[1..], &inner_shape[..], "concat trailing dims differ");
        lens.push(v.shape()[0]);
        data.extend_from_slice(v.data());
    }
    let total: usize = lens.iter().sum();
    let mut shape = vec![total];
    shape.extend_from_slice(&inner_shape);
    let ids = parts.iter().map(|p| p.id).collect();
    graph.push(
        Tensor::new(shape, data),
        ids,
        Box::new(move |g, pv, _, need| {
            let mut offset = 0;
            lens.iter()
                .zip(need)
                .zip(pv)
                .map(|((&len, &need), pv)| {
                    let start = offset * inner;
                    offset += len;
                    need.then(|| Tensor::new(pv.shape().to_vec(), g.data()[start..start + len * inner].to_vec()))
                })
                .collect()
        }),
    )
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Scalar> ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Scalar> ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
