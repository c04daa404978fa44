//! Reverse-mode automatic differentiation over a dynamically built DAG.
//!
//! A [`Var`] owns its value and, when any input requires a gradient, the
//! operation that produced it. Graphs built from untracked inputs keep no
//! history, so inference frees intermediates as soon as they go out of scope.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::{elementwise, norm, pool, resize};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

struct Node<T: Scalar> {
    id: u64,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    origin: Origin<T>,
}

enum Origin<T: Scalar> {
    Leaf,
    Param(ParamId),
    Op(Op<T>),
}

enum Op<T: Scalar> {
    Conv2d {
        x: Var<T>,
        w: Var<T>,
        b: Option<Var<T>>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_statistics: bool,
    },
    Relu(Var<T>),
    Sigmoid(Var<T>),
    Add(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    Sum(Var<T>),
    MaxPool {
        x: Var<T>,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var<T>),
    ChannelMean(Var<T>),
    ChannelMax {
        x: Var<T>,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var<T>>),
    Upsample(Var<T>),
    Reshape(Var<T>),
    /// Scalar-valued function whose input gradient was computed eagerly.
    ScalarFn {
        x: Var<T>,
        grad: Tensor<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b.iter());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x)
            | Op::ChannelMean(x)
            | Op::Upsample(x)
            | Op::Reshape(x)
            | Op::MaxPool { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::ScalarFn { x, .. } => vec![x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Concat(xs) => xs.iter().collect(),
        }
    }

    fn into_parents(self, out: &mut Vec<Var<T>>) {
        match self {
            Op::Conv2d { x, w, b, .. } => {
                out.push(x);
                out.push(w);
                out.extend(b);
            }
            Op::BatchNorm { x, gamma, beta, .. } => out.extend([x, gamma, beta]),
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x)
            | Op::ChannelMean(x)
            | Op::Upsample(x)
            | Op::Reshape(x)
            | Op::MaxPool { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::ScalarFn { x, .. } => out.push(x),
            Op::Add(a, b) | Op::Mul(a, b) => out.extend([a, b]),
            Op::Concat(xs) => out.extend(xs),
        }
    }

    /// Gradients for each parent that requires one.
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var<T>, Tensor<T>)>> {
        let mut res = Vec::new();
        match self {
            Op::Conv2d { x, w, b, geom } => {
                let need = (x.requires_grad(), w.requires_grad(), b.as_ref().is_some_and(|b| b.requires_grad()));
                let grads = conv::conv2d_backward(x.value(), w.value(), *geom, g, need)?;
                if let Some(gx) = grads.input {
                    res.push((x.clone(), gx));
                }
                if let Some(gw) = grads.weight {
                    res.push((w.clone(), gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    res.push((b.clone(), gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_statistics,
            } => {
                let grads = norm::batch_norm_backward(x.value(), gamma.value(), mean, invstd, g, *batch_statistics)?;
                res.push((x.clone(), grads.input));
                res.push((gamma.clone(), grads.gamma));
                res.push((beta.clone(), grads.beta));
            }
            Op::Relu(x) => res.push((x.clone(), out.zip_map(g, |y, g| if y > T::zero() { g } else { T::zero() })?)),
            Op::Sigmoid(x) => res.push((x.clone(), out.zip_map(g, |y, g| g * y * (T::one() - y))?)),
            Op::Add(a, b) => {
                res.push((a.clone(), elementwise::reduce_to(g, a.shape())?));
                res.push((b.clone(), elementwise::reduce_to(g, b.shape())?));
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let ga = elementwise::broadcast_zip("mul backward", g, b.value(), |g, b| g * b)?;
                    res.push((a.clone(), elementwise::reduce_to(&ga, a.shape())?));
                }
                if b.requires_grad() {
                    let gb = elementwise::broadcast_zip("mul backward", g, a.value(), |g, a| g * a)?;
                    res.push((b.clone(), elementwise::reduce_to(&gb, b.shape())?));
                }
            }
            Op::Scale(x, s) => res.push((x.clone(), g.map(|v| v * *s))),
            Op::Sum(x) => res.push((x.clone(), Tensor::full(x.shape(), g.item()))),
            Op::MaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                res.push((x.clone(), pool::scatter_argmax(x.shape(), argmax, g)))
            }
            Op::GlobalAvgPool(x) => res.push((x.clone(), pool::global_avg_pool_backward(x.shape(), g)?)),
            Op::ChannelMean(x) => res.push((x.clone(), pool::channel_mean_backward(x.shape(), g)?)),
            Op::Upsample(x) => res.push((x.clone(), resize::upsample_bilinear_backward(x.shape(), g)?)),
            Op::Reshape(x) => res.push((x.clone(), g.clone().reshape(x.shape())?)),
            Op::ScalarFn { x, grad } => {
                let s = g.item();
                res.push((x.clone(), grad.map(|v| v * s)));
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = g.dims4()?;
                let plane = h * w;
                let total_c: usize = xs.iter().map(|x| x.shape()[1]).sum();
                let mut offset = 0;
                for x in xs {
                    let c = x.shape()[1];
                    if x.requires_grad() {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        res.push((x.clone(), Tensor::new(x.shape(), data)?));
                    }
                    offset += c;
                }
            }
        }
        res.retain(|(v, _)| v.requires_grad());
        Ok(res)
    }
}

impl<T: Scalar> Drop for Node<T> {
    // Tear long chains down iteratively; recursive drops of deep networks
    // overflow small thread stacks.
    fn drop(&mut self) {
        let mut stack = Vec::new();
        if let Origin::Op(op) = std::mem::replace(&mut self.origin, Origin::Leaf) {
            op.into_parents(&mut stack);
        }
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                if let Origin::Op(op) = std::mem::replace(&mut node.origin, Origin::Leaf) {
                    op.into_parents(&mut stack);
                }
            }
        }
    }
}

/// Gradients produced by [`Var::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to a tracked leaf or parameter variable.
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        match var.0.origin {
            Origin::Param(id) => self.params.get(&id),
            _ => self.leaves.get(&var.0.id),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, origin: Origin<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value: Arc::new(value),
            requires_grad,
            origin,
        }))
    }

    fn from_op(value: Tensor<T>, op: Op<T>) -> Self {
        let rg = op.parents().iter().any(|p| p.requires_grad());
        if rg {
            Self::make(value, true, Origin::Op(op))
        } else {
            Self::make(value, false, Origin::Leaf)
        }
    }

    /// Untracked input.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Origin::Leaf)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Origin::Leaf)
    }

    /// View of a stored parameter; shares storage with the store.
    pub fn param(store: &ParamStore<T>, id: ParamId, track: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value: store.shared(id),
            requires_grad: track,
            origin: Origin::Param(id),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, no history.
    pub fn detach(&self) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value: Arc::clone(&self.0.value),
            requires_grad: false,
            origin: Origin::Leaf,
        }))
    }

    pub fn conv2d(&self, w: &Var<T>, b: Option<&Var<T>>, geom: ConvGeometry) -> Result<Self> {
        let y = conv::conv2d_forward(self.value(), w.value(), b.map(|b| b.value()), geom)?;
        Ok(Self::from_op(
            y,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                geom,
            },
        ))
    }

    /// Batch norm using the statistics of this batch. Returns the batch
    /// mean and biased variance for running-average bookkeeping.
    pub fn batch_norm_train(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<(Self, norm::BatchStats<T>)> {
        let st = norm::batch_stats(self.value())?;
        let invstd = norm::invstd(&st.var, eps);
        let y = norm::normalize(self.value(), &st.mean, &invstd, gamma.value(), beta.value())?;
        let var = Self::from_op(
            y,
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: st.mean.clone(),
                invstd,
                batch_statistics: true,
            },
        );
        Ok((var, st))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&self, gamma: &Var<T>, beta: &Var<T>, mean: &[T], var: &[T], eps: T) -> Result<Self> {
        let invstd = norm::invstd(var, eps);
        let y = norm::normalize(self.value(), mean, &invstd, gamma.value(), beta.value())?;
        Ok(Self::from_op(
            y,
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean.to_vec(),
                invstd,
                batch_statistics: false,
            },
        ))
    }

    pub fn relu(&self) -> Self {
        let y = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        Self::from_op(y, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let y = self.value().map(sigmoid);
        Self::from_op(y, Op::Sigmoid(self.clone()))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Var<T>) -> Result<Self> {
        let y = elementwise::broadcast_zip("add", self.value(), other.value(), |a, b| a + b)?;
        Ok(Self::from_op(y, Op::Add(self.clone(), other.clone())))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Var<T>) -> Result<Self> {
        let y = elementwise::broadcast_zip("mul", self.value(), other.value(), |a, b| a * b)?;
        Ok(Self::from_op(y, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: T) -> Self {
        let y = self.value().map(|v| v * s);
        Self::from_op(y, Op::Scale(self.clone(), s))
    }

    pub fn sum(&self) -> Self {
        let y = Tensor::scalar(self.value().sum());
        Self::from_op(y, Op::Sum(self.clone()))
    }

    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let (y, argmax) = pool::max_pool2d(self.value(), kernel, stride, padding)?;
        Ok(Self::from_op(y, Op::MaxPool { x: self.clone(), argmax }))
    }

    pub fn global_avg_pool(&self) -> Result<Self> {
        let y = pool::global_avg_pool(self.value())?;
        Ok(Self::from_op(y, Op::GlobalAvgPool(self.clone())))
    }

    pub fn channel_mean(&self) -> Result<Self> {
        let y = pool::channel_mean(self.value())?;
        Ok(Self::from_op(y, Op::ChannelMean(self.clone())))
    }

    pub fn channel_max(&self) -> Result<Self> {
        let (y, argmax) = pool::channel_max(self.value())?;
        Ok(Self::from_op(y, Op::ChannelMax { x: self.clone(), argmax }))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat(xs: &[Var<T>]) -> Result<Self> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let (n, _, h, w) = first.value().dims4()?;
        for x in xs {
            let (xn, _, xh, xw) = x.value().dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: first.shape().to_vec(),
                    got: x.shape().to_vec(),
                });
            }
        }
        let plane = h * w;
        let total_c: usize = xs.iter().map(|x| x.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for x in xs {
                let c = x.shape()[1];
                data.extend_from_slice(&x.value().data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::new(&[n, total_c, h, w], data)?;
        Ok(Self::from_op(y, Op::Concat(xs.to_vec())))
    }

    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if self.value().dims4()?.2 == out_h && self.shape()[3] == out_w {
            return Ok(self.clone());
        }
        let y = resize::upsample_bilinear(self.value(), out_h, out_w)?;
        Ok(Self::from_op(y, Op::Upsample(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let y = self.value().clone().reshape(shape)?;
        Ok(Self::from_op(y, Op::Reshape(self.clone())))
    }

    /// Attach a scalar function of `self` whose value and gradient with
    /// respect to `self` have already been computed.
    pub fn scalar_fn(&self, value: T, grad: Tensor<T>) -> Result<Self> {
        grad.expect_shape("scalar_fn", self.shape())?;
        Ok(Self::from_op(
            Tensor::scalar(value),
            Op::ScalarFn {
                x: self.clone(),
                grad,
            },
        ))
    }

    /// Backpropagate from a single-element output.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("output must be a single element, got shape {:?}", self.shape()),
            });
        }
        self.backward_with(Tensor::full(self.shape(), T::one()))
    }

    /// Backpropagate an arbitrary output cotangent.
    pub fn backward_with(&self, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape("backward", self.shape())?;
        let mut grads = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        if !self.requires_grad() {
            return Ok(grads);
        }
        // Node ids increase in creation order, which is a topological order.
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.0.id) {
                continue;
            }
            if let Origin::Op(op) = &v.0.origin {
                stack.extend(op.parents().into_iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.push(v);
        }
        nodes.sort_by_key(|v| std::cmp::Reverse(v.0.id));

        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        pending.insert(self.0.id, seed);
        for v in &nodes {
            let Some(g) = pending.remove(&v.0.id) else {
                continue;
            };
            match &v.0.origin {
                Origin::Leaf => {
                    grads.leaves.insert(v.0.id, g);
                }
                Origin::Param(id) => accumulate(&mut grads.params, *id, g)?,
                Origin::Op(op) => {
                    for (parent, pg) in op.backward(v.value(), &g)? {
                        accumulate(&mut pending, parent.0.id, pg)?;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Scalar>(map: &mut HashMap<K, Tensor<T>>, key: K, g: Tensor<T>) -> Result<()> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
            Ok(())
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    /// Central-difference check of d(sum(f(x) * cot))/dx.
    fn check(f: impl Fn(&Var<f64>) -> Var<f64>, x: Tensor<f64>) {
        let leaf = Var::leaf(x.clone());
        let y = f(&leaf);
        let cot = t(y.shape(), 0.77);
        let g = y.backward_with(cot.clone()).unwrap();
        let analytic = g.wrt(&leaf).unwrap().clone();
        let obj = |x: &Tensor<f64>| -> f64 {
            let y = f(&Var::constant(x.clone()));
            y.value().data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} analytic={a}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let other = Var::constant(t(&[2, 3, 1, 1], 0.5));
        let spatial = Var::constant(t(&[2, 1, 3, 4], 0.9));
        check(|x| x.sigmoid(), t(&[2, 3, 3, 4], 1.1));
        check(|x| x.mul(&other).unwrap(), t(&[2, 3, 3, 4], 1.1));
        check(|x| x.mul(&spatial).unwrap().add(x).unwrap(), t(&[2, 3, 3, 4], 1.1));
        check(|x| x.scale(-2.5).sum(), t(&[2, 3], 0.3));
        // Broadcast operand as the differentiated input.
        let big = Var::constant(t(&[2, 3, 3, 4], 1.7));
        check(|g| big.mul(g).unwrap(), t(&[2, 3, 1, 1], 0.4));
    }

    #[test]
    fn structural_gradients() {
        let y = Var::constant(t(&[1, 2, 3, 3], 0.2));
        check(|x| Var::concat(&[x.clone(), y.clone(), x.scale(2.0)]).unwrap(), t(&[1, 3, 3, 3], 0.6));
        check(|x| x.upsample_bilinear(7, 5).unwrap(), t(&[2, 2, 3, 2], 0.6));
        check(|x| x.global_avg_pool().unwrap(), t(&[2, 2, 3, 2], 0.6));
        check(|x| x.channel_mean().unwrap(), t(&[2, 4, 3, 2], 0.6));
        check(|x| x.channel_max().unwrap(), t(&[2, 4, 3, 2], 0.6));
        check(|x| x.max_pool2d(3, 2, 1).unwrap(), t(&[1, 2, 6, 6], 0.61));
        check(|x| x.relu(), t(&[1, 2, 5, 5], 0.37));
    }

    #[test]
    fn conv_and_norm_gradients() {
        let w = Var::constant(t(&[3, 2, 3, 3], 0.3));
        let b = Var::constant(t(&[3], 0.8));
        check(|x| x.conv2d(&w, Some(&b), ConvGeometry::new(2, 1)).unwrap(), t(&[2, 2, 5, 6], 0.5));
        let gamma = Var::constant(t(&[2], 0.9));
        let beta = Var::constant(t(&[2], 0.2));
        check(|x| x.batch_norm_train(&gamma, &beta, 1e-5).unwrap().0, t(&[2, 2, 3, 3], 0.5));
        check(
            |x| x.batch_norm_eval(&gamma, &beta, &[0.1, -0.2], &[1.5, 0.7], 1e-5).unwrap(),
            t(&[2, 2, 3, 3], 0.5),
        );
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Var::leaf(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        // f = sum(x * x + x) -> df/dx = 2x + 1
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn untracked_graph_keeps_no_history() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 1, 2, 2]));
        let y = x.sigmoid().relu();
        assert!(!y.requires_grad());
        assert!(y.backward_with(Tensor::zeros(&[1, 1, 2, 2])).unwrap().is_empty());
    }

    #[test]
    fn deep_chain_drops_without_recursion() {
        let x = Var::leaf(Tensor::<f32>::zeros(&[1]));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.scale(1.0);
        }
        let g = y.backward_with(Tensor::full(&[1], 1.0)).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0]);
        drop(y);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!(sigmoid(1000.0f64) <= 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
