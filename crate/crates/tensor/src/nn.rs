//! Parameterized layers and the forward-pass context.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::Var;
use crate::ops::conv::ConvGeometry;
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Registers parameters under hierarchical dot-separated names with
/// seeded initialization.
pub struct Builder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn path(&self, leaf: &str) -> String {
        let mut p = self.prefix.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(leaf);
        p
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        let path = self.path(name);
        self.store.insert(path, ParamKind::Trainable, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, kind, Tensor::full(shape, T::lit(value)))
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Forward-pass mode and side effects.
pub struct Context<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    train: bool,
    track: bool,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Scalar> Context<'a, T> {
    /// Batch statistics in normalization layers, gradients tracked.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            train: true,
            track: true,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Running statistics, no gradient tracking.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            train: false,
            track: false,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_grad(mut self, track: bool) -> Self {
        self.track = track;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let track = self.track && self.store.kind(id) == ParamKind::Trainable;
        Var::param(self.store, id, track)
    }

    fn record(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates produced during the pass, in order.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates.into_inner()
    }
}

/// Apply buffer updates collected by a training-mode forward pass.
pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, v) in updates {
        store.set(id, v)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = (out_channels * kernel * kernel) as f64;
        b.scoped(name, |b| {
            let weight = b.normal("weight", &[out_channels, in_channels, kernel, kernel], (2.0 / fan_out).sqrt())?;
            let bias = if bias {
                Some(b.constant("bias", &[out_channels], 0.0, ParamKind::Trainable)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                geom: ConvGeometry::new(stride, padding),
                in_channels,
                out_channels,
                kernel,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        x.conv2d(&w, b.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.constant("weight", &[channels], 1.0, ParamKind::Trainable)?,
                beta: b.constant("bias", &[channels], 0.0, ParamKind::Trainable)?,
                running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::Buffer)?,
                running_var: b.constant("running_var", &[channels], 1.0, ParamKind::Buffer)?,
                eps: 1e-5,
                momentum: 0.1,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::lit(self.eps);
        if ctx.is_train() {
            let (y, st) = x.batch_norm_train(&gamma, &beta, eps)?;
            let m = T::lit(self.momentum);
            let keep = T::one() - m;
            let n = T::from_usize(st.count).unwrap();
            let unbias = if st.count > 1 { n / (n - T::one()) } else { T::one() };
            let rm = ctx.store().get(self.running_mean);
            let rv = ctx.store().get(self.running_var);
            let new_mean = Tensor::from_fn(rm.shape(), |c| keep * rm.data()[c] + m * st.mean[c]);
            let new_var = Tensor::from_fn(rv.shape(), |c| keep * rv.data()[c] + m * st.var[c] * unbias);
            ctx.record(self.running_mean, new_mean);
            ctx.record(self.running_var, new_var);
            Ok(y)
        } else {
            let rm = ctx.store().get(self.running_mean);
            let rv = ctx.store().get(self.running_var);
            x.batch_norm_eval(&gamma, &beta, rm.data(), rv.data(), eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_scoped() {
        let build = || {
            let mut b = Builder::<f32>::new(3);
            let c = b.scoped("stem", |b| Conv2d::new(b, "conv", 3, 4, 3, 1, 1, true)).unwrap();
            (c, b.finish())
        };
        let (c1, s1) = build();
        let (_, s2) = build();
        assert_eq!(s1.name(c1.weight), "stem.conv.weight");
        assert_eq!(s1.get(c1.weight), s2.get(c1.weight));
        assert_eq!(s1.get(c1.bias.unwrap()).sum(), 0.0);
    }

    #[test]
    fn batch_norm_records_running_stats_only_in_training() {
        let mut b = Builder::<f64>::new(0);
        let bn = BatchNorm2d::new(&mut b, "bn", 2).unwrap();
        let mut store = b.finish();
        let x = Var::constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let ctx = Context::train(&store);
        bn.forward(&ctx, &x).unwrap();
        let updates = ctx.into_updates();
        assert_eq!(updates.len(), 2);
        apply_updates(&mut store, updates).unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((store.get(bn.running_mean).data()[0] - 0.55).abs() < 1e-12);
        let ctx = Context::eval(&store);
        bn.forward(&ctx, &x).unwrap();
        assert!(ctx.into_updates().is_empty());
    }
}
