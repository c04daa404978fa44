//! Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

use std::collections::HashMap;

use crate::error::Result;
use crate::graph::Gradients;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.trainable().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            p.expect_shape("sgd", g.shape())?;
            let wd = self.weight_decay;
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vv, &gv), &pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data()) {
                *vv = self.momentum * *vv + gv + wd * pv;
            }
            for (pv, &vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv = *pv - self.lr * vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Var;
    use crate::param::ParamKind;

    #[test]
    fn matches_hand_computed_momentum_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", ParamKind::Trainable, Tensor::full(&[1], 1.0)).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        let mut p = 1.0;
        let mut v = 0.0;
        for _ in 0..3 {
            // loss = p^2 -> grad 2p
            let x = Var::param(&store, id, true);
            let g = x.mul(&x).unwrap().sum().backward().unwrap();
            drop(x);
            opt.step(&mut store, &g).unwrap();
            v = 0.9 * v + 2.0 * p + 0.01 * p;
            p -= 0.1 * v;
            assert!((store.get(id).item() - p).abs() < 1e-15);
        }
    }
}
