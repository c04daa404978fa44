//! Soft Dice plus label-smoothed cross-entropy on two-class logits.
//!
//! Logits are `[B, 2, H, W]` with channel 0 background and channel 1 gas.
//! Targets are flat `{0, 1}` masks of length `B * H * W`.

use rtcan_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub sce_weight: f64,
    pub label_smoothing: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.5,
            sce_weight: 0.5,
            label_smoothing: 0.1,
            dice_epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dice_weight < 0.0 || self.sce_weight < 0.0 || (self.dice_weight + self.sce_weight - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and sum to 1 (got {} + {})",
                self.dice_weight, self.sce_weight
            )));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} not in [0, 0.5)", self.label_smoothing)));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub dice: T,
    pub sce: T,
}

fn check_target(target: &[u8], len: usize) -> Result<()> {
    if target.len() != len {
        return Err(Error::Shape(format!("target has {} pixels, expected {len}", target.len())));
    }
    if let Some(v) = target.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("target value {v} is not binary")));
    }
    Ok(())
}

fn logit_dims<T: Scalar>(logits: &Tensor<T>, target: &[u8]) -> Result<(usize, usize)> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {c}")));
    }
    check_target(target, b * h * w)?;
    if !logits.all_finite() {
        return Err(Error::Validation("logits contain non-finite values".into()));
    }
    Ok((b, h * w))
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Gas probability `softmax(l)[1] = sigmoid(l1 - l0)` as `[B, H, W]`.
pub fn gas_probability<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, _, h, w) = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    Ok(Tensor::from_fn(&[b, h, w], |i| {
        let (n, p) = (i / plane, i % plane);
        rtcan_tensor::sigmoid(d[(2 * n + 1) * plane + p] - d[2 * n * plane + p])
    }))
}

/// Per-sample `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`, averaged
/// over the batch. `probs` is `[B, ...]`.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &[u8], eps: T) -> Result<T> {
    Ok(dice_terms(probs, target, eps)?.0)
}

/// Loss and its gradient with respect to `probs`.
fn dice_terms<T: Scalar>(probs: &Tensor<T>, target: &[u8], eps: T) -> Result<(T, Tensor<T>)> {
    if probs.rank() == 0 || probs.shape()[0] == 0 {
        return Err(Error::Shape("dice_loss needs a non-empty batch".into()));
    }
    if !(eps > T::zero()) {
        return Err(Error::Validation("dice epsilon must be positive".into()));
    }
    check_target(target, probs.numel())?;
    if probs.data().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    let b = probs.shape()[0];
    let per = probs.numel() / b;
    let two = T::lit(2.0);
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    for n in 0..b {
        let p = &probs.data()[n * per..(n + 1) * per];
        let g = &target[n * per..(n + 1) * per];
        let mut inter = T::zero();
        let mut sp = T::zero();
        let mut sg = T::zero();
        for (&pi, &gi) in p.iter().zip(g) {
            let gi = T::from_u8(gi).unwrap();
            inter = inter + pi * gi;
            sp = sp + pi;
            sg = sg + gi;
        }
        let num = two * inter + eps;
        let den = sp + sg + eps;
        loss = loss + (T::one() - num / den) * inv_b;
        let gd = &mut grad.data_mut()[n * per..(n + 1) * per];
        for (o, &gi) in gd.iter_mut().zip(g) {
            let gi = T::from_u8(gi).unwrap();
            *o = -(two * gi * den - num) / (den * den) * inv_b;
        }
    }
    Ok((loss, grad))
}

/// Cross-entropy against smoothed targets (`[1 - eps, eps]` on background
/// pixels, `[eps, 1 - eps]` on gas), averaged over all pixels.
pub fn soft_ce_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8], smoothing: T) -> Result<T> {
    Ok(sce_terms(logits, target, smoothing)?.0)
}

fn sce_terms<T: Scalar>(logits: &Tensor<T>, target: &[u8], smoothing: T) -> Result<(T, Tensor<T>)> {
    let (b, plane) = logit_dims(logits, target)?;
    let d = logits.data();
    let count = T::from_usize(b * plane).unwrap();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    for n in 0..b {
        for p in 0..plane {
            let i0 = 2 * n * plane + p;
            let i1 = i0 + plane;
            let z = d[i1] - d[i0];
            let q1 = if target[n * plane + p] == 1 { T::one() - smoothing } else { smoothing };
            let q0 = T::one() - q1;
            // log p0 = -softplus(z), log p1 = -softplus(-z)
            loss = loss + q0 * softplus(z) + q1 * softplus(-z);
            let p1 = rtcan_tensor::sigmoid(z);
            gd[i1] = (p1 - q1) / count;
            gd[i0] = (q1 - p1) / count;
        }
    }
    Ok((loss / count, grad))
}

/// Weighted sum of Dice on the gas probability and smoothed cross-entropy,
/// with its gradient with respect to the logits.
pub fn combined_loss_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<(LossValue<T>, Tensor<T>)> {
    let (b, plane) = logit_dims(logits, target)?;
    let probs = gas_probability(logits)?;
    let (dice, dprob) = dice_terms(&probs, target, T::lit(cfg.dice_epsilon))?;
    let (sce, mut grad) = sce_terms(logits, target, T::lit(cfg.label_smoothing))?;
    let wd = T::lit(cfg.dice_weight);
    let ws = T::lit(cfg.sce_weight);
    let gd = grad.data_mut();
    for v in gd.iter_mut() {
        *v = *v * ws;
    }
    for n in 0..b {
        for p in 0..plane {
            let i = n * plane + p;
            let pr = probs.data()[i];
            let dz = wd * dprob.data()[i] * pr * (T::one() - pr);
            gd[2 * n * plane + plane + p] = gd[2 * n * plane + plane + p] + dz;
            gd[2 * n * plane + p] = gd[2 * n * plane + p] - dz;
        }
    }
    Ok((
        LossValue {
            total: wd * dice + ws * sce,
            dice,
            sce,
        },
        grad,
    ))
}

pub fn combined_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8], cfg: &LossConfig) -> Result<LossValue<T>> {
    Ok(combined_loss_with_grad(logits, target, cfg)?.0)
}

/// The combined loss as a graph node over `logits`.
pub fn combined_loss_var<T: Scalar>(logits: &Var<T>, target: &[u8], cfg: &LossConfig) -> Result<(Var<T>, LossValue<T>)> {
    let (value, grad) = combined_loss_with_grad(logits.value(), target, cfg)?;
    Ok((logits.scalar_fn(value.total, grad)?, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(b: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Tensor<f64> {
        let plane = h * w;
        Tensor::from_fn(&[b, 2, h, w], |i| {
            let (n, rest) = (i / (2 * plane), i % (2 * plane));
            let (c, p) = (rest / plane, rest % plane);
            let (l0, l1) = f(n, p);
            if c == 0 {
                l0
            } else {
                l1
            }
        })
    }

    #[test]
    fn dice_cases() {
        let t = vec![1, 0, 1, 1, 0, 0];
        let exact = Tensor::new(&[1, 6], t.iter().map(|&v| v as f64).collect()).unwrap();
        assert!(dice_loss(&exact, &t, 1e-6).unwrap() < 1e-6);
        let half = Tensor::<f64>::full(&[1, 6], 0.5);
        assert!((dice_loss(&half, &t, 1e-12).unwrap() - 0.5).abs() < 1e-9);
        let zero = Tensor::<f64>::zeros(&[1, 6]);
        assert_eq!(dice_loss(&zero, &[0; 6], 1.0).unwrap(), 0.0);
        assert!(dice_loss(&Tensor::full(&[1, 6], 1.5), &t, 1.0).is_err());
        assert!(dice_loss(&half, &[2, 0, 0, 0, 0, 0], 1.0).is_err());
    }

    #[test]
    fn dice_is_a_per_sample_mean() {
        let t = vec![1, 1, 0, 0, 0, 0, 0, 0];
        let p = Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        // sample 0 is perfect, sample 1 has an empty target: 1 - 1/(2 + 1)
        let want: f64 = 0.5 * (0.0 + (1.0 - 1.0 / 3.0));
        assert!((dice_loss(&p, &t, 1.0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn sce_cases() {
        let t = vec![1, 0, 0, 1];
        for eps in [0.0, 0.1, 0.3] {
            let l = soft_ce_loss(&logits(1, 2, 2, |_, _| (0.7, 0.7)), &t, eps).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let tr = &t;
        let correct = |m: f64| logits(1, 2, 2, move |_, p| if tr[p] == 1 { (0.0, m) } else { (m, 0.0) });
        assert!(soft_ce_loss(&correct(40.0), &t, 0.0).unwrap() < 1e-15);
        // With smoothing the minimum sits at the calibrated margin ln 9, where
        // the loss equals the entropy of the smoothed target.
        let floor = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let best = 9.0f64.ln();
        assert!((soft_ce_loss(&correct(best), &t, 0.1).unwrap() - floor).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for m in [0.0, 0.5, 1.0, 1.5, 2.0, best] {
            let l = soft_ce_loss(&correct(m), &t, 0.1).unwrap();
            assert!(l >= 0.325 && l >= floor - 1e-12);
            assert!(l < prev);
            prev = l;
        }
        for m in [3.0, 8.0, 40.0] {
            let l = soft_ce_loss(&correct(m), &t, 0.1).unwrap();
            assert!(l > prev);
            prev = l;
        }
        let bad = Tensor::new(&[1, 2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(soft_ce_loss(&bad, &[0], 0.1).is_err());
    }

    #[test]
    fn combined_is_the_weighted_sum() {
        let t = vec![1, 0, 1, 0];
        let cfg = LossConfig {
            label_smoothing: 0.0,
            dice_epsilon: 1e-12,
            ..Default::default()
        };
        let v = combined_loss(&logits(1, 2, 2, |_, _| (0.0, 0.0)), &t, &cfg).unwrap();
        assert!((v.total - (0.25 + 0.5 * std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((v.total - 0.5966).abs() < 1e-4);
        let l = logits(2, 2, 2, |n, p| (0.3 * p as f64, -0.2 * n as f64 + 0.1));
        let t = vec![1, 0, 0, 1, 1, 1, 0, 0];
        let cfg = LossConfig::default();
        let v = combined_loss(&l, &t, &cfg).unwrap();
        let dice = dice_loss(&gas_probability(&l).unwrap(), &t, 1.0).unwrap();
        let sce = soft_ce_loss(&l, &t, 0.1).unwrap();
        assert!((v.total - (0.5 * dice + 0.5 * sce)).abs() < 1e-12);
    }

    #[test]
    fn combined_vanishes_when_saturated_and_exact() {
        let t = vec![1, 0, 0, 1];
        let cfg = LossConfig {
            label_smoothing: 0.0,
            dice_epsilon: 1e-9,
            ..Default::default()
        };
        let l = logits(1, 2, 2, |_, p| if t[p] == 1 { (-30.0, 30.0) } else { (30.0, -30.0) });
        assert!(combined_loss(&l, &t, &cfg).unwrap().total < 1e-9);
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        for bad in [
            LossConfig {
                dice_weight: 0.7,
                ..Default::default()
            },
            LossConfig {
                label_smoothing: 0.5,
                ..Default::default()
            },
            LossConfig {
                dice_epsilon: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn dice_in_unit_interval_and_decreases_toward_target(
            probs in proptest::collection::vec(0.0f64..=1.0, 12),
            target in proptest::collection::vec(0u8..=1, 12),
            idx in 0usize..12,
        ) {
            let p = Tensor::new(&[2, 6], probs.clone()).unwrap();
            let l = dice_loss(&p, &target, 1.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            let mut moved = probs;
            let goal = target[idx] as f64;
            moved[idx] += 0.5 * (goal - moved[idx]);
            let l2 = dice_loss(&Tensor::new(&[2, 6], moved).unwrap(), &target, 1.0).unwrap();
            prop_assert!(l2 <= l + 1e-15);
        }

        #[test]
        fn losses_are_permutation_invariant(
            vals in proptest::collection::vec(-4.0f64..4.0, 18),
            target in proptest::collection::vec(0u8..=1, 9),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let l = Tensor::new(&[1, 2, 3, 3], vals.clone()).unwrap();
            let lp = Tensor::from_fn(&[1, 2, 3, 3], |i| vals[(i / 9) * 9 + perm[i % 9]]);
            let tp: Vec<u8> = perm.iter().map(|&j| target[j]).collect();
            let cfg = LossConfig::default();
            let a = combined_loss(&l, &target, &cfg).unwrap();
            let b = combined_loss(&lp, &tp, &cfg).unwrap();
            prop_assert!((a.dice - b.dice).abs() < 1e-12);
            prop_assert!((a.sce - b.sce).abs() < 1e-12);
        }
    }
}
