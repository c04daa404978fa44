//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub count: usize,
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<BatchStats<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = n * plane;
    let inv = T::one() / T::from_usize(count.max(1)).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            s = s + x.data()[start..start + plane].iter().copied().sum::<T>();
        }
        let m = s * inv;
        let mut v = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            v = v + x.data()[start..start + plane]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v * inv;
    }
    Ok(BatchStats { mean, var, count })
}

/// `y = gamma * (x - mean) * invstd + beta` with per-channel vectors.
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    invstd: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    gamma.expect_shape("batch_norm gamma", &[c])?;
    beta.expect_shape("batch_norm beta", &[c])?;
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = gamma.data()[ch] * invstd[ch];
        let shift = beta.data()[ch] - mean[ch] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    debug_assert_eq!(out.numel(), n * c * plane);
    Ok(out)
}

pub fn invstd<T: Scalar>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass. With `batch_statistics` the mean and variance are
/// functions of `x` and contribute to the input gradient; otherwise the
/// layer is a fixed per-channel affine map.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    invstd: &[T],
    grad_out: &Tensor<T>,
    batch_statistics: bool,
) -> Result<NormGrads<T>> {
    let (n, c, h, w) = x.dims4()?;
    grad_out.expect_shape("batch_norm backward", x.shape())?;
    let plane = h * w;
    let m = T::from_usize(n * plane).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let xs = &x.data()[start..start + plane];
            let gs = &grad_out.data()[start..start + plane];
            let (mu, is) = (mean[ch], invstd[ch]);
            for (&xv, &g) in xs.iter().zip(gs) {
                dbeta[ch] = dbeta[ch] + g;
                dgamma[ch] = dgamma[ch] + g * (xv - mu) * is;
            }
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let xs = &x.data()[start..start + plane];
            let gs = &grad_out.data()[start..start + plane];
            let out = &mut dx[start..start + plane];
            let (mu, is, gm) = (mean[ch], invstd[ch], gamma.data()[ch]);
            if batch_statistics {
                let k = gm * is / m;
                for ((o, &xv), &g) in out.iter_mut().zip(xs).zip(gs) {
                    let xhat = (xv - mu) * is;
                    *o = k * (m * g - dbeta[ch] - xhat * dgamma[ch]);
                }
            } else {
                let k = gm * is;
                for (o, &g) in out.iter_mut().zip(gs) {
                    *o = k * g;
                }
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::new(x.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_batch_has_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 4, 5], |i| (i as f64 * 0.77).sin() * 3.0 + 1.0);
        let st = batch_stats(&x).unwrap();
        let is = invstd(&st.var, 0.0);
        let y = normalize(&x, &st.mean, &is, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        let st2 = batch_stats(&y).unwrap();
        for ch in 0..2 {
            assert!(st2.mean[ch].abs() < 1e-12);
            assert!((st2.var[ch] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn training_backward_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3, 2], |i| (i as f64 * 1.37).cos());
        let gamma = Tensor::new(&[3], vec![0.5, 1.5, -1.0]).unwrap();
        let beta = Tensor::new(&[3], vec![0.1, 0.0, 0.2]).unwrap();
        let g = Tensor::<f64>::from_fn(x.shape(), |i| (i as f64 * 0.41).sin());
        let eps = 1e-5;
        let obj = |x: &Tensor<f64>| {
            let st = batch_stats(x).unwrap();
            let is = invstd(&st.var, eps);
            let y = normalize(x, &st.mean, &is, &gamma, &beta).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let st = batch_stats(&x).unwrap();
        let is = invstd(&st.var, eps);
        let grads = batch_norm_backward(&x, &gamma, &st.mean, &is, &g, true).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            assert!((fd - grads.input.data()[i]).abs() < 1e-6, "i={i}");
        }
    }
}
