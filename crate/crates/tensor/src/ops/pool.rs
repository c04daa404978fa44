//! Pooling and channel-reduction kernels.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// every output element, the flat input index it was taken from.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0 {
        return Err(TensorError::Invalid {
            op: "max_pool2d",
            msg: format!("window {kernel} does not fit input {h}x{w}"),
        });
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let plane = &x.data()[base..base + h * w];
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - padding as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - padding as isize;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(base + best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

/// Scatter `grad_out` back to the positions recorded in `argmax`.
pub fn scatter_argmax<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// `[N, C, H, W] -> [N, C, 1, 1]` mean over the spatial plane.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut data = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape, data)
}

/// `[N, C, H, W] -> [N, 1, H, W]` mean over channels.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        let o = &mut out[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let s = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (a, &v) in o.iter_mut().zip(s) {
                *a = *a + v;
            }
        }
        o.iter_mut().for_each(|a| *a = *a * inv);
    }
    Tensor::new(&[n, 1, h, w], out)
}

pub fn channel_mean_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = (input_shape[0], input_shape[1]);
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(c).unwrap();
    let mut data = Vec::with_capacity(n * c * plane);
    for b in 0..n {
        let g = &grad_out.data()[b * plane..(b + 1) * plane];
        for _ in 0..c {
            data.extend(g.iter().map(|&v| v * inv));
        }
    }
    Tensor::new(input_shape, data)
}

/// `[N, C, H, W] -> [N, 1, H, W]` max over channels, with flat argmax indices.
pub fn channel_max<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = vec![T::neg_infinity(); n * plane];
    let mut arg = vec![0usize; n * plane];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let s = &x.data()[base..base + plane];
            for (i, &v) in s.iter().enumerate() {
                let o = b * plane + i;
                if ch == 0 || v > out[o] {
                    out[o] = v;
                    arg[o] = base + i;
                }
            }
        }
    }
    Ok((Tensor::new(&[n, 1, h, w], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_halves_resnet_stem() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 80, 64], |i| (i % 17) as f32);
        let (y, arg) = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 40, 32]);
        for (v, &i) in y.data().iter().zip(&arg) {
            assert_eq!(*v, x.data()[i]);
        }
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(scatter_argmax(x.shape(), &arg, &g).data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::<f64>::new(&[1, 3, 1, 2], vec![1.0, -1.0, 3.0, 5.0, 2.0, 0.0]).unwrap();
        assert_eq!(channel_mean(&x).unwrap().data(), &[2.0, 4.0 / 3.0]);
        let (m, arg) = channel_max(&x).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![2, 3]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[0.0, 4.0, 1.0]);
    }
}
