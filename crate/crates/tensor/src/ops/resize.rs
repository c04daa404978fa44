//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, w0, w1)` for each output coordinate along one axis.
pub fn taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn upsample_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, oh, ow) = grad_out.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + gv * wy0 * wx0;
                plane[y0 * w + x1] = plane[y0 * w + x1] + gv * wy0 * wx1;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gv * wy1 * wx0;
                plane[y1 * w + x1] = plane[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_size_unchanged() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| i as f64);
        assert_eq!(upsample_bilinear(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn doubling_matches_half_pixel_convention() {
        // 1-D [0, 1] doubled with half-pixel centers -> [0, 0.25, 0.75, 1].
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 5], |i| (i as f64 * 0.3).sin());
        let g = Tensor::<f64>::from_fn(&[1, 1, 8, 11], |i| (i as f64 * 0.7).cos());
        let y = upsample_bilinear(&x, 8, 11).unwrap();
        let dx = upsample_bilinear_backward(x.shape(), &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
