//! 2-D convolution via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    /// 1x1, unit stride, no padding: the input plane already is the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Dims> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![cout, cin, kh, kw],
            got: w.shape().to_vec(),
        });
    }
    let (ho, wo) = match (geom.out_len(h, kh), geom.out_len(wd, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            })
        }
    };
    Ok(Dims {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho,
        wo,
        stride: geom.stride,
        pad: geom.padding,
    })
}

/// Valid output-column range `[lo, hi)` for unit stride and kernel column `kj`.
fn unit_stride_span(d: &Dims, kj: usize) -> (usize, usize) {
    let lo = d.pad.saturating_sub(kj).min(d.wo);
    let hi = (d.w + d.pad).saturating_sub(kj).min(d.wo).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, col: &mut [T]) {
    let plane = d.h * d.w;
    let p = d.p();
    for ci in 0..d.cin {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row_idx = (ci * d.kh + ki) * d.kw + kj;
                let row = &mut col[row_idx * p..(row_idx + 1) * p];
                for oy in 0..d.ho {
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        let (lo, hi) = unit_stride_span(d, kj);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            dst[lo..hi].copy_from_slice(&src[lo + kj - d.pad..hi + kj - d.pad]);
                        }
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            *v = if ix < 0 || ix >= d.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &Dims, dx: &mut [T]) {
    let plane = d.h * d.w;
    let p = d.p();
    for ci in 0..d.cin {
        let xc = &mut dx[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row_idx = (ci * d.kh + ki) * d.kw + kj;
                let row = &col[row_idx * p..(row_idx + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &row[oy * d.wo..(oy + 1) * d.wo];
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        let (lo, hi) = unit_stride_span(d, kj);
                        for (o, &g) in dst[lo + kj - d.pad..hi + kj - d.pad]
                            .iter_mut()
                            .zip(&src[lo..hi])
                        {
                            *o = *o + g;
                        }
                    } else {
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] = dst[ix as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = dims(x, weight, geom)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[d.cout])?;
    }
    let (k, p) = (d.k(), d.p());
    let in_sample = d.cin * d.h * d.w;
    let out_sample = d.cout * p;
    let mut out = vec![T::zero(); d.n * out_sample];
    let mut col = if d.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..d.n {
        let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
        let ys = &mut out[s * out_sample..(s + 1) * out_sample];
        let cols: &[T] = if d.pointwise() {
            xs
        } else {
            im2col(xs, &d, &mut col);
            &col
        };
        T::gemm(d.cout, k, p, T::one(), weight.data(), (k, 1), cols, (p, 1), T::zero(), ys, (p, 1));
        if let Some(b) = bias {
            for (co, row) in ys.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(&[d.n, d.cout, d.ho, d.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_x, need_w, need_b) = need;
    let d = dims(x, weight, geom)?;
    grad_out.expect_shape("conv2d backward", &[d.n, d.cout, d.ho, d.wo])?;
    let (k, p) = (d.k(), d.p());
    let in_sample = d.cin * d.h * d.w;
    let out_sample = d.cout * p;

    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.numel()]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); d.cout];
        for s in 0..d.n {
            let gs = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
            for (co, row) in gs.chunks(p).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        db
    });

    let mut col = if d.pointwise() || !(need_x || need_w) {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..d.n {
        let gs = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
        let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if d.pointwise() {
                xs
            } else {
                im2col(xs, &d, &mut col);
                &col
            };
            T::gemm(d.cout, p, k, T::one(), gs, (p, 1), cols, (1, p), T::one(), dw, (k, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
            if d.pointwise() {
                T::gemm(k, d.cout, p, T::one(), weight.data(), (1, k), gs, (p, 1), T::zero(), dxs, (p, 1));
            } else {
                T::gemm(k, d.cout, p, T::one(), weight.data(), (1, k), gs, (p, 1), T::zero(), &mut col, (p, 1));
                col2im(&col, &d, dxs);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|v| Tensor::new(x.shape(), v)).transpose()?,
        weight: dw.map(|v| Tensor::new(weight.shape(), v)).transpose()?,
        bias: db.map(|v| Tensor::new(&[d.cout], v)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for bn in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at4(bn, ci, iy as usize, ix as usize)
                                            * w.at4(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn matches_naive_for_assorted_geometries() {
        for &(k, s, p) in &[(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1), (7, 2, 3), (5, 1, 2), (2, 2, 0)] {
            let x = pseudo(&[2, 3, 9, 7], 0.7);
            let w = pseudo(&[4, 3, k, k], 1.3);
            let b = [0.1, -0.2, 0.3, 0.0];
            let bt = Tensor::new(&[4], b.to_vec()).unwrap();
            let got = conv2d_forward(&x, &w, Some(&bt), ConvGeometry::new(s, p)).unwrap();
            let want = naive(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear in (x, w): check both partials against
        // finite differences of the naive kernel.
        for &(k, s, p) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let x = pseudo(&[2, 2, 6, 5], 0.3);
            let w = pseudo(&[3, 2, k, k], 0.9);
            let zero = [0.0; 3];
            let y = naive(&x, &w, &zero, s, p);
            let g = pseudo(y.shape(), 2.1);
            let grads = conv2d_backward(&x, &w, ConvGeometry::new(s, p), &g, (true, true, true)).unwrap();
            let obj = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
                naive(x, w, &zero, s, p).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in [0, 7, 13, x.numel() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (obj(&xp, &w) - obj(&xm, &w)) / (2.0 * h);
                assert!((fd - grads.input.as_ref().unwrap().data()[i]).abs() < 1e-6);
            }
            for i in 0..w.numel() {
                let mut wp = w.clone();
                wp.data_mut()[i] += h;
                let mut wm = w.clone();
                wm.data_mut()[i] -= h;
                let fd = (obj(&x, &wp) - obj(&x, &wm)) / (2.0 * h);
                assert!((fd - grads.weight.as_ref().unwrap().data()[i]).abs() < 1e-6);
            }
            let db = grads.bias.unwrap();
            for co in 0..3 {
                let want: f64 = (0..2)
                    .map(|n| g.index0(n).index0(co).sum())
                    .sum();
                assert!((db.data()[co] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 1, 1]);
        assert!(conv2d_forward(&x, &w, None, ConvGeometry::new(1, 0)).is_err());
    }
}
