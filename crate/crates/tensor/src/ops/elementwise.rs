//! Broadcasting binary kernels over tensors of rank at most four.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn pad4(shape: &[usize]) -> Option<[usize; 4]> {
    if shape.len() > 4 {
        return None;
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Some(out)
}

fn strides(shape: &[usize; 4], out: &[usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    s
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || TensorError::ShapeMismatch {
        op,
        expected: a.to_vec(),
        got: b.to_vec(),
    };
    let (pa, pb) = (pad4(a).ok_or_else(err)?, pad4(b).ok_or_else(err)?);
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(err()),
        };
    }
    let rank = a.len().max(b.len());
    Ok(out[4 - rank..].to_vec())
}

pub fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let o = pad4(&shape).unwrap();
    let sa = strides(&pad4(a.shape()).unwrap(), &o);
    let sb = strides(&pad4(b.shape()).unwrap(), &o);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(o.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    out.push(f(da[ba + i3 * sa[3]], db[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Sum `grad` (shaped like the broadcast result) down to `shape`.
pub fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let o = pad4(grad.shape()).unwrap();
    let target = pad4(shape).ok_or_else(|| TensorError::Rank {
        op: "reduce_to",
        rank: 4,
        got: shape.to_vec(),
    })?;
    let st = strides(&target, &o);
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    let mut it = grad.data().iter();
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o[3] {
                    let idx = base + i3 * st[3];
                    d[idx] = d[idx] + *it.next().unwrap();
                }
            }
        }
    }
    Ok(out)
}
