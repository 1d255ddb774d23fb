use super::{numel, strided_gather, strides, Element, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `from` shape as if it had `to` shape.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::shape(format!("cannot broadcast {from:?} to {to:?}")));
    }
    let lead = to.len() - from.len();
    let st = strides(from);
    let mut out = vec![0; to.len()];
    for (i, &d) in from.iter().enumerate() {
        if d == to[lead + i] {
            out[lead + i] = st[i];
        } else if d != 1 {
            return Err(Error::shape(format!("cannot broadcast {from:?} to {to:?}")));
        }
    }
    Ok(out)
}

/// For each row-major position of `to`, the linear index it reads in `from`.
pub(crate) fn broadcast_offsets(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    let gather = broadcast_strides(from, to)?;
    let index: Vec<usize> = (0..numel(from)).collect();
    Ok(strided_gather(&index, to, &gather, 0))
}

pub fn broadcast_to<F: Element>(t: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let gather = broadcast_strides(t.shape(), shape)?;
    let data = strided_gather(t.data(), shape, &gather, 0);
    Tensor::new(shape.to_vec(), data)
}

/// Sums `t` down to `shape`, undoing a broadcast from `shape` to `t.shape()`.
pub fn reduce_to<F: Element>(t: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let scatter = broadcast_strides(shape, t.shape())?;
    let mut out = vec![F::zero(); numel(shape)];
    let src_shape = t.shape();
    let rank = src_shape.len();
    // suffix fast path: `shape` equals the trailing axes of `t`
    let n = numel(shape);
    if shape.len() <= rank && src_shape[rank - shape.len()..] == *shape {
        for chunk in t.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Tensor::new(shape.to_vec(), out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in t.data() {
        out[off] += v;
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            off += scatter[axis];
            if idx[axis] < src_shape[axis] {
                break;
            }
            off -= scatter[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}
