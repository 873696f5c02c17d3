use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "add of mismatched shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Concatenation along the channel axis, preserving argument order.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match inputs.first() {
        Some(f) => f,
        None => return shape_err("concat of zero tensors"),
    };
    if first.rank() < 2 {
        return shape_err("concat needs a channel axis");
    }
    let n = first.shape()[0];
    let spatial = &first.shape()[2..];
    for t in inputs {
        if t.rank() != first.rank() || t.shape()[0] != n || &t.shape()[2..] != spatial {
            return shape_err(format!(
                "concat shapes differ beyond the channel axis: {:?} vs {:?}",
                first.shape(),
                t.shape()
            ));
        }
    }
    let s: usize = spatial.iter().product();
    let c_total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * c_total * s);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[b * c * s..(b + 1) * c * s]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = c_total;
    Tensor::from_vec(shape, data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_backward<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let n = g.shape()[0];
    let s: usize = g.shape()[2..].iter().product();
    let c_total: usize = channels.iter().sum();
    if c_total != g.shape()[1] {
        return shape_err("concat gradient channel count mismatch");
    }
    let mut parts: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(n * c * s)).collect();
    for b in 0..n {
        let mut off = b * c_total * s;
        for (p, &c) in parts.iter_mut().zip(channels) {
            p.extend_from_slice(&g.data()[off..off + c * s]);
            off += c * s;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(p, &c)| {
            let mut shape = g.shape().to_vec();
            shape[1] = c;
            Tensor::from_vec(shape, p)
        })
        .collect()
}
