//! Separable linear interpolation with align-corners sampling.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|o| {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

fn resize_axis<T: Scalar>(x: &Tensor<T>, axis: usize, n_out: usize) -> Tensor<T> {
    let shape = x.shape();
    let n_in = shape[axis];
    if n_in == n_out {
        return x.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let plan = taps(n_in, n_out);
    let mut out = vec![T::zero(); outer * n_out * inner];
    let src = x.data();
    for o in 0..outer {
        for (j, t) in plan.iter().enumerate() {
            let f = T::from_f64(t.frac);
            let a = &src[(o * n_in + t.lo) * inner..(o * n_in + t.lo + 1) * inner];
            let b = &src[(o * n_in + t.hi) * inner..(o * n_in + t.hi + 1) * inner];
            let dst = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = av + f * (bv - av);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_out;
    Tensor::from_vec(new_shape, out).expect("resize keeps element count consistent")
}

fn resize_axis_backward<T: Scalar>(g: &Tensor<T>, axis: usize, n_in: usize) -> Tensor<T> {
    let shape = g.shape();
    let n_out = shape[axis];
    if n_in == n_out {
        return g.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let plan = taps(n_in, n_out);
    let mut dx = vec![T::zero(); outer * n_in * inner];
    let gd = g.data();
    for o in 0..outer {
        for (j, t) in plan.iter().enumerate() {
            let f = T::from_f64(t.frac);
            let src = &gd[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            for (i, &gv) in src.iter().enumerate() {
                let lo = (o * n_in + t.lo) * inner + i;
                dx[lo] = dx[lo] + gv * (T::one() - f);
                let hi = (o * n_in + t.hi) * inner + i;
                dx[hi] = dx[hi] + gv * f;
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_in;
    Tensor::from_vec(new_shape, dx).expect("resize keeps element count consistent")
}

/// Bi-/tri-linear resize of the spatial axes to `target`.
pub fn upsample_linear<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if x.rank() < 3 || target.len() != x.rank() - 2 {
        return shape_err(format!(
            "cannot resize {:?} to spatial extents {target:?}",
            x.shape()
        ));
    }
    if target.iter().any(|&t| t == 0) {
        return shape_err("target extents must be >= 1");
    }
    let mut y = x.clone();
    for (a, &t) in target.iter().enumerate() {
        y = resize_axis(&y, a + 2, t);
    }
    Ok(y)
}

pub fn upsample_linear_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = grad_out.clone();
    for a in (2..input_shape.len()).rev() {
        g = resize_axis_backward(&g, a, input_shape[a]);
    }
    Ok(g)
}
