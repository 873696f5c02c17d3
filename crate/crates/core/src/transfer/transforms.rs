//! Axis manipulations that carry 2D weights into the depth-last 3D layout.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn err<T>(msg: String) -> Result<T> {
    Err(Error::Transfer(msg))
}

/// `(n, 3, h, w) → (n, 1, h, w, 3)` with `out[o, 0, y, x, c] = in[o, c, y, x]`:
/// the three RGB channels become three neighbouring slices.
pub fn transform_input_layer<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, m, h, wd] = w.shape() else {
        return err(format!("input-layer transform needs a rank-4 weight, got {:?}", w.shape()));
    };
    if m != 3 {
        return err(format!("input-layer transform needs 3 input channels, got {m}"));
    }
    let src = w.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..n {
        for y in 0..h {
            for x in 0..wd {
                for c in 0..m {
                    out.push(src[((o * m + c) * h + y) * wd + x]);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, 1, h, wd, m], out)
}

/// Inverse of [`transform_input_layer`].
pub fn inverse_input_layer<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, 1, h, wd, d] = w.shape() else {
        return err(format!("inverse input transform needs (n,1,h,w,d), got {:?}", w.shape()));
    };
    if d != 3 {
        return err(format!("inverse input transform needs depth 3, got {d}"));
    }
    let src = w.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..n {
        for c in 0..d {
            for y in 0..h {
                for x in 0..wd {
                    out.push(src[((o * h + y) * wd + x) * d + c]);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, d, h, wd], out)
}

/// `(n, m, k, k) → (n, m, k, k, 1)` for `k ∈ {1, 3}`; data is untouched.
pub fn append_depth<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, m, h, wd] = w.shape() else {
        return err(format!("append-depth needs a rank-4 weight, got {:?}", w.shape()));
    };
    if h != wd || !(h == 1 || h == 3) {
        return err(format!("append-depth accepts 1×1 and 3×3 kernels only, got {h}×{wd}"));
    }
    w.clone().reshape(vec![n, m, h, wd, 1])
}

/// Inverse of [`append_depth`].
pub fn strip_depth<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, m, h, wd, 1] = w.shape() else {
        return err(format!("strip-depth needs a trailing unit axis, got {:?}", w.shape()));
    };
    w.clone().reshape(vec![n, m, h, wd])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn stem_shape_and_index() {
        let w = iota(&[64, 3, 7, 7]);
        let t = transform_input_layer(&w).unwrap();
        assert_eq!(t.shape(), &[64, 1, 7, 7, 3]);
        assert_eq!(t.at(&[5, 0, 0, 6, 2]), w.at(&[5, 2, 0, 6]));
        assert_eq!(inverse_input_layer(&t).unwrap(), w);
    }

    #[test]
    fn append_depth_shapes() {
        let w = iota(&[8, 4, 3, 3]);
        let t = append_depth(&w).unwrap();
        assert_eq!(t.shape(), &[8, 4, 3, 3, 1]);
        assert_eq!(t.data(), w.data());
        assert_eq!(append_depth(&iota(&[8, 4, 1, 1])).unwrap().shape(), &[8, 4, 1, 1, 1]);
        assert!(append_depth(&t).is_err());
        assert!(append_depth(&iota(&[2, 2, 5, 5])).is_err());
        assert_eq!(strip_depth(&t).unwrap(), w);
    }

    #[test]
    fn input_rule_needs_three_channels() {
        assert!(transform_input_layer(&iota(&[4, 2, 3, 3])).is_err());
    }
}
