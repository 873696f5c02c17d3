use std::rc::Rc;

use super::rules::LayerResidual;
use crate::error::{shape_err, Error, Result};
use crate::nets::graph::{ModelGraph, Mode, Part};
use crate::tensor::autograd::Infer;
use crate::tensor::Tensor;

/// `(1, 1, H, W, D)` volume to a batch of `D` three-channel images, image `k`
/// holding slices `k-1, k, k+1` with zero slices beyond the ends.
pub fn slice_triples(volume: &Tensor) -> Result<Tensor> {
    let &[1, 1, h, w, d] = volume.shape() else {
        return shape_err(format!("expected a (1,1,H,W,D) volume, got {:?}", volume.shape()));
    };
    let v = volume.data();
    let mut out = vec![0.0f32; d * 3 * h * w];
    for k in 0..d {
        for c in 0..3 {
            let z = k as isize + c as isize - 1;
            if z < 0 || z >= d as isize {
                continue;
            }
            let base = (k * 3 + c) * h * w;
            for i in 0..h * w {
                out[base + i] = v[i * d + z as usize];
            }
        }
    }
    Tensor::from_vec(vec![d, 3, h, w], out)
}

fn last_encoder_layer(g: &ModelGraph) -> Result<usize> {
    g.layers
        .iter()
        .rposition(|l| l.part == Part::Encoder)
        .ok_or_else(|| Error::InvalidSpec("graph has no encoder".into()))
}

/// Per-layer residuals between the hybrid encoder's depth slices and the 2D
/// encoder run on slice triples. The hybrid graph must have z-pooling disabled.
pub fn slice_residuals(g2d: &ModelGraph, g3d: &ModelGraph, volume: &Tensor) -> Result<Vec<LayerResidual>> {
    let d = volume.shape().get(4).copied().unwrap_or(0);
    let batch = slice_triples(volume)?;
    let e2 = last_encoder_layer(g2d)?;
    let e3 = last_encoder_layer(g3d)?;
    let out2 = g2d.forward_until(&g2d.params, &mut Infer, Rc::new(batch), Mode::infer(), true, e2)?;
    let out3 = g3d.forward_until(&g3d.params, &mut Infer, Rc::new(volume.clone()), Mode::infer(), true, e3)?;
    let mut res = Vec::new();
    for (i, l) in g2d.layers[..=e2].iter().enumerate().skip(1) {
        let Some(j) = g3d.layer_index(&l.name) else { continue };
        let a = out2.values[i].as_ref().expect("captured");
        let b = out3.values[j].as_ref().expect("captured");
        if b.rank() != 5 || b.shape()[4] != d {
            return Err(Error::Layer {
                layer: l.name.clone(),
                message: format!(
                    "hybrid output {:?} has lost depth {d}; disable z-pooling for validation",
                    b.shape()
                ),
            });
        }
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..d {
            let sa = a.batch_item(k)?;
            let sb = b.depth_slice(k)?;
            if sa.shape() != sb.shape() {
                return Err(Error::Layer {
                    layer: l.name.clone(),
                    message: format!("slice shapes {:?} vs {:?}", sa.shape(), sb.shape()),
                });
            }
            max_abs = max_abs.max(sa.max_abs_diff(&sb)? as f64);
            scale = scale.max(sa.max_abs() as f64);
        }
        let relative = if max_abs == 0.0 { 0.0 } else { max_abs / scale.max(f64::MIN_POSITIVE) };
        res.push(LayerResidual {
            layer: l.name.clone(),
            max_abs,
            relative,
        });
    }
    Ok(res)
}

/// [`slice_residuals`], failing on the first layer above `tolerance`.
pub fn validate_slice_equivalence(
    g2d: &ModelGraph,
    g3d: &ModelGraph,
    volume: &Tensor,
    tolerance: f64,
) -> Result<Vec<LayerResidual>> {
    let res = slice_residuals(g2d, g3d, volume)?;
    if let Some(bad) = res.iter().find(|r| r.relative > tolerance) {
        return Err(Error::Equivalence {
            layer: bad.layer.clone(),
            residual: bad.relative,
            tolerance,
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_pad_with_zeros() {
        let v = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let t = slice_triples(&v).unwrap();
        assert_eq!(t.shape(), &[3, 3, 1, 1]);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }
}
