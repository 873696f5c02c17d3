//! Scalar training objectives. Every function returns the loss value together
//! with its gradient with respect to the prediction, which is what the tape
//! stores for the reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp for `D` inside the focal weight, keeping `ln D > 0`.
pub const FOCAL_D_FLOOR: f64 = 1.0 + 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalSpec {
    pub gamma: f64,
    pub d_max: f64,
}

impl FocalSpec {
    pub fn new(gamma: f64, d_max: f64) -> Result<Self> {
        let s = FocalSpec { gamma, d_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidSpec(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.d_max > 1.0) || !self.d_max.is_finite() {
            return Err(Error::InvalidSpec(format!("D_max must be > 1, got {}", self.d_max)));
        }
        Ok(())
    }

    /// `(ln D' / ln D_max)^γ` with `D'` clamped to `[1 + 1e-6, D_max]`, and
    /// its derivative with respect to the unclamped `D`.
    pub fn weight(&self, d: f64) -> (f64, f64) {
        if self.gamma == 0.0 {
            return (1.0, 0.0);
        }
        let ln_max = self.d_max.ln();
        let dc = d.clamp(FOCAL_D_FLOOR, self.d_max);
        let r = dc.ln() / ln_max;
        let w = r.powf(self.gamma);
        let interior = d > FOCAL_D_FLOOR && d < self.d_max;
        let dw = if interior {
            self.gamma * r.powf(self.gamma - 1.0) / (d * ln_max)
        } else {
            0.0
        };
        (w, dw)
    }

    /// The focal loss for a scalar base loss `D`.
    pub fn apply(&self, d: f64) -> f64 {
        if self.gamma == 0.0 {
            return d;
        }
        self.weight(d).0 * d
    }
}

/// Where the focal weight is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FocalMode {
    /// One weight per voxel from its own squared error.
    #[default]
    PerVoxel,
    /// One weight from the batch mean squared error.
    BatchScalar,
}

fn check_same<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

fn mean_sq<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let e = (p - t).as_f64();
            e * e
        })
        .sum();
    s / pred.len() as f64
}

/// Mean squared error.
pub fn l2<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_same(pred, target)?;
    Ok(T::from_f64(mean_sq(pred, target)))
}

pub fn l2_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let v = l2(pred, target)?;
    let k = T::from_f64(2.0 / pred.len() as f64);
    let g = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| k * (p - t))
        .collect();
    Ok((v, Tensor::from_vec(pred.shape().to_vec(), g)?))
}

pub fn focal_l2<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    spec: &FocalSpec,
    mode: FocalMode,
) -> Result<T> {
    Ok(focal_l2_with_grad(pred, target, spec, mode)?.0)
}

pub fn focal_l2_with_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    spec: &FocalSpec,
    mode: FocalMode,
) -> Result<(T, Tensor<T>)> {
    spec.validate()?;
    if spec.gamma == 0.0 {
        return l2_with_grad(pred, target);
    }
    check_same(pred, target)?;
    let n = pred.len() as f64;
    let (value, grad): (f64, Vec<T>) = match mode {
        FocalMode::BatchScalar => {
            let d = mean_sq(pred, target);
            let (w, dw) = spec.weight(d);
            let k = (dw * d + w) * 2.0 / n;
            let g = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| T::from_f64(k * (p - t).as_f64()))
                .collect();
            (w * d, g)
        }
        FocalMode::PerVoxel => {
            let mut acc = 0.0;
            let g = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let e = (p - t).as_f64();
                    let d = e * e;
                    let (w, dw) = spec.weight(d);
                    acc += w * d;
                    T::from_f64((dw * d + w) * 2.0 * e / n)
                })
                .collect();
            (acc / n, g)
        }
    };
    Ok((T::from_f64(value), Tensor::from_vec(pred.shape().to_vec(), grad)?))
}

/// Logits are `N×C×spatial`; labels are one class per `(n, voxel)` in
/// batch-major, voxel-minor order.
fn ce_layout<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize, usize)> {
    if logits.rank() < 2 {
        return shape_err(format!("logits need a class axis, got {:?}", logits.shape()));
    }
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let s: usize = logits.shape()[2..].iter().product();
    if labels.len() != n * s {
        return shape_err(format!("{} labels for {} voxels", labels.len(), n * s));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidSpec(format!("label {bad} outside {c} classes")));
    }
    Ok((n, c, s))
}

pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[T]>,
) -> Result<T> {
    Ok(focal_ce_with_grad(logits, labels, 0.0, class_weights)?.0)
}

pub fn focal_ce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    gamma: f64,
    class_weights: Option<&[T]>,
) -> Result<T> {
    Ok(focal_ce_with_grad(logits, labels, gamma, class_weights)?.0)
}

/// Weighted mean of `-(1 - p_t)^γ ln p_t`; `γ = 0` is plain cross-entropy.
/// With class weights the mean is normalized by the summed voxel weights.
pub fn focal_ce_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    gamma: f64,
    class_weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidSpec(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let (n, c, s) = ce_layout(logits, labels)?;
    if let Some(w) = class_weights {
        if w.len() != c {
            return shape_err(format!("{} class weights for {c} classes", w.len()));
        }
    }
    let z = logits.data();
    let mut grad = vec![0.0f64; z.len()];
    let mut total = 0.0;
    let mut wsum = 0.0;
    let mut logp = vec![0.0f64; c];
    for b in 0..n {
        for v in 0..s {
            let idx = |k: usize| (b * c + k) * s + v;
            let m = (0..c).map(|k| z[idx(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..c).map(|k| (z[idx(k)].as_f64() - m).exp()).sum::<f64>().ln();
            for (k, lp) in logp.iter_mut().enumerate() {
                *lp = z[idx(k)].as_f64() - m - lse;
            }
            let t = labels[b * s + v];
            let wt = class_weights.map(|w| w[t].as_f64()).unwrap_or(1.0);
            let lpt = logp[t];
            let pt = lpt.exp();
            let q = 1.0 - pt;
            let (focal, dfocal) = if gamma == 0.0 {
                (1.0, 0.0)
            } else if q <= 0.0 {
                (0.0, 0.0)
            } else {
                (q.powf(gamma), gamma * q.powf(gamma - 1.0))
            };
            total += wt * (-focal * lpt);
            wsum += wt;
            // dL/dp_t, then through the softmax: dp_t/dz_k = p_t(δ_tk − p_k)
            let dl_dpt = if gamma == 0.0 {
                None
            } else {
                Some(dfocal * lpt - focal / pt)
            };
            for k in 0..c {
                let pk = logp[k].exp();
                let delta = if k == t { 1.0 } else { 0.0 };
                grad[idx(k)] = wt
                    * match dl_dpt {
                        None => pk - delta,
                        Some(d) => d * pt * (delta - pk),
                    };
            }
        }
    }
    if wsum <= 0.0 {
        return Err(Error::InvalidSpec("class weights sum to zero".into()));
    }
    let g = grad.into_iter().map(|v| T::from_f64(v / wsum)).collect();
    Ok((T::from_f64(total / wsum), Tensor::from_vec(logits.shape().to_vec(), g)?))
}
