use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values kept from a batchnorm forward pass for its adjoint.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch statistics of a train-mode pass: per-channel mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 3 {
        return shape_err(format!("batchnorm on shape {:?}", x.shape()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let s: usize = x.shape()[2..].iter().product();
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!(
            "batchnorm parameters of length {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        ));
    }
    Ok((n, c, s))
}

/// Normalizes with running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, s) = layout(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return shape_err("running statistics length differs from channel count");
    }
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * s;
            let (m, is, g, bt) = (
                running_mean.data()[ch],
                inv_std[ch],
                gamma.data()[ch],
                beta.data()[ch],
            );
            for i in o..o + s {
                let h = (x.data()[i] - m) * is;
                xhat[i] = h;
                y[i] = h * g + bt;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), y)?,
        BnSaved {
            xhat,
            inv_std,
            train: false,
        },
    ))
}

/// Normalizes with batch statistics over the batch and spatial axes.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>, BnBatchStats<T>)> {
    let (n, c, s) = layout(x, gamma, beta)?;
    let count = n * s;
    if count < 2 {
        return shape_err(format!(
            "train-mode batchnorm needs more than one value per channel, got shape {:?}",
            x.shape()
        ));
    }
    let cnt = T::from_f64(count as f64);
    let eps = T::from_f64(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * s;
            acc = acc + x.data()[o..o + s].iter().fold(T::zero(), |a, &v| a + v);
        }
        mean[ch] = acc / cnt;
        let mut sq = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * s;
            sq = sq
                + x.data()[o..o + s]
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
        }
        var[ch] = sq / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * s;
            for i in o..o + s {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = h * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
    let stats = BnBatchStats {
        var_unbiased: var.iter().map(|&v| v * unbias).collect(),
        mean,
    };
    Ok((
        Tensor::from_vec(x.shape().to_vec(), y)?,
        BnSaved {
            xhat,
            inv_std,
            train: true,
        },
        stats,
    ))
}

/// Returns `(d input, d gamma, d beta)`.
pub fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = shape[0];
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * s;
            for i in o..o + s {
                dgamma[ch] = dgamma[ch] + dy[i] * saved.xhat[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let cnt = T::from_f64((n * s) as f64);
    for ch in 0..c {
        let g = gamma.data()[ch];
        let is = saved.inv_std[ch];
        for b in 0..n {
            let o = (b * c + ch) * s;
            for i in o..o + s {
                dx[i] = if saved.train {
                    // dxhat = dy·γ; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    is / cnt * (cnt * dy[i] * g - dbeta[ch] * g - saved.xhat[i] * dgamma[ch] * g)
                } else {
                    dy[i] * g * is
                };
            }
        }
    }
    Ok((
        Tensor::from_vec(shape.to_vec(), dx)?,
        Tensor::from_vec(vec![c], dgamma)?,
        Tensor::from_vec(vec![c], dbeta)?,
    ))
}

/// `running = (1 − momentum)·running + momentum·batch`.
pub fn update_running<T: Scalar>(running: &mut Tensor<T>, batch: &[T], momentum: f64) {
    let m = T::from_f64(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}
