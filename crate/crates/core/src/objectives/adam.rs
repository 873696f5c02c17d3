use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers and the shared step counter.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    t: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. `lr` maps a parameter name to its group's
    /// learning rate; `None` leaves that parameter (and its moments) alone.
    /// Parameters without a gradient are skipped as well.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: impl Fn(&str) -> Option<f64>,
    ) -> Result<usize> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() != g.shape() => {
                    return shape_err(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    ))
                }
                None => return Err(Error::Autograd(format!("gradient for unknown parameter `{name}`"))),
                _ => {}
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let mut updated = 0;
        for (name, p) in params.iter_mut() {
            let alpha = match lr(name) {
                Some(a) => a,
                None => continue,
            };
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.len()]);
            let step = T::from_f64(alpha / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let e = T::from_f64(eps);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w - step * *mi / ((*vi * inv_bc2).sqrt() + e);
            }
            updated += 1;
        }
        Ok(updated)
    }
}
