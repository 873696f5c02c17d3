use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// `MaxPool Kx×Ky(×Kz) / (Sx, Sy(, Sz))`. Padding never wins the max.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl PoolSpec {
    pub fn new(kernel: &[usize], stride: &[usize]) -> Result<Self> {
        Self::with_pad(kernel, stride, &vec![0; kernel.len()])
    }

    pub fn with_pad(kernel: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self> {
        let spec = PoolSpec {
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            pad: pad.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if !(r == 2 || r == 3) || self.stride.len() != r || self.pad.len() != r {
            return Err(Error::InvalidSpec(format!("bad pool spec {self:?}")));
        }
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0) {
            return Err(Error::InvalidSpec(format!("zero pool extent {self:?}")));
        }
        if self.pad.iter().zip(&self.kernel).any(|(p, k)| p >= k) {
            return Err(Error::InvalidSpec(format!(
                "pool padding must be smaller than the kernel: {self:?}"
            )));
        }
        Ok(())
    }

    /// True when the window is `1×1×1 / (1,1,1)`.
    pub fn is_identity(&self) -> bool {
        self.kernel.iter().chain(&self.stride).all(|&v| v == 1)
    }

    pub fn out_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.kernel.len() {
            return shape_err(format!("pool {self:?} on extents {input:?}"));
        }
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let padded = n + 2 * self.pad[a];
                if padded < self.kernel[a] {
                    shape_err(format!(
                        "pool kernel {} larger than input extent {n} on axis {a}",
                        self.kernel[a]
                    ))
                } else {
                    Ok((padded - self.kernel[a]) / self.stride[a] + 1)
                }
            })
            .collect()
    }
}

fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    [v[0], v[1], *v.get(2).unwrap_or(&fill)]
}

/// Max pooling; also returns the flat input index of each selected maximum.
pub fn maxpool<T: Scalar>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    spec.validate()?;
    if input.rank() != 2 + spec.kernel.len() {
        return shape_err(format!(
            "{}D pool on input {:?}",
            spec.kernel.len(),
            input.shape()
        ));
    }
    let [n, c, h, w, d] = input.dims5()?;
    let out_sp = spec.out_extents(input.spatial())?;
    let [oh, ow, od] = pad3(&out_sp, 1);
    let [kh, kw, kd] = pad3(&spec.kernel, 1);
    let [sh, sw, sd] = pad3(&spec.stride, 1);
    let [ph, pw, pd] = pad3(&spec.pad, 0);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow * od);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w * d;
        for oy in 0..oh {
            for ox in 0..ow {
                for oz in 0..od {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for kz in 0..kd {
                                let iz = (oz * sd + kz) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                let i = base + ((iy as usize * w) + ix as usize) * d + iz as usize;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let mut shape = vec![n, c];
    shape.extend_from_slice(&out_sp);
    Ok((Tensor::from_vec(shape, out)?, arg))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}
