//! Zero-padded strided cross-correlation in 2D and 3D.
//!
//! Patches are unrolled with kernel taps ordered `(channel, depth, row, col)`.
//! A 3D stem kernel with one input channel and depth 3 therefore has the same
//! tap order as a 2D kernel over three input channels, and a depth-1 3D kernel
//! has the same tap order as its 2D source; see [`super::gemm`] for why that
//! makes the transferred encoder bitwise slice-equivalent.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, gemm_nt_acc, transpose};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// `Conv Kx×Ky(×Kz) / (Sx, Sy(, Sz))` with zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let spec = ConvSpec {
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            pad: pad.to_vec(),
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit stride with "same" padding (`k / 2`) on every axis.
    pub fn same(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Result<Self> {
        let stride = vec![1; kernel.len()];
        let pad: Vec<usize> = kernel.iter().map(|k| k / 2).collect();
        Self::new(in_channels, out_channels, kernel, &stride, &pad)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if !(r == 2 || r == 3) || self.stride.len() != r || self.pad.len() != r {
            return Err(Error::InvalidSpec(format!(
                "conv needs 2 or 3 spatial axes with matching stride/pad: {self:?}"
            )));
        }
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0) {
            return Err(Error::InvalidSpec(format!(
                "kernel extents and strides must be >= 1: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// Output spatial extents for the given input extents.
    pub fn out_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.spatial_rank() {
            return shape_err(format!(
                "conv over {} spatial axes given extents {input:?}",
                self.spatial_rank()
            ));
        }
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let padded = n + 2 * self.pad[a];
                if padded < self.kernel[a] {
                    shape_err(format!(
                        "non-positive output extent on axis {a}: input {n}, kernel {}, pad {}",
                        self.kernel[a], self.pad[a]
                    ))
                } else {
                    Ok((padded - self.kernel[a]) / self.stride[a] + 1)
                }
            })
            .collect()
    }

    fn padded3(v: &[usize], fill: usize) -> [usize; 3] {
        [v[0], v[1], *v.get(2).unwrap_or(&fill)]
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel.iter().all(|&k| k == 1)
            && self.stride.iter().all(|&s| s == 1)
            && self.pad.iter().all(|&p| p == 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(spec: &ConvSpec, input: &Tensor<impl Scalar>) -> Result<(usize, Geometry)> {
        spec.validate()?;
        if input.rank() != 2 + spec.spatial_rank() {
            return shape_err(format!(
                "{}D conv given input of shape {:?}",
                spec.spatial_rank(),
                input.shape()
            ));
        }
        let [n, c, h, w, d] = input.dims5()?;
        if c != spec.in_channels {
            return Err(Error::ChannelMismatch {
                expected: spec.in_channels,
                got: c,
            });
        }
        let out = spec.out_extents(input.spatial())?;
        Ok((
            n,
            Geometry {
                c,
                input: [h, w, d],
                kernel: ConvSpec::padded3(&spec.kernel, 1),
                stride: ConvSpec::padded3(&spec.stride, 1),
                pad: ConvSpec::padded3(&spec.pad, 0),
                out: ConvSpec::padded3(&out, 1),
            },
        ))
    }

    fn taps(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.out.iter().product()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
}

/// Visits every `(tap row, position, input offset)` triple; `None` marks padding.
#[inline]
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.pad;
    let [oh, ow, od] = g.out;
    for c in 0..g.c {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((c * kd + dz) * kh + dy) * kw + dx;
                    let mut pos = 0;
                    for oy in 0..oh {
                        let iy = (oy * sh + dy) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            for _ in 0..ow * od {
                                f(row, pos, None);
                                pos += 1;
                            }
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + dx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                for _ in 0..od {
                                    f(row, pos, None);
                                    pos += 1;
                                }
                                continue;
                            }
                            let base = ((c * h + iy as usize) * w + ix as usize) * d;
                            for oz in 0..od {
                                let iz = (oz * sd + dz) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    f(row, pos, None);
                                } else {
                                    f(row, pos, Some(base + iz as usize));
                                }
                                pos += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for_each_tap(g, |row, pos, src| {
        cols[row * p + pos] = match src {
            Some(i) => x[i],
            None => T::zero(),
        };
    });
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for_each_tap(g, |row, pos, src| {
        if let Some(i) = src {
            dx[i] = dx[i] + cols[row * p + pos];
        }
    });
}

/// Weight tensor `n×m×h×w(×d)` as an `n × taps` matrix in tap order.
fn weight_matrix<T: Scalar>(g: &Geometry, n: usize, w: &[T]) -> Vec<T> {
    let [kh, kw, kd] = g.kernel;
    let k = g.taps();
    let mut out = vec![T::zero(); n * k];
    for o in 0..n {
        for c in 0..g.c {
            for dy in 0..kh {
                for dx in 0..kw {
                    for dz in 0..kd {
                        let src = (((o * g.c + c) * kh + dy) * kw + dx) * kd + dz;
                        let row = ((c * kd + dz) * kh + dy) * kw + dx;
                        out[o * k + row] = w[src];
                    }
                }
            }
        }
    }
    out
}

fn weight_from_matrix<T: Scalar>(g: &Geometry, n: usize, m: &[T], out: &mut [T]) {
    let [kh, kw, kd] = g.kernel;
    let k = g.taps();
    for o in 0..n {
        for c in 0..g.c {
            for dy in 0..kh {
                for dx in 0..kw {
                    for dz in 0..kd {
                        let dst = (((o * g.c + c) * kh + dy) * kw + dx) * kd + dz;
                        let row = ((c * kd + dz) * kh + dy) * kw + dx;
                        out[dst] = m[o * k + row];
                    }
                }
            }
        }
    }
}

fn check_params<T: Scalar>(
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<()> {
    if weight.shape() != spec.weight_shape().as_slice() {
        return shape_err(format!(
            "weight shape {:?} does not match spec {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return shape_err(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                spec.out_channels
            ));
        }
    }
    Ok(())
}

/// Convolution over 2 or 3 spatial axes, selected by `spec`.
pub fn conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, g) = Geometry::new(spec, input)?;
    check_params(spec, weight, bias)?;
    let oc = spec.out_channels;
    let k = g.taps();
    let p = g.positions();
    let wm = weight_matrix(&g, oc, weight.data());
    let mut out = vec![T::zero(); n * oc * p];
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let plane = g.c * g.in_plane();
    for b in 0..n {
        let x = &input.data()[b * plane..(b + 1) * plane];
        let y = &mut out[b * oc * p..(b + 1) * oc * p];
        if spec.is_pointwise() {
            gemm(oc, k, p, &wm, x, y);
        } else {
            im2col(&g, x, &mut cols);
            gemm(oc, k, p, &wm, &cols, y);
        }
        if let Some(bias) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                let bv = bias.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    let mut shape = vec![n, oc];
    shape.extend_from_slice(&g.out[..spec.spatial_rank()]);
    Tensor::from_vec(shape, out)
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.spatial_rank() != 2 {
        return Err(Error::InvalidSpec("conv2d needs a 2D spec".into()));
    }
    conv(input, weight, bias, spec)
}

pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.spatial_rank() != 3 {
        return Err(Error::InvalidSpec("conv3d needs a 3D spec".into()));
    }
    conv(input, weight, bias, spec)
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, g) = Geometry::new(spec, input)?;
    let oc = spec.out_channels;
    let k = g.taps();
    let p = g.positions();
    if grad_out.len() != n * oc * p {
        return shape_err("conv gradient has the wrong size");
    }
    let [need_x, need_w, need_b] = need;
    let pointwise = spec.is_pointwise();
    let wm_t = if need_x {
        transpose(oc, k, &weight_matrix(&g, oc, weight.data()))
    } else {
        Vec::new()
    };
    let mut dwm = if need_w { vec![T::zero(); oc * k] } else { Vec::new() };
    let mut db = if need_b { vec![T::zero(); oc] } else { Vec::new() };
    let mut dx = if need_x {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut cols = if pointwise || !need_w {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = if need_x && !pointwise {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    let plane = g.c * g.in_plane();
    for b in 0..n {
        let go = &grad_out.data()[b * oc * p..(b + 1) * oc * p];
        let x = &input.data()[b * plane..(b + 1) * plane];
        if need_b {
            for (o, row) in go.chunks(p).enumerate() {
                db[o] = db[o] + row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if need_w {
            let src: &[T] = if pointwise {
                x
            } else {
                im2col(&g, x, &mut cols);
                &cols
            };
            gemm_nt_acc(oc, p, k, go, src, &mut dwm);
        }
        if need_x {
            let dxb = &mut dx[b * plane..(b + 1) * plane];
            if pointwise {
                gemm(k, oc, p, &wm_t, go, dxb);
            } else {
                gemm(k, oc, p, &wm_t, go, &mut dcols);
                col2im(&g, &dcols, dxb);
            }
        }
    }
    let weight_grad = if need_w {
        let mut w = vec![T::zero(); weight.len()];
        weight_from_matrix(&g, oc, &dwm, &mut w);
        Some(Tensor::from_vec(weight.shape().to_vec(), w)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: if need_x {
            Some(Tensor::from_vec(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: weight_grad,
        bias: if need_b {
            Some(Tensor::from_vec(vec![oc], db)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over every tap, independent of the unrolled path.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let [n, c, h, wd, d] = x.dims5().unwrap();
        let k = ConvSpec::padded3(&spec.kernel, 1);
        let s = ConvSpec::padded3(&spec.stride, 1);
        let p = ConvSpec::padded3(&spec.pad, 0);
        let o = ConvSpec::padded3(&spec.out_extents(x.spatial()).unwrap(), 1);
        let oc = spec.out_channels;
        let mut out = vec![0.0; n * oc * o[0] * o[1] * o[2]];
        let wdata = w.data();
        for b in 0..n {
            for co in 0..oc {
                for oy in 0..o[0] {
                    for ox in 0..o[1] {
                        for oz in 0..o[2] {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for ky in 0..k[0] {
                                    for kx in 0..k[1] {
                                        for kz in 0..k[2] {
                                            let iy = (oy * s[0] + ky) as isize - p[0] as isize;
                                            let ix = (ox * s[1] + kx) as isize - p[1] as isize;
                                            let iz = (oz * s[2] + kz) as isize - p[2] as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iz < 0
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                                || iz >= d as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((b * c + ci) * h + iy as usize) * wd
                                                + ix as usize)
                                                * d
                                                + iz as usize;
                                            let wi = (((co * c + ci) * k[0] + ky) * k[1] + kx)
                                                * k[2]
                                                + kz;
                                            acc += x.data()[xi] * wdata[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * oc + co) * o[0] + oy) * o[1] + ox) * o[2] + oz] = acc;
                        }
                    }
                }
            }
        }
        let mut shape = vec![n, oc];
        shape.extend_from_slice(&o[..spec.spatial_rank()]);
        Tensor::from_vec(shape, out).unwrap()
    }

    #[test]
    fn all_ones_valid_and_same() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let valid = ConvSpec::new(1, 1, &[3, 3], &[1, 1], &[0, 0]).unwrap();
        let y = conv2d(&x, &w, None, &valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let same = ConvSpec::same(1, 1, &[3, 3]).unwrap();
        let y = conv2d(&x, &w, None, &same).unwrap();
        // Direct-summation oracle: each output counts its in-range taps.
        let oracle = conv_oracle(&x.cast(), &w.cast(), &same);
        assert_eq!(y.cast::<f64>(), oracle);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let spec = ConvSpec::same(1, 1, &[1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn depth_row_with_zero_padding() {
        let x = Tensor::<f32>::from_vec(vec![1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1, 3]);
        let spec = ConvSpec::new(1, 1, &[1, 1, 3], &[1, 1, 1], &[0, 0, 1]).unwrap();
        let y = conv3d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn strided_3d_shape() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8, 4]);
        let spec = ConvSpec::new(2, 3, &[3, 3, 1], &[2, 2, 1], &[1, 1, 0]).unwrap();
        let w = Tensor::<f32>::zeros(&spec.weight_shape());
        assert_eq!(conv3d(&x, &w, None, &spec).unwrap().shape(), &[1, 3, 4, 4, 4]);
    }

    #[test]
    fn depth_one_kernel_is_slicewise_conv2d_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::randn(&[2, 3, 7, 6, 4], 1.0, &mut rng);
        let spec3 = ConvSpec::new(3, 5, &[3, 3, 1], &[2, 1, 1], &[1, 1, 0]).unwrap();
        let spec2 = ConvSpec::new(3, 5, &[3, 3], &[2, 1], &[1, 1]).unwrap();
        let w2 = Tensor::<f32>::randn(&spec2.weight_shape(), 0.5, &mut rng);
        let w3 = w2.clone().reshape(spec3.weight_shape()).unwrap();
        let b = Tensor::<f32>::randn(&[5], 0.5, &mut rng);
        let y3 = conv3d(&x, &w3, Some(&b), &spec3).unwrap();
        for k in 0..4 {
            let y2 = conv2d(&x.depth_slice(k).unwrap(), &w2, Some(&b), &spec2).unwrap();
            assert_eq!(y3.depth_slice(k).unwrap(), y2, "slice {k}");
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            ConvSpec::new(2, 3, &[3, 2, 3], &[1, 2, 2], &[1, 0, 1]).unwrap(),
            ConvSpec::new(3, 2, &[1, 7], &[1, 1], &[0, 3]).unwrap(),
            ConvSpec::new(2, 2, &[1, 1, 1], &[2, 2, 1], &[0, 0, 0]).unwrap(),
        ];
        for spec in cases {
            let mut shape = vec![2, spec.in_channels, 6, 5];
            if spec.spatial_rank() == 3 {
                shape.push(4);
            }
            let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&spec.weight_shape(), 1.0, &mut rng);
            let y = conv(&x, &w, None, &spec).unwrap();
            let o = conv_oracle(&x, &w, &spec);
            assert!(y.max_abs_diff(&o).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let spec = ConvSpec::same(3, 1, &[3, 3]).unwrap();
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(matches!(
            conv2d(&x, &w, None, &spec),
            Err(Error::ChannelMismatch { .. })
        ));
        let spec = ConvSpec::new(2, 1, &[5, 5], &[1, 1], &[0, 0]).unwrap();
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }
}
