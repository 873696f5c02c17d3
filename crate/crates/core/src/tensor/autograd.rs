//! Execution back ends for the op set: [`Infer`] evaluates eagerly and keeps
//! nothing, [`Tape`] records every op so [`Tape::backward`] can replay the
//! adjoints in reverse.

use std::rc::Rc;

use indexmap::IndexMap;

use super::conv::{conv, conv_backward};
use super::elementwise::{add, concat, concat_backward, relu, relu_backward};
use super::interp::{upsample_linear, upsample_linear_backward};
use super::norm::{batchnorm_backward, batchnorm_infer, batchnorm_train, BnBatchStats, BnSaved, BN_EPS};
use super::pool::{maxpool, maxpool_backward};
use super::{ConvSpec, PoolSpec, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::objectives::loss::{self, FocalMode, FocalSpec};

/// The differentiable op set, over some value handle.
pub trait Exec<T: Scalar> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn param(&mut self, name: &str, t: &Tensor<T>, trainable: bool) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn conv(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        spec: &ConvSpec,
    ) -> Result<Self::V>;
    /// Returns batch statistics when `train` is set.
    fn batchnorm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
    ) -> Result<(Self::V, Option<BnBatchStats<T>>)>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, xs: &[Self::V]) -> Result<Self::V>;
    fn maxpool(&mut self, x: &Self::V, spec: &PoolSpec) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V, target: &[usize]) -> Result<Self::V>;
}

/// Eager evaluation without any recording.
#[derive(Default)]
pub struct Infer;

impl<T: Scalar> Exec<T> for Infer {
    type V = Rc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, _name: &str, t: &Tensor<T>, _trainable: bool) -> Self::V {
        Rc::new(t.clone())
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn conv(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        spec: &ConvSpec,
    ) -> Result<Self::V> {
        Ok(Rc::new(conv(x, w, b.map(|b| &**b), spec)?))
    }

    fn batchnorm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
    ) -> Result<(Self::V, Option<BnBatchStats<T>>)> {
        if train {
            let (y, _, stats) = batchnorm_train(x, gamma, beta, BN_EPS)?;
            Ok((Rc::new(y), Some(stats)))
        } else {
            let (y, _) = batchnorm_infer(x, gamma, beta, running_mean, running_var, BN_EPS)?;
            Ok((Rc::new(y), None))
        }
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(relu(x)))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(add(a, b)?))
    }

    fn concat(&mut self, xs: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|x| &**x).collect();
        Ok(Rc::new(concat(&refs)?))
    }

    fn maxpool(&mut self, x: &Self::V, spec: &PoolSpec) -> Result<Self::V> {
        Ok(Rc::new(maxpool(x, spec)?.0))
    }

    fn upsample(&mut self, x: &Self::V, target: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(upsample_linear(x, target)?))
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Scalar objectives that can terminate a tape.
#[derive(Clone, Debug)]
pub enum LossSpec<T: Scalar> {
    /// Sum of all elements.
    Sum,
    /// Dot product with a fixed weight tensor.
    WeightedSum(Tensor<T>),
    /// Multiplies the (scalar) input by a constant.
    Scale(T),
    L2 { target: Tensor<T> },
    FocalL2 {
        target: Tensor<T>,
        spec: FocalSpec,
        mode: FocalMode,
    },
    CrossEntropy {
        labels: Vec<usize>,
        class_weights: Option<Vec<T>>,
    },
    FocalCe {
        labels: Vec<usize>,
        gamma: f64,
        class_weights: Option<Vec<T>>,
    },
}

enum Op<T> {
    Leaf,
    Param(String),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved<T>,
    },
    Relu(usize),
    Add(usize, usize),
    Concat {
        xs: Vec<usize>,
        channels: Vec<usize>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample(usize),
    /// Scalar objective with its gradient w.r.t. the input precomputed.
    Loss {
        x: usize,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// Recorded forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params_version: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params_version: None,
        }
    }

    /// Tape whose backward pass refuses to run once the parameter store has
    /// moved past `version`.
    pub fn for_params(version: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            params_version: Some(version),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Appends a scalar objective on top of `x`.
    pub fn loss(&mut self, x: Var, spec: LossSpec<T>) -> Result<Var> {
        let pred = &self.nodes[x.0].value;
        let (value, grad) = match spec {
            LossSpec::Sum => (pred.sum(), Tensor::ones(pred.shape())),
            LossSpec::WeightedSum(w) => {
                if w.shape() != pred.shape() {
                    return Err(Error::Shape("weighted sum weights differ in shape".into()));
                }
                let v = pred
                    .data()
                    .iter()
                    .zip(w.data())
                    .fold(T::zero(), |a, (&p, &q)| a + p * q);
                (v, w)
            }
            LossSpec::Scale(s) => {
                if !pred.is_scalar() {
                    return Err(Error::Autograd("scale expects a scalar".into()));
                }
                (pred.item() * s, Tensor::full(pred.shape(), s))
            }
            LossSpec::L2 { target } => loss::l2_with_grad(pred, &target)?,
            LossSpec::FocalL2 { target, spec, mode } => {
                loss::focal_l2_with_grad(pred, &target, &spec, mode)?
            }
            LossSpec::CrossEntropy {
                labels,
                class_weights,
            } => loss::focal_ce_with_grad(pred, &labels, 0.0, class_weights.as_deref())?,
            LossSpec::FocalCe {
                labels,
                gamma,
                class_weights,
            } => loss::focal_ce_with_grad(pred, &labels, gamma, class_weights.as_deref())?,
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Loss { x: x.0, grad }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_checked(loss, None)
    }

    /// Reverse pass that also checks the parameter store version the tape was
    /// recorded against.
    pub fn backward_checked(&self, loss: Var, current_version: Option<u64>) -> Result<Gradients<T>> {
        if let (Some(rec), Some(cur)) = (self.params_version, current_version) {
            if rec != cur {
                return Err(Error::Autograd(format!(
                    "tape recorded against parameter version {rec}, store is at {cur}"
                )));
            }
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut out = Gradients::new();

        fn accum<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(s) => {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Conv { x, w, b, spec } => {
                    let need = [
                        self.nodes[*x].needs_grad,
                        self.nodes[*w].needs_grad,
                        b.map(|b| self.nodes[b].needs_grad).unwrap_or(false),
                    ];
                    let cg = conv_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        spec,
                        &g,
                        need,
                    )?;
                    if let Some(dx) = cg.input {
                        accum(&mut grads[*x], dx);
                    }
                    if let Some(dw) = cg.weight {
                        accum(&mut grads[*w], dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        accum(&mut grads[*b], db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dg, db) = batchnorm_backward(
                        self.nodes[*x].value.shape(),
                        &self.nodes[*gamma].value,
                        saved,
                        &g,
                    )?;
                    if self.nodes[*x].needs_grad {
                        accum(&mut grads[*x], dx);
                    }
                    if self.nodes[*gamma].needs_grad {
                        accum(&mut grads[*gamma], dg);
                    }
                    if self.nodes[*beta].needs_grad {
                        accum(&mut grads[*beta], db);
                    }
                }
                Op::Relu(x) => {
                    let dx = relu_backward(&self.nodes[*x].value, &g);
                    accum(&mut grads[*x], dx);
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accum(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accum(&mut grads[*b], g);
                    }
                }
                Op::Concat { xs, channels } => {
                    for (x, part) in xs.iter().zip(concat_backward(&g, channels)?) {
                        if self.nodes[*x].needs_grad {
                            accum(&mut grads[*x], part);
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = maxpool_backward(self.nodes[*x].value.shape(), argmax, &g)?;
                    accum(&mut grads[*x], dx);
                }
                Op::Upsample(x) => {
                    let dx = upsample_linear_backward(self.nodes[*x].value.shape(), &g)?;
                    accum(&mut grads[*x], dx);
                }
                Op::Loss { x, grad } => {
                    let s = g.item();
                    accum(&mut grads[*x], grad.map(|v| v * s));
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Exec<T> for Tape<T> {
    type V = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, name: &str, t: &Tensor<T>, trainable: bool) -> Var {
        self.push(t.clone(), Op::Param(name.to_string()), trainable)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let ng = self.ng(*x) || self.ng(*w) || b.map(|b| self.ng(*b)).unwrap_or(false);
        Ok(self.push(
            y,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec: spec.clone(),
            },
            ng,
        ))
    }

    fn batchnorm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let (y, saved, stats) = if train {
            let (y, saved, stats) = batchnorm_train(
                &self.nodes[x.0].value,
                &self.nodes[gamma.0].value,
                &self.nodes[beta.0].value,
                BN_EPS,
            )?;
            (y, saved, Some(stats))
        } else {
            let (y, saved) = batchnorm_infer(
                &self.nodes[x.0].value,
                &self.nodes[gamma.0].value,
                &self.nodes[beta.0].value,
                running_mean,
                running_var,
                BN_EPS,
            )?;
            (y, saved, None)
        };
        let ng = self.ng(*x) || self.ng(*gamma) || self.ng(*beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
            ng,
        );
        Ok((v, stats))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let y = relu(&self.nodes[x.0].value);
        let ng = self.ng(*x);
        Ok(self.push(y, Op::Relu(x.0), ng))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(y, Op::Add(a.0, b.0), ng))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|x| &self.nodes[x.0].value).collect();
        let y = concat(&refs)?;
        let channels = refs.iter().map(|t| t.shape()[1]).collect();
        let ng = xs.iter().any(|x| self.ng(*x));
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.iter().map(|x| x.0).collect(),
                channels,
            },
            ng,
        ))
    }

    fn maxpool(&mut self, x: &Var, spec: &PoolSpec) -> Result<Var> {
        let (y, argmax) = maxpool(&self.nodes[x.0].value, spec)?;
        let ng = self.ng(*x);
        Ok(self.push(y, Op::MaxPool { x: x.0, argmax }, ng))
    }

    fn upsample(&mut self, x: &Var, target: &[usize]) -> Result<Var> {
        let y = upsample_linear(&self.nodes[x.0].value, target)?;
        let ng = self.ng(*x);
        Ok(self.push(y, Op::Upsample(x.0), ng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.param("w", &Tensor::full(&[1, 1, 3, 3], 0.5), true);
        let spec = ConvSpec::same(1, 1, &[3, 3]).unwrap();
        let y = tape.conv(&x, &w, None, &spec).unwrap();
        let s = tape.loss(y, LossSpec::Sum).unwrap();
        let l = tape.loss(s, LossSpec::Scale(0.0)).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", &Tensor::ones(&[2, 2]), true);
        let y = tape.relu(&w).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut tape = Tape::<f32>::for_params(3);
        let w = tape.param("w", &Tensor::ones(&[1]), true);
        let l = tape.loss(w, LossSpec::Sum).unwrap();
        assert!(tape.backward_checked(l, Some(3)).is_ok());
        assert!(tape.backward_checked(l, Some(4)).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", &Tensor::full(&[3], 2.0), true);
        let w2 = tape.param("w", &Tensor::full(&[3], 2.0), true);
        let s = tape.add(&w, &w2).unwrap();
        let l = tape.loss(s, LossSpec::Sum).unwrap();
        assert_eq!(tape.backward(l).unwrap()["w"].data(), &[2.0, 2.0, 2.0]);
    }
}
