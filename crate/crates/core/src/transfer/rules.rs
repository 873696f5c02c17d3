use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transforms::{append_depth, transform_input_layer};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::graph::{LayerKind, ModelGraph, Part};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    /// `(n,3,h,w) → (n,1,h,w,3)`.
    InputConv,
    /// `(n,m,k,k) → (n,m,k,k,1)`.
    AppendDepth,
    /// Batchnorm parameters, statistics and biases, verbatim.
    Copy,
    /// Weights of a strided 1×1 projection whose layer is rewritten into
    /// `Conv 1×1×1/(2,2,1)` plus a z-pool; the weights append a depth axis.
    DownsampleRewrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRule {
    pub source: String,
    pub target: String,
    pub kind: RuleKind,
}

impl TransferRule {
    pub fn new(source: impl Into<String>, kind: RuleKind) -> Self {
        let s = source.into();
        TransferRule {
            target: s.clone(),
            source: s,
            kind,
        }
    }

    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        match self.kind {
            RuleKind::InputConv => transform_input_layer(w),
            RuleKind::AppendDepth | RuleKind::DownsampleRewrite => append_depth(w),
            RuleKind::Copy => Ok(w.clone()),
        }
    }
}

/// One rule per encoder tensor of a 2D graph, derived from its layers.
pub fn auto_rules(graph2d: &ModelGraph) -> Vec<TransferRule> {
    let mut rules = Vec::new();
    for l in graph2d.layers.iter().filter(|l| l.part == Part::Encoder) {
        match &l.kind {
            LayerKind::Conv { spec, bias } => {
                let kind = if spec.in_channels == 3 && graph2d.layers[l.inputs[0]].inputs.is_empty() {
                    RuleKind::InputConv
                } else if spec.stride.iter().any(|&s| s != 1) {
                    RuleKind::DownsampleRewrite
                } else {
                    RuleKind::AppendDepth
                };
                rules.push(TransferRule::new(l.weight(), kind));
                if *bias {
                    rules.push(TransferRule::new(l.bias(), RuleKind::Copy));
                }
            }
            LayerKind::BatchNorm { .. } => {
                for n in l.param_names().into_iter().chain(l.buffer_names()) {
                    rules.push(TransferRule::new(n, RuleKind::Copy));
                }
            }
            _ => {}
        }
    }
    rules
}

/// Replaces rules sharing a source with the override, appending new ones.
pub fn apply_overrides(mut rules: Vec<TransferRule>, overrides: &[TransferRule]) -> Vec<TransferRule> {
    for o in overrides {
        match rules.iter_mut().find(|r| r.source == o.source) {
            Some(r) => *r = o.clone(),
            None => rules.push(o.clone()),
        }
    }
    rules
}

pub fn load_overrides(path: impl AsRef<Path>) -> Result<Vec<TransferRule>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad transfer override file: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub source: String,
    pub target: String,
    pub kind: RuleKind,
    pub source_shape: Vec<usize>,
    pub target_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: String,
    pub max_abs: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rules: Vec<RuleRecord>,
    /// Target tensors left at their random initialization.
    pub randomly_initialized: Vec<String>,
    pub residuals: Vec<LayerResidual>,
}

impl TransferReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn max_relative(&self) -> f64 {
        self.residuals.iter().map(|r| r.relative).fold(0.0, f64::max)
    }
}

pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Applies `rules` to the encoder tensors of `ckpt2d`. Every encoder tensor
/// must be matched by exactly one rule; decoder tensors are dropped.
pub fn transfer_encoder(ckpt2d: &Checkpoint, rules: &[TransferRule]) -> Result<(Checkpoint, TransferReport)> {
    let mut by_source: HashMap<&str, &TransferRule> = HashMap::new();
    for r in rules {
        if !is_encoder_tensor(&r.source) {
            return Err(Error::Transfer(format!(
                "rule for non-encoder tensor `{}`; the 2D decoder is not transferred",
                r.source
            )));
        }
        if by_source.insert(&r.source, r).is_some() {
            return Err(Error::Transfer(format!("tensor `{}` matched by more than one rule", r.source)));
        }
    }
    let unmapped: Vec<&str> = ckpt2d
        .tensors()
        .keys()
        .map(String::as_str)
        .filter(|n| is_encoder_tensor(n) && !by_source.contains_key(n))
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::Transfer(format!("unmapped parameters: {}", unmapped.join(", "))));
    }
    let mut out = Checkpoint::new();
    let mut report = TransferReport::default();
    for (name, t) in ckpt2d.tensors() {
        let Some(rule) = by_source.get(name.as_str()) else { continue };
        let y = rule
            .apply(t)
            .map_err(|e| Error::Transfer(format!("`{name}` ({:?}): {e}", rule.kind)))?;
        report.rules.push(RuleRecord {
            source: rule.source.clone(),
            target: rule.target.clone(),
            kind: rule.kind,
            source_shape: t.shape().to_vec(),
            target_shape: y.shape().to_vec(),
        });
        out.insert(rule.target.clone(), y);
    }
    let missing: Vec<&str> = by_source
        .keys()
        .copied()
        .filter(|s| ckpt2d.get(s).is_none())
        .collect();
    if !missing.is_empty() {
        let mut m = missing;
        m.sort_unstable();
        return Err(Error::Transfer(format!("rules name absent tensors: {}", m.join(", "))));
    }
    Ok((out, report))
}

/// Checks the element-level identities every rule promises.
pub fn audit_transfer(ckpt2d: &Checkpoint, ckpt3d: &Checkpoint, rules: &[TransferRule]) -> Result<()> {
    for r in rules {
        let s = ckpt2d
            .get(&r.source)
            .ok_or_else(|| Error::Transfer(format!("missing source `{}`", r.source)))?;
        let t = ckpt3d
            .get(&r.target)
            .ok_or_else(|| Error::Transfer(format!("missing target `{}`", r.target)))?;
        let ok = match r.kind {
            RuleKind::InputConv => {
                let &[n, m, h, w] = s.shape() else { return Err(Error::Transfer("rank".into())) };
                t.shape() == [n, 1, h, w, m]
                    && (0..n).all(|o| {
                        (0..m).all(|c| {
                            (0..h).all(|y| (0..w).all(|x| t.at(&[o, 0, y, x, c]).to_bits() == s.at(&[o, c, y, x]).to_bits()))
                        })
                    })
            }
            RuleKind::AppendDepth | RuleKind::DownsampleRewrite => {
                let mut shape = s.shape().to_vec();
                shape.push(1);
                t.shape() == shape.as_slice() && bits_equal(s, t)
            }
            RuleKind::Copy => t.shape() == s.shape() && bits_equal(s, t),
        };
        if !ok {
            return Err(Error::Transfer(format!(
                "`{}` → `{}` violates the {:?} identity",
                r.source, r.target, r.kind
            )));
        }
    }
    Ok(())
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.len() == b.len() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
