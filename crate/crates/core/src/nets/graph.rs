use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::autograd::{Exec, Infer};
use crate::tensor::norm::BnBatchStats;
use crate::tensor::{ConvSpec, PoolSpec, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input { channels: usize },
    Conv { spec: ConvSpec, bias: bool },
    BatchNorm { channels: usize },
    Relu,
    MaxPool { spec: PoolSpec },
    Add,
    Concat,
    /// Linear resize of `inputs[0]` to the spatial extents of `inputs[1]`.
    UpsampleLike,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::UpsampleLike => "upsample_like",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Output shape at the reference input the graph was built for.
    pub out_shape: Vec<usize>,
    pub part: Part,
}

impl Layer {
    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
    pub fn running_mean(&self) -> String {
        format!("{}.running_mean", self.name)
    }
    pub fn running_var(&self) -> String {
        format!("{}.running_var", self.name)
    }

    /// Names of the trainable tensors this layer owns.
    pub fn param_names(&self) -> Vec<String> {
        match &self.kind {
            LayerKind::Conv { bias: true, .. } => vec![self.weight(), self.bias()],
            LayerKind::Conv { bias: false, .. } => vec![self.weight()],
            LayerKind::BatchNorm { .. } => vec![self.weight(), self.bias()],
            _ => vec![],
        }
    }

    pub fn buffer_names(&self) -> Vec<String> {
        match &self.kind {
            LayerKind::BatchNorm { .. } => vec![self.running_mean(), self.running_var()],
            _ => vec![],
        }
    }
}

/// Named trainable parameters and non-trainable buffers. The version counter
/// advances on every mutable access so stale tapes can be detected.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
    version: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            version: 0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        self.version += 1;
        &mut self.params
    }

    pub fn buffers_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        self.version += 1;
        &mut self.buffers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Parameters followed by buffers.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn insert_param(&mut self, name: String, t: Tensor<T>) {
        self.params.insert(name, t);
    }

    pub(crate) fn insert_buffer(&mut self, name: String, t: Tensor<T>) {
        self.buffers.insert(name, t);
    }

    /// Replaces a tensor of the same shape.
    pub fn assign(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.version += 1;
        let slot = match self.params.get_mut(name) {
            Some(s) => s,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::InvalidSpec(format!("no tensor named `{name}`")))?,
        };
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            version: 0,
        }
    }
}

/// How a forward pass treats each half of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub bn_batch_stats: [bool; 2],
    pub trainable: [bool; 2],
}

impl Mode {
    pub fn infer() -> Self {
        Mode {
            bn_batch_stats: [false; 2],
            trainable: [false; 2],
        }
    }

    pub fn train() -> Self {
        Mode {
            bn_batch_stats: [true; 2],
            trainable: [true; 2],
        }
    }

    /// Encoder weights and normalization statistics frozen.
    pub fn train_decoder() -> Self {
        Mode {
            bn_batch_stats: [false, true],
            trainable: [false, true],
        }
    }

    fn idx(part: Part) -> usize {
        match part {
            Part::Encoder => 0,
            Part::Decoder => 1,
        }
    }

    pub fn batch_stats(&self, part: Part) -> bool {
        self.bn_batch_stats[Self::idx(part)]
    }

    pub fn is_trainable(&self, part: Part) -> bool {
        self.trainable[Self::idx(part)]
    }
}

pub struct ForwardOut<V, T> {
    pub output: V,
    /// Every layer's output when captured, else only the output layer.
    pub values: Vec<Option<V>>,
    /// Batch statistics per batchnorm layer run in batch-statistics mode.
    pub bn_stats: Vec<(String, BnBatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub params: ParamStore<f32>,
    /// Named skip endpoints.
    pub taps: IndexMap<String, usize>,
    pub output: usize,
}

#[derive(Serialize)]
struct DumpLayer<'a> {
    name: &'a str,
    #[serde(flatten)]
    kind: &'a LayerKind,
    part: Part,
    inputs: Vec<&'a str>,
    out_shape: &'a [usize],
    params: Vec<(String, Vec<usize>)>,
}

/// Layer wiring with numeric hyperparameters removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    /// Layers outside repeated residual blocks, in order.
    pub outer: Vec<(String, String, Vec<String>)>,
    /// Distinct per-block wirings, names relative to the block.
    pub block_templates: BTreeSet<Vec<(String, String, Vec<String>)>>,
}

impl ModelGraph {
    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn input_layer(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn part_param_count(&self, part: Part) -> usize {
        self.layers
            .iter()
            .filter(|l| l.part == part)
            .flat_map(|l| l.param_names())
            .map(|n| self.params.params()[&n].len())
            .sum()
    }

    pub fn names_in(&self, part: Part) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.part == part)
            .flat_map(|l| {
                let mut v = l.param_names();
                v.extend(l.buffer_names());
                v
            })
            .collect()
    }

    pub fn part_of(&self, tensor: &str) -> Option<Part> {
        let layer = tensor.rsplit_once('.').map(|(l, _)| l)?;
        self.layer(layer).map(|l| l.part)
    }

    pub fn to_json(&self) -> Result<String> {
        let dump: Vec<DumpLayer> = self
            .layers
            .iter()
            .map(|l| DumpLayer {
                name: &l.name,
                kind: &l.kind,
                part: l.part,
                inputs: l.inputs.iter().map(|&i| self.layers[i].name.as_str()).collect(),
                out_shape: &l.out_shape,
                params: l
                    .param_names()
                    .into_iter()
                    .chain(l.buffer_names())
                    .map(|n| {
                        let s = self.params.get(&n).map(|t| t.shape().to_vec()).unwrap_or_default();
                        (n, s)
                    })
                    .collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    /// Splits `encoder.layer{s}.{b}.rest` into its block prefix and the rest.
    fn block_split(name: &str) -> Option<(String, String)> {
        let mut parts = name.splitn(4, '.');
        let (p0, p1, p2) = (parts.next()?, parts.next()?, parts.next()?);
        if p0 != "encoder" || !p1.starts_with("layer") || p2.parse::<usize>().is_err() {
            return None;
        }
        Some((format!("{p0}.{p1}.{p2}"), parts.next().unwrap_or("").to_string()))
    }

    pub fn skeleton(&self) -> Skeleton {
        let mut outer = Vec::new();
        let mut blocks: IndexMap<String, Vec<(String, String, Vec<String>)>> = IndexMap::new();
        for l in &self.layers {
            let tag = format!("{}{}", l.kind.tag(), match &l.kind {
                LayerKind::Conv { spec, .. } => spec.spatial_rank(),
                LayerKind::MaxPool { spec } => spec.kernel.len(),
                _ => 0,
            });
            match Self::block_split(&l.name) {
                Some((block, rest)) => {
                    let ins = l
                        .inputs
                        .iter()
                        .map(|&i| {
                            let n = &self.layers[i].name;
                            match Self::block_split(n) {
                                Some((b, r)) if b == block => r,
                                _ => "<block input>".to_string(),
                            }
                        })
                        .collect();
                    blocks.entry(block).or_default().push((rest, tag, ins));
                }
                None => {
                    let ins = l
                        .inputs
                        .iter()
                        .map(|&i| {
                            let n = &self.layers[i].name;
                            match Self::block_split(n) {
                                Some((b, _)) => format!("<last block of {}>", b.rsplit_once('.').unwrap().0),
                                None => n.clone(),
                            }
                        })
                        .collect();
                    outer.push((l.name.clone(), tag, ins));
                }
            }
        }
        Skeleton {
            outer,
            block_templates: blocks.into_values().collect(),
        }
    }

    /// Evaluates the graph on `input`.
    pub fn forward<T: Scalar, E: Exec<T>>(
        &self,
        params: &ParamStore<T>,
        exec: &mut E,
        input: E::V,
        mode: Mode,
        capture: bool,
    ) -> Result<ForwardOut<E::V, T>> {
        self.forward_until(params, exec, input, mode, capture, self.output)
    }

    /// Evaluates the layers needed for `last` only.
    pub fn forward_until<T: Scalar, E: Exec<T>>(
        &self,
        params: &ParamStore<T>,
        exec: &mut E,
        input: E::V,
        mode: Mode,
        capture: bool,
        last: usize,
    ) -> Result<ForwardOut<E::V, T>> {
        let n = last + 1;
        let mut last_use = vec![0usize; n];
        for (i, l) in self.layers[..n].iter().enumerate() {
            for &j in &l.inputs {
                last_use[j] = i;
            }
        }
        last_use[last] = usize::MAX;
        let mut values: Vec<Option<E::V>> = (0..n).map(|_| None).collect();
        let mut bn_stats = Vec::new();
        let mut input = Some(input);
        for i in 0..n {
            let l = &self.layers[i];
            let wrap = |e: Error| Error::Layer {
                layer: l.name.clone(),
                message: e.to_string(),
            };
            let get = |j: usize, values: &[Option<E::V>]| -> Result<E::V> {
                values[j].clone().ok_or_else(|| Error::Layer {
                    layer: l.name.clone(),
                    message: format!("input `{}` was released", self.layers[j].name),
                })
            };
            let trainable = mode.is_trainable(l.part);
            let param = |exec: &mut E, name: String| -> Result<E::V> {
                let t = params.params().get(&name).ok_or_else(|| Error::Layer {
                    layer: l.name.clone(),
                    message: format!("missing parameter `{name}`"),
                })?;
                Ok(exec.param(&name, t, trainable))
            };
            let v = match &l.kind {
                LayerKind::Input { channels } => {
                    let x = input.take().ok_or_else(|| wrap(Error::InvalidSpec("second input layer".into())))?;
                    let s = exec.value(&x).shape();
                    let expect_rank = self.layers[0].out_shape.len();
                    if s.len() != expect_rank || s[1] != *channels {
                        return Err(wrap(Error::Shape(format!(
                            "input shape {s:?} incompatible with {:?}",
                            l.out_shape
                        ))));
                    }
                    x
                }
                LayerKind::Conv { spec, bias } => {
                    let x = get(l.inputs[0], &values)?;
                    let w = param(exec, l.weight())?;
                    let b = if *bias { Some(param(exec, l.bias())?) } else { None };
                    exec.conv(&x, &w, b.as_ref(), spec).map_err(wrap)?
                }
                LayerKind::BatchNorm { .. } => {
                    let x = get(l.inputs[0], &values)?;
                    let g = param(exec, l.weight())?;
                    let b = param(exec, l.bias())?;
                    let rm = &params.buffers()[&l.running_mean()];
                    let rv = &params.buffers()[&l.running_var()];
                    let (y, stats) = exec
                        .batchnorm(&x, &g, &b, rm, rv, mode.batch_stats(l.part))
                        .map_err(wrap)?;
                    if let Some(s) = stats {
                        bn_stats.push((l.name.clone(), s));
                    }
                    y
                }
                LayerKind::Relu => exec.relu(&get(l.inputs[0], &values)?).map_err(wrap)?,
                LayerKind::MaxPool { spec } => {
                    if spec.is_identity() {
                        get(l.inputs[0], &values)?
                    } else {
                        exec.maxpool(&get(l.inputs[0], &values)?, spec).map_err(wrap)?
                    }
                }
                LayerKind::Add => {
                    let a = get(l.inputs[0], &values)?;
                    let b = get(l.inputs[1], &values)?;
                    exec.add(&a, &b).map_err(wrap)?
                }
                LayerKind::Concat => {
                    let xs = l
                        .inputs
                        .iter()
                        .map(|&j| get(j, &values))
                        .collect::<Result<Vec<_>>>()?;
                    exec.concat(&xs).map_err(wrap)?
                }
                LayerKind::UpsampleLike => {
                    let x = get(l.inputs[0], &values)?;
                    let r = get(l.inputs[1], &values)?;
                    let target = exec.value(&r).spatial().to_vec();
                    exec.upsample(&x, &target).map_err(wrap)?
                }
            };
            values[i] = Some(v);
            if !capture {
                for &j in &l.inputs {
                    if last_use[j] == i {
                        values[j] = None;
                    }
                }
            }
        }
        let output = values[last].clone().expect("output layer evaluated");
        Ok(ForwardOut {
            output,
            values,
            bn_stats,
        })
    }

    /// Inference-mode forward with the graph's own parameters.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(&self.params, &mut Infer, Rc::new(input.clone()), Mode::infer(), false)?;
        Ok(Rc::try_unwrap(out.output).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Outputs of the named layers, inference mode.
    pub fn infer_layers(&self, input: &Tensor, names: &[&str]) -> Result<HashMap<String, Tensor>> {
        let idx = names
            .iter()
            .map(|n| {
                self.layer_index(n)
                    .ok_or_else(|| Error::InvalidSpec(format!("no layer `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let last = idx.iter().copied().max().unwrap_or(0);
        let out = self.forward_until(
            &self.params,
            &mut Infer,
            Rc::new(input.clone()),
            Mode::infer(),
            true,
            last,
        )?;
        Ok(names
            .iter()
            .zip(idx)
            .map(|(n, i)| (n.to_string(), (*out.values[i].clone().unwrap()).clone()))
            .collect())
    }
}
