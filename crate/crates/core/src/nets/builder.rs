use std::collections::HashSet;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Layer, LayerKind, ModelGraph, ParamStore, Part};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolSpec, Tensor};

/// Appends layers with build-time shape inference and seeded initialization.
pub struct GraphBuilder {
    layers: Vec<Layer>,
    params: ParamStore<f32>,
    taps: IndexMap<String, usize>,
    names: HashSet<String>,
    rng: ChaCha8Rng,
    pub part: Part,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            layers: Vec::new(),
            params: ParamStore::default(),
            taps: IndexMap::new(),
            names: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            part: Part::Encoder,
        }
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.layers[id].out_shape
    }

    pub fn channels(&self, id: usize) -> usize {
        self.layers[id].out_shape[1]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.layers[id].name
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, out_shape: Vec<usize>) -> Result<usize> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::InvalidSpec(format!("duplicate layer name `{name}`")));
        }
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            inputs,
            out_shape,
            part: self.part,
        });
        Ok(self.layers.len() - 1)
    }

    fn layer_err(name: &str, e: Error) -> Error {
        Error::Layer {
            layer: name.to_string(),
            message: e.to_string(),
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<usize> {
        if !self.layers.is_empty() {
            return Err(Error::InvalidSpec("input must be the first layer".into()));
        }
        if shape.len() < 4 || shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("bad input shape {shape:?}")));
        }
        self.push(
            "input",
            LayerKind::Input { channels: shape[1] },
            vec![],
            shape.to_vec(),
        )
    }

    pub fn tap(&mut self, name: &str, id: usize) {
        self.taps.insert(name.to_string(), id);
    }

    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn conv(&mut self, name: &str, x: usize, spec: ConvSpec, bias: bool) -> Result<usize> {
        spec.validate().map_err(|e| Self::layer_err(name, e))?;
        let s = self.shape(x).to_vec();
        if s[1] != spec.in_channels {
            return Err(Self::layer_err(
                name,
                Error::ChannelMismatch {
                    expected: spec.in_channels,
                    got: s[1],
                },
            ));
        }
        if s.len() != spec.spatial_rank() + 2 {
            return Err(Self::layer_err(name, Error::Shape(format!("{}D conv on {s:?}", spec.spatial_rank()))));
        }
        let sp = spec.out_extents(&s[2..]).map_err(|e| Self::layer_err(name, e))?;
        let mut out = vec![s[0], spec.out_channels];
        out.extend(sp);
        let fan_in: usize = spec.in_channels * spec.kernel.iter().product::<usize>();
        let w = Tensor::randn(&spec.weight_shape(), (2.0 / fan_in as f64).sqrt(), &mut self.rng);
        self.params.insert_param(format!("{name}.weight"), w);
        if bias {
            self.params
                .insert_param(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        }
        self.push(name, LayerKind::Conv { spec, bias }, vec![x], out)
    }

    /// Unit-stride conv with symmetric "same" padding.
    pub fn conv_same(&mut self, name: &str, x: usize, out: usize, kernel: &[usize], bias: bool) -> Result<usize> {
        let spec = ConvSpec::same(self.channels(x), out, kernel).map_err(|e| Self::layer_err(name, e))?;
        self.conv(name, x, spec, bias)
    }

    pub fn bn(&mut self, name: &str, x: usize) -> Result<usize> {
        let c = self.channels(x);
        self.params.insert_param(format!("{name}.weight"), Tensor::ones(&[c]));
        self.params.insert_param(format!("{name}.bias"), Tensor::zeros(&[c]));
        self.params
            .insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.params
            .insert_buffer(format!("{name}.running_var"), Tensor::ones(&[c]));
        let s = self.shape(x).to_vec();
        self.push(name, LayerKind::BatchNorm { channels: c }, vec![x], s)
    }

    pub fn relu(&mut self, name: &str, x: usize) -> Result<usize> {
        let s = self.shape(x).to_vec();
        self.push(name, LayerKind::Relu, vec![x], s)
    }

    pub fn maxpool(&mut self, name: &str, x: usize, spec: PoolSpec) -> Result<usize> {
        let s = self.shape(x).to_vec();
        if s.len() != spec.kernel.len() + 2 {
            return Err(Self::layer_err(name, Error::Shape(format!("pool {spec:?} on {s:?}"))));
        }
        let sp = spec.out_extents(&s[2..]).map_err(|e| Self::layer_err(name, e))?;
        let mut out = vec![s[0], s[1]];
        out.extend(sp);
        self.push(name, LayerKind::MaxPool { spec }, vec![x], out)
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::layer_err(
                name,
                Error::Shape(format!(
                    "sum of `{}` {:?} and `{}` {:?}",
                    self.name(a),
                    self.shape(a),
                    self.name(b),
                    self.shape(b)
                )),
            ));
        }
        let s = self.shape(a).to_vec();
        self.push(name, LayerKind::Add, vec![a, b], s)
    }

    pub fn concat(&mut self, name: &str, xs: &[usize]) -> Result<usize> {
        let first = self.shape(xs[0]).to_vec();
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Self::layer_err(name, Error::Shape(format!("concat of {first:?} and {s:?}"))));
            }
            c += s[1];
        }
        let mut out = first;
        out[1] = c;
        self.push(name, LayerKind::Concat, xs.to_vec(), out)
    }

    pub fn upsample_like(&mut self, name: &str, x: usize, reference: usize) -> Result<usize> {
        let s = self.shape(x).to_vec();
        let r = self.shape(reference).to_vec();
        if s.len() != r.len() {
            return Err(Self::layer_err(name, Error::Shape(format!("resize {s:?} like {r:?}"))));
        }
        let mut out = s;
        out[2..].copy_from_slice(&r[2..]);
        self.push(name, LayerKind::UpsampleLike, vec![x, reference], out)
    }

    pub fn conv_bn_relu(&mut self, name: &str, x: usize, spec: ConvSpec) -> Result<usize> {
        let c = self.conv(&format!("{name}.conv"), x, spec, false)?;
        let b = self.bn(&format!("{name}.bn"), c)?;
        self.relu(&format!("{name}.relu"), b)
    }

    pub fn finish(self, output: usize) -> ModelGraph {
        ModelGraph {
            layers: self.layers,
            params: self.params,
            taps: self.taps,
            output,
        }
    }
}
