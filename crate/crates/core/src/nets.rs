//! The mapping network F and the shared-weight derivative network G.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{name_hash, split, SplitMix64, Stream};
use crate::tensor::{ensure_same_shape, Tensor};

const KERNEL: usize = 3;
const PAD: usize = 1;

/// Named parameter tensors, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count across all tensors whose path starts with `prefix`.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .iter()
                .map(|(n, t)| (n.to_owned(), g.param(t)))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .iter()
                .map(|(n, t)| (n.to_owned(), g.constant(t.detached())))
                .collect(),
        }
    }

    /// Adds the graph's leaf gradients into each tensor's grad slot.
    pub fn absorb_grads(&mut self, g: &Graph, vars: &ParamVars) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(&v) = vars.vars.get(name) {
                match g.grad(v) {
                    Some(d) => t.accumulate_grad(d),
                    None => t.accumulate_grad(&vec![0.0; t.numel()]),
                }
            }
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(n, v)| (n.to_owned(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn conv(g: &mut Graph, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, b, PAD, 1)
}

fn conv_shapes(prefix: &str, cin: usize, cout: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{prefix}.weight"), vec![cout, cin, KERNEL, KERNEL]),
        (format!("{prefix}.bias"), vec![cout]),
    ]
}

/// F: conv-in, `blocks` residual blocks (conv, relu, conv, skip), conv-out,
/// and a global skip adding the input back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MappingNet {
    pub features: usize,
    pub blocks: usize,
}

impl MappingNet {
    pub fn param_shapes(&self, image_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.extend(conv_shapes("F.conv_in", image_channels, self.features));
        for b in 0..self.blocks {
            out.extend(conv_shapes(&format!("F.block{b}.conv1"), self.features, self.features));
            out.extend(conv_shapes(&format!("F.block{b}.conv2"), self.features, self.features));
        }
        out.extend(conv_shapes("F.conv_out", self.features, image_channels));
        out
    }

    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, y: Var) -> Result<Var> {
        let mut h = conv(g, vars, "F.conv_in", y)?;
        for b in 0..self.blocks {
            let t = conv(g, vars, &format!("F.block{b}.conv1"), h)?;
            let t = g.relu(t);
            let t = conv(g, vars, &format!("F.block{b}.conv2"), t)?;
            h = g.add(t, h)?;
        }
        let out = conv(g, vars, "F.conv_out", h)?;
        g.add(out, y)
    }
}

/// G: two convolutions over `concat(g_k, y)` with a relu between and no
/// output activation, so terms may go negative. One parameter set serves
/// every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivativeNet {
    pub features: usize,
}

impl DerivativeNet {
    pub fn param_shapes(&self, image_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.extend(conv_shapes("G.conv1", 2 * image_channels, self.features));
        out.extend(conv_shapes("G.conv2", self.features, image_channels));
        out
    }

    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, gk: Var, y: Var) -> Result<Var> {
        ensure_same_shape("forward_G", g.value(y), g.value(gk))?;
        let input = g.concat_channels(gk, y)?;
        let h = conv(g, vars, "G.conv1", input)?;
        let h = g.relu(h);
        conv(g, vars, "G.conv2", h)
    }
}

/// Hyperparameters of the whole model. `derivative: None` is F alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub image_channels: usize,
    pub mapping: MappingNet,
    pub derivative: Option<DerivativeNet>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_channels: 3,
            mapping: MappingNet {
                features: 32,
                blocks: 3,
            },
            derivative: Some(DerivativeNet { features: 32 }),
        }
    }
}

impl ModelSpec {
    /// 16 features and 2 residual blocks in F, 16 features in G.
    pub fn desk() -> Self {
        Self {
            image_channels: 3,
            mapping: MappingNet {
                features: 16,
                blocks: 2,
            },
            derivative: Some(DerivativeNet { features: 16 }),
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.mapping.param_shapes(self.image_channels);
        if let Some(d) = &self.derivative {
            out.extend(d.param_shapes(self.image_channels));
        }
        out
    }

    pub fn forward_f(&self, g: &mut Graph, vars: &ParamVars, y: Var) -> Result<Var> {
        self.mapping.forward(g, vars, y)
    }

    pub fn forward_g(&self, g: &mut Graph, vars: &ParamVars, gk: Var, y: Var) -> Result<Var> {
        match &self.derivative {
            Some(d) => d.forward(g, vars, gk, y),
            None => Err(Error::Invalid("model has no derivative network".into())),
        }
    }
}

/// Conv weights ~ Normal(0, sqrt(2 / fan_in)), biases zero. Each tensor draws
/// from its own stream keyed by its path, so F's initialization does not
/// depend on whether G exists.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let base = split(seed, Stream::Init as u64);
    let mut ps = ParamSet::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = SplitMix64::new(split(base, name_hash(&name)));
            Tensor::from_fn(shape, |_| std * rng.normal())
        };
        ps.insert(name, t);
    }
    ps
}

/// Every parameter set to zero.
pub fn zero_params(spec: &ModelSpec) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape) in spec.param_shapes() {
        ps.insert(name, Tensor::zeros(shape));
    }
    ps
}
