//! Named parameter storage, group classification and graph binding.
//!
//! Parameter names are the single source of truth for ownership: the group a
//! tensor belongs to (and the transformer layer, when there is one) is parsed
//! from its dotted name.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::numerics::{Float, Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Frontend,
    InputProj,
    MaskEmbedding,
    PosConv,
    Mhsa,
    Ffn,
    BaseNorm,
    FinalProj,
    Quantizer(TaskId),
    InputHead(TaskId),
    OutputHead(TaskId),
    Adapters(TaskId),
    TaskNorm(TaskId),
    FinetuneAdapters(TaskId),
    FinetuneHead(TaskId),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Frontend => write!(f, "frontend"),
            ParamGroup::InputProj => write!(f, "encoder.input_proj"),
            ParamGroup::MaskEmbedding => write!(f, "encoder.mask_embedding"),
            ParamGroup::PosConv => write!(f, "pos_conv"),
            ParamGroup::Mhsa => write!(f, "encoder.mhsa"),
            ParamGroup::Ffn => write!(f, "encoder.ffn"),
            ParamGroup::BaseNorm => write!(f, "encoder.base_ln"),
            ParamGroup::FinalProj => write!(f, "encoder.final_proj"),
            ParamGroup::Quantizer(t) => write!(f, "quantizer[{t}]"),
            ParamGroup::InputHead(t) => write!(f, "heads[{t}].pre"),
            ParamGroup::OutputHead(t) => write!(f, "heads[{t}].post"),
            ParamGroup::Adapters(t) => write!(f, "adapters[{t}]"),
            ParamGroup::TaskNorm(t) => write!(f, "task_ln[{t}]"),
            ParamGroup::FinetuneAdapters(t) => write!(f, "finetune_adapters[{t}]"),
            ParamGroup::FinetuneHead(t) => write!(f, "finetune_head[{t}]"),
        }
    }
}

fn parse_task(s: &str) -> Option<TaskId> {
    s.parse().ok().map(TaskId)
}

fn parse_layer(s: &str) -> Option<usize> {
    s.strip_prefix("layer")?.parse().ok()
}

/// Group and transformer layer of a parameter, parsed from its name.
pub fn classify(name: &str) -> Result<(ParamGroup, Option<usize>)> {
    let parts: Vec<&str> = name.split('.').collect();
    let bad = || Error::MissingParam(format!("unrecognized parameter name `{name}`"));
    let group = match parts.as_slice() {
        ["frontend", ..] => (ParamGroup::Frontend, None),
        ["encoder", "input_proj", ..] => (ParamGroup::InputProj, None),
        ["encoder", "mask_embedding"] => (ParamGroup::MaskEmbedding, None),
        ["encoder", "pos_conv", ..] => (ParamGroup::PosConv, None),
        ["encoder", "norm", ..] => (ParamGroup::BaseNorm, None),
        ["encoder", "final_proj", ..] => (ParamGroup::FinalProj, None),
        ["encoder", layer, block, ..] => {
            let l = parse_layer(layer).ok_or_else(bad)?;
            let g = match *block {
                "attn" => ParamGroup::Mhsa,
                "ffn" => ParamGroup::Ffn,
                "attn_norm" | "ffn_norm" => ParamGroup::BaseNorm,
                _ => return Err(bad()),
            };
            (g, Some(l))
        }
        ["quantizer", t, ..] => (ParamGroup::Quantizer(parse_task(t).ok_or_else(bad)?), None),
        ["heads", t, "pre", ..] => (ParamGroup::InputHead(parse_task(t).ok_or_else(bad)?), None),
        ["heads", t, "post", ..] => (ParamGroup::OutputHead(parse_task(t).ok_or_else(bad)?), None),
        ["adapters", t, layer, ..] => {
            (ParamGroup::Adapters(parse_task(t).ok_or_else(bad)?), Some(parse_layer(layer).ok_or_else(bad)?))
        }
        ["task_norm", t, layer, ..] => {
            (ParamGroup::TaskNorm(parse_task(t).ok_or_else(bad)?), Some(parse_layer(layer).ok_or_else(bad)?))
        }
        ["finetune", t, "adapters", layer, ..] => (
            ParamGroup::FinetuneAdapters(parse_task(t).ok_or_else(bad)?),
            Some(parse_layer(layer).ok_or_else(bad)?),
        ),
        ["finetune", t, "head", ..] => (ParamGroup::FinetuneHead(parse_task(t).ok_or_else(bad)?), None),
        _ => return Err(bad()),
    };
    Ok(group)
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Rectangular identity: ones on the leading diagonal of a rank-2 tensor.
    Identity,
    /// Copy of an existing tensor of the same shape.
    CopyOf(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Specs for an affine map `x·W + b`; `W` is stored `[in, out]`.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, weight: Init) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![d_in, d_out], weight),
        ParamSpec::new(format!("{prefix}.bias"), vec![d_out], Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), vec![d], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), vec![d], Init::Zeros),
    ]
}

/// Default fan-in scaled normal for a `[in, out]` weight.
pub fn fan_in(d_in: usize) -> Init {
    Init::Normal { std: 1.0 / (d_in as f64).sqrt() }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Inserts a new tensor; the name must classify.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        classify(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` already exists")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set", format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Allocates every spec, in order, drawing random values from `rng`.
    pub fn allocate<R: Rng>(&mut self, specs: &[ParamSpec], rng: &mut R) -> Result<()> {
        for spec in specs {
            let n = spec.numel();
            let data: Vec<F> = match &spec.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, *std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
                }
                Init::Uniform { bound } => {
                    (0..n).map(|_| F::from_f64(rng.random_range(-bound..=*bound))).collect()
                }
                Init::Identity => {
                    let [r, c] = spec.shape[..] else {
                        return Err(Error::dim("identity init", format!("{:?}", spec.shape)));
                    };
                    let mut d = vec![F::zero(); n];
                    for i in 0..r.min(c) {
                        d[i * c + i] = F::one();
                    }
                    d
                }
                Init::CopyOf(src) => {
                    let t = self.get(src)?;
                    if t.shape() != spec.shape.as_slice() {
                        return Err(Error::dim("copy init", format!("`{src}` {:?} -> {:?}", t.shape(), spec.shape)));
                    }
                    t.to_vec()
                }
            };
            self.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Resolves parameter names to graph leaves for one forward pass.
///
/// Parameters in the trainable set become differentiable leaves; the rest are
/// constants, so no gradient is ever materialized for them.
pub struct Binder<'g, F: Float> {
    graph: &'g Graph<F>,
    store: Option<&'g ParamStore<F>>,
    trainable: Option<&'g BTreeSet<String>>,
    bound: RefCell<BTreeMap<String, Var<'g, F>>>,
}

impl<'g, F: Float> Binder<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &'g ParamStore<F>, trainable: &'g BTreeSet<String>) -> Self {
        Self { graph, store: Some(store), trainable: Some(trainable), bound: RefCell::new(BTreeMap::new()) }
    }

    /// Every parameter is a constant.
    pub fn frozen(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Self { graph, store: Some(store), trainable: None, bound: RefCell::new(BTreeMap::new()) }
    }

    /// Binder over pre-created leaves, used by gradient checks.
    pub fn from_vars(graph: &'g Graph<F>, vars: BTreeMap<String, Var<'g, F>>) -> Self {
        Self { graph, store: None, trainable: None, bound: RefCell::new(vars) }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, F>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let store = self.store.ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let value = store.get(name)?.clone();
        let var = match self.trainable {
            Some(set) if set.contains(name) => self.graph.param(value),
            _ => self.graph.constant(value),
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Names bound during the forward pass so far.
    pub fn used(&self) -> BTreeSet<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Gradients for every bound differentiable leaf.
    pub fn param_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
