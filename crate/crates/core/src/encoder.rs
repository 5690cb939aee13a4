//! Context network: mask substitution, convolutional relative positions and
//! post-norm transformer blocks, with optional per-task language adapters
//! and per-task layer norms.
//!
//! Block order, with bracketed pieces present only on an adapter route:
//!
//! ```text
//! h = LN_attn(h + MHSA(h)) → [adapter.attn] → [finetune adapter.attn]
//! h = LN_ffn(h + FFN(h))   → [adapter.ffn]  → [finetune adapter.ffn]
//! ```
//!
//! An adapter computes `y = x + LN(FC₂(gelu(FC₁ x)))`. With the up projection
//! and the LN bias at zero it is the identity, bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Route, TaskId};
use crate::numerics::{Float, Var};
use crate::params::{fan_in, linear_specs, norm_specs, Binder, Init, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { layers: 2, model_dim: 64, ffn_dim: 128, heads: 4, pos_conv_kernel: 16, pos_conv_groups: 4 }
    }

    pub fn full() -> Self {
        Self { layers: 12, model_dim: 768, ffn_dim: 3072, heads: 8, pos_conv_kernel: 128, pos_conv_groups: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("encoder sizes must be ≥ 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads)));
        }
        if self.pos_conv_groups == 0 || self.model_dim % self.pos_conv_groups != 0 || self.pos_conv_kernel == 0 {
            return Err(Error::Config("pos_conv groups must divide model_dim".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    /// Std of the up projection at insertion; 0 gives an identity adapter.
    #[serde(default)]
    pub init_scale: f64,
}

/// Sorted, de-duplicated masked frame indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSpec {
    masked: Vec<usize>,
}

impl MaskSpec {
    pub fn new(mut indices: Vec<usize>, frames: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.last().filter(|&&i| i >= frames) {
            return Err(Error::dim("mask", format!("index {bad} for {frames} frames")));
        }
        Ok(Self { masked: indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }
}

pub fn adapter_specs(prefix: &str, d: usize, cfg: &AdapterConfig) -> Vec<ParamSpec> {
    let up = if cfg.init_scale == 0.0 { Init::Zeros } else { Init::Normal { std: cfg.init_scale } };
    let mut specs = linear_specs(&format!("{prefix}.fc1"), d, cfg.bottleneck, fan_in(d));
    specs.extend(linear_specs(&format!("{prefix}.fc2"), cfg.bottleneck, d, up));
    specs.extend(norm_specs(&format!("{prefix}.norm"), d));
    specs
}

/// Shared encoder parameters; `shared_proj` adds the input/output projections
/// used when no task heads replace them.
pub fn base_layout(cfg: &EncoderConfig, latent_dim: usize, target_dim: usize, shared_proj: bool) -> Vec<ParamSpec> {
    let d = cfg.model_dim;
    let mut specs = Vec::new();
    if shared_proj {
        specs.extend(linear_specs("encoder.input_proj", latent_dim, d, fan_in(latent_dim)));
    }
    specs.push(ParamSpec::new("encoder.mask_embedding", vec![d], Init::Uniform { bound: 1.0 }));
    let cig = d / cfg.pos_conv_groups;
    specs.push(ParamSpec::new(
        "encoder.pos_conv.weight",
        vec![d, cig, cfg.pos_conv_kernel],
        Init::Normal { std: (4.0 / (cfg.pos_conv_kernel * d) as f64).sqrt() },
    ));
    specs.push(ParamSpec::new("encoder.pos_conv.bias", vec![d], Init::Zeros));
    specs.extend(norm_specs("encoder.norm", d));
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        for proj in ["q", "k", "v", "o"] {
            specs.extend(linear_specs(&format!("{p}.attn.{proj}"), d, d, fan_in(d)));
        }
        specs.extend(norm_specs(&format!("{p}.attn_norm"), d));
        specs.extend(linear_specs(&format!("{p}.ffn.fc1"), d, cfg.ffn_dim, fan_in(d)));
        specs.extend(linear_specs(&format!("{p}.ffn.fc2"), cfg.ffn_dim, d, fan_in(cfg.ffn_dim)));
        specs.extend(norm_specs(&format!("{p}.ffn_norm"), d));
    }
    if shared_proj {
        specs.extend(linear_specs("encoder.final_proj", d, target_dim, fan_in(d)));
    }
    specs
}

/// Task projection heads; later tasks start as copies of the previous task's.
pub fn head_layout(
    cfg: &EncoderConfig,
    latent_dim: usize,
    target_dim: usize,
    task: TaskId,
    copy_from: Option<TaskId>,
) -> Vec<ParamSpec> {
    let d = cfg.model_dim;
    let init = |stage: &str, part: &str, fresh: Init| match copy_from {
        Some(prev) => Init::CopyOf(format!("heads.{prev}.{stage}.{part}")),
        None => fresh,
    };
    let mut specs = Vec::new();
    for (stage, d_in, d_out) in [("pre", latent_dim, d), ("post", d, target_dim)] {
        specs.push(ParamSpec::new(
            format!("heads.{task}.{stage}.weight"),
            vec![d_in, d_out],
            init(stage, "weight", fan_in(d_in)),
        ));
        specs.push(ParamSpec::new(format!("heads.{task}.{stage}.bias"), vec![d_out], init(stage, "bias", Init::Zeros)));
    }
    specs
}

/// Pretraining adapters plus task copies of the per-layer norms.
pub fn task_layout(cfg: &EncoderConfig, adapter: &AdapterConfig, task: TaskId) -> Vec<ParamSpec> {
    let d = cfg.model_dim;
    let mut specs = Vec::new();
    for l in 0..cfg.layers {
        for site in ["attn", "ffn"] {
            specs.extend(adapter_specs(&format!("adapters.{task}.layer{l}.{site}"), d, adapter));
        }
        for which in ["attn_norm", "ffn_norm"] {
            for part in ["gain", "bias"] {
                specs.push(ParamSpec::new(
                    format!("task_norm.{task}.layer{l}.{which}.{part}"),
                    vec![d],
                    Init::CopyOf(format!("encoder.layer{l}.{which}.{part}")),
                ));
            }
        }
    }
    specs
}

fn linear<'g, F: Float>(b: &Binder<'g, F>, x: &Var<'g, F>, prefix: &str) -> Result<Var<'g, F>> {
    x.linear(&b.get(&format!("{prefix}.weight"))?, &b.get(&format!("{prefix}.bias"))?)
}

fn norm<'g, F: Float>(b: &Binder<'g, F>, x: &Var<'g, F>, prefix: &str, eps: f64) -> Result<Var<'g, F>> {
    x.layer_norm(&b.get(&format!("{prefix}.gain"))?, &b.get(&format!("{prefix}.bias"))?, eps)
}

/// `x + LN(FC₂(gelu(FC₁ x)))` applied to every row of `x`.
pub fn adapter_forward<'g, F: Float>(b: &Binder<'g, F>, prefix: &str, x: &Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
    let h = linear(b, x, &format!("{prefix}.fc1"))?.gelu();
    let h = linear(b, &h, &format!("{prefix}.fc2"))?;
    x.add(&norm(b, &h, &format!("{prefix}.norm"), eps)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadStage {
    PreEncoder,
    PostEncoder,
}

/// Task-specific affine head between the main blocks.
pub fn multihead_projection<'g, F: Float>(
    b: &Binder<'g, F>,
    task: TaskId,
    stage: HeadStage,
    x: &Var<'g, F>,
) -> Result<Var<'g, F>> {
    let stage = match stage {
        HeadStage::PreEncoder => "pre",
        HeadStage::PostEncoder => "post",
    };
    linear(b, x, &format!("heads.{task}.{stage}"))
}

/// Latent frames `[T, d_z]` into the model width through the route's input map.
pub fn project_input<'g, F: Float>(b: &Binder<'g, F>, route: &Route, z: &Var<'g, F>) -> Result<Var<'g, F>> {
    linear(b, z, &route.input_proj)
}

/// Context frames `[T, D]` into the contrastive space.
pub fn project_output<'g, F: Float>(b: &Binder<'g, F>, route: &Route, c: &Var<'g, F>) -> Result<Var<'g, F>> {
    linear(b, c, &route.output_proj)
}

pub struct EncoderOutput<'g, F> {
    /// `[T, D]`.
    pub context: Var<'g, F>,
    /// Attention probabilities, `[T, T]` per layer and head.
    pub attention: Vec<Var<'g, F>>,
}

fn mhsa<'g, F: Float>(
    b: &Binder<'g, F>,
    cfg: &EncoderConfig,
    x: &Var<'g, F>,
    prefix: &str,
    attention: &mut Vec<Var<'g, F>>,
) -> Result<Var<'g, F>> {
    let q = linear(b, x, &format!("{prefix}.q"))?;
    let k = linear(b, x, &format!("{prefix}.k"))?;
    let v = linear(b, x, &format!("{prefix}.v"))?;
    let dh = cfg.model_dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?);
        let probs = qh.matmul(&kh.transpose()?)?.scale(scale).softmax()?;
        heads.push(probs.matmul(&vh)?);
        attention.push(probs);
    }
    let merged = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads)? };
    linear(b, &merged, &format!("{prefix}.o"))
}

fn positional<'g, F: Float>(b: &Binder<'g, F>, cfg: &EncoderConfig, x: &Var<'g, F>) -> Result<Var<'g, F>> {
    let t = x.shape()[0];
    let k = cfg.pos_conv_kernel;
    let conv = x
        .transpose()?
        .pad_last(k / 2, k / 2)?
        .conv1d(&b.get("encoder.pos_conv.weight")?, 1, cfg.pos_conv_groups)?
        .slice_cols(0, t)?;
    let pos = conv.transpose()?.add_row(&b.get("encoder.pos_conv.bias")?)?.gelu();
    x.add(&pos)
}

/// Context network over projected frames `x: [T, D]`.
pub fn encode<'g, F: Float>(
    b: &Binder<'g, F>,
    cfg: &EncoderConfig,
    route: &Route,
    x: &Var<'g, F>,
    mask: &MaskSpec,
    eps: f64,
) -> Result<EncoderOutput<'g, F>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::dim("encode", format!("input {shape:?}, model_dim {}", cfg.model_dim)));
    }
    let mut h = if mask.is_empty() {
        *x
    } else {
        x.replace_rows(&b.get("encoder.mask_embedding")?, mask.indices())?
    };
    h = norm(b, &positional(b, cfg, &h)?, "encoder.norm", eps)?;
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        let a = mhsa(b, cfg, &h, &format!("{p}.attn"), &mut attention)?;
        h = norm(b, &h.add(&a)?, &route.layer_norm(l, "attn_norm"), eps)?;
        h = adapters_at(b, route, l, "attn", &h, eps)?;
        let f = linear(b, &linear(b, &h, &format!("{p}.ffn.fc1"))?.gelu(), &format!("{p}.ffn.fc2"))?;
        h = norm(b, &h.add(&f)?, &route.layer_norm(l, "ffn_norm"), eps)?;
        h = adapters_at(b, route, l, "ffn", &h, eps)?;
    }
    Ok(EncoderOutput { context: h, attention })
}

fn adapters_at<'g, F: Float>(
    b: &Binder<'g, F>,
    route: &Route,
    layer: usize,
    site: &str,
    h: &Var<'g, F>,
    eps: f64,
) -> Result<Var<'g, F>> {
    let mut h = *h;
    if let Some(p) = &route.adapters {
        h = adapter_forward(b, &format!("{p}.layer{layer}.{site}"), &h, eps)?;
    }
    if let Some(p) = &route.finetune_adapters {
        h = adapter_forward(b, &format!("{p}.layer{layer}.{site}"), &h, eps)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_spec_sorts_and_validates() {
        let m = MaskSpec::new(vec![4, 1, 4, 2], 5).unwrap();
        assert_eq!(m.indices(), &[1, 2, 4]);
        assert!(m.contains(2) && !m.contains(3));
        assert!(MaskSpec::new(vec![5], 5).is_err());
    }

    #[test]
    fn adapter_param_count_closed_form() {
        let cfg = AdapterConfig { bottleneck: 512, init_scale: 0.0 };
        let n: usize = adapter_specs("adapters.2.layer0.attn", 768, &cfg).iter().map(|s| s.numel()).sum();
        assert_eq!(n, (768 * 512 + 512) + (512 * 768 + 768) + 2 * 768);
        assert_eq!(n, 789_248);
    }

    #[test]
    fn full_preset_validates() {
        EncoderConfig::full().validate().unwrap();
        let mut bad = EncoderConfig::desk();
        bad.heads = 3;
        assert!(bad.validate().is_err());
    }
}
