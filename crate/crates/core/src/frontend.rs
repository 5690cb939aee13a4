//! Convolutional feature extractor: raw waveform to latent frames.
//!
//! Each block is an unpadded strided conv (no bias), a layer norm over
//! channels at every time step, then GELU. The activation penalty is taken
//! on the final block's conv output before its norm.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::params::{norm_specs, Binder, Init, ParamSpec, ParamStore};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub blocks: Vec<ConvBlock>,
    #[serde(default = "default_penalty")]
    pub activation_penalty_weight: f64,
}

fn default_penalty() -> f64 {
    10.0
}

impl FrontendConfig {
    pub fn desk() -> Self {
        let b = |channels, kernel, stride| ConvBlock { channels, kernel, stride };
        Self { blocks: vec![b(32, 10, 5), b(32, 3, 2), b(32, 3, 2)], activation_penalty_weight: default_penalty() }
    }

    pub fn full() -> Self {
        let kernels = [10, 3, 3, 3, 3, 2, 2];
        let strides = [5, 2, 2, 2, 2, 2, 2];
        Self {
            blocks: kernels
                .iter()
                .zip(strides)
                .map(|(&kernel, stride)| ConvBlock { channels: 512, kernel, stride })
                .collect(),
            activation_penalty_weight: default_penalty(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("frontend needs at least one block".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(Error::Config("frontend channels, kernels and strides must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    /// Frame count for `samples` input samples, `None` when too short.
    pub fn output_len(&self, samples: usize) -> Option<usize> {
        self.blocks.iter().try_fold(samples, |t, b| (t >= b.kernel).then(|| (t - b.kernel) / b.stride + 1))
    }

    /// Receptive field: the shortest input producing one frame.
    pub fn min_samples(&self) -> usize {
        self.blocks.iter().rev().fold(1, |need, b| (need - 1) * b.stride + b.kernel)
    }

    /// Frames per second at the nominal sample rate.
    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.total_stride() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, source_id: impl Into<String>) -> Self {
        Self { samples, source_id: source_id.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrames<F> {
    /// `[T, d_z]`.
    pub frames: Tensor<F>,
    pub frame_rate: f64,
}

pub struct FrontendOutput<'g, F> {
    /// `[T, d_z]`.
    pub latent: Var<'g, F>,
    /// Final block's conv output before normalization, `[d_z, T]`.
    pub final_pre_norm: Var<'g, F>,
}

pub fn layout(cfg: &FrontendConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut c_in = 1;
    for (i, b) in cfg.blocks.iter().enumerate() {
        specs.push(ParamSpec::new(
            format!("frontend.block{i}.conv.weight"),
            vec![b.channels, c_in, b.kernel],
            Init::Normal { std: (2.0 / (c_in * b.kernel) as f64).sqrt() },
        ));
        specs.extend(norm_specs(&format!("frontend.block{i}.norm"), b.channels));
        c_in = b.channels;
    }
    specs
}

/// Names of every frontend parameter.
pub fn freeze(cfg: &FrontendConfig) -> BTreeSet<String> {
    layout(cfg).into_iter().map(|s| s.name).collect()
}

fn check_waveform(cfg: &FrontendConfig, w: &Waveform) -> Result<()> {
    let min = cfg.min_samples();
    if w.len() < min {
        return Err(Error::WaveformTooShort { len: w.len(), min });
    }
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("waveform `{}` sample {i}", w.source_id)));
    }
    Ok(())
}

pub fn forward<'g, F: Float>(
    b: &Binder<'g, F>,
    cfg: &FrontendConfig,
    w: &Waveform,
    eps: f64,
) -> Result<FrontendOutput<'g, F>> {
    check_waveform(cfg, w)?;
    let g = b.graph();
    let samples: Vec<F> = w.samples.iter().map(|&s| F::from_f64(s as f64)).collect();
    let mut x = g.constant(Tensor::new(vec![1, samples.len()], samples)?);
    let mut pre_norm = None;
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let conv = x.conv1d(&b.get(&format!("frontend.block{i}.conv.weight"))?, blk.stride, 1)?;
        let normed = conv.transpose()?.layer_norm(
            &b.get(&format!("frontend.block{i}.norm.gain"))?,
            &b.get(&format!("frontend.block{i}.norm.bias"))?,
            eps,
        )?;
        let act = normed.gelu();
        pre_norm = Some(conv);
        x = if i + 1 == cfg.blocks.len() { act } else { act.transpose()? };
    }
    Ok(FrontendOutput { latent: x, final_pre_norm: pre_norm.expect("at least one block") })
}

/// `weight · mean(z²)`.
pub fn activation_penalty<'g, F: Float>(z_final: &Var<'g, F>, weight: f64) -> Var<'g, F> {
    z_final.square().mean().scale(weight)
}

/// Inference-only extraction with every parameter held constant.
pub fn extract<F: Float>(
    params: &ParamStore<F>,
    cfg: &FrontendConfig,
    w: &Waveform,
    eps: f64,
) -> Result<LatentFrames<F>> {
    let g = Graph::new();
    let b = Binder::frozen(&g, params);
    let out = forward(&b, cfg, w, eps)?;
    Ok(LatentFrames { frames: out.latent.value(), frame_rate: cfg.frame_rate() })
}
