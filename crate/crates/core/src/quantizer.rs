//! Gumbel-softmax product quantizer producing contrastive targets.
//!
//! Logits `z·W + b` are split into `G` groups of `V`. Each group draws a
//! Gumbel-perturbed temperature softmax, the straight-through estimator turns
//! it into a one-hot selection, the selected entries are concatenated to
//! width `d` and projected to the target width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::params::{fan_in, linear_specs, Binder, Init, ParamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { tau_max: 2.0, tau_min: 0.5, decay: 0.999_995 }
    }
}

/// `max(tau_max · decay^step, tau_min)`.
pub fn anneal(step: u64, sched: &TemperatureSchedule) -> f64 {
    (sched.tau_max * sched.decay.powf(step as f64)).max(sched.tau_min)
}

/// Which probabilities the diversity penalty averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversitySource {
    #[default]
    PreNoise,
    PostNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    /// `G`.
    pub groups: usize,
    /// `V`.
    pub entries: usize,
    /// `d`, width of the concatenated entries.
    pub codevector_dim: usize,
    /// `f`, width of the contrastive space.
    pub target_dim: usize,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
    #[serde(default)]
    pub diversity_source: DiversitySource,
    #[serde(default = "default_logit_std")]
    pub logit_init_std: f64,
}

fn default_logit_std() -> f64 {
    1.0
}

impl QuantizerConfig {
    pub fn desk() -> Self {
        Self {
            groups: 2,
            entries: 32,
            codevector_dim: 64,
            target_dim: 128,
            temperature: TemperatureSchedule::default(),
            diversity_source: DiversitySource::default(),
            logit_init_std: default_logit_std(),
        }
    }

    pub fn full() -> Self {
        Self {
            groups: 2,
            entries: 320,
            codevector_dim: 640,
            target_dim: 256,
            temperature: TemperatureSchedule::default(),
            diversity_source: DiversitySource::default(),
            logit_init_std: default_logit_std(),
        }
    }

    pub fn entry_dim(&self) -> usize {
        self.codevector_dim / self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.entries == 0 || self.target_dim == 0 {
            return Err(Error::Config("quantizer groups, entries and target_dim must be ≥ 1".into()));
        }
        if self.codevector_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "codevector_dim {} not divisible by groups {}",
                self.codevector_dim, self.groups
            )));
        }
        let t = &self.temperature;
        if !(t.tau_min > 0.0 && t.tau_max >= t.tau_min && t.decay > 0.0 && t.decay <= 1.0) {
            return Err(Error::Config("invalid temperature schedule".into()));
        }
        Ok(())
    }
}

/// Parameters of one task's codebook set.
pub fn layout(cfg: &QuantizerConfig, latent_dim: usize, task: TaskId) -> Vec<ParamSpec> {
    let p = format!("quantizer.{task}");
    let bound = 1.0 / (cfg.entry_dim() as f64).sqrt();
    let mut specs = linear_specs(
        &format!("{p}.logits"),
        latent_dim,
        cfg.groups * cfg.entries,
        Init::Normal { std: cfg.logit_init_std },
    );
    specs.push(ParamSpec::new(
        format!("{p}.codebook"),
        vec![cfg.groups * cfg.entries, cfg.entry_dim()],
        Init::Uniform { bound },
    ));
    specs.extend(linear_specs(&format!("{p}.out"), cfg.codevector_dim, cfg.target_dim, fan_in(cfg.codevector_dim)));
    specs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizeMode {
    /// Add Gumbel noise before the temperature softmax.
    pub noise: bool,
    /// Straight-through one-hot selection; when false the soft sample is
    /// used directly (a smooth path for gradient checks).
    pub hard: bool,
}

impl Default for QuantizeMode {
    fn default() -> Self {
        Self { noise: true, hard: true }
    }
}

pub struct QuantizerOutput<'g, F> {
    /// `[T, f]`.
    pub targets: Var<'g, F>,
    /// Temperature softmax of the noise-free logits, `[T, G·V]`.
    pub soft_probs: Var<'g, F>,
    /// Temperature softmax of the perturbed logits, `[T, G·V]`.
    pub noisy_probs: Var<'g, F>,
    /// Selected entry per frame and group, `[T·G]` row-major.
    pub hard_index: Vec<usize>,
}

pub fn gumbel_noise<F: Float, R: Rng>(n: usize, rng: &mut R) -> Vec<F> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            F::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// Quantized targets for latent frames `z: [T, d_z]`.
pub fn quantize<'g, F: Float, R: Rng>(
    b: &Binder<'g, F>,
    cfg: &QuantizerConfig,
    prefix: &str,
    z: &Var<'g, F>,
    tau: f64,
    mode: QuantizeMode,
    rng: &mut R,
) -> Result<QuantizerOutput<'g, F>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (gs, v) = (cfg.groups, cfg.entries);
    let t = z.shape()[0];
    let g = b.graph();
    let logits = z.linear(&b.get(&format!("{prefix}.logits.weight"))?, &b.get(&format!("{prefix}.logits.bias"))?)?;
    let soft_probs = logits.scale(1.0 / tau).reshape(vec![t * gs, v])?.softmax()?;
    let perturbed = if mode.noise {
        let noise = g.constant(Tensor::new(vec![t, gs * v], gumbel_noise(t * gs * v, rng))?);
        logits.add(&noise)?
    } else {
        logits
    };
    let noisy_probs = perturbed.scale(1.0 / tau).reshape(vec![t * gs, v])?.softmax()?;
    let hard_index: Vec<usize> =
        noisy_probs.with_value(|p| p.data().chunks_exact(v).map(crate::numerics::argmax).collect());
    let selection = if mode.hard { noisy_probs.straight_through()? } else { noisy_probs };
    let selection = selection.reshape(vec![t, gs * v])?;
    let codebook = b.get(&format!("{prefix}.codebook"))?;
    let mut parts = Vec::with_capacity(gs);
    for grp in 0..gs {
        let sel = selection.slice_cols(grp * v, (grp + 1) * v)?;
        let entries = codebook.slice_rows(grp * v, (grp + 1) * v)?;
        parts.push(sel.matmul(&entries)?);
    }
    let concat = if parts.len() == 1 { parts[0] } else { Var::concat_cols(&parts)? };
    let targets = concat.linear(&b.get(&format!("{prefix}.out.weight"))?, &b.get(&format!("{prefix}.out.bias"))?)?;
    Ok(QuantizerOutput {
        targets,
        soft_probs: soft_probs.reshape(vec![t, gs * v])?,
        noisy_probs: noisy_probs.reshape(vec![t, gs * v])?,
        hard_index,
    })
}

/// `(1/(G·V)) Σ_g Σ_v p̄_gv ln p̄_gv` where `p̄` averages the rows of
/// `probs: [N, G·V]`.
pub fn diversity_loss<'g, F: Float>(probs: &Var<'g, F>, groups: usize, entries: usize) -> Result<Var<'g, F>> {
    let (n, w) = (probs.shape()[0], probs.shape()[1]);
    if n == 0 {
        return Err(Error::NoMaskedFrames);
    }
    if w != groups * entries {
        return Err(Error::dim("diversity_loss", format!("width {w} for G={groups}, V={entries}")));
    }
    Ok(probs.mean_rows()?.xlogx().sum().scale(1.0 / (groups * entries) as f64))
}

/// Closed-form bounds of the diversity loss, `[−ln V / V, 0]`.
pub fn diversity_bounds(entries: usize) -> (f64, f64) {
    (-(entries as f64).ln() / entries as f64, 0.0)
}

/// Convenience constant-graph variant for analysis: hard indices of `z`
/// under argmax selection without noise.
pub fn argmax_codes<F: Float>(
    params: &crate::params::ParamStore<F>,
    cfg: &QuantizerConfig,
    prefix: &str,
    z: &Tensor<F>,
) -> Result<Vec<usize>> {
    let g = Graph::new();
    let b = Binder::frozen(&g, params);
    let zv = g.constant(z.clone());
    let logits = zv.linear(&b.get(&format!("{prefix}.logits.weight"))?, &b.get(&format!("{prefix}.logits.bias"))?)?;
    let v = cfg.entries;
    Ok(logits.with_value(|l| l.data().chunks_exact(v).map(crate::numerics::argmax).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_endpoints() {
        let s = TemperatureSchedule::default();
        assert_eq!(anneal(0, &s), 2.0);
        assert_eq!(anneal(100_000_000, &s), 0.5);
        assert!((anneal(138_630, &s) - 1.0).abs() < 1e-3);
        assert!(anneal(1000, &s) < anneal(999, &s));
    }

    #[test]
    fn diversity_of_uniform_and_one_hot() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::full(vec![3, 8], 0.25));
        let ld = diversity_loss(&uniform, 2, 4).unwrap().value().item();
        assert!((ld - (-(4f64).ln() / 4.0)).abs() < 1e-12);
        assert!((ld + 0.346_57).abs() < 1e-5);
        let one_hot = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(diversity_loss(&one_hot, 1, 4).unwrap().value().item(), 0.0);
    }

    #[test]
    fn validate_rejects_indivisible_dims() {
        let mut c = QuantizerConfig::desk();
        c.codevector_dim = 63;
        assert!(c.validate().is_err());
    }
}
