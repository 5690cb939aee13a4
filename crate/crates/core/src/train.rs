//! Pretraining loss assembly and the per-task optimizer loop.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::continual::{l2_anchor_penalty, Anchor, L2AnchorConfig, StrategyKind};
use crate::encoder;
use crate::error::{Error, Result};
use crate::frontend::{self, Waveform};
use crate::model::{Model, ModelConfig, Route, TaskId};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, WarmupLinear};
use crate::params::Binder;
use crate::quantizer::{self, anneal, DiversitySource, QuantizeMode};
use crate::ssl::{contrastive_sum, sample_candidates, sample_mask, ContrastiveConfig, MaskingConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
}

/// Everything a pretraining forward pass needs besides parameters and data.
#[derive(Clone, Copy)]
pub struct LossSetup<'a, F> {
    pub config: &'a ModelConfig,
    pub route: &'a Route,
    pub ssl: &'a SslConfig,
    pub tau: f64,
    pub mode: QuantizeMode,
    pub anchor: Option<(&'a Anchor<F>, &'a L2AnchorConfig)>,
}

pub struct LossTerms<'g, F> {
    pub total: Var<'g, F>,
    pub contrastive: Var<'g, F>,
    pub diversity: Var<'g, F>,
    pub penalty: Var<'g, F>,
    pub anchor: Option<Var<'g, F>>,
    pub masked_frames: usize,
    pub skipped_frames: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub penalty: f64,
    pub anchor: f64,
}

impl<F: Float> LossTerms<'_, F> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.value().item().as_f64(),
            contrastive: self.contrastive.value().item().as_f64(),
            diversity: self.diversity.value().item().as_f64(),
            penalty: self.penalty.value().item().as_f64(),
            anchor: self.anchor.map_or(0.0, |a| a.value().item().as_f64()),
        }
    }
}

fn accumulate<'g, F: Float>(acc: Option<Var<'g, F>>, x: Var<'g, F>) -> Result<Option<Var<'g, F>>> {
    Ok(Some(match acc {
        Some(a) => a.add(&x)?,
        None => x,
    }))
}

/// `L_m + α·L_d + penalty (+ anchor)` over a batch.
///
/// `L_m` is the mean over every masked frame of the batch that received
/// distractors, `L_d` averages codebook probabilities over the same frames,
/// and the activation penalty is the batch mean.
pub fn pretrain_loss<'g, F: Float, R: Rng>(
    b: &Binder<'g, F>,
    s: &LossSetup<'_, F>,
    batch: &[&Waveform],
    rng: &mut R,
) -> Result<LossTerms<'g, F>> {
    if batch.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let cfg = s.config;
    let eps = cfg.norm_eps;
    let qc = &cfg.quantizer;
    let (mut lm, mut pen) = (None, None);
    let mut probs = Vec::new();
    let (mut frames, mut skipped) = (0, 0);
    for w in batch {
        let fo = frontend::forward(b, &cfg.frontend, w, eps)?;
        let z = fo.latent;
        let t = z.shape()[0];
        let mask = sample_mask(t, &s.ssl.masking, rng);
        let candidates = sample_candidates(&mask, s.ssl.contrastive.distractors, rng);
        skipped += mask.len() - candidates.len();
        let qo = quantizer::quantize(b, qc, &s.route.quantizer, &z, s.tau, s.mode, rng)?;
        pen = accumulate(pen, frontend::activation_penalty(&fo.final_pre_norm, cfg.frontend.activation_penalty_weight))?;
        if candidates.is_empty() {
            continue;
        }
        let x = encoder::project_input(b, s.route, &z)?;
        let c = encoder::encode(b, &cfg.encoder, s.route, &x, &mask, eps)?.context;
        let c = encoder::project_output(b, s.route, &c)?;
        lm = accumulate(lm, contrastive_sum(&c, &qo.targets, &candidates, &s.ssl.contrastive)?)?;
        let rows: Vec<usize> = candidates.iter().map(|(i, _)| *i).collect();
        let p = match qc.diversity_source {
            DiversitySource::PreNoise => qo.soft_probs,
            DiversitySource::PostNoise => qo.noisy_probs,
        };
        probs.push(p.gather_rows(&rows)?);
        frames += rows.len();
    }
    let Some(lm) = lm else {
        return Err(Error::NoMaskedFrames);
    };
    let contrastive = lm.scale(1.0 / frames as f64);
    let all_probs = if probs.len() == 1 { probs[0] } else { Var::concat_rows(&probs)? };
    let diversity = quantizer::diversity_loss(&all_probs, qc.groups, qc.entries)?;
    let penalty = pen.expect("non-empty batch").scale(1.0 / batch.len() as f64);
    let mut total = contrastive.add(&diversity.scale(s.ssl.contrastive.alpha))?.add(&penalty)?;
    let anchor = match s.anchor {
        Some((a, ac)) => {
            let term = l2_anchor_penalty(b, a, ac)?;
            total = total.add(&term)?;
            Some(term)
        }
        None => None,
    };
    Ok(LossTerms { total, contrastive, diversity, penalty, anchor, masked_frames: frames, skipped_frames: skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak rate; `None` picks the strategy default.
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Micro-batches summed into one update.
    #[serde(default = "default_accumulate")]
    pub accumulate: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub anchor: L2AnchorConfig,
}

fn default_batch() -> usize {
    4
}
fn default_warmup() -> f64 {
    0.08
}
fn default_accumulate() -> usize {
    1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: default_batch(),
            max_lr: None,
            warmup_frac: default_warmup(),
            clip_norm: None,
            accumulate: default_accumulate(),
            adam: AdamConfig::default(),
            ssl: SslConfig::default(),
            anchor: L2AnchorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub task: TaskId,
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub losses: LossValues,
    pub grad_norm: f64,
    pub masked_frames: usize,
    pub seconds: f64,
}

/// Optimizer loop for one task; the schedule and Adam state start fresh for
/// every task.
pub struct Pretrainer<F> {
    pub task: TaskId,
    pub trainable: BTreeSet<String>,
    pub cfg: PretrainConfig,
    schedule: WarmupLinear,
    adam: Adam<F>,
    anchor: Option<Anchor<F>>,
    step: u64,
}

impl<F: Float> Pretrainer<F> {
    pub fn new(model: &Model<F>, task: TaskId, trainable: BTreeSet<String>, cfg: PretrainConfig, anchor: Option<Anchor<F>>) -> Result<Self> {
        model.route(task)?;
        if cfg.batch_size == 0 || cfg.accumulate == 0 {
            return Err(Error::Config("batch_size and accumulate must be ≥ 1".into()));
        }
        cfg.ssl.masking.validate()?;
        let max_lr = cfg.max_lr.unwrap_or(model.strategy().default_lr());
        let schedule = WarmupLinear { max_lr, warmup_frac: cfg.warmup_frac, total_steps: cfg.steps };
        if anchor.is_some() && model.strategy() != StrategyKind::MultiHeadL2 {
            return Err(Error::Config("an L2 anchor is only used by the mh-l2 strategy".into()));
        }
        Ok(Self { task, trainable, schedule, adam: Adam::new(cfg.adam), anchor, cfg, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &Adam<F> {
        &self.adam
    }

    /// One update from `accumulate` micro-batches drawn by `next_batch`.
    pub fn step<R: Rng>(
        &mut self,
        model: &mut Model<F>,
        mut next_batch: impl FnMut(&mut R) -> Vec<Waveform>,
        rng: &mut R,
    ) -> Result<StepReport> {
        let start = Instant::now();
        let route = model.route(self.task)?;
        let tau = anneal(self.step, &model.config().quantizer.temperature);
        let anchor_cfg = self.cfg.anchor;
        let mut grads = std::collections::BTreeMap::new();
        let mut losses = LossValues::default();
        let mut masked = 0;
        let parts = self.cfg.accumulate;
        for _ in 0..parts {
            let waves = next_batch(rng);
            let refs: Vec<&Waveform> = waves.iter().collect();
            let g = Graph::new();
            let b = Binder::new(&g, &model.params, &self.trainable);
            let setup = LossSetup {
                config: model.config(),
                route: &route,
                ssl: &self.cfg.ssl,
                tau,
                mode: QuantizeMode::default(),
                anchor: self.anchor.as_ref().map(|a| (a, &anchor_cfg)),
            };
            let terms = pretrain_loss(&b, &setup, &refs, rng)?;
            let v = terms.values();
            if !v.total.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at task {} step {}", self.task, self.step)));
            }
            masked += terms.masked_frames;
            let scaled = terms.total.scale(1.0 / parts as f64);
            let gr = g.backward(scaled)?;
            for (name, t) in b.param_grads(&gr) {
                match grads.get_mut(&name) {
                    None => {
                        grads.insert(name, t);
                    }
                    Some(acc) => {
                        let sum: Vec<F> = acc.data().iter().zip(t.data()).map(|(&a, &x)| a + x).collect();
                        *acc = Tensor::new(t.shape().to_vec(), sum)?;
                    }
                }
            }
            let w = 1.0 / parts as f64;
            losses.total += w * v.total;
            losses.contrastive += w * v.contrastive;
            losses.diversity += w * v.diversity;
            losses.penalty += w * v.penalty;
            losses.anchor += w * v.anchor;
        }
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => crate::optim::grad_norm(&grads),
        };
        let lr = self.schedule.lr(self.step);
        self.adam.step(&mut model.params, &grads, lr)?;
        let report = StepReport {
            task: self.task,
            step: self.step,
            lr,
            tau,
            losses,
            grad_norm,
            masked_frames: masked,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(report)
    }
}

/// Loss of the current parameters on `batch` without updating anything.
pub fn evaluate_pretrain_loss<F: Float, R: Rng>(
    model: &Model<F>,
    route: &Route,
    ssl: &SslConfig,
    tau: f64,
    batch: &[&Waveform],
    rng: &mut R,
) -> Result<LossValues> {
    let g = Graph::new();
    let b = Binder::frozen(&g, &model.params);
    let setup = LossSetup { config: model.config(), route, ssl, tau, mode: QuantizeMode::default(), anchor: None };
    Ok(pretrain_loss(&b, &setup, batch, rng)?.values())
}
