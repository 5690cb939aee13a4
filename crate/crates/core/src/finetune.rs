//! Supervised CTC finetuning on a disposable copy of a pretrained model,
//! greedy decoding and word error rate.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::continual::{register_entry, StrategyKind};
use crate::encoder::{self, adapter_specs, MaskSpec};
use crate::error::{Error, Result};
use crate::frontend::{self, Waveform};
use crate::model::{FinetuneEntry, Model, ModelConfig, Route, TaskId};
use crate::numerics::{argmax, Float, Graph, Tensor, Var};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{classify, fan_in, linear_specs, Binder, ParamGroup, ParamSpec, ParamStore};

/// Output classes: index 0 is the CTC blank, token `i` is class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub const BLANK: usize = 0;

    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = symbols.iter().collect();
        if unique.len() != symbols.len() {
            return Err(Error::Config("vocabulary symbols must be unique".into()));
        }
        Ok(Self { symbols })
    }

    /// Symbols `"0".."k-1"`.
    pub fn numbered(k: usize) -> Self {
        Self { symbols: (0..k).map(|i| i.to_string()).collect() }
    }

    /// Class count including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn class_of(&self, token: usize) -> Result<usize> {
        if token >= self.symbols.len() {
            return Err(Error::Config(format!("token {token} outside vocabulary of {}", self.symbols.len())));
        }
        Ok(token + 1)
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens.iter().map(|&t| self.class_of(t)).collect()
    }

    /// Class ids back to tokens; the blank never appears in decoder output.
    pub fn decode(&self, classes: &[usize]) -> Vec<usize> {
        classes.iter().filter(|&&c| c != Self::BLANK).map(|&c| c - 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriStageSchedule {
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_hold")]
    pub hold_frac: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_final_scale")]
    pub final_scale: f64,
    pub total_steps: u64,
}

fn default_warmup() -> f64 {
    0.10
}
fn default_hold() -> f64 {
    0.40
}
fn default_init_scale() -> f64 {
    0.01
}
fn default_final_scale() -> f64 {
    0.05
}

impl TriStageSchedule {
    pub fn new(max_lr: f64, total_steps: u64) -> Self {
        Self {
            max_lr,
            warmup_frac: default_warmup(),
            hold_frac: default_hold(),
            init_scale: default_init_scale(),
            final_scale: default_final_scale(),
            total_steps,
        }
    }
}

/// Linear `init·max → max`, flat `max`, then linear `max → final·max`.
pub fn tri_stage_lr(step: u64, s: &TriStageSchedule) -> f64 {
    let total = s.total_steps.max(1) as f64;
    let x = (step as f64).min(total);
    let warm = s.warmup_frac * total;
    let hold_end = warm + s.hold_frac * total;
    let scale = if x < warm {
        s.init_scale + (1.0 - s.init_scale) * x / warm
    } else if x <= hold_end {
        1.0
    } else {
        let decay = total - hold_end;
        1.0 + (s.final_scale - 1.0) * (x - hold_end) / decay
    };
    s.max_lr * scale
}

/// Classification head plus, for adapter routes, stacked finetune adapters.
pub fn layout(cfg: &ModelConfig, task: TaskId, entry: &FinetuneEntry) -> Vec<ParamSpec> {
    let d = cfg.encoder.model_dim;
    let mut specs = Vec::new();
    if entry.adapters {
        for l in 0..cfg.encoder.layers {
            for site in ["attn", "ffn"] {
                specs.extend(adapter_specs(&format!("finetune.{task}.adapters.layer{l}.{site}"), d, &cfg.finetune_adapter));
            }
        }
    }
    specs.extend(linear_specs(&format!("finetune.{task}.head"), d, entry.vocab_size, fan_in(d)));
    specs
}

/// Copy of `pretrained` with a finetune head for `task` and its trainable set.
///
/// Baselines train the input map, positional conv and every transformer
/// block; the adapter strategy trains only the stacked finetune adapters, the
/// layer norms on the task's path and the head.
pub fn build_finetune_model<F: Float, R: Rng>(
    pretrained: &Model<F>,
    task: TaskId,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Model<F>, BTreeSet<String>)> {
    let mut model = pretrained.clone();
    let mut entry = model.blueprint.registry.get(task)?.clone();
    if entry.finetune.is_some() {
        return Err(Error::Config(format!("task {task} already carries a finetune head")));
    }
    let adapters = model.strategy() == StrategyKind::Adapters;
    entry.finetune = Some(FinetuneEntry { vocab_size, adapters });
    model.blueprint.registry.get_mut(task)?.finetune = entry.finetune.clone();
    let fresh: Vec<_> = model.blueprint.layout().into_iter().filter(|s| !model.params.contains(&s.name)).collect();
    model.params.allocate(&fresh, rng)?;
    let route = model.route(task)?;
    for name in used_names(&model.blueprint.config, &route) {
        model.params.get(&name)?;
    }
    let trainable = finetune_trainable(&model.params, &route, adapters)?;
    Ok((model, trainable))
}

fn finetune_trainable<F: Float>(params: &ParamStore<F>, route: &Route, adapters: bool) -> Result<BTreeSet<String>> {
    let task = route.task;
    let mut out = BTreeSet::new();
    for name in params.names() {
        let (group, layer) = classify(name)?;
        let keep = if adapters {
            match group {
                ParamGroup::FinetuneAdapters(t) | ParamGroup::FinetuneHead(t) => t == task,
                ParamGroup::TaskNorm(t) => t == task,
                ParamGroup::BaseNorm => route.task_norm.is_none() && layer.is_some(),
                _ => false,
            }
        } else {
            match group {
                ParamGroup::PosConv | ParamGroup::Mhsa | ParamGroup::Ffn | ParamGroup::BaseNorm => true,
                ParamGroup::InputProj => route.input_proj == "encoder.input_proj",
                ParamGroup::InputHead(t) | ParamGroup::FinetuneHead(t) => t == task,
                _ => false,
            }
        };
        if keep {
            out.insert(name.clone());
        }
    }
    Ok(out)
}

/// Names a finetune forward pass on `route` must find.
fn used_names(cfg: &ModelConfig, route: &Route) -> Vec<String> {
    let mut names = vec![format!("{}.weight", route.input_proj), format!("finetune.{}.head.weight", route.task)];
    if let Some(p) = &route.adapters {
        names.push(format!("{p}.layer0.attn.fc1.weight"));
    }
    if cfg.encoder.layers > 0 {
        names.push(format!("{}.gain", route.layer_norm(0, "attn_norm")));
    }
    names
}

/// Per-frame log-probabilities `[T, |V|]` for one waveform.
pub fn finetune_log_probs<'g, F: Float>(
    b: &Binder<'g, F>,
    cfg: &ModelConfig,
    route: &Route,
    w: &Waveform,
) -> Result<Var<'g, F>> {
    let eps = cfg.norm_eps;
    let z = frontend::forward(b, &cfg.frontend, w, eps)?.latent;
    let x = encoder::project_input(b, route, &z)?;
    let c = encoder::encode(b, &cfg.encoder, route, &x, &MaskSpec::empty(), eps)?.context;
    let head = format!("finetune.{}.head", route.task);
    c.linear(&b.get(&format!("{head}.weight"))?, &b.get(&format!("{head}.bias"))?)?.log_softmax()
}

/// `−log P(target | log_probs)` summed over all alignments.
pub fn ctc_loss<'g, F: Float>(log_probs: &Var<'g, F>, target: &[usize]) -> Result<Var<'g, F>> {
    log_probs.ctc_loss(target, Vocab::BLANK)
}

/// Per-frame argmax, consecutive repeats merged, blanks dropped.
pub fn greedy_decode<F: Float>(log_probs: &Tensor<F>) -> Result<Vec<usize>> {
    let (_, v) = log_probs.dims2()?;
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks_exact(v) {
        let c = argmax(row);
        if Some(c) != prev && c != Vocab::BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    Ok(out)
}

/// Word-level edit distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=hyp.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = diag + usize::from(h != r);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[hyp.len()]
}

/// Edit distance normalized by the reference length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug)]
pub struct LabelledExample {
    pub waveform: Waveform,
    /// Token ids, not yet shifted past the blank.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    /// Peak rate; `None` picks the strategy default.
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_ft_batch() -> usize {
    4
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: default_ft_batch(), max_lr: None, clip_norm: None, adam: AdamConfig::default() }
    }
}

impl FinetuneConfig {
    pub fn lr_for(&self, kind: StrategyKind) -> f64 {
        self.max_lr.unwrap_or(match kind {
            StrategyKind::Adapters => 8e-4,
            _ => 5e-4,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<F> {
    pub model: Model<F>,
    pub trainable: BTreeSet<String>,
    pub losses: Vec<f64>,
}

/// Trains a disposable copy of `pretrained` for `task` on `data`.
pub fn finetune<F: Float, R: Rng>(
    pretrained: &Model<F>,
    task: TaskId,
    vocab: &Vocab,
    data: &[LabelledExample],
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome<F>> {
    if data.is_empty() {
        return Err(Error::Config("finetuning needs at least one labelled example".into()));
    }
    let (mut model, trainable) = build_finetune_model(pretrained, task, vocab.size(), rng)?;
    let route = model.route(task)?;
    let targets: Vec<Vec<usize>> = data.iter().map(|e| vocab.encode(&e.tokens)).collect::<Result<_>>()?;
    let sched = TriStageSchedule::new(cfg.lr_for(model.strategy()), cfg.steps);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let g = Graph::new();
        let b = Binder::new(&g, &model.params, &trainable);
        let mut total: Option<Var<'_, F>> = None;
        for &i in &batch {
            let lp = finetune_log_probs(&b, model.config(), &route, &data[i].waveform)?;
            let l = ctc_loss(&lp, &targets[i])?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("finetune loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        let mut pg = b.param_grads(&grads);
        drop(b);
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut pg, c);
        }
        adam.step(&mut model.params, &pg, tri_stage_lr(step, &sched))?;
        losses.push(value);
    }
    Ok(FinetuneOutcome { model, trainable, losses })
}

/// Greedy transcripts for `data` (tokens, blank removed).
pub fn transcribe<F: Float>(model: &Model<F>, task: TaskId, vocab: &Vocab, waves: &[&Waveform]) -> Result<Vec<Vec<usize>>> {
    let route = model.route(task)?;
    waves
        .iter()
        .map(|w| {
            let g = Graph::new();
            let b = Binder::frozen(&g, &model.params);
            let lp = finetune_log_probs(&b, model.config(), &route, w)?;
            Ok(vocab.decode(&greedy_decode(&lp.value())?))
        })
        .collect()
}

/// Corpus WER: total edits over total reference tokens.
pub fn evaluate_wer<F: Float>(model: &Model<F>, task: TaskId, vocab: &Vocab, data: &[LabelledExample]) -> Result<f64> {
    let waves: Vec<&Waveform> = data.iter().map(|e| &e.waveform).collect();
    let hyps = transcribe(model, task, vocab, &waves)?;
    let (mut edits, mut words) = (0, 0);
    for (h, e) in hyps.iter().zip(data) {
        if e.tokens.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += edit_distance(h, &e.tokens);
        words += e.tokens.len();
    }
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / words as f64)
}

/// Registers a finetune-only task entry, used by the never-pretrained control.
pub fn ensure_task<F: Float, R: Rng>(model: &mut Model<F>, task: TaskId, rng: &mut R) -> Result<()> {
    if model.registry().contains(task) {
        return Ok(());
    }
    let entry = crate::continual::task_entry(model.strategy(), &model.blueprint, task)?;
    register_entry(model, entry, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tri_stage_landmarks() {
        let s = TriStageSchedule::new(1e-3, 1000);
        assert!((tri_stage_lr(0, &s) - 1e-5).abs() < 1e-15);
        assert!((tri_stage_lr(100, &s) - 1e-3).abs() < 1e-15);
        assert!((tri_stage_lr(300, &s) - 1e-3).abs() < 1e-15);
        assert!((tri_stage_lr(500, &s) - 1e-3).abs() < 1e-15);
        assert!((tri_stage_lr(1000, &s) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn greedy_collapse_rules() {
        let one_hot = |seq: &[usize]| {
            let mut d = vec![-10.0f64; seq.len() * 3];
            for (t, &c) in seq.iter().enumerate() {
                d[t * 3 + c] = 0.0;
            }
            Tensor::new(vec![seq.len(), 3], d).unwrap()
        };
        assert_eq!(greedy_decode(&one_hot(&[1, 1, 0, 2])).unwrap(), vec![1, 2]);
        assert_eq!(greedy_decode(&one_hot(&[0, 0, 0])).unwrap(), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot(&[1, 0, 1])).unwrap(), vec![1, 1]);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((wer(&["a", "x", "c"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a", "b", "c", "d"], &["a"]).unwrap(), 3.0);
        assert!(matches!(wer::<u8>(&[1], &[]), Err(Error::EmptyReference)));
    }

    #[test]
    fn vocab_shifts_past_blank() {
        let v = Vocab::numbered(3);
        assert_eq!(v.size(), 4);
        assert_eq!(v.encode(&[2, 0]).unwrap(), vec![3, 1]);
        assert_eq!(v.decode(&[3, 0, 1]), vec![2, 0]);
        assert!(v.class_of(3).is_err());
    }
}
