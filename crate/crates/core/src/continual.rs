//! Continual-learning strategies over a sequence of language tasks: module
//! registration, trainable-set selection, L2 anchoring, parameter accounting
//! and forgetting metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Blueprint, Model, TaskEntry, TaskId};
use crate::numerics::{Float, Tensor, Var};
use crate::params::{classify, Binder, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[serde(alias = "warm")]
    WarmStart,
    #[serde(alias = "mh")]
    MultiHead,
    #[serde(alias = "mh-l2")]
    MultiHeadL2,
    Adapters,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] =
        [StrategyKind::WarmStart, StrategyKind::MultiHead, StrategyKind::MultiHeadL2, StrategyKind::Adapters];

    /// Per-task projection heads replace the shared projections.
    pub fn uses_heads(self) -> bool {
        matches!(self, StrategyKind::MultiHead | StrategyKind::MultiHeadL2)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            StrategyKind::WarmStart => "warm",
            StrategyKind::MultiHead => "mh",
            StrategyKind::MultiHeadL2 => "mh-l2",
            StrategyKind::Adapters => "adapters",
        }
    }

    /// Pretraining learning rate tuned for a second task.
    pub fn default_lr(self) -> f64 {
        match self {
            StrategyKind::WarmStart => 5e-4,
            StrategyKind::MultiHead | StrategyKind::MultiHeadL2 => 5e-5,
            StrategyKind::Adapters => 1e-4,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" | "warm-start" => Ok(StrategyKind::WarmStart),
            "mh" | "multi-head" => Ok(StrategyKind::MultiHead),
            "mh-l2" | "multi-head-l2" => Ok(StrategyKind::MultiHeadL2),
            "adapters" => Ok(StrategyKind::Adapters),
            other => Err(Error::Config(format!("unknown strategy `{other}` (expected warm|mh|mh-l2|adapters)"))),
        }
    }
}

/// Registry entry a strategy creates for a new task.
pub fn task_entry(kind: StrategyKind, blueprint: &Blueprint, task: TaskId) -> Result<TaskEntry> {
    if blueprint.strategy != kind {
        return Err(Error::StrategyChange { expected: blueprint.strategy.to_string(), got: kind.to_string() });
    }
    if blueprint.registry.contains(task) {
        return Err(Error::DuplicateTask(task));
    }
    let first = blueprint.registry.first();
    Ok(match kind {
        StrategyKind::WarmStart => {
            TaskEntry { id: task, quantizer: first.unwrap_or(task), heads: false, adapters: false, finetune: None }
        }
        StrategyKind::MultiHead | StrategyKind::MultiHeadL2 => {
            TaskEntry { id: task, quantizer: task, heads: true, adapters: false, finetune: None }
        }
        StrategyKind::Adapters => {
            TaskEntry { id: task, quantizer: task, heads: false, adapters: first.is_some(), finetune: None }
        }
    })
}

/// Adds `entry` to the blueprint and allocates whatever new tensors it implies;
/// existing tensors are never touched.
pub fn register_entry<F: Float, R: Rng>(model: &mut Model<F>, entry: TaskEntry, rng: &mut R) -> Result<()> {
    let task = entry.id;
    if model.blueprint.registry.contains(task) {
        return Err(Error::DuplicateTask(task));
    }
    model.blueprint.registry.push(entry)?;
    let fresh: Vec<_> = model.blueprint.layout().into_iter().filter(|s| !model.params.contains(&s.name)).collect();
    model.params.allocate(&fresh, rng)
}

/// Registers `task` under the model's strategy and returns its pretraining
/// trainable set.
pub fn apply_strategy<F: Float, R: Rng>(
    model: &mut Model<F>,
    task: TaskId,
    kind: StrategyKind,
    rng: &mut R,
) -> Result<BTreeSet<String>> {
    let entry = task_entry(kind, &model.blueprint, task)?;
    register_entry(model, entry, rng)?;
    FreezePolicy::pretraining(&model.blueprint, task)?.trainable_names(model.params.names())
}

/// Trainable parameter groups; every other parameter is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    All,
    Groups(BTreeSet<ParamGroup>),
}

impl FreezePolicy {
    /// Pretraining policy for `task` as registered in `blueprint`.
    pub fn pretraining(blueprint: &Blueprint, task: TaskId) -> Result<Self> {
        blueprint.registry.get(task)?;
        let first = blueprint.registry.first() == Some(task);
        Ok(match blueprint.strategy {
            StrategyKind::WarmStart => FreezePolicy::All,
            _ if first => FreezePolicy::All,
            StrategyKind::MultiHead | StrategyKind::MultiHeadL2 => FreezePolicy::Groups(BTreeSet::from([
                ParamGroup::PosConv,
                ParamGroup::Mhsa,
                ParamGroup::Ffn,
                ParamGroup::BaseNorm,
                ParamGroup::InputHead(task),
                ParamGroup::OutputHead(task),
                ParamGroup::Quantizer(task),
            ])),
            StrategyKind::Adapters => FreezePolicy::Groups(BTreeSet::from([
                ParamGroup::Adapters(task),
                ParamGroup::TaskNorm(task),
                ParamGroup::Quantizer(task),
            ])),
        })
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        let (group, _) = classify(name)?;
        Ok(match self {
            FreezePolicy::All => true,
            FreezePolicy::Groups(groups) => groups.contains(&group),
        })
    }

    pub fn trainable_names<'a>(&self, names: impl Iterator<Item = &'a String>) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for n in names {
            if self.is_trainable(n)? {
                out.insert(n.clone());
            }
        }
        Ok(out)
    }

    /// `(trainable, frozen)`, a partition of `names`.
    pub fn partition<'a>(&self, names: impl Iterator<Item = &'a String>) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
        let mut trainable = BTreeSet::new();
        let mut frozen = BTreeSet::new();
        for n in names {
            if self.is_trainable(n)? {
                trainable.insert(n.clone());
            } else {
                frozen.insert(n.clone());
            }
        }
        Ok((trainable, frozen))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2AnchorConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Anchored transformer blocks counted from the output end; `None` means
    /// the top half, rounded up.
    #[serde(default)]
    pub layers: Option<usize>,
    /// `η·Σ(θ−θ*)²` when true, the unsquared `η·‖θ−θ*‖₂` otherwise.
    #[serde(default = "default_squared")]
    pub squared: bool,
}

fn default_eta() -> f64 {
    0.1
}

fn default_squared() -> bool {
    true
}

impl Default for L2AnchorConfig {
    fn default() -> Self {
        Self { eta: default_eta(), layers: None, squared: default_squared() }
    }
}

impl L2AnchorConfig {
    pub fn anchored_layers(&self, total: usize) -> std::ops::Range<usize> {
        let k = self.layers.unwrap_or(total.div_ceil(2)).min(total);
        total - k..total
    }
}

/// Snapshot `θ*` of the anchored tensors at the end of the previous task.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor<F> {
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Anchor<F> {
    /// Every attention, feed-forward and norm tensor of the anchored blocks.
    pub fn snapshot(params: &ParamStore<F>, layers: usize, cfg: &L2AnchorConfig) -> Result<Self> {
        let range = cfg.anchored_layers(layers);
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            if let (ParamGroup::Mhsa | ParamGroup::Ffn | ParamGroup::BaseNorm, Some(l)) = classify(name)? {
                if range.contains(&l) {
                    tensors.insert(name.clone(), t.clone());
                }
            }
        }
        Ok(Self { tensors })
    }
}

/// `η·Σ(θ−θ*)²` over the anchor's tensors (or `η·‖θ−θ*‖₂`).
pub fn l2_anchor_penalty<'g, F: Float>(
    b: &Binder<'g, F>,
    anchor: &Anchor<F>,
    cfg: &L2AnchorConfig,
) -> Result<Var<'g, F>> {
    let g = b.graph();
    let mut total: Option<Var<'g, F>> = None;
    for (name, star) in &anchor.tensors {
        let live = b.get(name)?;
        if live.shape() != star.shape() {
            return Err(Error::dim("l2_anchor", format!("`{name}`: live {:?}, anchor {:?}", live.shape(), star.shape())));
        }
        let term = live.sub(&g.constant(star.clone()))?.square().sum();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let sq = total.unwrap_or_else(|| g.constant(Tensor::scalar(F::zero())));
    Ok(if cfg.squared { sq.scale(cfg.eta) } else { sq.sqrt().scale(cfg.eta) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub task: TaskId,
    pub strategy: StrategyKind,
    pub groups: BTreeMap<String, GroupCount>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

/// Exact counts from the blueprint's layout; nothing is allocated, so the
/// full preset can be reported cheaply.
pub fn parameter_report(blueprint: &Blueprint, task: TaskId) -> Result<ParameterReport> {
    let policy = FreezePolicy::pretraining(blueprint, task)?;
    let mut groups: BTreeMap<String, GroupCount> = BTreeMap::new();
    let (mut trainable, mut frozen) = (0, 0);
    for spec in blueprint.layout() {
        let (group, _) = classify(&spec.name)?;
        let slot = groups.entry(group.to_string()).or_default();
        let n = spec.numel();
        if policy.is_trainable(&spec.name)? {
            slot.trainable += n;
            trainable += n;
        } else {
            slot.frozen += n;
            frozen += n;
        }
    }
    Ok(ParameterReport { task, strategy: blueprint.strategy, groups, trainable, frozen, total: trainable + frozen })
}

/// Blueprint with tasks `1..=n` registered under `kind`, for accounting.
pub fn planned_blueprint(config: crate::model::ModelConfig, kind: StrategyKind, n: u32) -> Result<Blueprint> {
    let mut bp = Blueprint::new(config, kind);
    for t in 1..=n {
        let entry = task_entry(kind, &bp, TaskId(t))?;
        bp.registry.push(entry)?;
    }
    Ok(bp)
}

/// One finetune-evaluation of `eval_task` taken while `trained_task` was
/// being pretrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub trained_task: TaskId,
    pub eval_task: TaskId,
    pub step: u64,
    pub wer: f64,
    /// Last evaluation of `trained_task`'s pretraining phase.
    pub end_of_task: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub per_task: BTreeMap<TaskId, f64>,
    /// Mean of each seen task's latest WER.
    pub average_wer: f64,
}

/// `Δ_i = latest WER_i − min WER_i`, the minimum taken over points from the
/// end of task `i`'s own pretraining onward.
pub fn forgetting_metrics(history: &[EvalPoint]) -> Forgetting {
    let mut per_task = BTreeMap::new();
    let mut latest_sum = 0.0;
    let tasks: BTreeSet<TaskId> = history.iter().map(|p| p.eval_task).collect();
    for &task in &tasks {
        let points: Vec<&EvalPoint> = history.iter().filter(|p| p.eval_task == task).collect();
        let latest = points.last().expect("non-empty").wer;
        latest_sum += latest;
        let settled = points
            .iter()
            .filter(|p| p.trained_task > task || (p.trained_task == task && p.end_of_task))
            .map(|p| p.wer)
            .fold(f64::INFINITY, f64::min);
        let delta = if settled.is_finite() { latest - settled } else { 0.0 };
        per_task.insert(task, delta);
    }
    let average_wer = if tasks.is_empty() { 0.0 } else { latest_sum / tasks.len() as f64 };
    Forgetting { per_task, average_wer }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenCheck {
    pub checked: usize,
    pub first_difference: Option<String>,
}

impl FrozenCheck {
    pub fn ok(&self) -> bool {
        self.first_difference.is_none()
    }
}

/// Byte comparison of the named tensors of two stores.
pub fn verify_frozen<F: Float>(
    before: &ParamStore<F>,
    after: &ParamStore<F>,
    frozen: &BTreeSet<String>,
) -> Result<FrozenCheck> {
    for name in frozen {
        if !before.contains(name) || !after.contains(name) {
            return Err(Error::Manifest(format!("frozen parameter `{name}` missing from one side")));
        }
    }
    let first_difference = frozen
        .iter()
        .find(|n| !before.get(n).expect("checked").bits_eq(after.get(n).expect("checked")))
        .cloned();
    Ok(FrozenCheck { checked: frozen.len(), first_difference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn parse_strategy_names() {
        for k in StrategyKind::ALL {
            assert_eq!(k.cli_name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("ewc".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn anchored_layers_take_the_top() {
        let c = L2AnchorConfig::default();
        assert_eq!(c.anchored_layers(12), 6..12);
        assert_eq!(c.anchored_layers(2), 1..2);
        assert_eq!(L2AnchorConfig { layers: Some(20), ..c }.anchored_layers(3), 0..3);
    }

    #[test]
    fn forgetting_examples() {
        let p = |trained, wer, end| EvalPoint { trained_task: TaskId(trained), eval_task: TaskId(1), step: 0, wer, end_of_task: end };
        let flat = forgetting_metrics(&[p(1, 0.3, true), p(2, 0.3, false), p(2, 0.3, true)]);
        assert_eq!(flat.per_task[&TaskId(1)], 0.0);
        let worse = forgetting_metrics(&[p(1, 0.20, true), p(2, 0.35, true)]);
        assert!((worse.per_task[&TaskId(1)] - 0.15).abs() < 1e-12);
        // Points before the end of the task's own training do not count.
        let early = forgetting_metrics(&[p(1, 0.1, false), p(1, 0.2, true), p(2, 0.2, true)]);
        assert_eq!(early.per_task[&TaskId(1)], 0.0);
    }

    #[test]
    fn strategy_change_rejected() {
        let bp = Blueprint::new(ModelConfig::desk(), StrategyKind::Adapters);
        assert!(matches!(
            task_entry(StrategyKind::WarmStart, &bp, TaskId(1)),
            Err(Error::StrategyChange { .. })
        ));
    }
}
