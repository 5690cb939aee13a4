//! Model configuration, presets, the task registry and routing.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::continual::StrategyKind;
use crate::encoder::{self, AdapterConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig};
use crate::numerics::Float;
use crate::params::{ParamSpec, ParamStore};
use crate::quantizer::{self, QuantizerConfig};

/// Task identifier handed to every train and evaluation call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    /// Language adapters inserted during pretraining of later tasks.
    pub adapter: AdapterConfig,
    /// Adapters stacked on top of the pretraining adapters for finetuning.
    pub finetune_adapter: AdapterConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// CPU-scale preset with the same block structure as the full model.
    pub fn desk() -> Self {
        Self {
            frontend: FrontendConfig::desk(),
            encoder: EncoderConfig::desk(),
            quantizer: QuantizerConfig::desk(),
            adapter: AdapterConfig { bottleneck: 16, init_scale: 0.0 },
            finetune_adapter: AdapterConfig { bottleneck: 16, init_scale: 0.0 },
            norm_eps: default_norm_eps(),
        }
    }

    /// BASE-sized model: 7 conv blocks, 12 transformer blocks of width 768.
    pub fn full() -> Self {
        Self {
            frontend: FrontendConfig::full(),
            encoder: EncoderConfig::full(),
            quantizer: QuantizerConfig::full(),
            adapter: AdapterConfig { bottleneck: 512, init_scale: 0.0 },
            finetune_adapter: AdapterConfig { bottleneck: 256, init_scale: 0.0 },
            norm_eps: default_norm_eps(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.frontend.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.quantizer.validate()?;
        for a in [&self.adapter, &self.finetune_adapter] {
            if a.bottleneck == 0 {
                return Err(Error::Config("adapter bottleneck must be ≥ 1".into()));
            }
        }
        Ok(())
    }
}

/// Which optional modules a task's compute path goes through in finetuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneEntry {
    pub vocab_size: usize,
    pub adapters: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: TaskId,
    /// Quantizer used for contrastive targets (a previous task's under warm start).
    pub quantizer: TaskId,
    /// Task-specific projection heads replace the shared projections.
    pub heads: bool,
    /// Pretraining adapters and task layer norms are on the path.
    pub adapters: bool,
    pub finetune: Option<FinetuneEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskEntry>,
}

impl TaskRegistry {
    pub fn get(&self, id: TaskId) -> Result<&TaskEntry> {
        self.tasks.iter().find(|t| t.id == id).ok_or(Error::MissingTask(id))
    }

    pub fn get_mut(&mut self, id: TaskId) -> Result<&mut TaskEntry> {
        self.tasks.iter_mut().find(|t| t.id == id).ok_or(Error::MissingTask(id))
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.tasks.iter().any(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    pub fn first(&self) -> Option<TaskId> {
        self.tasks.first().map(|t| t.id)
    }

    pub fn last(&self) -> Option<TaskId> {
        self.tasks.last().map(|t| t.id)
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn push(&mut self, entry: TaskEntry) -> Result<()> {
        if self.contains(entry.id) {
            return Err(Error::DuplicateTask(entry.id));
        }
        self.tasks.push(entry);
        Ok(())
    }
}

/// Configuration + strategy + registry: everything that determines the set of
/// parameter names and shapes, without any values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blueprint {
    pub config: ModelConfig,
    pub strategy: StrategyKind,
    pub registry: TaskRegistry,
}

impl Blueprint {
    pub fn new(config: ModelConfig, strategy: StrategyKind) -> Self {
        Self { config, strategy, registry: TaskRegistry::default() }
    }

    /// Parameters that exist before any task is registered.
    pub fn base_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let mut specs = frontend::layout(&cfg.frontend);
        specs.extend(encoder::base_layout(
            &cfg.encoder,
            cfg.latent_dim(),
            cfg.quantizer.target_dim,
            !self.strategy.uses_heads(),
        ));
        specs
    }

    /// Full parameter list implied by the registry.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let mut specs = self.base_specs();
        let mut previous: Option<TaskId> = None;
        for entry in &self.registry.tasks {
            if entry.quantizer == entry.id {
                specs.extend(quantizer::layout(&cfg.quantizer, cfg.latent_dim(), entry.id));
            }
            if entry.heads {
                specs.extend(encoder::head_layout(
                    &cfg.encoder,
                    cfg.latent_dim(),
                    cfg.quantizer.target_dim,
                    entry.id,
                    previous,
                ));
            }
            if entry.adapters {
                specs.extend(encoder::task_layout(&cfg.encoder, &cfg.adapter, entry.id));
            }
            if let Some(ft) = &entry.finetune {
                specs.extend(crate::finetune::layout(cfg, entry.id, ft));
            }
            previous = Some(entry.id);
        }
        specs
    }

    pub fn route(&self, task: TaskId) -> Result<Route> {
        let entry = self.registry.get(task)?;
        Ok(Route {
            task,
            input_proj: if entry.heads { format!("heads.{task}.pre") } else { "encoder.input_proj".into() },
            output_proj: if entry.heads { format!("heads.{task}.post") } else { "encoder.final_proj".into() },
            quantizer: format!("quantizer.{}", entry.quantizer),
            adapters: entry.adapters.then(|| format!("adapters.{task}")),
            task_norm: entry.adapters.then(|| format!("task_norm.{task}")),
            finetune_adapters: entry
                .finetune
                .as_ref()
                .filter(|f| f.adapters)
                .map(|_| format!("finetune.{task}.adapters")),
        })
    }
}

/// Parameter prefixes a task's forward pass reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub task: TaskId,
    pub input_proj: String,
    pub output_proj: String,
    pub quantizer: String,
    pub adapters: Option<String>,
    pub task_norm: Option<String>,
    pub finetune_adapters: Option<String>,
}

impl Route {
    /// Base path: shared projections and layer norms, no adapters.
    pub fn base(input_proj: &str, output_proj: &str, quantizer: &str, task: TaskId) -> Self {
        Self {
            task,
            input_proj: input_proj.into(),
            output_proj: output_proj.into(),
            quantizer: quantizer.into(),
            adapters: None,
            task_norm: None,
            finetune_adapters: None,
        }
    }

    /// Same path with pretraining adapters and task norms removed.
    pub fn without_adapters(&self) -> Self {
        Self { adapters: None, task_norm: None, ..self.clone() }
    }

    /// Name of a per-layer norm (`attn_norm` / `ffn_norm`) on this path.
    pub fn layer_norm(&self, layer: usize, which: &str) -> String {
        match &self.task_norm {
            Some(prefix) => format!("{prefix}.layer{layer}.{which}"),
            None => format!("encoder.layer{layer}.{which}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub blueprint: Blueprint,
    pub params: ParamStore<F>,
}

impl<F: Float> Model<F> {
    pub fn new<R: Rng>(config: ModelConfig, strategy: StrategyKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blueprint = Blueprint::new(config, strategy);
        let mut params = ParamStore::new();
        params.allocate(&blueprint.base_specs(), rng)?;
        Ok(Self { blueprint, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.blueprint.config
    }

    pub fn strategy(&self) -> StrategyKind {
        self.blueprint.strategy
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.blueprint.registry
    }

    pub fn route(&self, task: TaskId) -> Result<Route> {
        self.blueprint.route(task)
    }

    /// Shapes of the stored tensors, by name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Checks the stored tensors against the blueprint's layout.
    pub fn check_layout(&self) -> Result<()> {
        let expected: BTreeMap<String, Vec<usize>> =
            self.blueprint.layout().into_iter().map(|s| (s.name, s.shape)).collect();
        let actual = self.shapes();
        for (name, shape) in &expected {
            match actual.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(s) if s != shape => {
                    return Err(Error::dim("layout", format!("`{name}`: stored {s:?}, expected {shape:?}")))
                }
                _ => {}
            }
        }
        if let Some(extra) = actual.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Manifest(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model { blueprint: self.blueprint.clone(), params: self.params.cast() }
    }
}
