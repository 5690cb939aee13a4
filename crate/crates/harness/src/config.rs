//! Experiment configuration, read from TOML with unknown keys rejected.
//!
//! ```toml
//! preset = "desk"            # desk | full | custom (custom needs [model])
//! strategy = "adapters"      # warm | mh | mh-l2 | adapters
//! seeds = [0, 1, 2]
//! corpus_seed = 0
//!
//! [pretrain]
//! steps = 500
//!
//! [finetune]
//! steps = 400
//!
//! [eval]
//! every = 250
//! finetune_utterances = 64
//!
//! [[tasks]]
//! [tasks.synthetic]
//! language = "low"
//! alphabet = 4
//! band_hz = [300.0, 1500.0]
//! utterances = 400
//!
//! [[tasks]]
//! [tasks.wav]
//! language = "recorded"
//! dir = "data/recorded"
//! manifest = "data/recorded/manifest.tsv"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use polyglot_core::continual::StrategyKind;
use polyglot_core::finetune::FinetuneConfig;
use polyglot_core::model::ModelConfig;
use polyglot_core::train::PretrainConfig;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_disjoint, gen_corpus, Dataset, SyntheticLangSpec};
use crate::error::{HarnessError, Result};
use crate::wav::ingest_wav;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every `n` pretraining updates of a task; the end of every
    /// task is always evaluated.
    #[serde(default)]
    pub every: Option<u64>,
    /// Labelled utterances each disposable finetune trains on.
    #[serde(default = "default_ft_utterances")]
    pub finetune_utterances: usize,
    /// Held-out labelled utterances scored after finetuning; 0 scores the
    /// finetuning set itself.
    #[serde(default)]
    pub test_utterances: usize,
}

fn default_ft_utterances() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: None, finetune_utterances: default_ft_utterances(), test_utterances: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavSource {
    pub language: String,
    pub dir: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Output vocabulary size; defaults to one past the largest token id.
    #[serde(default)]
    pub alphabet: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    Synthetic(SyntheticLangSpec),
    Wav(WavSource),
}

impl TaskSource {
    pub fn language(&self) -> &str {
        match self {
            TaskSource::Synthetic(s) => &s.language,
            TaskSource::Wav(w) => &w.language,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub strategy: StrategyKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed of the synthetic corpora, shared by every run seed.
    #[serde(default)]
    pub corpus_seed: u64,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub tasks: Vec<TaskSource>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    /// Reads `path`; relative corpus paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for t in &mut cfg.tasks {
            if let TaskSource::Wav(w) = t {
                if w.dir.is_relative() {
                    w.dir = base.join(&w.dir);
                }
                if let Some(m) = &mut w.manifest {
                    if m.is_relative() {
                        *m = base.join(&*m);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        match (self.preset, &self.model) {
            (Preset::Custom, Some(m)) => m.clone(),
            (Preset::Full, _) => ModelConfig::full(),
            _ => ModelConfig::desk(),
        }
    }

    /// Checks that need nothing beyond the file itself.
    fn validate_shape(&self) -> Result<()> {
        match (self.preset, &self.model) {
            (Preset::Custom, None) => return Err(HarnessError::Config("preset `custom` needs a [model] table".into())),
            (Preset::Desk | Preset::Full, Some(_)) => {
                return Err(HarnessError::Config("a [model] table is only read with preset `custom`".into()))
            }
            _ => {}
        }
        self.model_config().validate()?;
        if self.tasks.is_empty() {
            return Err(HarnessError::Config("at least one task is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("`seeds` must list at least one seed".into()));
        }
        if self.pretrain.steps == 0 || self.finetune.steps == 0 {
            return Err(HarnessError::Config("pretrain and finetune step counts must be ≥ 1".into()));
        }
        if self.eval.every == Some(0) {
            return Err(HarnessError::Config("eval.every must be ≥ 1".into()));
        }
        if self.eval.finetune_utterances == 0 {
            return Err(HarnessError::Config("eval.finetune_utterances must be ≥ 1".into()));
        }
        let synthetic: Vec<&SyntheticLangSpec> = self
            .tasks
            .iter()
            .filter_map(|t| match t {
                TaskSource::Synthetic(s) => Some(s),
                TaskSource::Wav(_) => None,
            })
            .collect();
        for s in &synthetic {
            s.validate()?;
        }
        check_disjoint(synthetic)?;
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|b| b.language() == a.language()) {
                return Err(HarnessError::Config(format!("language `{}` appears twice", a.language())));
            }
        }
        Ok(())
    }

    /// Full validation, including that every corpus on disk is reachable.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        for t in &self.tasks {
            if let TaskSource::Wav(w) = t {
                if !w.dir.is_dir() {
                    return Err(HarnessError::Config(format!("corpus directory {} does not exist", w.dir.display())));
                }
                if let Some(m) = &w.manifest {
                    if !m.is_file() {
                        return Err(HarnessError::Config(format!("manifest {} does not exist", m.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Dataset of task `index` (0-based).
    pub fn load_corpus(&self, index: usize) -> Result<Dataset> {
        match self.tasks.get(index) {
            Some(TaskSource::Synthetic(s)) => gen_corpus(s, self.corpus_seed),
            Some(TaskSource::Wav(w)) => ingest_wav(&w.dir, w.manifest.as_deref(), &w.language, w.alphabet),
            None => Err(HarnessError::Config(format!("task {} is not configured ({} tasks)", index + 1, self.tasks.len()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
strategy = "adapters"
[pretrain]
steps = 10
[[tasks]]
[tasks.synthetic]
language = "a"
alphabet = 3
band_hz = [300.0, 900.0]
utterances = 8
"#;

    #[test]
    fn minimal_file_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.pretrain.warmup_frac, 0.08);
        assert_eq!(cfg.model_config(), ModelConfig::desk());
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("steps = 10", "steps = 10\nwarmup = 0.1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(HarnessError::Config(_))));
        let text = format!("colour = \"red\"\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn overlapping_languages_are_a_config_error() {
        let text = format!(
            "{MINIMAL}\n[[tasks]]\n[tasks.synthetic]\nlanguage = \"b\"\nalphabet = 3\nband_hz = [800.0, 1600.0]\nutterances = 8\n"
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn custom_preset_needs_a_model() {
        let text = MINIMAL.replace("strategy", "preset = \"custom\"\nstrategy");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
