//! Task-sequence driver: pretrain task `i`, then finetune a disposable copy
//! for every task seen so far and record its WER.
//!
//! Every random draw comes from a stream derived from the run seed and the
//! phase, so a record can be recomputed from the checkpoint taken at its
//! step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use polyglot_core::checkpoint::Checkpoint;
use polyglot_core::continual::{
    apply_strategy, forgetting_metrics, parameter_report, Anchor, EvalPoint, Forgetting, ParameterReport, StrategyKind,
};
use polyglot_core::finetune::{evaluate_wer, finetune, LabelledExample, Vocab};
use polyglot_core::frontend::Waveform;
use polyglot_core::model::{Model, TaskId};
use polyglot_core::quantizer::anneal;
use polyglot_core::train::{evaluate_pretrain_loss, LossValues, Pretrainer, StepReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::Dataset;
use crate::error::{HarnessError, Result};

const INIT: u64 = 1;
const REGISTER: u64 = 2;
const PRETRAIN: u64 = 3;
const FINETUNE: u64 = 4;
const PROBE: u64 = 5;

/// Independent stream for `(seed, phase, index)`.
pub fn derive_rng(seed: u64, phase: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase << 32 | index);
    rng
}

/// Stream of the disposable finetune for `task`; shared by every evaluation
/// point, so unchanged parameters give unchanged records.
pub fn finetune_rng(seed: u64, task: TaskId) -> ChaCha8Rng {
    derive_rng(seed, FINETUNE, task.0 as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub trained_task: TaskId,
    pub eval_task: TaskId,
    /// Pretraining updates applied so far, over all tasks.
    pub step: u64,
    pub task_step: u64,
    pub end_of_task: bool,
    pub wer: f64,
    pub finetune_loss: f64,
    /// Pretraining objective of `eval_task` on a fixed probe batch.
    pub pretrain: LossValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
    /// Pretraining updates in the phase, 0 for evaluation phases.
    pub steps: u64,
}

impl PhaseTiming {
    pub fn mean_step_seconds(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.seconds / self.steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub phase: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub records: Vec<EvalRecord>,
    pub parameters: Vec<ParameterReport>,
    pub phases: Vec<PhaseTiming>,
    pub forgetting: Option<Forgetting>,
    pub failure: Option<Failure>,
}

impl RunReport {
    pub fn eval_points(&self) -> Vec<EvalPoint> {
        self.records
            .iter()
            .map(|r| EvalPoint {
                trained_task: r.trained_task,
                eval_task: r.eval_task,
                step: r.step,
                wer: r.wer,
                end_of_task: r.end_of_task,
            })
            .collect()
    }

    /// Records of `task` in step order.
    pub fn trace(&self, task: TaskId) -> Vec<&EvalRecord> {
        self.records.iter().filter(|r| r.eval_task == task).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `metrics.jsonl`, `report.json` and checkpoints.
    pub out: Option<PathBuf>,
    /// Persist a checkpoint at every evaluation point.
    pub checkpoints: bool,
}

/// Outcome of finetuning and scoring one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub wer: f64,
    pub finetune_loss: f64,
    pub pretrain: LossValues,
}

pub fn new_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model<f32>> {
    Ok(Model::new(cfg.model_config(), cfg.strategy, &mut derive_rng(seed, INIT, 0))?)
}

/// Registers `task` and returns its trainable set plus, under mh-l2, the
/// anchor taken from the parameters as they stand.
pub fn begin_task(
    model: &mut Model<f32>,
    task: TaskId,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(std::collections::BTreeSet<String>, Option<Anchor<f32>>)> {
    let anchor = if model.strategy() == StrategyKind::MultiHeadL2 && !model.registry().is_empty() {
        Some(Anchor::snapshot(&model.params, model.config().encoder.layers, &cfg.pretrain.anchor)?)
    } else {
        None
    };
    let trainable = apply_strategy(model, task, model.strategy(), &mut derive_rng(seed, REGISTER, task.0 as u64))?;
    Ok((trainable, anchor))
}

/// Runs the configured pretraining updates for a registered `task`; `hook`
/// sees the model after every update.
pub fn pretrain_task(
    model: &mut Model<f32>,
    task: TaskId,
    trainable: std::collections::BTreeSet<String>,
    anchor: Option<Anchor<f32>>,
    data: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    mut hook: impl FnMut(&Model<f32>, &StepReport) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(HarnessError::Data(format!("corpus `{}` is empty", data.language)));
    }
    let mut trainer = Pretrainer::new(model, task, trainable, cfg.pretrain.clone(), anchor)?;
    let mut rng = derive_rng(seed, PRETRAIN, task.0 as u64);
    let bs = cfg.pretrain.batch_size;
    for _ in 0..cfg.pretrain.steps {
        let report = trainer.step(
            model,
            |r: &mut ChaCha8Rng| (0..bs).map(|_| data.utterances[r.random_range(0..data.len())].waveform.clone()).collect(),
            &mut rng,
        )?;
        hook(model, &report)?;
    }
    Ok(())
}

/// Finetuning and scoring splits of a task's corpus.
pub fn eval_splits(data: &Dataset, cfg: &ExperimentConfig) -> Result<(Vec<LabelledExample>, Vec<LabelledExample>)> {
    let (n, m) = (cfg.eval.finetune_utterances, cfg.eval.test_utterances);
    if data.labelled_count() < n + m {
        return Err(HarnessError::Data(format!(
            "corpus `{}` has {} transcribed utterances, evaluation needs {}",
            data.language,
            data.labelled_count(),
            n + m
        )));
    }
    let train = data.labelled(0, n);
    let test = if m == 0 { train.clone() } else { data.labelled(n, m) };
    Ok((train, test))
}

/// Disposable finetune of `model` for `task`, scored on the test split.
/// Depends only on the model, the corpus, the config and `(seed, task)`.
pub fn evaluate_task(model: &Model<f32>, task: TaskId, data: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<TaskEval> {
    let (train, test) = eval_splits(data, cfg)?;
    let vocab = Vocab::numbered(data.alphabet);
    let outcome = finetune(model, task, &vocab, &train, &cfg.finetune, &mut finetune_rng(seed, task))?;
    let wer = evaluate_wer(&outcome.model, task, &vocab, &test)?;
    let probe: Vec<&Waveform> = train.iter().take(cfg.pretrain.batch_size).map(|e| &e.waveform).collect();
    let tau = anneal(0, &model.config().quantizer.temperature);
    let pretrain = evaluate_pretrain_loss(
        model,
        &model.route(task)?,
        &cfg.pretrain.ssl,
        tau,
        &probe,
        &mut derive_rng(seed, PROBE, task.0 as u64),
    )?;
    Ok(TaskEval { wer, finetune_loss: outcome.losses.last().copied().unwrap_or(f64::NAN), pretrain })
}

struct Sink {
    out: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Sink {
    fn open(out: Option<&Path>) -> Result<Self> {
        let Some(dir) = out else { return Ok(Self { out: None, log: None }) };
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join("metrics.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| HarnessError::io(format!("opening {}", path.display()), e))?;
        Ok(Self { out: Some(dir.to_path_buf()), log: Some(BufWriter::new(file)) })
    }

    fn emit(&mut self, event: &str, body: &impl Serialize) -> Result<()> {
        if let Some(log) = &mut self.log {
            let mut v = serde_json::to_value(body).map_err(polyglot_core::Error::from)?;
            if let serde_json::Value::Object(m) = &mut v {
                m.insert("event".into(), event.into());
            }
            writeln!(log, "{v}").map_err(|e| HarnessError::io("writing metrics", e))?;
        }
        Ok(())
    }

    fn finish(&mut self, report: &RunReport) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| HarnessError::io("writing metrics", e))?;
        }
        if let Some(dir) = &self.out {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(report).map_err(polyglot_core::Error::from)?;
            fs::write(&path, text).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }
}

/// Runs the whole task sequence for one seed. Failures end the run early and
/// are recorded in the returned (and persisted) report.
pub fn run_sequence(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> RunReport {
    let mut report = RunReport {
        seed,
        strategy: cfg.strategy,
        records: Vec::new(),
        parameters: Vec::new(),
        phases: Vec::new(),
        forgetting: None,
        failure: None,
    };
    let mut sink = match Sink::open(opts.out.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            report.failure = Some(Failure { phase: "setup".into(), message: e.to_string(), exit_code: e.exit_code() });
            return report;
        }
    };
    let mut phase = String::from("setup");
    if let Err(e) = drive(cfg, seed, opts, &mut report, &mut sink, &mut phase) {
        let failure = Failure { phase, message: e.to_string(), exit_code: e.exit_code() };
        let _ = sink.emit("failure", &failure);
        report.failure = Some(failure);
    }
    report.forgetting = (!report.records.is_empty()).then(|| forgetting_metrics(&report.eval_points()));
    if let Err(e) = sink.finish(&report) {
        report.failure.get_or_insert(Failure { phase: "report".into(), message: e.to_string(), exit_code: e.exit_code() });
    }
    report
}

fn drive(
    cfg: &ExperimentConfig,
    seed: u64,
    opts: &RunOptions,
    report: &mut RunReport,
    sink: &mut Sink,
    phase: &mut String,
) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    let corpora = (0..cfg.tasks.len()).map(|i| cfg.load_corpus(i)).collect::<Result<Vec<_>>>()?;
    let min = cfg.model_config().frontend.min_samples();
    for data in &corpora {
        eval_splits(data, cfg)?;
        if let Some(u) = data.utterances.iter().find(|u| u.waveform.len() < min) {
            return Err(HarnessError::Data(format!(
                "utterance `{}` has {} samples, the frontend needs at least {min}",
                u.id,
                u.waveform.len()
            )));
        }
    }
    report.phases.push(PhaseTiming { phase: "corpora".into(), seconds: t0.elapsed().as_secs_f64(), steps: 0 });
    let mut model = new_model(cfg, seed)?;
    let mut global = 0u64;
    for (i, data) in corpora.iter().enumerate() {
        let task = TaskId(i as u32 + 1);
        *phase = format!("register.task{task}");
        let (trainable, anchor) = begin_task(&mut model, task, cfg, seed)?;
        let params = parameter_report(&model.blueprint, task)?;
        sink.emit("parameters", &params)?;
        report.parameters.push(params);

        *phase = format!("pretrain.task{task}");
        let mut pretrain_secs = 0.0;
        let mut eval_secs = 0.0;
        let total = cfg.pretrain.steps;
        pretrain_task(&mut model, task, trainable, anchor, data, cfg, seed, |m, step| {
            pretrain_secs += step.seconds;
            global += 1;
            sink.emit("step", step)?;
            let done = step.step + 1;
            let periodic = cfg.eval.every.is_some_and(|n| done % n == 0);
            if periodic || done == total {
                let t = Instant::now();
                evaluate_point(m, cfg, seed, &corpora[..=i], task, global, done, done == total, opts, report, sink)?;
                eval_secs += t.elapsed().as_secs_f64();
            }
            Ok(())
        })?;
        report.phases.push(PhaseTiming { phase: format!("pretrain.task{task}"), seconds: pretrain_secs, steps: total });
        report.phases.push(PhaseTiming { phase: format!("eval.task{task}"), seconds: eval_secs, steps: 0 });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    model: &Model<f32>,
    cfg: &ExperimentConfig,
    seed: u64,
    seen: &[Dataset],
    trained: TaskId,
    global: u64,
    task_step: u64,
    end_of_task: bool,
    opts: &RunOptions,
    report: &mut RunReport,
    sink: &mut Sink,
) -> Result<()> {
    let checkpoint = match (&sink.out, opts.checkpoints) {
        (Some(dir), true) => {
            let ck_dir = dir.join("checkpoints");
            fs::create_dir_all(&ck_dir).map_err(|e| HarnessError::io(format!("creating {}", ck_dir.display()), e))?;
            let path = ck_dir.join(format!("step{global:07}.pgck"));
            let extra = serde_json::json!({ "config": cfg.to_json(), "seed": seed, "trained_task": trained, "task_step": task_step });
            Checkpoint::from_model(model, global, extra).save(&path)?;
            Some(path)
        }
        _ => None,
    };
    for (j, data) in seen.iter().enumerate() {
        let eval_task = TaskId(j as u32 + 1);
        let e = evaluate_task(model, eval_task, data, cfg, seed)?;
        let rec = EvalRecord {
            seed,
            trained_task: trained,
            eval_task,
            step: global,
            task_step,
            end_of_task,
            wer: e.wer,
            finetune_loss: e.finetune_loss,
            pretrain: e.pretrain,
            checkpoint: checkpoint.clone(),
        };
        sink.emit("eval", &rec)?;
        report.records.push(rec);
    }
    Ok(())
}
