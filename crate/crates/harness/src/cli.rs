//! Command-line interface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data error, 3 non-finite loss.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use polyglot_core::checkpoint::{config_hash, Checkpoint};
use polyglot_core::continual::{parameter_report, planned_blueprint, verify_frozen, FreezePolicy, StrategyKind};
use polyglot_core::finetune::{evaluate_wer, finetune, Vocab};
use polyglot_core::model::{Model, TaskId};
use serde_json::json;

use crate::config::{ExperimentConfig, TaskSource};
use crate::driver::{self, eval_splits, evaluate_task, finetune_rng, RunOptions};
use crate::embeddings::export_embeddings;
use crate::error::{HarnessError, Result};
use crate::wav::export_dataset;

#[derive(Debug, Parser)]
#[command(name = "polyglot", version, about = "Continual self-supervised speech pretraining experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured strategy.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<StrategyKind>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpora as WAV files with transcript manifests.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one task and pretrain it, starting from a checkpoint or from scratch.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Accept a checkpoint whose model configuration differs.
        #[arg(long)]
        force: bool,
    },
    /// Finetune a copy of a checkpoint for one task and save the result.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute evaluation records from a checkpoint.
    Evaluate {
        /// Defaults to the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to every registered task.
        #[arg(long)]
        task: Option<u32>,
    },
    /// Run the full task sequence for every seed.
    RunSequence {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Skip the checkpoint at each evaluation point.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Trainable and frozen parameter counts per task.
    ReportParams {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to every strategy.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame quantizer targets of every configured corpus.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
        /// Utterances taken from each corpus.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Check that a later checkpoint left every frozen parameter of a task untouched.
    VerifyFrozen {
        /// Checkpoint from before the task was trained.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint from after the task was trained.
        #[arg(long)]
        against: PathBuf,
        #[arg(long)]
        task: u32,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<StrategyKind, String> {
    s.parse::<StrategyKind>().map_err(|e| e.to_string())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(k) = args.strategy {
        cfg.strategy = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path, cfg: Option<&ExperimentConfig>, force: bool) -> Result<Checkpoint<f32>> {
    let hash = cfg.map(|c| config_hash(&c.model_config()));
    let ck = Checkpoint::<f32>::load(path, hash.as_deref(), force)?;
    if let Some(c) = cfg {
        ck.check_shapes(&c.model_config())?;
        if ck.manifest.blueprint.strategy != c.strategy {
            return Err(HarnessError::Config(format!(
                "checkpoint was trained with strategy {}, configuration says {}",
                ck.manifest.blueprint.strategy.cli_name(),
                c.strategy.cli_name()
            )));
        }
    }
    Ok(ck)
}

fn stored_seed(ck: &Checkpoint<f32>) -> Option<u64> {
    ck.manifest.extra.get("seed").and_then(|v| v.as_u64())
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn task_id(cfg: &ExperimentConfig, task: u32) -> Result<TaskId> {
    if task == 0 || task as usize > cfg.tasks.len() {
        return Err(HarnessError::Config(format!("--task {task} is outside 1..={}", cfg.tasks.len())));
    }
    Ok(TaskId(task))
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg)?;
            for (i, t) in cfg.tasks.iter().enumerate() {
                let TaskSource::Synthetic(spec) = t else { continue };
                let data = cfg.load_corpus(i)?;
                let dir = out.join(format!("task{}-{}", i + 1, spec.language));
                let manifest = export_dataset(&data, &dir)?;
                print_json(&json!({
                    "task": i + 1,
                    "language": spec.language,
                    "utterances": data.len(),
                    "hours": spec.hours(),
                    "manifest": manifest,
                }));
            }
            Ok(0)
        }
        Command::Pretrain { cfg, task, checkpoint, out, force } => {
            let cfg = load_config(&cfg)?;
            let seed = cfg.seeds[0];
            let task = task_id(&cfg, task)?;
            let (mut model, prior_steps) = match &checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(p, Some(&cfg), force)?;
                    let steps = ck.manifest.step;
                    (ck.into_model()?, steps)
                }
                None => (driver::new_model(&cfg, seed)?, 0),
            };
            let data = cfg.load_corpus(task.0 as usize - 1)?;
            let (trainable, anchor) = driver::begin_task(&mut model, task, &cfg, seed)?;
            let every = (cfg.pretrain.steps / 10).max(1);
            driver::pretrain_task(&mut model, task, trainable, anchor, &data, &cfg, seed, |_, r| {
                if (r.step + 1) % every == 0 {
                    eprintln!("task {task} step {}: loss {:.4} (L_m {:.4}, L_d {:.4})", r.step + 1, r.losses.total, r.losses.contrastive, r.losses.diversity);
                }
                Ok(())
            })?;
            let step = prior_steps + cfg.pretrain.steps;
            let extra = json!({ "config": cfg.to_json(), "seed": seed, "trained_task": task, "task_step": cfg.pretrain.steps });
            Checkpoint::from_model(&model, step, extra).save(&out)?;
            print_json(&json!({ "task": task, "step": step, "checkpoint": out }));
            Ok(0)
        }
        Command::Finetune { cfg, checkpoint, task, out } => {
            let cfg = load_config(&cfg)?;
            let ck = load_checkpoint(&checkpoint, Some(&cfg), false)?;
            let seed = match cfg.seeds.as_slice() {
                [s] => *s,
                _ => stored_seed(&ck).unwrap_or(cfg.seeds[0]),
            };
            let step = ck.manifest.step;
            let model = ck.into_model()?;
            let task = task_id(&cfg, task)?;
            let data = cfg.load_corpus(task.0 as usize - 1)?;
            let (train, test) = eval_splits(&data, &cfg)?;
            let vocab = Vocab::numbered(data.alphabet);
            let outcome = finetune(&model, task, &vocab, &train, &cfg.finetune, &mut finetune_rng(seed, task))?;
            let wer = evaluate_wer(&outcome.model, task, &vocab, &test)?;
            Checkpoint::from_model(&outcome.model, step, json!({ "config": cfg.to_json(), "seed": seed, "finetuned_task": task }))
                .save(&out)?;
            print_json(&json!({ "task": task, "wer": wer, "finetune_loss": outcome.losses.last(), "checkpoint": out }));
            Ok(0)
        }
        Command::Evaluate { config, seed, checkpoint, task } => {
            let raw = Checkpoint::<f32>::load(&checkpoint, None, false)?;
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => {
                    let stored = raw.manifest.extra.get("config").cloned().ok_or_else(|| {
                        HarnessError::Config("checkpoint stores no configuration; pass --config".into())
                    })?;
                    serde_json::from_value(stored).map_err(|e| HarnessError::Config(format!("stored configuration: {e}")))?
                }
            };
            cfg.validate()?;
            let ck = load_checkpoint(&checkpoint, Some(&cfg), false)?;
            let seed = seed.or_else(|| stored_seed(&ck)).unwrap_or(cfg.seeds[0]);
            let step = ck.manifest.step;
            let model = ck.into_model()?;
            let tasks = match task {
                Some(t) => vec![task_id(&cfg, t)?],
                None => model.registry().ids(),
            };
            for t in tasks {
                let data = cfg.load_corpus(t.0 as usize - 1)?;
                let e = evaluate_task(&model, t, &data, &cfg, seed)?;
                print_json(&json!({
                    "eval_task": t,
                    "step": step,
                    "seed": seed,
                    "wer": e.wer,
                    "finetune_loss": e.finetune_loss,
                    "pretrain": e.pretrain,
                }));
            }
            Ok(0)
        }
        Command::RunSequence { cfg, out, no_checkpoints } => {
            let cfg = load_config(&cfg)?;
            let mut code = 0;
            for &seed in &cfg.seeds {
                let dir = out.join(format!("seed{seed}"));
                let opts = RunOptions { out: Some(dir.clone()), checkpoints: !no_checkpoints };
                let report = driver::run_sequence(&cfg, seed, &opts);
                print_json(&json!({
                    "seed": seed,
                    "strategy": cfg.strategy.cli_name(),
                    "records": report.records.len(),
                    "forgetting": report.forgetting,
                    "failure": report.failure,
                    "report": dir.join("report.json"),
                }));
                if let Some(f) = &report.failure {
                    eprintln!("error: seed {seed} failed in {}: {}", f.phase, f.message);
                    code = f.exit_code;
                    break;
                }
            }
            Ok(code)
        }
        Command::ReportParams { config, strategy, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let kinds = match strategy {
                Some(k) => vec![k],
                None => StrategyKind::ALL.to_vec(),
            };
            let mut reports = Vec::new();
            for kind in kinds {
                let bp = planned_blueprint(cfg.model_config(), kind, cfg.tasks.len() as u32)?;
                for t in 1..=cfg.tasks.len() as u32 {
                    reports.push(parameter_report(&bp, TaskId(t))?);
                }
            }
            let text = serde_json::to_string_pretty(&reports).map_err(polyglot_core::Error::from)?;
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| HarnessError::io(format!("writing {}", p.display()), e))?,
                None => println!("{text}"),
            }
            Ok(0)
        }
        Command::ExportEmbeddings { config, checkpoint, task, out, limit } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let model: Model<f32> = load_checkpoint(&checkpoint, Some(&cfg), false)?.into_model()?;
            let task = task_id(&cfg, task)?;
            let file = fs::File::create(&out).map_err(|e| HarnessError::io(format!("creating {}", out.display()), e))?;
            let mut w = BufWriter::new(file);
            let mut rows = 0;
            for i in 0..cfg.tasks.len() {
                let mut data = cfg.load_corpus(i)?;
                data.utterances.truncate(limit);
                rows += export_embeddings(&model, &data, task, &mut w)?;
            }
            w.flush().map_err(|e| HarnessError::io("writing embeddings", e))?;
            print_json(&json!({ "rows": rows, "out": out }));
            Ok(0)
        }
        Command::VerifyFrozen { checkpoint, against, task } => {
            let before = Checkpoint::<f32>::load(&checkpoint, None, false)?;
            let after = Checkpoint::<f32>::load(&against, None, false)?;
            let policy = FreezePolicy::pretraining(&after.manifest.blueprint, TaskId(task))?;
            let trainable = policy.trainable_names(after.params.names())?;
            let frozen: BTreeSet<String> = before.params.names().filter(|n| !trainable.contains(*n)).cloned().collect();
            let check = verify_frozen(&before.params, &after.params, &frozen)?;
            print_json(&json!({ "ok": check.ok(), "checked": check.checked, "first_difference": check.first_difference }));
            Ok(if check.ok() { 0 } else { 2 })
        }
    }
}
