mod common;

use polyglot::config::TaskSource;
use polyglot::driver::{evaluate_task, run_sequence, RunOptions, RunReport};
use polyglot::embeddings::export_embeddings;
use polyglot_core::checkpoint::Checkpoint;
use polyglot_core::model::{Model, TaskId};

fn numerics(r: &RunReport) -> Vec<(u32, u32, u64, u64, u64)> {
    r.records
        .iter()
        .map(|x| (x.trained_task.0, x.eval_task.0, x.step, x.wer.to_bits(), x.pretrain.total.to_bits()))
        .collect()
}

#[test]
fn single_task_run_is_plain_pretrain_then_finetune() {
    let cfg = common::tiny("warm", 1);
    let r = run_sequence(&cfg, 7, &RunOptions::default());
    assert!(r.failure.is_none(), "{:?}", r.failure);
    // Evaluated at step 3 and at the end (step 6).
    let steps: Vec<u64> = r.records.iter().map(|x| x.step).collect();
    assert_eq!(steps, vec![3, 6]);
    assert!(r.records.iter().all(|x| x.eval_task == TaskId(1) && (0.0..=2.0).contains(&x.wer)));
    assert!(r.records[1].end_of_task && !r.records[0].end_of_task);
    assert_eq!(r.parameters.len(), 1);
    assert_eq!(r.parameters[0].frozen, 0);
}

#[test]
fn runs_are_deterministic() {
    let cfg = common::tiny("mh-l2", 2);
    let a = run_sequence(&cfg, 7, &RunOptions::default());
    let b = run_sequence(&cfg, 7, &RunOptions::default());
    assert!(a.failure.is_none(), "{:?}", a.failure);
    assert_eq!(numerics(&a), numerics(&b));
    let c = run_sequence(&cfg, 8, &RunOptions::default());
    assert_ne!(numerics(&a), numerics(&c));
}

#[test]
fn adapter_run_keeps_task_one_flat() {
    let cfg = common::tiny("adapters", 2);
    let r = run_sequence(&cfg, 7, &RunOptions::default());
    assert!(r.failure.is_none(), "{:?}", r.failure);
    let trace = r.trace(TaskId(1));
    let settled: Vec<_> = trace.iter().filter(|x| x.trained_task == TaskId(2) || x.end_of_task).collect();
    assert_eq!(settled.len(), 3);
    for x in &settled[1..] {
        assert_eq!(x.wer.to_bits(), settled[0].wer.to_bits());
        assert_eq!(x.finetune_loss.to_bits(), settled[0].finetune_loss.to_bits());
        assert_eq!(x.pretrain, settled[0].pretrain);
    }
    assert_eq!(r.forgetting.as_ref().unwrap().per_task[&TaskId(1)], 0.0);
}

#[test]
fn outputs_are_persisted_and_the_last_record_recomputes() {
    let cfg = common::tiny("adapters", 2);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { out: Some(dir.path().to_path_buf()), checkpoints: true };
    let r = run_sequence(&cfg, 7, &opts);
    assert!(r.failure.is_none(), "{:?}", r.failure);

    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e["event"] == "step").count(), 12);
    let evals: Vec<u64> = events.iter().filter(|e| e["event"] == "eval").map(|e| e["step"].as_u64().unwrap()).collect();
    assert!(evals.windows(2).all(|w| w[0] <= w[1]));
    let saved: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(numerics(&saved), numerics(&r));

    let last = r.records.last().unwrap();
    let ck = Checkpoint::<f32>::load(last.checkpoint.as_ref().unwrap(), None, false).unwrap();
    assert_eq!(ck.manifest.step, last.step);
    let stored: polyglot::ExperimentConfig = serde_json::from_value(ck.manifest.extra["config"].clone()).unwrap();
    assert_eq!(stored, cfg);
    let model = ck.into_model().unwrap();
    let data = cfg.load_corpus(last.eval_task.0 as usize - 1).unwrap();
    let again = evaluate_task(&model, last.eval_task, &data, &cfg, 7).unwrap();
    assert_eq!(again.wer.to_bits(), last.wer.to_bits());
    assert_eq!(again.pretrain, last.pretrain);
}

#[test]
fn failure_mid_run_leaves_a_partial_report() {
    let mut cfg = common::tiny("warm", 2);
    // Single-token utterances of 2 ms are shorter than the frontend needs.
    if let TaskSource::Synthetic(s) = &mut cfg.tasks[1] {
        s.min_tokens = 1;
        s.max_tokens = 1;
        s.token_ms = 2.0;
        s.gap_ms = 0.0;
    }
    let dir = tempfile::tempdir().unwrap();
    let r = run_sequence(&cfg, 7, &RunOptions { out: Some(dir.path().to_path_buf()), checkpoints: false });
    let f = r.failure.as_ref().expect("run fails");
    assert_eq!(f.phase, "setup");
    assert_eq!(f.exit_code, 2);
    assert!(r.records.is_empty());
    let saved: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved.failure, r.failure);

    // An anchor weight that overflows 32-bit floats only bites in task 2,
    // so task 1's records survive.
    let mut cfg = common::tiny("mh-l2", 2);
    cfg.pretrain.anchor.eta = 1e300;
    let r = run_sequence(&cfg, 7, &RunOptions::default());
    let f = r.failure.as_ref().expect("run fails");
    assert_eq!((f.phase.as_str(), f.exit_code), ("pretrain.task2", 3), "{f:?}");
    assert_eq!(r.records.len(), 2);
    assert!(r.records.iter().all(|x| x.trained_task == TaskId(1)));
}

#[test]
fn embeddings_have_one_row_per_frame() {
    let cfg = common::tiny("adapters", 2);
    let dir = tempfile::tempdir().unwrap();
    let r = run_sequence(&cfg, 7, &RunOptions { out: Some(dir.path().to_path_buf()), checkpoints: true });
    let model: Model<f32> =
        Checkpoint::load(r.records.last().unwrap().checkpoint.as_ref().unwrap(), None, false).unwrap().into_model().unwrap();
    let data = cfg.load_corpus(0).unwrap();
    let frames: usize =
        data.utterances.iter().map(|u| model.config().frontend.output_len(u.waveform.len()).unwrap()).sum();
    let mut a = Vec::new();
    assert_eq!(export_embeddings(&model, &data, TaskId(1), &mut a).unwrap(), frames);
    let text = String::from_utf8(a.clone()).unwrap();
    assert_eq!(text.lines().count(), frames);
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[..3], ["lang1-00000", "0", "lang1"]);
    assert_eq!(first.len(), 3 + model.config().quantizer.target_dim);

    let mut again = Vec::new();
    export_embeddings(&model, &data, TaskId(1), &mut again).unwrap();
    assert_eq!(a, again);
    let mut other = Vec::new();
    export_embeddings(&model, &data, TaskId(2), &mut other).unwrap();
    assert_ne!(a, other, "per-task quantizers embed the same audio differently");
}
