mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn polyglot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyglot")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.starts_with('{')).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&polyglot(&["--help"])), 0);
    assert_eq!(code(&polyglot(&["train-everything"])), 1);
    assert_eq!(code(&polyglot(&["pretrain", "--task", "1"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &common::tiny_toml("adapters", 1));
    let bad = polyglot(&["report-params", "--config", s(&cfg), "--strategy", "freeze-everything"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let overlapping = common::tiny_toml("warm", 2).replace("[2000.0, 5000.0]", "[1000.0, 5000.0]");
    let cfg = write_config(dir.path(), "c.toml", &overlapping);
    let o = polyglot(&["run-sequence", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));
    let unknown = write_config(dir.path(), "u.toml", &format!("learning_rate = 1.0\n{}", common::tiny_toml("warm", 1)));
    assert_eq!(code(&polyglot(&["report-params", "--config", s(&unknown)])), 1);
}

#[test]
fn generated_data_can_be_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &common::tiny_toml("adapters", 2));
    let o = polyglot(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("data"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = stdout_json(&o);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["utterances"], 8);
    let wav_cfg = format!(
        "{}[[tasks]]\n[tasks.wav]\nlanguage = \"recorded\"\ndir = \"data/task1-lang1\"\nmanifest = \"data/task1-lang1/manifest.tsv\"\n",
        common::tiny_toml("adapters", 0)
    );
    let wav_cfg = write_config(dir.path(), "w.toml", &wav_cfg);
    let o = polyglot(&["run-sequence", "--config", s(&wav_cfg), "--out", s(&dir.path().join("run")), "--no-checkpoints"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let missing = write_config(dir.path(), "m.toml", &std::fs::read_to_string(&wav_cfg).unwrap().replace("task1-lang1\"", "nowhere\""));
    assert_eq!(code(&polyglot(&["run-sequence", "--config", s(&missing), "--out", s(&dir.path().join("r2"))])), 1);
}

#[test]
fn pretrain_verify_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.toml", &common::tiny_toml("adapters", 2));
    let ck = |n: &str| d.join(n);
    for (seed, prefix) in [("7", "a"), ("8", "b")] {
        let one = ck(&format!("{prefix}1.pgck"));
        let two = ck(&format!("{prefix}2.pgck"));
        let o = polyglot(&["pretrain", "--config", s(&cfg), "--seed", seed, "--task", "1", "--out", s(&one)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = polyglot(&["pretrain", "--config", s(&cfg), "--seed", seed, "--task", "2", "--checkpoint", s(&one), "--out", s(&two)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)[0]["step"], 12);
    }

    let o = polyglot(&["verify-frozen", "--checkpoint", s(&ck("a1.pgck")), "--against", s(&ck("a2.pgck")), "--task", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)[0]["ok"], true);
    let o = polyglot(&["verify-frozen", "--checkpoint", s(&ck("a1.pgck")), "--against", s(&ck("b2.pgck")), "--task", "2"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stdout_json(&o)[0]["ok"], false);

    // Configuration comes from the checkpoint; one record per registered task.
    let o = polyglot(&["evaluate", "--checkpoint", s(&ck("a2.pgck"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let evals = stdout_json(&o);
    assert_eq!(evals.len(), 2);
    assert_eq!(evals[0]["seed"], 7);
    let again = stdout_json(&polyglot(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ck("a2.pgck")), "--task", "1"]));
    assert_eq!(again[0]["wer"], evals[0]["wer"]);

    let o = polyglot(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ck("a2.pgck")), "--task", "2", "--out", s(&ck("ft.pgck"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck("ft.pgck").is_file());

    let table = d.join("emb.tsv");
    let o = polyglot(&["export-embeddings", "--config", s(&cfg), "--checkpoint", s(&ck("a2.pgck")), "--task", "2", "--out", s(&table), "--limit", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout_json(&o)[0]["rows"].as_u64().unwrap();
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count() as u64, rows);
    assert!(text.contains("\tlang1\t") && text.contains("\tlang2\t"));

    // Damaged checkpoint: data error naming the record.
    let mut bytes = std::fs::read(ck("a2.pgck")).unwrap();
    let at = bytes.len() - 40;
    bytes[at] ^= 0xff;
    std::fs::write(ck("bad.pgck"), &bytes).unwrap();
    let o = polyglot(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ck("bad.pgck"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum mismatch in record"), "{}", String::from_utf8_lossy(&o.stderr));

    // A full-preset configuration refuses the desk checkpoint, forced or not.
    let full = write_config(d, "full.toml", &format!("preset = \"full\"\n{}", common::tiny_toml("adapters", 2)));
    let o = polyglot(&["pretrain", "--config", s(&full), "--task", "2", "--checkpoint", s(&ck("a1.pgck")), "--out", s(&ck("x.pgck"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config hash"));
    let o = polyglot(&["pretrain", "--config", s(&full), "--task", "2", "--checkpoint", s(&ck("a1.pgck")), "--out", s(&ck("x.pgck")), "--force"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension error"));
}

#[test]
fn diverging_loss_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = common::tiny_toml("warm", 1).replace("steps = 6\n", "steps = 6\nmax_lr = 1e30\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let o = polyglot(&["pretrain", "--config", s(&cfg), "--task", "1", "--out", s(&dir.path().join("x.pgck"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_sequence_and_report_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &common::tiny_toml("mh", 2));
    let out = dir.path().join("run");
    let o = polyglot(&["run-sequence", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("seed7/report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 6);
    assert!(out.join("seed7/metrics.jsonl").is_file());
    assert!(out.join("seed7/checkpoints/step0000012.pgck").is_file());

    let o = polyglot(&["report-params", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports.len(), 8);
    let ad = reports.iter().find(|r| r["strategy"] == "adapters" && r["task"] == 2).unwrap();
    let warm = reports.iter().find(|r| r["strategy"] == "warm-start" && r["task"] == 2).unwrap();
    assert!(ad["trainable"].as_u64() < warm["trainable"].as_u64());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["two-languages.toml", "smoke.toml"] {
        let o = polyglot(&["report-params", "--config", s(&root.join(name))]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
