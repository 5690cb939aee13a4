#![allow(dead_code)]

use polyglot::config::ExperimentConfig;

/// Two disjoint tone languages with budgets small enough for unit-speed runs.
pub fn tiny_toml(strategy: &str, tasks: usize) -> String {
    let mut s = format!(
        r#"strategy = "{strategy}"
seeds = [7]
[pretrain]
steps = 6
batch_size = 2
[finetune]
steps = 4
batch_size = 2
[eval]
every = 3
finetune_utterances = 3
test_utterances = 2
"#
    );
    let bands = [[300.0, 1500.0], [2000.0, 5000.0], [5200.0, 7600.0]];
    for (i, band) in bands.iter().take(tasks).enumerate() {
        s += &format!(
            "[[tasks]]\n[tasks.synthetic]\nlanguage = \"lang{}\"\nalphabet = 3\nband_hz = [{:.1}, {:.1}]\nutterances = 8\n",
            i + 1,
            band[0],
            band[1]
        );
    }
    s
}

pub fn tiny(strategy: &str, tasks: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&tiny_toml(strategy, tasks)).unwrap()
}
