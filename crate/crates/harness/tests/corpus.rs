mod common;

use polyglot::corpus::{gen_corpus, gen_utterance, SyntheticLangSpec};
use polyglot::wav::{export_dataset, ingest_wav, read_wav, write_wav};
use polyglot::HarnessError;
use polyglot_core::frontend::Waveform;

fn spec() -> SyntheticLangSpec {
    SyntheticLangSpec { noise: 0.05, ..SyntheticLangSpec::new("low", 4, [300.0, 1500.0], 6) }
}

#[test]
fn same_spec_and_seed_give_identical_corpora() {
    let a = gen_corpus(&spec(), 3).unwrap();
    let b = gen_corpus(&spec(), 3).unwrap();
    assert_eq!(a, b);
    let bits = |d: &polyglot::corpus::Dataset| -> Vec<u32> {
        d.utterances.iter().flat_map(|u| u.waveform.samples.iter().map(|s| s.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&gen_corpus(&spec(), 4).unwrap()));
    // Utterance n does not depend on how many were generated before it.
    assert_eq!(gen_utterance(&spec(), 3, 4), a.utterances[4]);
}

#[test]
fn transcripts_are_the_generating_tokens() {
    let s = SyntheticLangSpec { min_tokens: 3, max_tokens: 3, ..spec() };
    let u = gen_utterance(&s, 0, 0);
    let tokens = u.tokens.clone().unwrap();
    assert_eq!(tokens.len(), 3);
    // Each token occupies its own 240-sample slot followed by 80 silent samples.
    for (i, _) in tokens.iter().enumerate() {
        let gap = &u.waveform.samples[i * 320 + 240..(i + 1) * 320];
        assert!(gap.iter().all(|v| v.abs() < 0.25), "noise only between tokens");
    }
}

#[test]
fn pcm_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for s in [32767i16, -32768, 0, 16384] {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
    let got = read_wav(&path).unwrap().samples;
    assert!((got[0] - 1.0).abs() < 1e-4);
    assert_eq!(got[1], -1.0);
    assert_eq!(got[2], 0.0);
    assert_eq!(got[3], 0.5);
}

#[test]
fn exported_corpus_reads_back() {
    let data = gen_corpus(&spec(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_dataset(&data, dir.path()).unwrap();
    let back = ingest_wav(dir.path(), Some(&manifest), "low", None).unwrap();
    assert_eq!(back.len(), data.len());
    assert!(back.alphabet <= data.alphabet);
    for (a, b) in data.utterances.iter().zip(&back.utterances) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.tokens, b.tokens);
        let err = a.waveform.samples.iter().zip(&b.waveform.samples).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 32768.0 + 1e-7, "{err}");
    }
}

#[test]
fn files_without_a_manifest_line_are_unlabelled() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::new(vec![0.1; 800], "a");
    write_wav(&dir.path().join("a.wav"), &w).unwrap();
    write_wav(&dir.path().join("b.wav"), &w).unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "a.wav\t2 0 1\n").unwrap();
    let d = ingest_wav(dir.path(), Some(&manifest), "x", None).unwrap();
    assert_eq!(d.utterances[0].tokens, Some(vec![2, 0, 1]));
    assert_eq!(d.utterances[1].tokens, None);
    assert_eq!(d.alphabet, 3);
    assert_eq!(d.labelled_count(), 1);
}

#[test]
fn unsupported_files_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let float = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    let mut w = hound::WavWriter::create(dir.path().join("stereo.wav"), stereo).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    let mut w = hound::WavWriter::create(dir.path().join("float.wav"), float).unwrap();
    w.write_sample(0.0f32).unwrap();
    w.finalize().unwrap();
    write_wav(&dir.path().join("fine.wav"), &Waveform::new(vec![0.0; 10], "f")).unwrap();
    match ingest_wav(dir.path(), None, "x", None) {
        Err(e @ HarnessError::UnsupportedAudio { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("stereo.wav") && msg.contains("2 channels"), "{msg}");
            assert!(msg.contains("float.wav"), "{msg}");
            assert!(!msg.contains("fine.wav"), "{msg}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn manifest_naming_a_missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(&dir.path().join("a.wav"), &Waveform::new(vec![0.0; 10], "a")).unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "a.wav\t1\nghost.wav\t0\n").unwrap();
    assert!(matches!(ingest_wav(dir.path(), Some(&manifest), "x", None), Err(HarnessError::Data(_))));
}
