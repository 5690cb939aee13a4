//! 16-bit mono PCM ingestion and the transcript manifest.
//!
//! Manifest lines are `relative/path.wav<TAB>3 1 2`; files without a line
//! are kept as unlabelled pretraining audio.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use polyglot_core::frontend::{Waveform, SAMPLE_RATE};

use crate::corpus::{Dataset, Utterance};
use crate::error::{HarnessError, Result};

/// Reads one file; the error string says why it is unsupported.
pub fn read_wav(path: &Path) -> std::result::Result<Waveform, String> {
    let mut reader = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format!("{} channels, only mono is supported", spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format!("{}-bit {:?} samples, only 16-bit PCM is supported", spec.bits_per_sample, spec.sample_format));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format!("sample rate {} Hz, expected {SAMPLE_RATE}", spec.sample_rate));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| e.to_string())?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Waveform::new(samples, id))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| HarnessError::Data(format!("writing {}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in &w.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).map_err(fail)?;
    }
    writer.finalize().map_err(fail)
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<PathBuf, Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| HarnessError::Data(format!("{}:{}: {why}", path.display(), n + 1));
        let (file, tokens) = line.split_once('\t').ok_or_else(|| bad("expected `path<TAB>tokens`"))?;
        let tokens = tokens
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad(&format!("token `{t}` is not a non-negative integer"))))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(PathBuf::from(file), tokens).is_some() {
            return Err(bad(&format!("`{file}` listed twice")));
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, Vec<usize>)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| HarnessError::io(format!("creating {}", path.display()), e))?;
    for (file, tokens) in entries {
        let toks: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        writeln!(f, "{file}\t{}", toks.join(" ")).map_err(|e| HarnessError::io("writing manifest", e))?;
    }
    Ok(())
}

/// Loads every `*.wav` under `dir` in path order. All unsupported files are
/// reported together.
pub fn ingest_wav(dir: &Path, manifest: Option<&Path>, language: &str, alphabet: Option<usize>) -> Result<Dataset> {
    let mut files = Vec::new();
    collect_wavs(dir, &mut files)?;
    files.sort();
    let mut labels = match manifest {
        Some(m) => read_manifest(m)?,
        None => BTreeMap::new(),
    };
    let mut utterances = Vec::with_capacity(files.len());
    let mut offenders = Vec::new();
    for path in files {
        let rel = path.strip_prefix(dir).unwrap_or(&path).to_path_buf();
        match read_wav(&path) {
            Ok(w) => utterances.push(Utterance {
                id: rel.with_extension("").to_string_lossy().into_owned(),
                waveform: Waveform::new(w.samples, rel.to_string_lossy()),
                tokens: labels.remove(&rel),
            }),
            Err(why) => offenders.push((path, why)),
        }
    }
    if !offenders.is_empty() {
        return Err(HarnessError::UnsupportedAudio { count: offenders.len(), offenders });
    }
    if let Some(missing) = labels.keys().next() {
        return Err(HarnessError::Data(format!("manifest lists {} which is not in {}", missing.display(), dir.display())));
    }
    let largest = utterances.iter().filter_map(|u| u.tokens.as_ref()).flatten().max().map_or(0, |&m| m + 1);
    let alphabet = match alphabet {
        Some(a) if a < largest => {
            return Err(HarnessError::Data(format!("token id {} exceeds alphabet size {a}", largest - 1)))
        }
        Some(a) => a,
        None => largest,
    };
    Ok(Dataset { language: language.to_string(), alphabet, utterances })
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(format!("listing {}", dir.display()), e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `data` as `<dir>/<id>.wav` files plus `<dir>/manifest.tsv`.
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::new();
    for u in &data.utterances {
        let file = format!("{}.wav", u.id);
        write_wav(&dir.join(&file), &u.waveform)?;
        if let Some(t) = &u.tokens {
            entries.push((file, t.clone()));
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
