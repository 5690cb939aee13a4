//! Deterministic tone-sequence languages.
//!
//! A language is an alphabet of `k` pure tones spread evenly over a frequency
//! band; an utterance is a random token sequence rendered as consecutive
//! tones separated by silence. Utterance `n` depends only on its `SyntheticLangSpec`, the
//! seed and `n`.

use std::f64::consts::TAU;

use polyglot_core::finetune::LabelledExample;
use polyglot_core::frontend::{Waveform, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLangSpec {
    pub language: String,
    /// Number of distinct tokens `k`.
    pub alphabet: usize,
    /// `[low, high)` in Hz; token `j` sits at the centre of the `j`-th of
    /// `k` equal sub-bands.
    pub band_hz: [f64; 2],
    #[serde(default = "default_token_ms")]
    pub token_ms: f64,
    #[serde(default = "default_gap_ms")]
    pub gap_ms: f64,
    /// Standard deviation of additive white Gaussian noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Utterance lengths are uniform on `[min_tokens, max_tokens]`.
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    pub utterances: usize,
}

fn default_token_ms() -> f64 {
    15.0
}
fn default_gap_ms() -> f64 {
    5.0
}
fn default_amplitude() -> f64 {
    0.5
}
fn default_min_tokens() -> usize {
    4
}
fn default_max_tokens() -> usize {
    6
}

impl SyntheticLangSpec {
    pub fn new(language: impl Into<String>, alphabet: usize, band_hz: [f64; 2], utterances: usize) -> Self {
        Self {
            language: language.into(),
            alphabet,
            band_hz,
            token_ms: default_token_ms(),
            gap_ms: default_gap_ms(),
            noise: 0.0,
            amplitude: default_amplitude(),
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
            utterances,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(format!("language `{}`: {m}", self.language)));
        let [lo, hi] = self.band_hz;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if self.language.is_empty() {
            return Err(HarnessError::Config("language id must be non-empty".into()));
        }
        if self.alphabet == 0 {
            return bad("alphabet must be ≥ 1".into());
        }
        if !(lo > 0.0 && lo < hi && hi <= nyquist) {
            return bad(format!("band {lo}..{hi} Hz must satisfy 0 < low < high ≤ {nyquist}"));
        }
        if self.token_samples() == 0 {
            return bad("token duration is shorter than one sample".into());
        }
        if !(self.gap_ms >= 0.0 && self.noise >= 0.0 && self.amplitude > 0.0) {
            return bad("gap, noise and amplitude must be non-negative (amplitude positive)".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range {}..={} is empty or starts at 0", self.min_tokens, self.max_tokens));
        }
        Ok(())
    }

    pub fn frequency(&self, token: usize) -> f64 {
        let [lo, hi] = self.band_hz;
        lo + (token as f64 + 0.5) * (hi - lo) / self.alphabet as f64
    }

    pub fn token_samples(&self) -> usize {
        (self.token_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.gap_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Expected corpus duration in hours.
    pub fn hours(&self) -> f64 {
        let mean_tokens = (self.min_tokens + self.max_tokens) as f64 / 2.0;
        let per = mean_tokens * (self.token_samples() + self.gap_samples()) as f64 / SAMPLE_RATE as f64;
        self.utterances as f64 * per / 3600.0
    }
}

/// Rejects duplicate language ids and intersecting frequency bands.
pub fn check_disjoint<'a>(specs: impl IntoIterator<Item = &'a SyntheticLangSpec>) -> Result<()> {
    let specs: Vec<_> = specs.into_iter().collect();
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.language == b.language {
                return Err(HarnessError::Config(format!("language `{}` appears twice", a.language)));
            }
            if a.band_hz[0] < b.band_hz[1] && b.band_hz[0] < a.band_hz[1] {
                return Err(HarnessError::Config(format!(
                    "frequency bands of `{}` {:?} and `{}` {:?} overlap",
                    a.language, a.band_hz, b.language, b.band_hz
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
    /// Transcript; `None` for audio usable only for pretraining.
    pub tokens: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub language: String,
    pub alphabet: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The first `n` transcribed utterances after skipping `skip` of them.
    pub fn labelled(&self, skip: usize, n: usize) -> Vec<LabelledExample> {
        self.utterances
            .iter()
            .filter_map(|u| u.tokens.as_ref().map(|t| LabelledExample { waveform: u.waveform.clone(), tokens: t.clone() }))
            .skip(skip)
            .take(n)
            .collect()
    }

    pub fn labelled_count(&self) -> usize {
        self.utterances.iter().filter(|u| u.tokens.is_some()).count()
    }
}

/// Stable 64-bit FNV-1a, used to fold language ids into seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn utterance_rng(spec: &SyntheticLangSpec, seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.language.as_bytes()));
    rng.set_stream(index as u64);
    rng
}

pub fn gen_utterance(spec: &SyntheticLangSpec, seed: u64, index: usize) -> Utterance {
    let mut rng = utterance_rng(spec, seed, index);
    let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.alphabet)).collect();
    let (ts, gs) = (spec.token_samples(), spec.gap_samples());
    // Short raised-cosine ramps keep onsets free of clicks.
    let ramp = (ts / 8).max(1);
    let mut samples = Vec::with_capacity(n * (ts + gs));
    for &t in &tokens {
        let w = TAU * spec.frequency(t) / SAMPLE_RATE as f64;
        let phase = rng.random_range(0.0..TAU);
        for i in 0..ts {
            let edge = i.min(ts - 1 - i);
            let env = if edge < ramp { 0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
            samples.push((spec.amplitude * env * (w * i as f64 + phase).sin()) as f32);
        }
        samples.extend(std::iter::repeat_n(0.0f32, gs));
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise level");
        for s in &mut samples {
            *s = (*s as f64 + normal.sample(&mut rng)).clamp(-1.0, 1.0) as f32;
        }
    }
    let id = format!("{}-{index:05}", spec.language);
    Utterance { waveform: Waveform::new(samples, id.clone()), id, tokens: Some(tokens) }
}

pub fn gen_corpus(spec: &SyntheticLangSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        language: spec.language.clone(),
        alphabet: spec.alphabet,
        utterances: (0..spec.utterances).map(|i| gen_utterance(spec, seed, i)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_stay_inside_the_band() {
        let s = SyntheticLangSpec::new("a", 4, [400.0, 1200.0], 1);
        let f: Vec<f64> = (0..4).map(|t| s.frequency(t)).collect();
        assert_eq!(f, vec![500.0, 700.0, 900.0, 1100.0]);
    }

    #[test]
    fn adjacent_bands_are_disjoint() {
        let a = SyntheticLangSpec::new("a", 4, [400.0, 1200.0], 1);
        let b = SyntheticLangSpec::new("b", 4, [1200.0, 2400.0], 1);
        check_disjoint([&a, &b]).unwrap();
        let c = SyntheticLangSpec::new("c", 4, [1100.0, 1300.0], 1);
        assert!(matches!(check_disjoint([&a, &c]), Err(HarnessError::Config(_))));
    }

    #[test]
    fn utterance_length_matches_tokens() {
        let s = SyntheticLangSpec::new("a", 3, [400.0, 1200.0], 1);
        let u = gen_utterance(&s, 0, 7);
        let n = u.tokens.as_ref().unwrap().len();
        assert_eq!(u.waveform.len(), n * (240 + 80));
        assert!(u.waveform.samples.iter().all(|v| v.abs() <= 0.5 + 1e-6));
    }
}
