#![allow(dead_code)]

use polyglot_core::frontend::Waveform;
use polyglot_core::numerics::Float;
use polyglot_core::params::Binder;
use polyglot_core::numerics::{Graph, Tensor, Var};
use std::collections::BTreeMap;

/// Sequence of pure tones, one per token, with short silences between.
pub fn tones(tokens: &[usize], base_hz: f32, step_hz: f32, tone_samples: usize, gap_samples: usize) -> Waveform {
    let mut samples = Vec::new();
    for &t in tokens {
        let f = base_hz + step_hz * t as f32;
        samples.extend((0..tone_samples).map(|i| 0.5 * (std::f32::consts::TAU * f * i as f32 / 16_000.0).sin()));
        samples.extend(std::iter::repeat_n(0.0, gap_samples));
    }
    Waveform::new(samples, format!("tones{tokens:?}"))
}

pub fn short_tones(tokens: &[usize]) -> Waveform {
    tones(tokens, 500.0, 400.0, 240, 80)
}

/// Binder over leaves created from `vars` in name order.
pub fn binder_from<'g, F: Float>(g: &'g Graph<F>, names: &[String], vars: &[Var<'g, F>]) -> Binder<'g, F> {
    Binder::from_vars(g, names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>())
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
