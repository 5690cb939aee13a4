//! Per-frame quantizer targets as a tab-separated table:
//! `utterance<TAB>frame<TAB>language<TAB>v_1 … v_f`.

use std::io::Write;

use polyglot_core::frontend;
use polyglot_core::model::{Model, TaskId};
use polyglot_core::numerics::{Float, Graph};
use polyglot_core::params::Binder;
use polyglot_core::quantizer::{quantize, QuantizeMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::error::{HarnessError, Result};

/// Noise-free hard selection; the temperature does not affect the argmax.
const EXPORT: QuantizeMode = QuantizeMode { noise: false, hard: true };

/// Writes one row per latent frame and returns the row count.
pub fn export_embeddings<F: Float>(model: &Model<F>, data: &Dataset, task: TaskId, out: &mut impl Write) -> Result<usize> {
    let route = model.route(task)?;
    let cfg = model.config();
    let mut rows = 0;
    let io = |e| HarnessError::io("writing embeddings", e);
    for u in &data.utterances {
        let g = Graph::new();
        let b = Binder::frozen(&g, &model.params);
        let z = frontend::forward(&b, &cfg.frontend, &u.waveform, cfg.norm_eps)?.latent;
        let q = quantize(&b, &cfg.quantizer, &route.quantizer, &z, 1.0, EXPORT, &mut ChaCha8Rng::seed_from_u64(0))?;
        let targets = q.targets.value();
        let f = targets.shape()[1];
        for (frame, row) in targets.data().chunks_exact(f).enumerate() {
            write!(out, "{}\t{frame}\t{}", u.id, data.language).map_err(io)?;
            for v in row {
                write!(out, "\t{}", v.as_f64()).map_err(io)?;
            }
            writeln!(out).map_err(io)?;
            rows += 1;
        }
    }
    Ok(rows)
}
