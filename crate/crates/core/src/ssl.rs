//! Span masking, distractor sampling and the masked contrastive objective.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MaskSpec;
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Probability that a frame starts a span.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Span length `M`.
    #[serde(default = "default_span")]
    pub span: usize,
}

fn default_p() -> f64 {
    0.065
}
fn default_span() -> usize {
    10
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { p: default_p(), span: default_span() }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0 && self.p <= 1.0) || self.span == 0 {
            return Err(Error::Config(format!("mask p={} must lie in [0, 1] and span ≥ 1", self.p)));
        }
        Ok(())
    }

    /// Probability that a frame at least `M − 1` frames from the start is
    /// masked: `1 − (1 − p)^M`.
    pub fn interior_fraction(&self) -> f64 {
        1.0 - (1.0 - self.p).powi(self.span as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Distractor count `K`.
    #[serde(default = "default_k")]
    pub distractors: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Weight of the diversity term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Use `−cos` as the similarity, the literal sign of the written formula.
    #[serde(default)]
    pub negate_similarity: bool,
    /// Norms below this are clamped before cosine similarity.
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_k() -> usize {
    100
}
fn default_kappa() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.1
}
fn default_norm_eps() -> f64 {
    1e-8
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            distractors: default_k(),
            kappa: default_kappa(),
            alpha: default_alpha(),
            negate_similarity: false,
            norm_eps: default_norm_eps(),
        }
    }
}

/// Each frame starts a span with probability `p`; spans of `M` frames are
/// clipped at the end and may overlap.
pub fn sample_mask<R: Rng>(frames: usize, cfg: &MaskingConfig, rng: &mut R) -> MaskSpec {
    let mut masked = vec![false; frames];
    for start in 0..frames {
        if rng.random_bool(cfg.p) {
            for m in masked.iter_mut().skip(start).take(cfg.span) {
                *m = true;
            }
        }
    }
    let indices = masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    MaskSpec::new(indices, frames).expect("indices in range")
}

/// `k` indices from `mask \ {t}`: without replacement when enough exist,
/// otherwise uniformly with replacement.
pub fn sample_distractors<R: Rng>(mask: &MaskSpec, t: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if !mask.contains(t) {
        return Err(Error::dim("sample_distractors", format!("frame {t} is not masked")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<usize> = mask.indices().iter().copied().filter(|&i| i != t).collect();
    if pool.is_empty() {
        return Err(Error::DegenerateUtterance);
    }
    Ok(if pool.len() >= k {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    })
}

/// Contrastive candidate lists for one utterance: `(frame, distractors)`
/// for every masked frame that can be given distractors.
pub fn sample_candidates<R: Rng>(mask: &MaskSpec, k: usize, rng: &mut R) -> Vec<(usize, Vec<usize>)> {
    mask.indices()
        .iter()
        .filter_map(|&t| sample_distractors(mask, t, k, rng).ok().map(|d| (t, d)))
        .collect()
}

/// Summed contrastive loss over `candidates`, for context `c: [T, f]` and
/// targets `q: [T, f]` of one utterance.
///
/// Each term is `−log softmax(sim(c_t, ·)/κ)` at the true target among
/// `{q_t} ∪ distractors`.
pub fn contrastive_sum<'g, F: Float>(
    c: &Var<'g, F>,
    q: &Var<'g, F>,
    candidates: &[(usize, Vec<usize>)],
    cfg: &ContrastiveConfig,
) -> Result<Var<'g, F>> {
    if c.shape() != q.shape() {
        return Err(Error::dim("contrastive", format!("context {:?} vs targets {:?}", c.shape(), q.shape())));
    }
    if candidates.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let width = candidates[0].1.len() + 1;
    if candidates.iter().any(|(_, d)| d.len() + 1 != width) {
        return Err(Error::dim("contrastive", "distractor lists differ in length"));
    }
    let mut c_idx = Vec::with_capacity(candidates.len() * width);
    let mut q_idx = Vec::with_capacity(candidates.len() * width);
    for (t, d) in candidates {
        c_idx.extend(std::iter::repeat_n(*t, width));
        q_idx.push(*t);
        q_idx.extend(d);
    }
    let cn = c.normalize_rows(cfg.norm_eps)?.gather_rows(&c_idx)?;
    let qn = q.normalize_rows(cfg.norm_eps)?.gather_rows(&q_idx)?;
    let sign = if cfg.negate_similarity { -1.0 } else { 1.0 };
    let logits = cn.mul(&qn)?.sum_last()?.reshape(vec![candidates.len(), width])?.scale(sign / cfg.kappa);
    Ok(logits.log_softmax()?.slice_cols(0, 1)?.sum().neg())
}

/// Loss for a single frame given raw vectors, evaluated without gradients.
pub fn contrastive_loss<F: Float>(c_t: &[F], q_t: &[F], distractors: &[Vec<F>], cfg: &ContrastiveConfig) -> Result<f64> {
    let f = c_t.len();
    if q_t.len() != f || distractors.iter().any(|d| d.len() != f) {
        return Err(Error::dim("contrastive", "vectors differ in dimension"));
    }
    let g = Graph::new();
    let n = distractors.len() + 1;
    let mut q = q_t.to_vec();
    for d in distractors {
        q.extend_from_slice(d);
    }
    let mut c = c_t.to_vec();
    c.extend(std::iter::repeat_n(F::zero(), f * (n - 1)));
    let cv = g.constant(Tensor::new(vec![n, f], c)?);
    let qv = g.constant(Tensor::new(vec![n, f], q)?);
    let cand = vec![(0usize, (1..n).collect::<Vec<_>>())];
    Ok(contrastive_sum(&cv, &qv, &cand, cfg)?.value().item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_saturation_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = sample_mask(3, &MaskingConfig { p: 1.0, span: 10 }, &mut rng);
        assert_eq!(all.indices(), &[0, 1, 2]);
        assert!(sample_mask(50, &MaskingConfig { p: 0.0, span: 10 }, &mut rng).is_empty());
    }

    #[test]
    fn forced_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MaskSpec::new(vec![1, 2], 5).unwrap();
        assert_eq!(sample_distractors(&m, 1, 3, &mut rng).unwrap(), vec![2, 2, 2]);
        let single = MaskSpec::new(vec![4], 5).unwrap();
        assert!(matches!(sample_distractors(&single, 4, 3, &mut rng), Err(Error::DegenerateUtterance)));
        assert!(sample_distractors(&single, 4, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn closed_form_single_orthogonal_distractor() {
        let cfg = ContrastiveConfig::default();
        let l = contrastive_loss(&[1.0f64, 0.0], &[2.0, 0.0], &[vec![0.0, 3.0]], &cfg).unwrap();
        assert!((l - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 4.54e-5).abs() < 1e-7);
        assert_eq!(contrastive_loss(&[1.0f64, 0.5], &[0.3, -2.0], &[], &cfg).unwrap(), 0.0);
    }
}
