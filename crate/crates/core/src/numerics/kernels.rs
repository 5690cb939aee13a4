//! Slice-level compute kernels shared by the forward and backward passes.

use super::{lit, Float};

#[inline]
fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ra, rb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ra[l] * rb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`, giving `m×k`.
pub fn matmul_bt<F: Float>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let ra = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(ra, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, giving `k×n`.
pub fn matmul_at<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let rb = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], rb, &mut out[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn transpose<F: Float>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a grouped, strided, unpadded 1-D convolution over `[C_in, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

pub fn conv1d_forward<F: Float>(x: &[F], w: &[F], g: &ConvGeom) -> Vec<F> {
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![F::zero(); g.c_out * g.t_out];
    for co in 0..g.c_out {
        let grp = co / cog;
        let orow = &mut out[co * g.t_out..(co + 1) * g.t_out];
        for cl in 0..cig {
            let ci = grp * cig + cl;
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let wv = w[(co * cig + cl) * g.kernel + k];
                if g.stride == 1 {
                    axpy(wv, &xrow[k..k + g.t_out], orow);
                } else {
                    for (t, o) in orow.iter_mut().enumerate() {
                        *o += wv * xrow[t * g.stride + k];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv1d_backward_input<F: Float>(dy: &[F], w: &[F], g: &ConvGeom) -> Vec<F> {
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let mut dx = vec![F::zero(); g.c_in * g.t_in];
    for co in 0..g.c_out {
        let grp = co / cog;
        let drow = &dy[co * g.t_out..(co + 1) * g.t_out];
        for cl in 0..cig {
            let ci = grp * cig + cl;
            let xrow = &mut dx[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let wv = w[(co * cig + cl) * g.kernel + k];
                if g.stride == 1 {
                    axpy(wv, drow, &mut xrow[k..k + g.t_out]);
                } else {
                    for (t, &d) in drow.iter().enumerate() {
                        xrow[t * g.stride + k] += wv * d;
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of the convolution with respect to its kernels.
pub fn conv1d_backward_weight<F: Float>(dy: &[F], x: &[F], g: &ConvGeom) -> Vec<F> {
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let mut dw = vec![F::zero(); g.c_out * cig * g.kernel];
    let mut strided = vec![F::zero(); g.t_out];
    for co in 0..g.c_out {
        let grp = co / cog;
        let drow = &dy[co * g.t_out..(co + 1) * g.t_out];
        for cl in 0..cig {
            let ci = grp * cig + cl;
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let acc = if g.stride == 1 {
                    dot(drow, &xrow[k..k + g.t_out])
                } else {
                    for (t, s) in strided.iter_mut().enumerate() {
                        *s = xrow[t * g.stride + k];
                    }
                    dot(drow, &strided)
                };
                dw[(co * cig + cl) * g.kernel + k] = acc;
            }
        }
    }
    dw
}

/// Per-row mean and reciprocal standard deviation (biased variance).
pub fn row_stats<F: Float>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, F::one() / (var + eps).sqrt())
}

pub fn layer_norm_forward<F: Float>(x: &[F], gain: &[F], bias: &[F], d: usize, eps: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, rstd) = row_stats(xr, eps);
        for i in 0..d {
            or[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
    }
    out
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<F: Float>(
    dy: &[F],
    x: &[F],
    gain: &[F],
    d: usize,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); x.len()];
    let mut dg = vec![F::zero(); d];
    let mut db = vec![F::zero(); d];
    let n = F::from_f64(d as f64);
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for ((xr, dyr), dxr) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let (mean, rstd) = row_stats(xr, eps);
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        m1 = m1 / n;
        m2 = m2 / n;
        for i in 0..d {
            dxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    (dx, dg, db)
}

#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    lit::<F>(0.5) * x * (F::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<F: Float>(x: F) -> F {
    let cdf = lit::<F>(0.5) * (F::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * lit(0.5)).exp() * lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

pub fn softmax_rows<F: Float>(x: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for i in 0..d {
            or[i] = (xr[i] - max).exp();
            total += or[i];
        }
        for o in or.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub fn log_softmax_rows<F: Float>(x: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let lse = log_sum_exp(xr);
        for i in 0..d {
            or[i] = xr[i] - lse;
        }
    }
    out
}

#[inline]
fn log_add<F: Float>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Blank-augmented label sequence `[blank, y1, blank, y2, …, blank]`.
pub fn ctc_extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Minimum frame count able to emit `target`: one frame per symbol plus one
/// separating blank between equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space forward variables; `alpha[t*S + s]` includes the emission at `t`.
pub fn ctc_alpha<F: Float>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> Vec<F> {
    let s_len = ext.len();
    let mut alpha = vec![F::neg_infinity(); t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == F::neg_infinity() { acc } else { acc + lp[t * v + ext[s]] };
        }
    }
    alpha
}

/// Log-space backward variables; `beta[t*S + s]` includes the emission at `t`.
pub fn ctc_beta<F: Float>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> Vec<F> {
    let s_len = ext.len();
    let mut beta = vec![F::neg_infinity(); t_len * s_len];
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = lp[last * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp[last * v + ext[s_len - 2]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if acc == F::neg_infinity() { acc } else { acc + lp[t * v + ext[s]] };
        }
    }
    beta
}

/// `log P(target | lp)` summed over every alignment.
pub fn ctc_log_likelihood<F: Float>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> F {
    let alpha = ctc_alpha(lp, t_len, v, ext);
    let s_len = ext.len();
    let row = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(row[s_len - 1], row[s_len - 2])
    } else {
        row[0]
    }
}

/// Gradient of `-log P(target | lp)` with respect to every entry of `lp`.
pub fn ctc_grad<F: Float>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> Vec<F> {
    let alpha = ctc_alpha(lp, t_len, v, ext);
    let beta = ctc_beta(lp, t_len, v, ext);
    let s_len = ext.len();
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 { log_add(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    let mut grad = vec![F::zero(); t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == F::neg_infinity() {
                continue;
            }
            let k = ext[s];
            grad[t * v + k] -= (ab - lp[t * v + k] - log_p).exp();
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        for n in [0usize, 1, 7, 8, 9, 17, 33] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 3.0).collect();
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.11).sin()).collect(); // 4×2
        let ab = matmul(&a, &b, 3, 4, 2);
        let bt = transpose(&b, 4, 2);
        let ab2 = matmul_bt(&a, &bt, 3, 4, 2);
        for (x, y) in ab.iter().zip(&ab2) {
            assert!((x - y).abs() < 1e-12);
        }
        let c: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect(); // 3×2
        let atc = matmul_at(&a, &c, 3, 4, 2);
        let reference = matmul(&transpose(&a, 3, 4), &c, 4, 3, 2);
        for (x, y) in atc.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn min_frames_counts_repeat_separators() {
        assert_eq!(ctc_min_frames(&[]), 0);
        assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
        assert_eq!(ctc_min_frames(&[1, 1, 2, 2]), 6);
    }
}
