//! Forward and backward kernels for the individual layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::{AttnIx, FfnIx, NormIx, Params};
use super::scalar::{gemm, matmul, matmul_nt, matmul_tn_acc, Scalar, View, ViewMut};
use super::ModelError;

/// Additive score for masked attention positions.
pub const MASK_VALUE: f64 = -1e9;

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal table, `t x d` row-major: `sin` on even columns, `cos` on odd.
pub fn positional_encoding(t: usize, d: usize) -> Result<Vec<f64>, ModelError> {
    if !d.is_multiple_of(2) {
        return Err(ModelError::OddDim(d));
    }
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// `y = x W (+ b)` for `x: n x in`, `W: in x out`.
pub(crate) fn linear<F: Scalar>(x: &[F], n: usize, p: &Params<F>, w: usize, b: Option<usize>) -> Vec<F> {
    let shape = &p.tensors[w].shape;
    let (din, dout) = (shape[0], shape[1]);
    let mut y = vec![F::zero(); n * dout];
    matmul(x, n, din, p.get(w), dout, &mut y);
    if let Some(b) = b {
        let bias = p.get(b);
        for row in y.chunks_exact_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns `dL/dx`.
pub(crate) fn linear_backward<F: Scalar>(
    x: &[F],
    n: usize,
    dy: &[F],
    p: &Params<F>,
    g: &mut Params<F>,
    w: usize,
    b: Option<usize>,
) -> Vec<F> {
    let shape = &p.tensors[w].shape;
    let (din, dout) = (shape[0], shape[1]);
    matmul_tn_acc(x, n, din, dy, dout, g.get_mut(w));
    if let Some(b) = b {
        let gb = g.get_mut(b);
        for row in dy.chunks_exact(dout) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut dx = vec![F::zero(); n * din];
    matmul_nt(dy, n, dout, p.get(w), din, &mut dx);
    dx
}

pub(crate) fn add_into<F: Scalar>(acc: &mut [F], v: &[F]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

pub(crate) fn layer_norm<F: Scalar>(x: &[F], d: usize, p: &Params<F>, ix: NormIx) -> (Vec<F>, NormCache<F>) {
    let (gain, bias) = (p.get(ix.gain), p.get(ix.bias));
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::lit(1.0 / d as f64);
    let eps = F::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    d: usize,
    cache: &NormCache<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    ix: NormIx,
) -> Vec<F> {
    let gain = p.get(ix.gain);
    let rows = dy.len() / d;
    let mut dgain = vec![F::zero(); d];
    let mut dbias = vec![F::zero(); d];
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::lit(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    add_into(g.get_mut(ix.gain), &dgain);
    add_into(g.get_mut(ix.bias), &dbias);
    dx
}

/// Inverted dropout in place; returns the scaled keep-mask for backward.
pub(crate) fn dropout<F: Scalar>(x: &mut [F], p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let scale = F::lit(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.gen::<f64>() >= p { scale } else { F::zero() })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub(crate) fn dropout_backward<F: Scalar>(dy: &[F], mask: &Option<Vec<F>>) -> Vec<F> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone)]
pub struct AttnMask {
    /// `batch x tk`, `true` for keys that may be attended.
    pub key_valid: Vec<bool>,
    /// Additionally hide keys after the query position.
    pub causal: bool,
}

impl AttnMask {
    fn allowed(&self, b: usize, tk: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * tk + j] && !(self.causal && j > i)
    }
}

/// Masked softmax over one score row, in place. Rows with no visible key
/// become all zeros.
fn masked_softmax_row<F: Scalar>(row: &mut [F], allowed: impl Fn(usize) -> bool) {
    let masked = F::lit(MASK_VALUE);
    let mut any = false;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            any = true;
        } else {
            *v = masked;
        }
    }
    if !any {
        row.fill(F::zero());
        return;
    }
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `batch x heads x tq x tk` attention weights.
    probs: Vec<F>,
    /// Concatenated head outputs before `Wo`.
    o: Vec<F>,
}

pub(crate) struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub heads: usize,
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
pub(crate) fn multi_head_attention<F: Scalar>(
    xq: &[F],
    xkv: &[F],
    s: &AttnShape,
    mask: &AttnMask,
    p: &Params<F>,
    ix: AttnIx,
) -> (Vec<F>, AttnCache<F>) {
    let (nq, nk) = (s.batch * s.tq, s.batch * s.tk);
    let q = linear(xq, nq, p, ix.wq, None);
    let k = linear(xkv, nk, p, ix.wk, None);
    let v = linear(xkv, nk, p, ix.wv, None);
    let (probs, o) = attend(&q, &k, &v, s.tk, s, mask);
    let out = linear(&o, nq, p, ix.wo, None);
    (out, AttnCache { q, k, v, probs, o })
}

/// Scaled dot-product attention over projected `q`, `k`, `v`, returning the
/// weights and the concatenated head outputs. `k` and `v` hold `kv_rows`
/// rows per batch element, of which the first `s.tk` are used.
pub(crate) fn attend<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    kv_rows: usize,
    s: &AttnShape,
    mask: &AttnMask,
) -> (Vec<F>, Vec<F>) {
    let (d, h, tq, tk) = (s.d, s.heads, s.tq, s.tk);
    let dk = d / h;
    let scale = F::lit(1.0 / (dk as f64).sqrt());
    let mut probs = vec![F::zero(); s.batch * h * tq * tk];
    let mut o = vec![F::zero(); s.batch * tq * d];
    probs
        .par_chunks_mut((h * tq * tk).max(1))
        .zip(o.par_chunks_mut((tq * d).max(1)))
        .enumerate()
        .for_each(|(b, (pb, ob))| {
            for hh in 0..h {
                let off = hh * dk;
                let qv = View::strided(&q[b * tq * d + off..], tq, dk, d, 1);
                let kv = View::strided(&k[b * kv_rows * d + off..], tk, dk, d, 1);
                let vv = View::strided(&v[b * kv_rows * d + off..], tk, dk, d, 1);
                let ph = &mut pb[hh * tq * tk..(hh + 1) * tq * tk];
                gemm(scale, qv, kv.t(), F::zero(), ViewMut::new(ph, tq, tk));
                for i in 0..tq {
                    masked_softmax_row(&mut ph[i * tk..(i + 1) * tk], |j| mask.allowed(b, tk, i, j));
                }
                let ph = &pb[hh * tq * tk..(hh + 1) * tq * tk];
                gemm(
                    F::one(),
                    View::new(ph, tq, tk),
                    vv,
                    F::zero(),
                    ViewMut::strided(&mut ob[off..], tq, dk, d, 1),
                );
            }
        });
    (probs, o)
}

/// Returns `(dL/dxq, dL/dxkv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention_backward<F: Scalar>(
    xq: &[F],
    xkv: &[F],
    s: &AttnShape,
    cache: &AttnCache<F>,
    dout: &[F],
    p: &Params<F>,
    g: &mut Params<F>,
    ix: AttnIx,
) -> (Vec<F>, Vec<F>) {
    let (d, h, tq, tk) = (s.d, s.heads, s.tq, s.tk);
    let (nq, nk) = (s.batch * tq, s.batch * tk);
    let dk = d / h;
    let scale = F::lit(1.0 / (dk as f64).sqrt());
    let d_o = linear_backward(&cache.o, nq, dout, p, g, ix.wo, None);
    let mut dq = vec![F::zero(); nq * d];
    let mut dkk = vec![F::zero(); nk * d];
    let mut dv = vec![F::zero(); nk * d];
    let (q, k, v, probs) = (&cache.q, &cache.k, &cache.v, &cache.probs);
    dq.par_chunks_mut((tq * d).max(1))
        .zip(dkk.par_chunks_mut((tk * d).max(1)))
        .zip(dv.par_chunks_mut((tk * d).max(1)))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let mut dp = vec![F::zero(); tq * tk];
            for hh in 0..h {
                let off = hh * dk;
                let ph = &probs[(b * h + hh) * tq * tk..(b * h + hh + 1) * tq * tk];
                let dov = View::strided(&d_o[b * tq * d + off..], tq, dk, d, 1);
                let qv = View::strided(&q[b * tq * d + off..], tq, dk, d, 1);
                let kv = View::strided(&k[b * tk * d + off..], tk, dk, d, 1);
                let vv = View::strided(&v[b * tk * d + off..], tk, dk, d, 1);
                // dV = P^T dO
                gemm(
                    F::one(),
                    View::new(ph, tq, tk).t(),
                    dov,
                    F::zero(),
                    ViewMut::strided(&mut dvb[off..], tk, dk, d, 1),
                );
                // dP = dO V^T, then the softmax Jacobian.
                gemm(F::one(), dov, vv.t(), F::zero(), ViewMut::new(&mut dp, tq, tk));
                for i in 0..tq {
                    let pr = &ph[i * tk..(i + 1) * tk];
                    let dr = &mut dp[i * tk..(i + 1) * tk];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                gemm(
                    F::one(),
                    View::new(&dp, tq, tk),
                    kv,
                    F::zero(),
                    ViewMut::strided(&mut dqb[off..], tq, dk, d, 1),
                );
                gemm(
                    F::one(),
                    View::new(&dp, tq, tk).t(),
                    qv,
                    F::zero(),
                    ViewMut::strided(&mut dkb[off..], tk, dk, d, 1),
                );
            }
        });
    let dxq = linear_backward(xq, nq, &dq, p, g, ix.wq, None);
    let mut dxkv = linear_backward(xkv, nk, &dkk, p, g, ix.wk, None);
    add_into(&mut dxkv, &linear_backward(xkv, nk, &dv, p, g, ix.wv, None));
    (dxq, dxkv)
}

#[derive(Debug, Clone)]
pub struct FfnCache<F> {
    hidden: Vec<F>,
}

pub(crate) fn feed_forward<F: Scalar>(x: &[F], n: usize, p: &Params<F>, ix: FfnIx) -> (Vec<F>, FfnCache<F>) {
    let mut hidden = linear(x, n, p, ix.w1, Some(ix.b1));
    for v in &mut hidden {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    let y = linear(&hidden, n, p, ix.w2, Some(ix.b2));
    (y, FfnCache { hidden })
}

pub(crate) fn feed_forward_backward<F: Scalar>(
    x: &[F],
    n: usize,
    cache: &FfnCache<F>,
    dy: &[F],
    p: &Params<F>,
    g: &mut Params<F>,
    ix: FfnIx,
) -> Vec<F> {
    let mut dh = linear_backward(&cache.hidden, n, dy, p, g, ix.w2, Some(ix.b2));
    for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
        if h <= F::zero() {
            *d = F::zero();
        }
    }
    linear_backward(x, n, &dh, p, g, ix.w1, Some(ix.b1))
}

/// Single-head scaled dot-product attention on dense row-major matrices.
///
/// `q: tq x dk`, `k: tk x dk`, `v: tk x dv`, `mask: tq x tk` with `true`
/// marking visible positions. Returns `tq x dv`; a query with no visible key
/// yields a zero row.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    tq: usize,
    tk: usize,
    dk: usize,
    dv: usize,
) -> Result<Vec<f64>, ModelError> {
    if q.len() != tq * dk || k.len() != tk * dk || v.len() != tk * dv || mask.len() != tq * tk {
        return Err(ModelError::ShapeMismatch(format!(
            "attention: q {} k {} v {} mask {} for tq={tq} tk={tk} dk={dk} dv={dv}",
            q.len(),
            k.len(),
            v.len(),
            mask.len()
        )));
    }
    let mut scores = vec![0.0; tq * tk];
    matmul_nt(q, tq, dk, k, tk, &mut scores);
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..tq {
        let row = &mut scores[i * tk..(i + 1) * tk];
        row.iter_mut().for_each(|s| *s *= scale);
        masked_softmax_row(row, |j| mask[i * tk + j]);
    }
    let mut out = vec![0.0; tq * dv];
    matmul(&scores, tq, tk, v, dv, &mut out);
    Ok(out)
}

/// Mean token cross-entropy and its gradient w.r.t. the logits.
///
/// `logits: rows x vocab`; rows with `mask == false` are ignored. With no
/// counted rows the loss is zero.
pub(crate) fn cross_entropy<F: Scalar>(logits: &[F], vocab: usize, targets: &[u32], mask: &[bool]) -> (f64, Vec<F>) {
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![F::zero(); logits.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (r, row) in logits.chunks_exact(vocab).enumerate() {
        if !mask[r] {
            continue;
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets[r] as usize;
        total += lse - row[t].as_f64();
        for (j, gv) in grad[r * vocab..(r + 1) * vocab].iter_mut().enumerate() {
            let p = (row[j].as_f64() - lse).exp();
            let onehot = if j == t { 1.0 } else { 0.0 };
            *gv = F::lit((p - onehot) * inv);
        }
    }
    (total * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
        assert!((pe[6] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(positional_encoding(3, 5), Err(ModelError::OddDim(5))));
    }

    #[test]
    fn attention_picks_matching_key() {
        // Query equals key 0; keys 1 and 2 are orthogonal to it, so the
        // scores are [200, 0, 0] / sqrt(2).
        let q = [10.0, 10.0];
        let k = [10.0, 10.0, 1.0, -1.0, -1.0, 1.0];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = attention(&q, &k, &v, &[true; 3], 1, 3, 2, 2).unwrap();
        // Hand softmax: exp(200/sqrt2) dominates exp(0) by e^141.
        let s0 = 200.0 / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + 2.0 * (-s0).exp());
        assert!((w0 - 1.0).abs() < 1e-12);
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn attention_identical_values_and_masking() {
        let q = [0.3, -1.0, 2.0, 0.5];
        let k = [1.0, 2.0, -0.5, 0.1, 0.7, 0.7];
        let v = [4.0, -1.0, 4.0, -1.0, 4.0, -1.0];
        let out = attention(&q, &k, &v, &[true, true, true, true, false, true], 2, 3, 2, 2).unwrap();
        for row in out.chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12);
        }
        let out = attention(&q, &k, &v, &[false, false, false, true, true, true], 2, 3, 2, 2).unwrap();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!(attention(&q, &k, &v, &[true; 5], 2, 3, 2, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_logits() {
        let mut row = vec![1e4f32, -1e4, 3.0, 1e4 - 1.0];
        masked_softmax_row(&mut row, |j| j != 2);
        assert_eq!(row[2], 0.0);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6 && row.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let v = 103;
        let logits = vec![0.25f64; 2 * v];
        let (loss, _) = cross_entropy(&logits, v, &[5, 7], &[true, true]);
        assert!((loss - (103f64).ln()).abs() < 1e-12);
        assert!((loss - 4.6347).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut logits = vec![0.0f64; 7];
            logits[3] = margin;
            let (loss, _) = cross_entropy(&logits, 7, &[3], &[true]);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_sum_oracle() {
        // 2 x 5 positions, vocab 7, pseudo-random logits.
        let (b, t, v) = (2, 5, 7);
        let logits: Vec<f64> = (0..b * t * v).map(|i| ((i * 7919 % 97) as f64 / 13.0).sin() * 3.0).collect();
        let targets: Vec<u32> = (0..b * t).map(|i| (i * 5 % 7) as u32).collect();
        let mask: Vec<bool> = (0..b * t).map(|i| i % 5 != 4).collect();
        let (loss, _) = cross_entropy(&logits, v, &targets, &mask);
        let mut total = 0.0;
        let mut n = 0.0;
        for r in 0..b * t {
            if !mask[r] {
                continue;
            }
            let row = &logits[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[targets[r] as usize].exp() / z).ln();
            n += 1.0;
        }
        assert!((loss - total / n).abs() < 1e-9);
    }

    #[test]
    fn dropout_mask_scaling() {
        use rand::SeedableRng;
        let mut x = vec![1.0f64; 10_000];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout(&mut x, 0.25, Some(&mut rng)).unwrap();
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.75).abs() < 0.02);
        assert!(x.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let mut y = vec![1.0f64; 4];
        assert!(dropout(&mut y, 0.25, None).is_none());
        assert_eq!(y, vec![1.0; 4]);
    }
}
