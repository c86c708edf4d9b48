//! Dense building blocks with hand-written backward passes.
//!
//! Activations are row-major `[rows, dim]`; weights are `[out, in]`. Backward
//! functions accumulate into parameter gradients and overwrite input gradients
//! unless noted.

use super::real::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[r, o] = bias[o] + sum_i inp[r, i] * w[o, i]`
pub fn linear_forward<T: Real>(
    out: &mut [T],
    inp: &[T],
    w: &[T],
    bias: Option<&[T]>,
    in_dim: usize,
    out_dim: usize,
) {
    let rows = inp.len() / in_dim;
    debug_assert_eq!(out.len(), rows * out_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    for r in 0..rows {
        let x = &inp[r * in_dim..(r + 1) * in_dim];
        let o_row = &mut out[r * out_dim..(r + 1) * out_dim];
        // four weight rows per pass so each input row load is reused
        let mut o = 0;
        while o + 4 <= out_dim {
            let w0 = &w[o * in_dim..(o + 1) * in_dim];
            let w1 = &w[(o + 1) * in_dim..(o + 2) * in_dim];
            let w2 = &w[(o + 2) * in_dim..(o + 3) * in_dim];
            let w3 = &w[(o + 3) * in_dim..(o + 4) * in_dim];
            let (s0, s1, s2, s3) = dot4(x, w0, w1, w2, w3);
            o_row[o] = s0;
            o_row[o + 1] = s1;
            o_row[o + 2] = s2;
            o_row[o + 3] = s3;
            o += 4;
        }
        while o < out_dim {
            o_row[o] = dot(x, &w[o * in_dim..(o + 1) * in_dim]);
            o += 1;
        }
        if let Some(b) = bias {
            for (v, bi) in o_row.iter_mut().zip(b) {
                *v += *bi;
            }
        }
    }
}

#[inline]
fn dot4<T: Real>(x: &[T], w0: &[T], w1: &[T], w2: &[T], w3: &[T]) -> (T, T, T, T) {
    // Same summation order as `dot` so results match the scalar path exactly.
    let n8 = x.len() / 8 * 8;
    let mut a0 = [T::zero(); 8];
    let mut a1 = [T::zero(); 8];
    let mut a2 = [T::zero(); 8];
    let mut a3 = [T::zero(); 8];
    let mut j = 0;
    while j < n8 {
        let xs = &x[j..j + 8];
        let (c0, c1, c2, c3) = (&w0[j..j + 8], &w1[j..j + 8], &w2[j..j + 8], &w3[j..j + 8]);
        for i in 0..8 {
            a0[i] += xs[i] * c0[i];
            a1[i] += xs[i] * c1[i];
            a2[i] += xs[i] * c2[i];
            a3[i] += xs[i] * c3[i];
        }
        j += 8;
    }
    let fold = |acc: &[T; 8], w: &[T]| {
        let mut tail = T::zero();
        for k in n8..x.len() {
            tail += x[k] * w[k];
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    };
    (fold(&a0, w0), fold(&a1, w1), fold(&a2, w2), fold(&a3, w3))
}

/// Backward of [`linear_forward`]. `dinp` is overwritten; `dw`/`db` accumulate.
/// Rows of `dout` that are entirely zero are skipped.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dinp: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
    dout: &[T],
    inp: &[T],
    w: &[T],
    in_dim: usize,
    out_dim: usize,
) {
    let rows = inp.len() / in_dim;
    let live: Vec<bool> = (0..rows)
        .map(|r| dout[r * out_dim..(r + 1) * out_dim].iter().any(|v| *v != T::zero()))
        .collect();
    if let Some(dinp) = dinp {
        dinp.iter_mut().for_each(|v| *v = T::zero());
        for r in (0..rows).filter(|&r| live[r]) {
            let d_row = &dout[r * out_dim..(r + 1) * out_dim];
            let di = &mut dinp[r * in_dim..(r + 1) * in_dim];
            for (o, &g) in d_row.iter().enumerate() {
                if g != T::zero() {
                    axpy(di, g, &w[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
    }
    for r in (0..rows).filter(|&r| live[r]) {
        let d_row = &dout[r * out_dim..(r + 1) * out_dim];
        let x = &inp[r * in_dim..(r + 1) * in_dim];
        for (o, &g) in d_row.iter().enumerate() {
            if g != T::zero() {
                axpy(&mut dw[o * in_dim..(o + 1) * in_dim], g, x);
            }
        }
    }
    if let Some(db) = db {
        for r in (0..rows).filter(|&r| live[r]) {
            for (b, &g) in db.iter_mut().zip(&dout[r * out_dim..(r + 1) * out_dim]) {
                *b += g;
            }
        }
    }
}

/// Saved state of a LayerNorm / RMSNorm application.
#[derive(Debug, Clone, Default)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

/// LayerNorm (`bias = Some`) or RMSNorm (`bias = None`, no mean subtraction).
pub fn norm_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, dim: usize) -> NormCache<T> {
    let rows = x.len() / dim;
    let eps = T::of(NORM_EPS);
    let n = T::of(dim as f64);
    let mut cache = NormCache {
        xhat: vec![T::zero(); x.len()],
        rstd: vec![T::zero(); rows],
        out: vec![T::zero(); x.len()],
    };
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = if bias.is_some() {
            xr.iter().copied().sum::<T>() / n
        } else {
            T::zero()
        };
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        cache.rstd[r] = rstd;
        for i in 0..dim {
            let h = (xr[i] - mean) * rstd;
            cache.xhat[r * dim + i] = h;
            let mut o = h * weight[i];
            if let Some(b) = bias {
                o += b[i];
            }
            cache.out[r * dim + i] = o;
        }
    }
    cache
}

/// Backward of [`norm_forward`]; adds the input gradient into `dx`.
pub fn norm_backward<T: Real>(
    dx: &mut [T],
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    dout: &[T],
    cache: &NormCache<T>,
    weight: &[T],
    dim: usize,
) {
    let rows = dout.len() / dim;
    let centered = dbias.is_some();
    let n = T::of(dim as f64);
    let mut dbias = dbias;
    for r in 0..rows {
        let d = &dout[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_dh = T::zero();
        let mut mean_dh_xh = T::zero();
        for i in 0..dim {
            let dh = d[i] * weight[i];
            mean_dh += dh;
            mean_dh_xh += dh * xh[i];
            dweight[i] += d[i] * xh[i];
        }
        if let Some(db) = dbias.as_deref_mut() {
            for i in 0..dim {
                db[i] += d[i];
            }
        }
        mean_dh /= n;
        mean_dh_xh /= n;
        if !centered {
            mean_dh = T::zero();
        }
        let rstd = cache.rstd[r];
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            let dh = d[i] * weight[i];
            dxr[i] += rstd * (dh - mean_dh - xh[i] * mean_dh_xh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Rotary tables: `cos[t, i]`, `sin[t, i]` for `i < head_dim / 2`.
pub fn rope_tables<T: Real>(len: usize, head_dim: usize) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for t in 0..len {
        for i in 0..half {
            let freq = 10_000f64.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = t as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates adjacent pairs of every head slice of row `t` in place.
/// `inverse` applies the transpose rotation (used for gradients).
pub fn rope_apply<T: Real>(
    row: &mut [T],
    n_heads: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..half {
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * c - b * s;
            row[base + 2 * i + 1] = a * s + b * c;
        }
    }
}

/// Causal multi-head attention over a packed `[len, 3 * d]` q/k/v buffer.
/// Writes `y` (`[len, d]`) and returns probabilities `[heads, len, len]`.
pub fn attention_forward<T: Real>(
    y: &mut [T],
    qkv: &[T],
    len: usize,
    d: usize,
    n_heads: usize,
) -> Vec<T> {
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut att = vec![T::zero(); n_heads * len * len];
    y.iter_mut().for_each(|v| *v = T::zero());
    let mut scores = vec![T::zero(); len];
    for h in 0..n_heads {
        for t in 0..len {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            let mut max = T::neg_infinity();
            for u in 0..=t {
                let k = &qkv[u * 3 * d + d + h * hd..u * 3 * d + d + (h + 1) * hd];
                let s = dot(q, k) * scale;
                scores[u] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for s in scores.iter_mut().take(t + 1) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let a_row = &mut att[(h * len + t) * len..(h * len + t + 1) * len];
            let y_row = &mut y[t * d + h * hd..t * d + (h + 1) * hd];
            for u in 0..=t {
                let a = scores[u] / sum;
                a_row[u] = a;
                let v = &qkv[u * 3 * d + 2 * d + h * hd..u * 3 * d + 2 * d + (h + 1) * hd];
                axpy(y_row, a, v);
            }
        }
    }
    att
}

/// Backward of [`attention_forward`]; overwrites `dqkv`.
pub fn attention_backward<T: Real>(
    dqkv: &mut [T],
    dy: &[T],
    qkv: &[T],
    att: &[T],
    len: usize,
    d: usize,
    n_heads: usize,
) {
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    dqkv.iter_mut().for_each(|v| *v = T::zero());
    let mut da = vec![T::zero(); len];
    for h in 0..n_heads {
        for t in 0..len {
            let dy_row = &dy[t * d + h * hd..t * d + (h + 1) * hd];
            if dy_row.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let a_row = &att[(h * len + t) * len..(h * len + t + 1) * len];
            let mut weighted = T::zero();
            for u in 0..=t {
                let v_off = u * 3 * d + 2 * d + h * hd;
                da[u] = dot(dy_row, &qkv[v_off..v_off + hd]);
                weighted += a_row[u] * da[u];
                axpy(&mut dqkv[v_off..v_off + hd], a_row[u], dy_row);
            }
            let q_off = t * 3 * d + h * hd;
            for u in 0..=t {
                let ds = a_row[u] * (da[u] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let k_off = u * 3 * d + d + h * hd;
                // dq_t += ds * k_u ; dk_u += ds * q_t
                for i in 0..hd {
                    let kv = qkv[k_off + i];
                    let qv = qkv[q_off + i];
                    dqkv[q_off + i] += ds * kv;
                    dqkv[k_off + i] += ds * qv;
                }
            }
        }
    }
}

/// `log(sum(exp(x)))` over the given indices of `row`.
pub fn logsumexp_over<T: Real>(row: &[T], support: &[u32]) -> T {
    let max = support
        .iter()
        .map(|&i| row[i as usize])
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = support.iter().map(|&i| (row[i as usize] - max).exp()).sum();
    max + sum.ln()
}
