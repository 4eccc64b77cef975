//! Softmax (scaled dot-product) attention and the baseline kernelised linear
//! attention, single- and multi-head, with their reverse-mode rules.
//!
//! Both kernels take `q`, `k`, `v` as `[L × d]` row-major matrices. With `H`
//! heads, columns `h·d/H .. (h+1)·d/H` belong to head `h`.

use crate::error::{Error, Result};
use crate::math::nn::elu_plus_one;
use crate::math::tensor::{dot, shape_str, Tensor};

/// Floor on the linear-attention normaliser `φ(q)ᵀ Σ φ(k)`.
pub const LINEAR_ATTENTION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub values: Tensor,
    /// `[L × L]` attention weights (single head only).
    pub weights: Option<Tensor>,
}

pub(crate) fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape(
            op,
            "matching [L x d] q, k, v",
            format!("{} {} {}", shape_str(q), shape_str(k), shape_str(v)),
        ));
    }
    if heads == 0 || q.cols() % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: width {} not divisible into {heads} heads",
            q.cols()
        )));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention. When `weights` is supplied it is
/// filled with the `[H × L × L]` probability matrices (zeros above the
/// diagonal under the causal mask); otherwise only one score row is live at a
/// time, so memory stays `O(L)` beyond the inputs.
pub(crate) fn softmax_attention_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    causal: bool,
    mut weights: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; l * d];
    let mut row = vec![0.0; l];
    if let Some(w) = weights.as_deref_mut() {
        w.clear();
        w.resize(heads * l * l, 0.0);
    }
    for h in 0..heads {
        let off = h * dh;
        for t in 0..l {
            let span = if causal { t + 1 } else { l };
            let qt = &q[t * d + off..t * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..span {
                let s = dot(qt, &k[j * d + off..j * d + off + dh]) * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for r in row.iter_mut().take(span) {
                *r = (*r - max).exp();
                sum += *r;
            }
            let inv = 1.0 / sum;
            let o = &mut out[t * d + off..t * d + off + dh];
            for j in 0..span {
                let p = row[j] * inv;
                row[j] = p;
                let vj = &v[j * d + off..j * d + off + dh];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += p * vv;
                }
            }
            if let Some(w) = weights.as_deref_mut() {
                w[(h * l + t) * l..(h * l + t) * l + span].copy_from_slice(&row[..span]);
            }
        }
    }
    out
}

/// Gradients of [`softmax_attention_kernel`] given the saved weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    d_out: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut dp = vec![0.0; l];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..l {
            let span = if causal { t + 1 } else { l };
            let p = &weights[(h * l + t) * l..(h * l + t) * l + span];
            let go = &d_out[t * d + off..t * d + off + dh];
            let mut inner = 0.0;
            for j in 0..span {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = dot(go, vj);
                inner += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (a, &g) in dvj.iter_mut().zip(go) {
                    *a += p[j] * g;
                }
            }
            let qt = &q[t * d + off..t * d + off + dh];
            for j in 0..span {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let dqt = &mut dq[t * d + off..t * d + off + dh];
                for (a, &kk) in dqt.iter_mut().zip(kj) {
                    *a += ds * kk;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (a, &qq) in dkj.iter_mut().zip(qt) {
                    *a += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Single-head `Softmax(QKᵀ/√d)V`, returning the weight matrix for inspection.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<AttentionOutput> {
    check_qkv("softmax_attention", q, k, v, 1)?;
    let (l, d) = (q.rows(), q.cols());
    let mut w = Vec::new();
    let out = softmax_attention_kernel(q.data(), k.data(), v.data(), l, d, 1, causal, Some(&mut w));
    Ok(AttentionOutput {
        values: Tensor::matrix(l, d, out)?.finite("softmax_attention")?,
        weights: Some(Tensor::matrix(l, l, w)?),
    })
}

pub fn multi_head_softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    check_qkv("multi_head_softmax_attention", q, k, v, heads)?;
    let (l, d) = (q.rows(), q.cols());
    let out = softmax_attention_kernel(q.data(), k.data(), v.data(), l, d, heads, causal, None);
    Tensor::matrix(l, d, out)?.finite("multi_head_softmax_attention")
}

/// Kernelised linear attention on already feature-mapped queries and keys.
///
/// Per head, `o_t = S_t φq_t / max(φq_tᵀ z_t, floor)` where `S_t = Σ v_i φk_iᵀ`
/// and `z_t = Σ φk_i` run over `i ≤ t` (causal) or all `i`.
pub(crate) fn linear_attention_kernel(
    phi_q: &[f64],
    phi_k: &[f64],
    v: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; l * d];
    let mut state = vec![0.0; dh * dh];
    let mut z = vec![0.0; dh];
    for h in 0..heads {
        let off = h * dh;
        state.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);
        if !causal {
            for i in 0..l {
                accumulate_kv(&mut state, &mut z, &phi_k[i * d + off..][..dh], &v[i * d + off..][..dh]);
            }
        }
        for t in 0..l {
            if causal {
                accumulate_kv(&mut state, &mut z, &phi_k[t * d + off..][..dh], &v[t * d + off..][..dh]);
            }
            let qt = &phi_q[t * d + off..][..dh];
            let den = dot(qt, &z).max(LINEAR_ATTENTION_FLOOR);
            let o = &mut out[t * d + off..][..dh];
            for a in 0..dh {
                o[a] = dot(&state[a * dh..(a + 1) * dh], qt) / den;
            }
        }
    }
    out
}

#[inline]
fn accumulate_kv(state: &mut [f64], z: &mut [f64], k: &[f64], v: &[f64]) {
    let dh = k.len();
    for a in 0..dh {
        let row = &mut state[a * dh..(a + 1) * dh];
        for (s, &kb) in row.iter_mut().zip(k) {
            *s += v[a] * kb;
        }
    }
    for (zz, &kb) in z.iter_mut().zip(k) {
        *zz += kb;
    }
}

/// `R += dnum φqᵀ`, `r += dden φq`.
#[inline]
fn accumulate_cotangent(big_r: &mut [f64], small_r: &mut [f64], q: &[f64], dnum: &[f64], dden: f64) {
    let dh = q.len();
    for a in 0..dh {
        let row = &mut big_r[a * dh..(a + 1) * dh];
        for (r, &qb) in row.iter_mut().zip(q) {
            *r += dnum[a] * qb;
        }
    }
    for (r, &qb) in small_r.iter_mut().zip(q) {
        *r += dden * qb;
    }
}

/// Gradients of [`linear_attention_kernel`] with respect to `φq`, `φk`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_attention_backward(
    phi_q: &[f64],
    phi_k: &[f64],
    v: &[f64],
    d_out: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut state = vec![0.0; dh * dh];
    let mut z = vec![0.0; dh];
    // per-position cotangents of numerator and denominator
    let mut dnum = vec![0.0; l * dh];
    let mut dden = vec![0.0; l];
    let mut num = vec![0.0; dh];
    let mut big_r = vec![0.0; dh * dh];
    let mut small_r = vec![0.0; dh];
    for h in 0..heads {
        let off = h * dh;
        state.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);
        if !causal {
            for i in 0..l {
                accumulate_kv(&mut state, &mut z, &phi_k[i * d + off..][..dh], &v[i * d + off..][..dh]);
            }
        }
        for t in 0..l {
            if causal {
                accumulate_kv(&mut state, &mut z, &phi_k[t * d + off..][..dh], &v[t * d + off..][..dh]);
            }
            let qt = &phi_q[t * d + off..][..dh];
            let raw = dot(qt, &z);
            let floored = raw < LINEAR_ATTENTION_FLOOR;
            let den = if floored { LINEAR_ATTENTION_FLOOR } else { raw };
            for a in 0..dh {
                num[a] = dot(&state[a * dh..(a + 1) * dh], qt);
            }
            let go = &d_out[t * d + off..][..dh];
            let dn = &mut dnum[t * dh..(t + 1) * dh];
            for a in 0..dh {
                dn[a] = go[a] / den;
            }
            dden[t] = if floored { 0.0 } else { -dot(go, &num) / (den * den) };
            // dφq_t = S_tᵀ dnum_t + z_t dden_t
            let dqt = &mut dq[t * d + off..][..dh];
            for a in 0..dh {
                let s_row = &state[a * dh..(a + 1) * dh];
                for b in 0..dh {
                    dqt[b] += s_row[b] * dn[a];
                }
            }
            for b in 0..dh {
                dqt[b] += z[b] * dden[t];
            }
        }
        big_r.iter_mut().for_each(|x| *x = 0.0);
        small_r.iter_mut().for_each(|x| *x = 0.0);
        if !causal {
            for t in 0..l {
                accumulate_cotangent(&mut big_r, &mut small_r, &phi_q[t * d + off..][..dh], &dnum[t * dh..(t + 1) * dh], dden[t]);
            }
        }
        for i in (0..l).rev() {
            if causal {
                accumulate_cotangent(&mut big_r, &mut small_r, &phi_q[i * d + off..][..dh], &dnum[i * dh..(i + 1) * dh], dden[i]);
            }
            let ki = &phi_k[i * d + off..][..dh];
            let vi = &v[i * d + off..][..dh];
            // R = Σ dnum_t φq_tᵀ; dv_i = R φk_i; dφk_i = Rᵀ v_i + r
            let dvi = &mut dv[i * d + off..][..dh];
            for a in 0..dh {
                dvi[a] += dot(&big_r[a * dh..(a + 1) * dh], ki);
            }
            let dki = &mut dk[i * d + off..][..dh];
            for a in 0..dh {
                let r_row = &big_r[a * dh..(a + 1) * dh];
                for b in 0..dh {
                    dki[b] += r_row[b] * vi[a];
                }
            }
            for b in 0..dh {
                dki[b] += small_r[b];
            }
        }
    }
    (dq, dk, dv)
}

/// Baseline linear attention `Norm(φ(Q)(φ(K)ᵀV))` with `φ = elu + 1`.
///
/// The causal form runs as a running-sum recurrence in `O(L·d²)`.
pub fn linear_attention_baseline(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    multi_head_linear_attention(q, k, v, 1, causal)
}

pub fn multi_head_linear_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    check_qkv("linear_attention", q, k, v, heads)?;
    let (l, d) = (q.rows(), q.cols());
    let phi_q: Vec<f64> = q.data().iter().map(|&x| elu_plus_one(x)).collect();
    let phi_k: Vec<f64> = k.data().iter().map(|&x| elu_plus_one(x)).collect();
    let out = linear_attention_kernel(&phi_q, &phi_k, v.data(), l, d, heads, causal);
    Tensor::matrix(l, d, out)?.finite("linear_attention")
}
