//! Temporal-aware delta network (TADN).
//!
//! One TADN layer runs four stages over a sequence of hidden vectors
//! `h_1..h_L` observed at timestamps `t_1..t_L`, predicting at time `t_now`:
//!
//! 1. temporal decay `τ_t = exp(−(t_now − t_t)/T)`;
//! 2. gates mixing a learned, decay-scaled gate with a static similarity gate,
//!    `g = α·[σ(W·[h_t, Δh_t] + b)·τ_t] + (1 − α)·g_static`;
//! 3. fusion `h̃_t = g ⊙ Δh_t + (1 − g) ⊙ h_t`;
//! 4. the gated delta recurrence
//!    `S_t = S_{t−1}(I − g_t β_t k_t k_tᵀ) + β_t v_t k_tᵀ`, `o_t = S_t q_t`.
//!
//! `Δh_t = h_t − h̄_t` where `h̄_t` is the running mean of `h_1..h_t`, and
//! `g_static = σ(h_tᵀ h̄_t / √d)`. Two gate heads share `α` and `τ`: a
//! vector gate for the fusion and a scalar gate for the recurrence.
//!
//! [`tadn_scan`] evaluates the recurrence left to right in `O(L·d²)`.
//! [`tadn_closed_form`] evaluates the unrolled sum
//! `o_t = Σ_{i≤t} β_i v_i k_iᵀ 𝒟(t,i) q_t` with
//! `𝒟(t,i) = Π_{j=i+1..t}(I − g_j β_j k_j k_jᵀ)` built from explicit matrix
//! products; it exists to check the scan and is never used for training.

use crate::error::{Error, Result};
use crate::math::{dot, layer_norm, shape_str, sigmoid, LinearLayer, Tensor};

/// Floor on `‖k‖` when normalising keys, so an all-zero key stays zero.
pub const KEY_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TadnLayerParams {
    pub norm_gain: Tensor,
    pub norm_shift: Tensor,
    /// `[2d → d]`, input is `concat(h_t, Δh_t)`.
    pub gate_proj: LinearLayer,
    /// `[d → 1]`
    pub gate_scalar_proj: LinearLayer,
    pub q_proj: LinearLayer,
    pub k_proj: LinearLayer,
    pub v_proj: LinearLayer,
    /// `[d → 1]`
    pub beta_proj: LinearLayer,
    pub out_proj: LinearLayer,
    pub alpha: f64,
    pub decay_period: f64,
    pub n_heads: usize,
}

impl TadnLayerParams {
    /// All-zero projections with unit norm gain.
    pub fn zeros(d: usize, n_heads: usize, alpha: f64, decay_period: f64) -> Self {
        TadnLayerParams {
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_shift: Tensor::zeros(&[d]),
            gate_proj: LinearLayer::zeros(2 * d, d),
            gate_scalar_proj: LinearLayer::zeros(d, 1),
            q_proj: LinearLayer::zeros(d, d),
            k_proj: LinearLayer::zeros(d, d),
            v_proj: LinearLayer::zeros(d, d),
            beta_proj: LinearLayer::zeros(d, 1),
            out_proj: LinearLayer::zeros(d, d),
            alpha,
            decay_period,
            n_heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.q_proj.d_in()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.decay_period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decay period {} must be positive",
                self.decay_period
            )));
        }
        let d = self.d_model();
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!("width {d} not divisible into {} heads", self.n_heads)));
        }
        let dims = [
            (&self.gate_proj, 2 * d, d),
            (&self.gate_scalar_proj, d, 1),
            (&self.q_proj, d, d),
            (&self.k_proj, d, d),
            (&self.v_proj, d, d),
            (&self.beta_proj, d, 1),
            (&self.out_proj, d, d),
        ];
        for (layer, i, o) in dims {
            if layer.d_in() != i || layer.d_out() != o {
                return Err(Error::shape(
                    "TadnLayerParams",
                    format!("[{i} -> {o}] projection"),
                    shape_str(&layer.weight),
                ));
            }
        }
        if self.norm_gain.len() != d || self.norm_shift.len() != d {
            return Err(Error::shape("TadnLayerParams", format!("norm of width {d}"), shape_str(&self.norm_gain)));
        }
        Ok(())
    }
}

/// Per-head `d_h × d_h` state matrices of the delta recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct TadnState {
    n_heads: usize,
    head_dim: usize,
    s: Vec<f64>,
}

impl TadnState {
    pub fn new(n_heads: usize, head_dim: usize) -> Self {
        TadnState {
            n_heads,
            head_dim,
            s: vec![0.0; n_heads * head_dim * head_dim],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head(&self, h: usize) -> Tensor {
        let n = self.head_dim * self.head_dim;
        Tensor::matrix(self.head_dim, self.head_dim, self.s[h * n..(h + 1) * n].to_vec()).expect("state shape")
    }

    pub fn frobenius_norm(&self, h: usize) -> f64 {
        let n = self.head_dim * self.head_dim;
        self.s[h * n..(h + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Advances every head by one position. `q`, `k`, `v` are full-width rows
    /// (`n_heads · head_dim`); `k` is expected to be normalised per head.
    /// Returns `o_t = S_t q_t`, concatenated over heads.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], beta: f64, gate: f64) -> Vec<f64> {
        let dh = self.head_dim;
        let mut out = vec![0.0; self.n_heads * dh];
        let mut u = vec![0.0; dh];
        for h in 0..self.n_heads {
            let r = h * dh..(h + 1) * dh;
            delta_step(
                &mut self.s[h * dh * dh..(h + 1) * dh * dh],
                &q[r.clone()],
                &k[r.clone()],
                &v[r.clone()],
                beta,
                gate,
                &mut u,
                &mut out[r],
            );
        }
        out
    }
}

/// `S ← S(I − gβkkᵀ) + βvkᵀ`, then `out = S q`. `u` is scratch of length `d_h`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn delta_step(s: &mut [f64], q: &[f64], k: &[f64], v: &[f64], beta: f64, gate: f64, u: &mut [f64], out: &mut [f64]) {
    let dh = k.len();
    let c = gate * beta;
    for a in 0..dh {
        u[a] = dot(&s[a * dh..(a + 1) * dh], k);
    }
    for a in 0..dh {
        let coef = beta * v[a] - c * u[a];
        let row = &mut s[a * dh..(a + 1) * dh];
        for (x, &kb) in row.iter_mut().zip(k) {
            *x += coef * kb;
        }
        out[a] = dot(row, q);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateComponents {
    /// `[L]`
    pub tau: Tensor,
    /// `[L × d]`
    pub delta_h: Tensor,
    /// `[L × d]`, running mean of `h_1..h_t`.
    pub h_bar: Tensor,
    /// `[L]`
    pub g_static: Tensor,
    /// `[L × d]`, used by the fusion.
    pub g_vec: Tensor,
    /// `[L]`, used by the recurrence.
    pub g_scalar: Tensor,
}

/// Projected recurrence inputs: `k` already normalised per head, `beta` and
/// `gate` one scalar per position.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub beta: Tensor,
    pub gate: Tensor,
    pub n_heads: usize,
}

impl DeltaInputs {
    fn check(&self) -> Result<()> {
        let (l, d) = (self.q.rows(), self.q.cols());
        if self.k.shape() != self.q.shape() || self.v.shape() != self.q.shape() || self.q.shape().len() != 2 {
            return Err(Error::shape(
                "delta_rule",
                "matching [L x d] q, k, v",
                format!("{} {} {}", shape_str(&self.q), shape_str(&self.k), shape_str(&self.v)),
            ));
        }
        if self.beta.len() != l || self.gate.len() != l {
            return Err(Error::shape(
                "delta_rule",
                format!("beta and gate of length {l}"),
                format!("{} / {}", shape_str(&self.beta), shape_str(&self.gate)),
            ));
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!("width {d} not divisible into {} heads", self.n_heads)));
        }
        Ok(())
    }
}

/// `τ_t = exp(−(current_time − event_time_t) / T)`.
pub fn compute_temporal_decay(event_times: &Tensor, current_time: f64, decay_period: f64) -> Result<Tensor> {
    if !(decay_period > 0.0) || !decay_period.is_finite() {
        return Err(Error::InvalidArgument(format!("decay period {decay_period} must be positive")));
    }
    let mut tau = Vec::with_capacity(event_times.len());
    for (i, &t) in event_times.data().iter().enumerate() {
        let elapsed = current_time - t;
        if !(elapsed >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "event {i} at time {t} is after the prediction time {current_time}"
            )));
        }
        tau.push((-elapsed / decay_period).exp());
    }
    Ok(Tensor::from_vec(tau))
}

/// Running mean over rows: row `t` of the result averages rows `0..=t`.
pub(crate) fn causal_mean_kernel(h: &[f64], l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * d];
    let mut acc = vec![0.0; d];
    for t in 0..l {
        let inv = 1.0 / (t + 1) as f64;
        for j in 0..d {
            acc[j] += h[t * d + j];
            out[t * d + j] = acc[j] * inv;
        }
    }
    out
}

fn check_rows(op: &'static str, h: &Tensor, tau: &Tensor, d: usize) -> Result<()> {
    if h.shape().len() != 2 || h.cols() != d || tau.len() != h.rows() {
        return Err(Error::shape(
            op,
            format!("h [L x {d}] and tau [L]"),
            format!("{} / {}", shape_str(h), shape_str(tau)),
        ));
    }
    Ok(())
}

pub fn compute_gates(h: &Tensor, tau: &Tensor, params: &TadnLayerParams) -> Result<GateComponents> {
    params.validate()?;
    let d = params.d_model();
    check_rows("compute_gates", h, tau, d)?;
    let l = h.rows();
    let h_bar = Tensor::matrix(l, d, causal_mean_kernel(h.data(), l, d))?;
    let delta: Vec<f64> = h.data().iter().zip(h_bar.data()).map(|(a, b)| a - b).collect();
    let delta_h = Tensor::matrix(l, d, delta)?;

    let scale = 1.0 / (d as f64).sqrt();
    let g_static: Vec<f64> = (0..l).map(|t| sigmoid(dot(h.row(t), h_bar.row(t)) * scale)).collect();

    let mut cat = Vec::with_capacity(l * 2 * d);
    for t in 0..l {
        cat.extend_from_slice(h.row(t));
        cat.extend_from_slice(delta_h.row(t));
    }
    let learned = params.gate_proj.forward(&Tensor::matrix(l, 2 * d, cat)?)?;
    let learned_scalar = params.gate_scalar_proj.forward(h)?;

    let alpha = params.alpha;
    let mut g_vec = vec![0.0; l * d];
    let mut g_scalar = vec![0.0; l];
    for t in 0..l {
        let tau_t = tau.data()[t];
        for j in 0..d {
            g_vec[t * d + j] = alpha * (sigmoid(learned.get2(t, j)) * tau_t) + (1.0 - alpha) * g_static[t];
        }
        g_scalar[t] = alpha * (sigmoid(learned_scalar.data()[t]) * tau_t) + (1.0 - alpha) * g_static[t];
    }
    Ok(GateComponents {
        tau: tau.clone(),
        delta_h,
        h_bar,
        g_static: Tensor::from_vec(g_static),
        g_vec: Tensor::matrix(l, d, g_vec)?.finite("compute_gates")?,
        g_scalar: Tensor::from_vec(g_scalar).finite("compute_gates")?,
    })
}

/// `gate ⊙ a + (1 − gate) ⊙ b`, elementwise.
#[inline]
pub(crate) fn convex_mix(gate: f64, a: f64, b: f64) -> f64 {
    gate * a + (1.0 - gate) * b
}

/// `h̃_t = g_t ⊙ Δh_t + (1 − g_t) ⊙ h_t`.
pub fn fuse_features(h: &Tensor, gates: &GateComponents) -> Result<Tensor> {
    if h.shape() != gates.g_vec.shape() || h.shape() != gates.delta_h.shape() {
        return Err(Error::shape(
            "fuse_features",
            shape_str(h),
            format!("g_vec {} delta_h {}", shape_str(&gates.g_vec), shape_str(&gates.delta_h)),
        ));
    }
    let data = gates
        .g_vec
        .data()
        .iter()
        .zip(gates.delta_h.data())
        .zip(h.data())
        .map(|((&g, &dh), &x)| convex_mix(g, dh, x))
        .collect();
    Tensor::new(h.shape().to_vec(), data)?.finite("fuse_features")
}

/// Normalises each head's slice of every row to unit L2 norm (floored).
pub(crate) fn l2_normalize_heads_kernel(x: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = x.to_vec();
    for chunk in out.chunks_mut(dh) {
        let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(KEY_NORM_FLOOR);
        chunk.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Computes `q`, normalised `k`, `v`, and `β = σ(beta_proj · h̃)` from the
/// fused features; the recurrence gate is the scalar gate head.
pub fn project_delta_inputs(h_fused: &Tensor, gates: &GateComponents, params: &TadnLayerParams) -> Result<DeltaInputs> {
    params.validate()?;
    let d = params.d_model();
    check_rows("tadn_scan", h_fused, &gates.g_scalar, d)?;
    let q = params.q_proj.forward(h_fused)?;
    let k_raw = params.k_proj.forward(h_fused)?;
    let k = Tensor::new(k_raw.shape().to_vec(), l2_normalize_heads_kernel(k_raw.data(), d, params.n_heads))?;
    let v = params.v_proj.forward(h_fused)?;
    let beta = params.beta_proj.forward(h_fused)?.map(sigmoid).reshape(&[h_fused.rows()])?;
    Ok(DeltaInputs {
        q,
        k,
        v,
        beta,
        gate: gates.g_scalar.clone(),
        n_heads: params.n_heads,
    })
}

/// Left-to-right gated delta recurrence over all heads. When `states` is
/// given it receives `S_1..S_L` (each `H × d_h × d_h`) for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn delta_scan_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    beta: &[f64],
    gate: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let dh = d / heads;
    let mut state = TadnState::new(heads, dh);
    let mut out = vec![0.0; l * d];
    if let Some(s) = states.as_deref_mut() {
        s.clear();
        s.reserve(l * heads * dh * dh);
    }
    let mut u = vec![0.0; dh];
    for t in 0..l {
        for h in 0..heads {
            let r = t * d + h * dh..t * d + (h + 1) * dh;
            delta_step(
                &mut state.s[h * dh * dh..(h + 1) * dh * dh],
                &q[r.clone()],
                &k[r.clone()],
                &v[r.clone()],
                beta[t],
                gate[t],
                &mut u,
                &mut out[r],
            );
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&state.s);
        }
    }
    out
}

pub(crate) struct DeltaScanGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dgate: Vec<f64>,
}

/// Reverse-time adjoint of the recurrence. `G` carries `∂loss/∂S_t`; moving
/// from `t` to `t−1` multiplies it by the (symmetric) erase factor `A_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn delta_scan_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    beta: &[f64],
    gate: &[f64],
    states: &[f64],
    d_out: &[f64],
    l: usize,
    d: usize,
    heads: usize,
) -> DeltaScanGrads {
    let dh = d / heads;
    let hs = dh * dh;
    let mut g = DeltaScanGrads {
        dq: vec![0.0; l * d],
        dk: vec![0.0; l * d],
        dv: vec![0.0; l * d],
        dbeta: vec![0.0; l],
        dgate: vec![0.0; l],
    };
    let zero = vec![0.0; hs];
    let mut adj = vec![0.0; hs];
    let mut gk = vec![0.0; dh];
    let mut u = vec![0.0; dh];
    for h in 0..heads {
        adj.iter_mut().for_each(|x| *x = 0.0);
        for t in (0..l).rev() {
            let r = t * d + h * dh..t * d + (h + 1) * dh;
            let (qt, kt, vt, go) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &d_out[r.clone()]);
            let s_t = &states[(t * heads + h) * hs..][..hs];
            let s_prev = if t == 0 { &zero[..] } else { &states[((t - 1) * heads + h) * hs..][..hs] };
            let (b, c) = (beta[t], gate[t] * beta[t]);

            // o_t = S_t q_t
            for a in 0..dh {
                let row = &mut adj[a * dh..(a + 1) * dh];
                for (x, &qb) in row.iter_mut().zip(qt) {
                    *x += go[a] * qb;
                }
                let s_row = &s_t[a * dh..(a + 1) * dh];
                for (dq, &sv) in g.dq[r.clone()].iter_mut().zip(s_row) {
                    *dq += sv * go[a];
                }
            }

            // S_t = S_{t−1} − c (S_{t−1} k) kᵀ + β v kᵀ
            for a in 0..dh {
                gk[a] = dot(&adj[a * dh..(a + 1) * dh], kt);
                u[a] = dot(&s_prev[a * dh..(a + 1) * dh], kt);
            }
            let dc = -dot(&gk, &u);
            g.dbeta[t] += dot(vt, &gk) + dc * gate[t];
            g.dgate[t] += dc * b;
            for a in 0..dh {
                g.dv[t * d + h * dh + a] += b * gk[a];
            }
            let dk = &mut g.dk[r.clone()];
            for a in 0..dh {
                let adj_row = &adj[a * dh..(a + 1) * dh];
                let s_row = &s_prev[a * dh..(a + 1) * dh];
                let (wv, wu, wg) = (b * vt[a], c * u[a], c * gk[a]);
                for bcol in 0..dh {
                    dk[bcol] += adj_row[bcol] * (wv - wu) - wg * s_row[bcol];
                }
            }
            // adj ← adj · A_t
            for a in 0..dh {
                let row = &mut adj[a * dh..(a + 1) * dh];
                let w = c * gk[a];
                for (x, &kb) in row.iter_mut().zip(kt) {
                    *x -= w * kb;
                }
            }
        }
    }
    g
}

/// Runs the recurrence on already-projected inputs.
pub fn delta_rule_scan(inputs: &DeltaInputs) -> Result<Tensor> {
    inputs.check()?;
    let (l, d) = (inputs.q.rows(), inputs.q.cols());
    let out = delta_scan_kernel(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        inputs.beta.data(),
        inputs.gate.data(),
        l,
        d,
        inputs.n_heads,
        None,
    );
    Tensor::matrix(l, d, out)?.finite("tadn_scan")
}

/// Unrolled form of the recurrence with explicit `𝒟(t,i)` matrices.
/// `O(L²·d³)`; for verification only.
pub fn delta_rule_closed_form(inputs: &DeltaInputs) -> Result<Tensor> {
    inputs.check()?;
    let (l, d) = (inputs.q.rows(), inputs.q.cols());
    let heads = inputs.n_heads;
    let dh = d / heads;
    let head_slice = |m: &Tensor, t: usize, h: usize| m.row(t)[h * dh..(h + 1) * dh].to_vec();
    let mut out = Tensor::zeros(&[l, d]);
    for h in 0..heads {
        // erase factors A_j = I − g_j β_j k_j k_jᵀ
        let erase: Vec<Tensor> = (0..l)
            .map(|j| {
                let kj = head_slice(&inputs.k, j, h);
                let c = inputs.gate.data()[j] * inputs.beta.data()[j];
                let mut a = Tensor::identity(dh);
                for r in 0..dh {
                    for s in 0..dh {
                        a.row_mut(r)[s] -= c * kj[r] * kj[s];
                    }
                }
                a
            })
            .collect();
        for t in 0..l {
            let qt = Tensor::matrix(dh, 1, head_slice(&inputs.q, t, h))?;
            let mut mask = Tensor::identity(dh);
            let mut o = vec![0.0; dh];
            for i in (0..=t).rev() {
                let ki = Tensor::matrix(1, dh, head_slice(&inputs.k, i, h))?;
                let vi = Tensor::matrix(dh, 1, head_slice(&inputs.v, i, h))?;
                // β_i (v_i k_iᵀ) 𝒟(t,i) q_t
                let write = crate::math::matmul(&vi, &ki)?;
                let term = crate::math::matmul(&crate::math::matmul(&write, &mask)?, &qt)?;
                for (acc, x) in o.iter_mut().zip(term.data()) {
                    *acc += inputs.beta.data()[i] * x;
                }
                // 𝒟(t, i−1) = A_i 𝒟(t, i)
                mask = crate::math::matmul(&erase[i], &mask)?;
            }
            out.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(&o);
        }
    }
    out.finite("tadn_closed_form")
}

pub fn tadn_scan(h_fused: &Tensor, gates: &GateComponents, params: &TadnLayerParams) -> Result<Tensor> {
    delta_rule_scan(&project_delta_inputs(h_fused, gates, params)?)
}

pub fn tadn_closed_form(h_fused: &Tensor, gates: &GateComponents, params: &TadnLayerParams) -> Result<Tensor> {
    delta_rule_closed_form(&project_delta_inputs(h_fused, gates, params)?)
}

/// Full layer: `h + out_proj(scan(fuse(x, gates(x, τ))))` with `x = LN(h)`.
pub fn tadn_layer_forward(h: &Tensor, event_times: &Tensor, current_time: f64, params: &TadnLayerParams) -> Result<Tensor> {
    params.validate()?;
    let x = layer_norm(h, &params.norm_gain, &params.norm_shift)?;
    let tau = compute_temporal_decay(event_times, current_time, params.decay_period)?;
    let gates = compute_gates(&x, &tau, params)?;
    let fused = fuse_features(&x, &gates)?;
    let mixed = params.out_proj.forward(&tadn_scan(&fused, &gates, params)?)?;
    let data = h.data().iter().zip(mixed.data()).map(|(a, b)| a + b).collect();
    Tensor::new(h.shape().to_vec(), data)?.finite("tadn_layer_forward")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn random_linear(i: usize, o: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
        LinearLayer::new(random(i, o, 0.6, rng), Tensor::from_vec((0..o).map(|_| rng.gen_range(-0.3..0.3)).collect()))
            .unwrap()
    }

    fn random_params(d: usize, heads: usize, alpha: f64, rng: &mut ChaCha8Rng) -> TadnLayerParams {
        TadnLayerParams {
            norm_gain: Tensor::from_vec((0..d).map(|_| rng.gen_range(0.5..1.5)).collect()),
            norm_shift: Tensor::from_vec((0..d).map(|_| rng.gen_range(-0.2..0.2)).collect()),
            gate_proj: random_linear(2 * d, d, rng),
            gate_scalar_proj: random_linear(d, 1, rng),
            q_proj: random_linear(d, d, rng),
            k_proj: random_linear(d, d, rng),
            v_proj: random_linear(d, d, rng),
            beta_proj: random_linear(d, 1, rng),
            out_proj: random_linear(d, d, rng),
            alpha,
            decay_period: 5.0,
            n_heads: heads,
        }
    }

    fn random_inputs(l: usize, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> DeltaInputs {
        let k = random(l, d, 1.0, rng);
        DeltaInputs {
            q: random(l, d, 1.0, rng),
            k: Tensor::new(k.shape().to_vec(), l2_normalize_heads_kernel(k.data(), d, heads)).unwrap(),
            v: random(l, d, 1.0, rng),
            beta: Tensor::from_vec((0..l).map(|_| rng.gen_range(0.01..0.99)).collect()),
            gate: Tensor::from_vec((0..l).map(|_| rng.gen_range(0.0..1.0)).collect()),
            n_heads: heads,
        }
    }

    #[test]
    fn decay_values() {
        let times = Tensor::from_vec(vec![10.0, 8.0, 4.0]);
        let tau = compute_temporal_decay(&times, 10.0, 2.0).unwrap();
        assert_eq!(tau.data()[0], 1.0);
        assert!((tau.data()[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((tau.data()[1] - 0.367879).abs() < 1e-6);
        assert_eq!(tau.data()[2], (-3.0f64).exp());
    }

    #[test]
    fn decay_rejects_bad_inputs() {
        let times = Tensor::from_vec(vec![1.0, 5.0]);
        assert!(compute_temporal_decay(&times, 4.0, 1.0).is_err());
        assert!(compute_temporal_decay(&times, 5.0, 0.0).is_err());
        assert!(compute_temporal_decay(&times, 5.0, -2.0).is_err());
    }

    #[test]
    fn gates_at_alpha_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(5, 4, 1.0, &mut rng);
        let tau = Tensor::from_vec(vec![1.0, 0.5, 1e-300, 0.2, 0.9]);
        let p0 = random_params(4, 2, 0.0, &mut rng);
        let g = compute_gates(&h, &tau, &p0).unwrap();
        for t in 0..5 {
            assert_eq!(g.g_scalar.data()[t], g.g_static.data()[t]);
            assert!(g.g_vec.row(t).iter().all(|&x| x == g.g_static.data()[t]));
        }
        let p1 = TadnLayerParams { alpha: 1.0, ..p0 };
        let g = compute_gates(&h, &tau, &p1).unwrap();
        assert!(g.g_scalar.data()[2] < 1e-299);
        assert!(g.g_vec.row(2).iter().all(|&x| x < 1e-299));
    }

    #[test]
    fn gates_for_single_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(1, 4, 1.0, &mut rng);
        let p = random_params(4, 1, 0.5, &mut rng);
        let g = compute_gates(&h, &Tensor::from_vec(vec![1.0]), &p).unwrap();
        assert_eq!(g.h_bar, h);
        assert!(g.delta_h.data().iter().all(|&x| x == 0.0));
        let norm_sq: f64 = h.data().iter().map(|x| x * x).sum();
        assert!((g.g_static.data()[0] - sigmoid(norm_sq / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn fusion_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random(3, 4, 1.0, &mut rng);
        let p = random_params(4, 1, 0.5, &mut rng);
        let mut g = compute_gates(&h, &Tensor::from_vec(vec![1.0; 3]), &p).unwrap();
        g.g_vec = Tensor::zeros(&[3, 4]);
        assert_eq!(fuse_features(&h, &g).unwrap(), h);
        g.g_vec = Tensor::filled(&[3, 4], 1.0);
        assert_eq!(fuse_features(&h, &g).unwrap(), g.delta_h);
        g.g_vec = Tensor::filled(&[3, 4], 0.5);
        let mid = fuse_features(&h, &g).unwrap();
        for (i, &m) in mid.data().iter().enumerate() {
            assert!((m - (g.delta_h.data()[i] + h.data()[i]) / 2.0).abs() < 1e-15);
        }
        assert!(fuse_features(&Tensor::zeros(&[2, 4]), &g).is_err());
    }

    #[test]
    fn scan_single_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inp = random_inputs(1, 3, 1, &mut rng);
        let o = delta_rule_scan(&inp).unwrap();
        let b = inp.beta.data()[0];
        let kq = dot(inp.k.row(0), inp.q.row(0));
        for a in 0..3 {
            assert!((o.get2(0, a) - b * kq * inp.v.get2(0, a)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_is_unnormalised_linear_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inp = random_inputs(7, 4, 1, &mut rng);
        inp.gate = Tensor::zeros(&[7]);
        let o = delta_rule_scan(&inp).unwrap();
        for t in 0..7 {
            for a in 0..4 {
                let want: f64 = (0..=t)
                    .map(|i| inp.beta.data()[i] * dot(inp.k.row(i), inp.q.row(t)) * inp.v.get2(i, a))
                    .sum();
                assert!((o.get2(t, a) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_two_step_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inp = random_inputs(2, 3, 1, &mut rng);
        let o = delta_rule_closed_form(&inp).unwrap();
        let (b1, b2) = (inp.beta.data()[0], inp.beta.data()[1]);
        let c2 = inp.gate.data()[1] * b2;
        let (k1, k2, q2) = (inp.k.row(0), inp.k.row(1), inp.q.row(1));
        // k_1ᵀ (I − c_2 k_2 k_2ᵀ) q_2
        let erased = dot(k1, q2) - c2 * dot(k1, k2) * dot(k2, q2);
        for a in 0..3 {
            let want = b2 * dot(k2, q2) * inp.v.get2(1, a) + b1 * erased * inp.v.get2(0, a);
            assert!((o.get2(1, a) - want).abs() < 1e-14);
        }
        // t = i: the empty product leaves β_1 (k_1ᵀ q_1) v_1
        for a in 0..3 {
            let want = b1 * dot(k1, inp.q.row(0)) * inp.v.get2(0, a);
            assert!((o.get2(0, a) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &l in &[2, 5, 17, 33] {
            for &d in &[3, 8] {
                let inp = random_inputs(l, d, 1, &mut rng);
                let a = delta_rule_scan(&inp).unwrap();
                let b = delta_rule_closed_form(&inp).unwrap();
                assert!(a.relative_error(&b) < 1e-8, "L={l} d={d}");
            }
        }
        let inp = random_inputs(12, 8, 2, &mut rng);
        assert!(delta_rule_scan(&inp).unwrap().relative_error(&delta_rule_closed_form(&inp).unwrap()) < 1e-8);
    }

    #[test]
    fn full_pipeline_scan_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(6, 2, 0.5, &mut rng);
        let h = random(9, 6, 1.0, &mut rng);
        let tau = compute_temporal_decay(&Tensor::from_vec((0..9).map(|t| t as f64).collect()), 9.0, 3.0).unwrap();
        let gates = compute_gates(&h, &tau, &p).unwrap();
        let fused = fuse_features(&h, &gates).unwrap();
        let a = tadn_scan(&fused, &gates, &p).unwrap();
        let b = tadn_closed_form(&fused, &gates, &p).unwrap();
        assert!(a.relative_error(&b) < 1e-8);
    }

    #[test]
    fn zero_weights_give_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = random(4, 4, 1.0, &mut rng);
        let p = TadnLayerParams::zeros(4, 2, 0.5, 3.0);
        let times = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(tadn_layer_forward(&h, &times, 3.0, &p).unwrap(), h);
    }

    /// All four stages written out in one function, independent of the
    /// helpers above.
    fn inlined_layer(h: &Tensor, times: &[f64], now: f64, p: &TadnLayerParams) -> Tensor {
        let (l, d) = (h.rows(), h.cols());
        let dh = d / p.n_heads;
        let lin = |x: &[f64], layer: &LinearLayer| -> Vec<f64> {
            (0..layer.d_out())
                .map(|o| layer.bias.data()[o] + (0..x.len()).map(|i| x[i] * layer.weight.get2(i, o)).sum::<f64>())
                .collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut x = vec![vec![0.0; d]; l];
        for t in 0..l {
            let row = h.row(t);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                x[t][j] = (row[j] - mean) / (var + 1e-5).sqrt() * p.norm_gain.data()[j] + p.norm_shift.data()[j];
            }
        }
        let mut state = vec![vec![vec![0.0; dh]; dh]; p.n_heads];
        let mut sum = vec![0.0; d];
        let mut out = h.clone();
        for t in 0..l {
            let tau = (-(now - times[t]) / p.decay_period).exp();
            for j in 0..d {
                sum[j] += x[t][j];
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / (t + 1) as f64).collect();
            let delta: Vec<f64> = (0..d).map(|j| x[t][j] - mean[j]).collect();
            let g_static = sig((0..d).map(|j| x[t][j] * mean[j]).sum::<f64>() / (d as f64).sqrt());
            let cat: Vec<f64> = x[t].iter().chain(&delta).copied().collect();
            let gv: Vec<f64> = lin(&cat, &p.gate_proj)
                .iter()
                .map(|&z| p.alpha * sig(z) * tau + (1.0 - p.alpha) * g_static)
                .collect();
            let gs = p.alpha * sig(lin(&x[t], &p.gate_scalar_proj)[0]) * tau + (1.0 - p.alpha) * g_static;
            let fused: Vec<f64> = (0..d).map(|j| gv[j] * delta[j] + (1.0 - gv[j]) * x[t][j]).collect();
            let q = lin(&fused, &p.q_proj);
            let k = lin(&fused, &p.k_proj);
            let v = lin(&fused, &p.v_proj);
            let beta = sig(lin(&fused, &p.beta_proj)[0]);
            let mut o = vec![0.0; d];
            for hd in 0..p.n_heads {
                let r = hd * dh..(hd + 1) * dh;
                let kn = k[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                let kh: Vec<f64> = k[r.clone()].iter().map(|v| v / kn).collect();
                let s = &mut state[hd];
                let sk: Vec<f64> = (0..dh).map(|a| (0..dh).map(|b| s[a][b] * kh[b]).sum()).collect();
                for a in 0..dh {
                    for b in 0..dh {
                        s[a][b] = s[a][b] - gs * beta * sk[a] * kh[b] + beta * v[hd * dh + a] * kh[b];
                    }
                }
                for a in 0..dh {
                    o[hd * dh + a] = (0..dh).map(|b| s[a][b] * q[hd * dh + b]).sum();
                }
            }
            let proj = lin(&o, &p.out_proj);
            for j in 0..d {
                out.row_mut(t)[j] += proj[j];
            }
        }
        out
    }

    #[test]
    fn layer_matches_inlined_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for heads in [1, 2] {
            let p = random_params(6, heads, 0.4, &mut rng);
            let h = random(11, 6, 1.0, &mut rng);
            let times: Vec<f64> = (0..11).map(|t| (t * 2) as f64).collect();
            let got = tadn_layer_forward(&h, &Tensor::from_vec(times.clone()), 25.0, &p).unwrap();
            assert!(got.relative_error(&inlined_layer(&h, &times, 25.0, &p)) < 1e-12);
        }
        let p = random_params(6, 1, 0.4, &mut rng);
        let h = random(1, 6, 1.0, &mut rng);
        let got = tadn_layer_forward(&h, &Tensor::from_vec(vec![3.0]), 3.0, &p).unwrap();
        assert!(got.relative_error(&inlined_layer(&h, &[3.0], 3.0, &p)) < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = TadnLayerParams::zeros(4, 2, 1.5, 1.0);
        assert!(p.validate().is_err());
        p.alpha = 0.5;
        p.decay_period = 0.0;
        assert!(p.validate().is_err());
        p.decay_period = 1.0;
        p.n_heads = 3;
        assert!(p.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gates_and_fusion_are_bounded(seed in any::<u64>(), l in 1usize..12, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random(l, 4, 2.0, &mut rng);
            let p = random_params(4, 2, alpha, &mut rng);
            let tau = Tensor::from_vec((0..l).map(|_| rng.gen_range(1e-6..=1.0)).collect());
            let g = compute_gates(&h, &tau, &p).unwrap();
            for &x in g.g_vec.data().iter().chain(g.g_scalar.data()).chain(g.g_static.data()) {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let f = fuse_features(&h, &g).unwrap();
            for i in 0..f.len() {
                let (a, b) = (g.delta_h.data()[i], h.data()[i]);
                prop_assert!(f.data()[i] >= a.min(b) - 1e-15 && f.data()[i] <= a.max(b) + 1e-15);
            }
        }

        #[test]
        fn state_norm_is_bounded(seed in any::<u64>(), l in 1usize..40, d in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inp = random_inputs(l, d, 1, &mut rng);
            let mut state = TadnState::new(1, d);
            let mut bound = 0.0;
            for t in 0..l {
                state.step(inp.q.row(t), inp.k.row(t), inp.v.row(t), inp.beta.data()[t], inp.gate.data()[t]);
                let vn = inp.v.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
                bound += inp.beta.data()[t] * vn;
                prop_assert!(state.frobenius_norm(0) <= bound * (1.0 + 1e-12));
            }
        }
    }
}
