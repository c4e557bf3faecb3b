//! Sequence attention kernels: causal softmax attention and the adaptive
//! recurrent variants derived from classical adaptive filtering.
//!
//! The recurrent kernels maintain a per-head state matrix `S` that maps keys
//! to values and is refined online, one token at a time:
//!
//! * LMS: one gradient step on the squared residual,
//!   `S' = S - beta (S k - v) k^T`. Algebraically this is the delta-rule
//!   update `S (I - beta k k^T) + beta v k^T`.
//! * Multi-LMS: the closed form of M composed LMS steps on one token,
//!   `S' = S - [(1 - (1 - beta ||k||^2)^M) / ||k||^2] (S k - v) k^T`.
//! * LRMS: a unit-norm residual direction step,
//!   `S' = S - beta (r / ||r||) k^T` with `r = S k - v`, which bounds every
//!   update by `beta ||k||` regardless of the residual size.
//!
//! Outputs are read from the state as `o_i = S_i q_i`. Keys are
//! L2-normalized before every recurrent update so `beta ||k||^2 = beta`
//! stays inside (0, 1) under a sigmoid gate, which is what the Multi-LMS
//! contraction needs. All kernels are pure; within a sequence the
//! recurrence is inherently sequential.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual guard for the LRMS direction normalization.
pub const LRMS_EPS: f64 = 1e-8;
/// Floor for key L2 normalization.
pub const KEY_EPS: f64 = 1e-8;

/// Per-position query/key/value vectors for one head, flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvSequence {
    len: usize,
    dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl QkvSequence {
    pub fn new(len: usize, dim: usize, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> Self {
        assert!(len >= 1 && dim >= 1);
        assert_eq!(q.len(), len * dim);
        assert_eq!(k.len(), len * dim);
        assert_eq!(v.len(), len * dim);
        QkvSequence { len, dim, q, k, v }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // len >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q_at(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    pub fn k_at(&self, i: usize) -> &[f64] {
        &self.k[i * self.dim..(i + 1) * self.dim]
    }

    pub fn v_at(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim..(i + 1) * self.dim]
    }
}

/// The accumulated key-to-value map of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub s: Vec<f64>,
}

impl AttentionState {
    pub fn zeros(dim: usize) -> Self {
        AttentionState {
            dim,
            s: vec![0.0; dim * dim],
        }
    }

    pub fn from_vec(dim: usize, s: Vec<f64>) -> Self {
        assert_eq!(s.len(), dim * dim);
        AttentionState { dim, s }
    }

    /// `S x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        matvec(&self.s, x, &mut out);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.s.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-position write gates plus the Multi-LMS step count.
///
/// Training keeps every gate strictly inside (0, 1) via a sigmoid; the
/// boundary values 0 and 1 remain representable for unit tests.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    pub beta: Vec<f64>,
    /// Inner step count M (Multi-LMS only; ignored by the other kinds).
    pub steps: usize,
}

impl BetaSchedule {
    pub fn new(beta: Vec<f64>, steps: usize) -> Self {
        assert!(steps >= 1, "step count M must be >= 1");
        BetaSchedule { beta, steps }
    }

    pub fn uniform(len: usize, beta: f64, steps: usize) -> Self {
        Self::new(vec![beta; len], steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecurrentKind {
    Lms,
    MultiLms,
    Lrms,
}

/// Whether position i reads the state before or after its own update.
/// Including the current token (update-then-read) matches the softmax-free
/// sum over j <= i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadOrder {
    #[default]
    UpdateThenRead,
    ReadThenUpdate,
}

// ---------------------------------------------------------------------------
// small dense helpers
// ---------------------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out = S x for row-major square S.
#[inline]
fn matvec(s: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&s[i * d..(i + 1) * d], x);
    }
}

/// out = S^T x.
#[inline]
fn matvec_t(s: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    out.fill(0.0);
    for (i, xi) in x.iter().enumerate() {
        let row = &s[i * d..(i + 1) * d];
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
}

/// S += coeff * a b^T.
#[inline]
fn outer_acc(s: &mut [f64], a: &[f64], b: &[f64], coeff: f64) {
    let d = b.len();
    for (i, ai) in a.iter().enumerate() {
        let c = coeff * ai;
        let row = &mut s[i * d..(i + 1) * d];
        for (r, bj) in row.iter_mut().zip(b) {
            *r += c * bj;
        }
    }
}

fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

// ---------------------------------------------------------------------------
// softmax attention
// ---------------------------------------------------------------------------

/// Causal softmax attention `o_i = sum_{j<=i} softmax_j(k_j^T q_i) v_j`,
/// computed with max-subtraction. Raw inner-product logits by default;
/// `scaled` divides logits by sqrt(dim).
pub fn softmax_attention(seq: &QkvSequence, scaled: bool) -> Vec<f64> {
    softmax_attention_cached(seq, scaled).0
}

/// Forward pass that also returns the attention probabilities (row i holds
/// the i+1 causal weights, zero above the diagonal), for reuse in backward.
pub fn softmax_attention_cached(seq: &QkvSequence, scaled: bool) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (seq.len(), seq.dim());
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; t * t];
    let mut logits = vec![0.0; t];
    for i in 0..t {
        let qi = seq.q_at(i);
        let mut max_logit = f64::NEG_INFINITY;
        for j in 0..=i {
            let l = scale * dot(seq.k_at(j), qi);
            logits[j] = l;
            max_logit = max_logit.max(l);
        }
        let mut denom = 0.0;
        for j in 0..=i {
            let w = (logits[j] - max_logit).exp();
            probs[i * t + j] = w;
            denom += w;
        }
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..=i {
            let p = probs[i * t + j] / denom;
            probs[i * t + j] = p;
            for (o, vj) in orow.iter_mut().zip(seq.v_at(j)) {
                *o += p * vj;
            }
        }
    }
    (out, probs)
}

/// Reverse-mode gradients of softmax attention given upstream gradients on
/// the outputs (flat `len x dim`). Returns (dq, dk, dv).
pub fn softmax_attention_grad(
    seq: &QkvSequence,
    scaled: bool,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (_, probs) = softmax_attention_cached(seq, scaled);
    softmax_attention_backward(seq, scaled, &probs, upstream)
}

/// Backward pass reusing cached probabilities.
pub fn softmax_attention_backward(
    seq: &QkvSequence,
    scaled: bool,
    probs: &[f64],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, d) = (seq.len(), seq.dim());
    assert_eq!(upstream.len(), t * d);
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dlogit = vec![0.0; t];
    for i in 0..t {
        let u = &upstream[i * d..(i + 1) * d];
        let qi = seq.q_at(i);
        let prow = &probs[i * t..(i + 1) * t];
        let mut inner = 0.0;
        for j in 0..=i {
            let da = dot(seq.v_at(j), u);
            dlogit[j] = da;
            inner += prow[j] * da;
        }
        let dqi = &mut dq[i * d..(i + 1) * d];
        for j in 0..=i {
            let p = prow[j];
            let ds = scale * p * (dlogit[j] - inner);
            for (acc, kj) in dqi.iter_mut().zip(seq.k_at(j)) {
                *acc += ds * kj;
            }
            let dkj = &mut dk[j * d..(j + 1) * d];
            for (acc, qv) in dkj.iter_mut().zip(qi) {
                *acc += ds * qv;
            }
            let dvj = &mut dv[j * d..(j + 1) * d];
            for (acc, uv) in dvj.iter_mut().zip(u) {
                *acc += p * uv;
            }
        }
    }
    (dq, dk, dv)
}

/// Softmax-free linear attention `o_i = (sum_{j<=i} v_j k_j^T) q_i`,
/// realized through the accumulated state.
pub fn linear_attention(seq: &QkvSequence) -> Vec<f64> {
    let (t, d) = (seq.len(), seq.dim());
    let mut s = vec![0.0; d * d];
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        outer_acc(&mut s, seq.v_at(i), seq.k_at(i), 1.0);
        matvec(&s, seq.q_at(i), &mut out[i * d..(i + 1) * d]);
    }
    out
}

// ---------------------------------------------------------------------------
// single-token recurrent steps
// ---------------------------------------------------------------------------

/// One LMS write: `S' = S - beta (S k - v) k^T`.
pub fn lms_step(state: &AttentionState, k: &[f64], v: &[f64], beta: f64) -> AttentionState {
    let mut next = state.clone();
    let mut r = vec![0.0; state.dim];
    matvec(&state.s, k, &mut r);
    for (ri, vi) in r.iter_mut().zip(v) {
        *ri -= vi;
    }
    outer_acc(&mut next.s, &r, k, -beta);
    next
}

/// M composed LMS writes on the same token in closed form:
/// `S' = S - [(1 - (1 - beta ||k||^2)^M) / ||k||^2] (S k - v) k^T`.
/// A zero key leaves the state unchanged (the update direction is undefined).
pub fn multi_lms_step(
    state: &AttentionState,
    k: &[f64],
    v: &[f64],
    beta: f64,
    m: usize,
) -> AttentionState {
    assert!(m >= 1, "step count M must be >= 1");
    let a = dot(k, k);
    if a == 0.0 {
        return state.clone();
    }
    let coeff = multi_lms_coeff(beta, a, m);
    let mut next = state.clone();
    let mut r = vec![0.0; state.dim];
    matvec(&state.s, k, &mut r);
    for (ri, vi) in r.iter_mut().zip(v) {
        *ri -= vi;
    }
    outer_acc(&mut next.s, &r, k, -coeff);
    next
}

/// `(1 - (1 - beta a)^M) / a` with the M = 1 case taken literally as `beta`.
#[inline]
fn multi_lms_coeff(beta: f64, a: f64, m: usize) -> f64 {
    if m == 1 {
        beta
    } else {
        (1.0 - (1.0 - beta * a).powi(m as i32)) / a
    }
}

/// One LRMS write: `S' = S - beta (r / ||r||) k^T` with `r = S k - v`.
/// Residuals at or below [`LRMS_EPS`] leave the state unchanged.
pub fn lrms_step(state: &AttentionState, k: &[f64], v: &[f64], beta: f64) -> AttentionState {
    let mut r = vec![0.0; state.dim];
    matvec(&state.s, k, &mut r);
    for (ri, vi) in r.iter_mut().zip(v) {
        *ri -= vi;
    }
    let n = l2_norm(&r);
    if n <= LRMS_EPS {
        return state.clone();
    }
    let mut next = state.clone();
    outer_acc(&mut next.s, &r, k, -beta / n);
    next
}

// ---------------------------------------------------------------------------
// full-sequence recurrence with cache and backward
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from a recurrent forward run.
#[derive(Debug, Clone)]
pub struct RecurrentCache {
    kind: RecurrentKind,
    order: ReadOrder,
    dim: usize,
    len: usize,
    /// States S_0..S_T, flat (T+1) x d x d.
    states: Vec<f64>,
    /// Normalized keys, flat T x d.
    k_hat: Vec<f64>,
    /// Raw key norms, length T.
    k_norm: Vec<f64>,
    /// Pre-update residuals r_i = S_{i-1} k_i - v_i, flat T x d.
    resid: Vec<f64>,
    /// Residual norms (LRMS), length T.
    resid_norm: Vec<f64>,
    /// True where the LRMS guard fired, length T.
    guarded: Vec<bool>,
}

impl RecurrentCache {
    fn state_at(&self, i: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.states[i * dd..(i + 1) * dd]
    }
}

/// Gradients of a recurrent run with respect to its inputs.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Runs one recurrent kernel over the sequence from `S_0 = 0` and reads
/// `o_i = S q_i` per [`ReadOrder`]. Keys are L2-normalized (floored at
/// [`KEY_EPS`]) before every update. Returns the outputs (flat `len x dim`)
/// and the final state.
pub fn run_recurrent(
    seq: &QkvSequence,
    schedule: &BetaSchedule,
    kind: RecurrentKind,
    order: ReadOrder,
) -> Result<(Vec<f64>, AttentionState)> {
    let (out, cache) = run_recurrent_cached(seq, schedule, kind, order)?;
    let dd = cache.dim * cache.dim;
    let s = cache.states[cache.len * dd..].to_vec();
    Ok((out, AttentionState::from_vec(cache.dim, s)))
}

/// Forward pass retaining the cache for [`run_recurrent_backward`].
pub fn run_recurrent_cached(
    seq: &QkvSequence,
    schedule: &BetaSchedule,
    kind: RecurrentKind,
    order: ReadOrder,
) -> Result<(Vec<f64>, RecurrentCache)> {
    let (t, d) = (seq.len(), seq.dim());
    if schedule.beta.len() != t {
        return Err(Error::contract(format!(
            "beta schedule length {} does not match sequence length {t}",
            schedule.beta.len()
        )));
    }
    let dd = d * d;
    let mut cache = RecurrentCache {
        kind,
        order,
        dim: d,
        len: t,
        states: vec![0.0; (t + 1) * dd],
        k_hat: vec![0.0; t * d],
        k_norm: vec![0.0; t],
        resid: vec![0.0; t * d],
        resid_norm: vec![0.0; t],
        guarded: vec![false; t],
    };
    let mut out = vec![0.0; t * d];
    let mut r = vec![0.0; d];
    for i in 0..t {
        let beta = schedule.beta[i];
        let nrm = l2_norm(seq.k_at(i));
        cache.k_norm[i] = nrm;
        let denom = nrm.max(KEY_EPS);
        for (kh, kr) in cache.k_hat[i * d..(i + 1) * d].iter_mut().zip(seq.k_at(i)) {
            *kh = kr / denom;
        }
        // copy S_{i-1} into the S_i slot, then update in place
        let (prev_states, cur_states) = cache.states.split_at_mut((i + 1) * dd);
        let prev = &prev_states[i * dd..];
        let cur = &mut cur_states[..dd];
        cur.copy_from_slice(prev);

        if order == ReadOrder::ReadThenUpdate {
            matvec(prev, seq.q_at(i), &mut out[i * d..(i + 1) * d]);
        }

        let k_hat = &cache.k_hat[i * d..(i + 1) * d];
        matvec(prev, k_hat, &mut r);
        for (ri, vi) in r.iter_mut().zip(seq.v_at(i)) {
            *ri -= vi;
        }
        cache.resid[i * d..(i + 1) * d].copy_from_slice(&r);

        match kind {
            RecurrentKind::Lms => {
                outer_acc(cur, &r, k_hat, -beta);
            }
            RecurrentKind::MultiLms => {
                let a = dot(k_hat, k_hat);
                if a > 0.0 {
                    outer_acc(cur, &r, k_hat, -multi_lms_coeff(beta, a, schedule.steps));
                }
            }
            RecurrentKind::Lrms => {
                let n = l2_norm(&r);
                cache.resid_norm[i] = n;
                if n <= LRMS_EPS {
                    cache.guarded[i] = true;
                } else {
                    outer_acc(cur, &r, k_hat, -beta / n);
                }
            }
        }

        if order == ReadOrder::UpdateThenRead {
            matvec(cur, seq.q_at(i), &mut out[i * d..(i + 1) * d]);
        }
    }
    Ok((out, cache))
}

/// Exact reverse-mode gradients of the recurrent forward pass, including the
/// key normalization. The LRMS guard branch carries zero gradient.
pub fn run_recurrent_backward(
    seq: &QkvSequence,
    schedule: &BetaSchedule,
    cache: &RecurrentCache,
    upstream: &[f64],
) -> KernelGrads {
    let (t, d) = (cache.len, cache.dim);
    assert_eq!(upstream.len(), t * d);
    let m_steps = schedule.steps;
    let mut grads = KernelGrads {
        dq: vec![0.0; t * d],
        dk: vec![0.0; t * d],
        dv: vec![0.0; t * d],
        dbeta: vec![0.0; t],
    };
    // dL/dS, flowing from S_T back to S_0.
    let mut d_state = vec![0.0; d * d];
    let mut gk = vec![0.0; d];
    let mut gtr = vec![0.0; d];
    let mut dr = vec![0.0; d];
    let mut dk_hat = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for i in (0..t).rev() {
        let u = &upstream[i * d..(i + 1) * d];
        let qi = seq.q_at(i);
        let beta = schedule.beta[i];
        let k_hat = &cache.k_hat[i * d..(i + 1) * d];
        let r = &cache.resid[i * d..(i + 1) * d];
        let prev = cache.state_at(i);

        if cache.order == ReadOrder::UpdateThenRead {
            // o_i = S_i q_i
            matvec_t(cache.state_at(i + 1), u, &mut tmp);
            grads.dq[i * d..(i + 1) * d].copy_from_slice(&tmp);
            outer_acc(&mut d_state, u, qi, 1.0);
        }

        // backward through the state update; d_state holds dL/dS_i on entry
        // and dL/dS_{i-1} on exit.
        dk_hat.fill(0.0);
        let mut skip = false;
        match cache.kind {
            RecurrentKind::Lms => {
                matvec(&d_state, k_hat, &mut gk);
                matvec_t(&d_state, r, &mut gtr);
                grads.dbeta[i] = -dot(r, &gk);
                for (drj, gkj) in dr.iter_mut().zip(&gk) {
                    *drj = -beta * gkj;
                }
                matvec_t(prev, &dr, &mut tmp);
                for ((dkh, gt), tm) in dk_hat.iter_mut().zip(&gtr).zip(&tmp) {
                    *dkh = -beta * gt + tm;
                }
            }
            RecurrentKind::MultiLms => {
                let a = dot(k_hat, k_hat);
                if a == 0.0 {
                    skip = true;
                } else {
                    let coeff = multi_lms_coeff(beta, a, m_steps);
                    matvec(&d_state, k_hat, &mut gk);
                    matvec_t(&d_state, r, &mut gtr);
                    let dcoeff = -dot(r, &gk);
                    let u_pow = (1.0 - beta * a).powi(m_steps as i32 - 1);
                    grads.dbeta[i] = dcoeff * m_steps as f64 * u_pow;
                    let dcoeff_da = if m_steps == 1 {
                        0.0
                    } else {
                        (m_steps as f64 * u_pow * beta) / a - coeff / a
                    };
                    for (drj, gkj) in dr.iter_mut().zip(&gk) {
                        *drj = -coeff * gkj;
                    }
                    matvec_t(prev, &dr, &mut tmp);
                    let ka = 2.0 * dcoeff * dcoeff_da;
                    for (((dkh, gt), tm), kh) in
                        dk_hat.iter_mut().zip(&gtr).zip(&tmp).zip(k_hat)
                    {
                        *dkh = -coeff * gt + tm + ka * kh;
                    }
                }
            }
            RecurrentKind::Lrms => {
                if cache.guarded[i] {
                    skip = true;
                } else {
                    let n = cache.resid_norm[i];
                    matvec(&d_state, k_hat, &mut gk);
                    // unit residual direction
                    let mut du_dot_u = 0.0;
                    for (rj, gkj) in r.iter().zip(&gk) {
                        du_dot_u += (rj / n) * (-beta * gkj);
                    }
                    grads.dbeta[i] = -r.iter().zip(&gk).map(|(rj, g)| rj / n * g).sum::<f64>();
                    for ((drj, gkj), rj) in dr.iter_mut().zip(&gk).zip(r) {
                        let du = -beta * gkj;
                        *drj = (du - (rj / n) * du_dot_u) / n;
                    }
                    matvec_t(&d_state, r, &mut gtr);
                    matvec_t(prev, &dr, &mut tmp);
                    for ((dkh, gt), tm) in dk_hat.iter_mut().zip(&gtr).zip(&tmp) {
                        *dkh = -(beta / n) * gt + tm;
                    }
                }
            }
        }
        if !skip {
            for (dvj, drj) in grads.dv[i * d..(i + 1) * d].iter_mut().zip(&dr) {
                *dvj = -drj;
            }
            // dS_{i-1} = dS_i + dr k^T
            outer_acc(&mut d_state, &dr, k_hat, 1.0);
            // chain dk through the normalization k_hat = k / max(||k||, eps)
            let nrm = cache.k_norm[i];
            let dk_raw = &mut grads.dk[i * d..(i + 1) * d];
            if nrm > KEY_EPS {
                let proj = dot(k_hat, &dk_hat);
                for ((dkr, dkh), kh) in dk_raw.iter_mut().zip(&dk_hat).zip(k_hat) {
                    *dkr = (dkh - kh * proj) / nrm;
                }
            } else {
                for (dkr, dkh) in dk_raw.iter_mut().zip(&dk_hat) {
                    *dkr = dkh / KEY_EPS;
                }
            }
        }

        if cache.order == ReadOrder::ReadThenUpdate {
            // o_i = S_{i-1} q_i
            matvec_t(prev, u, &mut tmp);
            grads.dq[i * d..(i + 1) * d].copy_from_slice(&tmp);
            outer_acc(&mut d_state, u, qi, 1.0);
        }
    }
    grads
}

/// Convenience wrapper: forward then exact reverse-mode gradients with
/// respect to q, k, v, and beta.
pub fn run_recurrent_grad(
    seq: &QkvSequence,
    schedule: &BetaSchedule,
    kind: RecurrentKind,
    order: ReadOrder,
    upstream: &[f64],
) -> Result<KernelGrads> {
    let (_, cache) = run_recurrent_cached(seq, schedule, kind, order)?;
    Ok(run_recurrent_backward(seq, schedule, &cache, upstream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut v = rand_vec(rng, n);
        let n2 = l2_norm(&v);
        for x in &mut v {
            *x /= n2;
        }
        v
    }

    fn rand_seq(rng: &mut Rng, t: usize, d: usize) -> QkvSequence {
        QkvSequence::new(
            t,
            d,
            rand_vec(rng, t * d),
            rand_vec(rng, t * d),
            rand_vec(rng, t * d),
        )
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_single_token_returns_value() {
        let mut rng = Rng::new(1);
        let seq = rand_seq(&mut rng, 1, 4);
        let out = softmax_attention(&seq, false);
        assert_eq!(out, seq.v);
    }

    #[test]
    fn softmax_identical_keys_average_values() {
        let mut rng = Rng::new(2);
        let d = 3;
        let t = 5;
        let k_shared = rand_vec(&mut rng, d);
        let mut k = Vec::new();
        for _ in 0..t {
            k.extend_from_slice(&k_shared);
        }
        let seq = QkvSequence::new(t, d, rand_vec(&mut rng, t * d), k, rand_vec(&mut rng, t * d));
        let out = softmax_attention(&seq, false);
        for i in 0..t {
            let mut mean = vec![0.0; d];
            for j in 0..=i {
                for (m, v) in mean.iter_mut().zip(seq.v_at(j)) {
                    *m += v / (i + 1) as f64;
                }
            }
            assert!(max_abs_diff(&out[i * d..(i + 1) * d], &mean) <= 1e-12);
        }
    }

    #[test]
    fn softmax_dominating_logit_selects_value() {
        // Logit 50 for the first key, 0 elsewhere.
        let d = 1;
        let t = 4;
        let q = vec![1.0; t];
        let k = vec![50.0, 0.0, 0.0, 0.0];
        let mut rng = Rng::new(3);
        let v = rand_vec(&mut rng, t);
        let seq = QkvSequence::new(t, d, q, k, v.clone());
        let out = softmax_attention(&seq, false);
        assert!((out[3] - v[0]).abs() <= 1e-12);
    }

    #[test]
    fn linear_attention_matches_direct_sum() {
        let mut rng = Rng::new(4);
        let (t, d) = (7, 5);
        let seq = rand_seq(&mut rng, t, d);
        let out = linear_attention(&seq);
        for i in 0..t {
            let mut direct = vec![0.0; d];
            for j in 0..=i {
                let w = dot(seq.k_at(j), seq.q_at(i));
                for (o, v) in direct.iter_mut().zip(seq.v_at(j)) {
                    *o += w * v;
                }
            }
            assert!(max_abs_diff(&out[i * d..(i + 1) * d], &direct) <= 1e-12);
        }
    }

    #[test]
    fn lms_step_zero_beta_is_identity() {
        let mut rng = Rng::new(5);
        let d = 4;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = rand_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        assert_eq!(lms_step(&s, &k, &v, 0.0), s);
    }

    #[test]
    fn lms_step_full_write_from_zero_state() {
        let mut rng = Rng::new(6);
        let d = 4;
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let s = lms_step(&AttentionState::zeros(d), &k, &v, 1.0);
        // S' = v k^T and S' k = v.
        for i in 0..d {
            for j in 0..d {
                assert!((s.s[i * d + j] - v[i] * k[j]).abs() <= 1e-15);
            }
        }
        assert!(max_abs_diff(&s.apply(&k), &v) <= 1e-14);
    }

    #[test]
    fn lms_matches_delta_rule_form() {
        let mut rng = Rng::new(7);
        let d = 5;
        for _ in 0..100 {
            let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
            let k = rand_vec(&mut rng, d);
            let v = rand_vec(&mut rng, d);
            let beta = rng.uniform();
            let stepped = lms_step(&s, &k, &v, beta);
            // S (I - beta k k^T) + beta v k^T
            let mut other = s.s.clone();
            let sk = s.apply(&k);
            outer_acc(&mut other, &sk, &k, -beta);
            outer_acc(&mut other, &v, &k, beta);
            assert!(max_abs_diff(&stepped.s, &other) <= 1e-12);
        }
    }

    #[test]
    fn multi_lms_one_step_equals_lms() {
        let mut rng = Rng::new(8);
        let d = 4;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let beta = 0.37;
        assert_eq!(multi_lms_step(&s, &k, &v, beta, 1), lms_step(&s, &k, &v, beta));
    }

    #[test]
    fn multi_lms_matches_iterated_steps() {
        let mut rng = Rng::new(9);
        let d = 4;
        for m in [2usize, 4, 8] {
            let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
            let k = unit_vec(&mut rng, d);
            let v = rand_vec(&mut rng, d);
            let beta = rng.uniform();
            let closed = multi_lms_step(&s, &k, &v, beta, m);
            let mut iterated = s.clone();
            for _ in 0..m {
                iterated = lms_step(&iterated, &k, &v, beta);
            }
            assert!(max_abs_diff(&closed.s, &iterated.s) <= 1e-10);
        }
    }

    #[test]
    fn multi_lms_drives_residual_geometrically() {
        let mut rng = Rng::new(10);
        let d = 6;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        // beta ||k||^2 = 0.5, M = 64: the residual is annihilated.
        let next = multi_lms_step(&s, &k, &v, 0.5, 64);
        let r = next
            .apply(&k)
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let vnorm = l2_norm(&v);
        assert!(r <= 1e-14 * vnorm.max(1.0), "residual {r}");
    }

    #[test]
    fn multi_lms_zero_key_is_identity() {
        let mut rng = Rng::new(11);
        let d = 3;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let v = rand_vec(&mut rng, d);
        assert_eq!(multi_lms_step(&s, &[0.0; 3], &v, 0.5, 4), s);
    }

    #[test]
    fn lrms_zero_residual_is_guarded() {
        let mut rng = Rng::new(12);
        let d = 3;
        let k = unit_vec(&mut rng, d);
        let s = AttentionState::zeros(d);
        // v = S k = 0, so the residual vanishes.
        assert_eq!(lrms_step(&s, &k, &[0.0; 3], 0.9), s);
    }

    #[test]
    fn lrms_unit_residual_equals_lms() {
        let mut rng = Rng::new(13);
        let d = 4;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = rand_vec(&mut rng, d);
        // pick v so that ||S k - v|| = 1
        let sk = s.apply(&k);
        let mut dir = unit_vec(&mut rng, d);
        for (di, si) in dir.iter_mut().zip(&sk) {
            *di = si - *di;
        }
        let beta = 0.42;
        let a = lrms_step(&s, &k, &dir, beta);
        let b = lms_step(&s, &k, &dir, beta);
        assert!(max_abs_diff(&a.s, &b.s) <= 1e-12);
    }

    #[test]
    fn lrms_update_norm_is_beta_times_key_norm() {
        let mut rng = Rng::new(14);
        let d = 5;
        for scale in [1.0, 1e3, 1e6] {
            let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
            let k = rand_vec(&mut rng, d);
            let v: Vec<f64> = rand_vec(&mut rng, d).iter().map(|x| x * scale).collect();
            let beta = 0.6;
            let next = lrms_step(&s, &k, &v, beta);
            let delta: Vec<f64> = next.s.iter().zip(&s.s).map(|(a, b)| a - b).collect();
            let got = l2_norm(&delta);
            let expect = beta * l2_norm(&k);
            assert!(
                (got - expect).abs() <= 1e-12 * expect,
                "outlier x{scale}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn lms_residual_contracts_with_unit_keys() {
        let mut rng = Rng::new(15);
        let d = 4;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        for beta in [0.1, 0.5, 0.9] {
            let before: Vec<f64> = s.apply(&k).iter().zip(&v).map(|(a, b)| a - b).collect();
            let next = lms_step(&s, &k, &v, beta);
            let after: Vec<f64> = next.apply(&k).iter().zip(&v).map(|(a, b)| a - b).collect();
            let expect = (1.0 - beta) * l2_norm(&before);
            assert!((l2_norm(&after) - expect).abs() <= 1e-12 * expect.max(1e-6));
        }
    }

    #[test]
    fn run_recurrent_single_token_unrolls() {
        let mut rng = Rng::new(16);
        let d = 4;
        let q = rand_vec(&mut rng, d);
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let seq = QkvSequence::new(1, d, q.clone(), k.clone(), v.clone());
        let sched = BetaSchedule::uniform(1, 1.0, 1);
        let (out, state) =
            run_recurrent(&seq, &sched, RecurrentKind::Lms, ReadOrder::UpdateThenRead).unwrap();
        // o_1 = (v k^T) q = (k . q) v
        let w = dot(&k, &q);
        let expect: Vec<f64> = v.iter().map(|x| w * x).collect();
        assert!(max_abs_diff(&out, &expect) <= 1e-13);
        assert!(state.frobenius_norm() > 0.0);
        // read-then-update sees the zero initial state
        let (out0, _) =
            run_recurrent(&seq, &sched, RecurrentKind::Lms, ReadOrder::ReadThenUpdate).unwrap();
        assert_eq!(out0, vec![0.0; d]);
    }

    #[test]
    fn run_recurrent_is_causal() {
        let mut rng = Rng::new(17);
        let (t, d) = (6, 4);
        let seq = rand_seq(&mut rng, t, d);
        let sched = BetaSchedule::new((0..t).map(|_| rng.uniform()).collect(), 4);
        for kind in [RecurrentKind::Lms, RecurrentKind::MultiLms, RecurrentKind::Lrms] {
            let (base, _) = run_recurrent(&seq, &sched, kind, ReadOrder::UpdateThenRead).unwrap();
            let j = 3;
            let mut perturbed = seq.clone();
            perturbed.q[j * d] += 1.5;
            perturbed.k[j * d + 1] -= 2.0;
            perturbed.v[j * d + 2] += 3.0;
            let (out, _) =
                run_recurrent(&perturbed, &sched, kind, ReadOrder::UpdateThenRead).unwrap();
            assert_eq!(&out[..j * d], &base[..j * d], "prefix must be unchanged");
            assert_ne!(&out[j * d..], &base[j * d..]);
        }
    }

    #[test]
    fn run_recurrent_matches_single_step_rederivation() {
        let mut rng = Rng::new(18);
        let (t, d) = (8, 5);
        let seq = rand_seq(&mut rng, t, d);
        let sched = BetaSchedule::new((0..t).map(|_| 0.05 + 0.9 * rng.uniform()).collect(), 3);
        for kind in [RecurrentKind::Lms, RecurrentKind::MultiLms, RecurrentKind::Lrms] {
            let (out, final_state) =
                run_recurrent(&seq, &sched, kind, ReadOrder::UpdateThenRead).unwrap();
            // independent position-by-position rederivation via the public
            // single-step functions, normalizing keys the same way
            let mut s = AttentionState::zeros(d);
            for i in 0..t {
                let kraw = seq.k_at(i);
                let denom = l2_norm(kraw).max(KEY_EPS);
                let k_hat: Vec<f64> = kraw.iter().map(|x| x / denom).collect();
                s = match kind {
                    RecurrentKind::Lms => lms_step(&s, &k_hat, seq.v_at(i), sched.beta[i]),
                    RecurrentKind::MultiLms => {
                        multi_lms_step(&s, &k_hat, seq.v_at(i), sched.beta[i], sched.steps)
                    }
                    RecurrentKind::Lrms => lrms_step(&s, &k_hat, seq.v_at(i), sched.beta[i]),
                };
                let o = s.apply(seq.q_at(i));
                assert!(max_abs_diff(&o, &out[i * d..(i + 1) * d]) <= 1e-12);
            }
            assert!(max_abs_diff(&s.s, &final_state.s) <= 1e-12);
        }
    }

    /// Central finite differences of a scalar functional of the outputs.
    fn fd_check(kind: RecurrentKind, order: ReadOrder) {
        let mut rng = Rng::new(19);
        let (t, d) = (5, 4);
        let seq = rand_seq(&mut rng, t, d);
        let sched = BetaSchedule::new((0..t).map(|_| 0.1 + 0.8 * rng.uniform()).collect(), 4);
        let weights = rand_vec(&mut rng, t * d);
        let objective = |seq: &QkvSequence, sched: &BetaSchedule| -> f64 {
            let (out, _) = run_recurrent(seq, sched, kind, order).unwrap();
            dot(&out, &weights)
        };
        let grads = run_recurrent_grad(&seq, &sched, kind, order, &weights).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel <= 1e-4, "{what}: analytic {analytic} vs numeric {numeric}");
        };
        for idx in 0..t * d {
            for field in 0..3 {
                let mut lo = seq.clone();
                let mut hi = seq.clone();
                let (a, loslot, hislot) = match field {
                    0 => (grads.dq[idx], &mut lo.q[idx], &mut hi.q[idx]),
                    1 => (grads.dk[idx], &mut lo.k[idx], &mut hi.k[idx]),
                    _ => (grads.dv[idx], &mut lo.v[idx], &mut hi.v[idx]),
                };
                *loslot -= h;
                *hislot += h;
                check(a, objective(&hi, &sched), objective(&lo, &sched), "qkv");
            }
        }
        for i in 0..t {
            let mut lo = sched.clone();
            let mut hi = sched.clone();
            lo.beta[i] -= h;
            hi.beta[i] += h;
            check(
                grads.dbeta[i],
                objective(&seq, &hi),
                objective(&seq, &lo),
                "beta",
            );
        }
    }

    #[test]
    fn grad_matches_finite_differences_lms() {
        fd_check(RecurrentKind::Lms, ReadOrder::UpdateThenRead);
        fd_check(RecurrentKind::Lms, ReadOrder::ReadThenUpdate);
    }

    #[test]
    fn grad_matches_finite_differences_multi_lms() {
        fd_check(RecurrentKind::MultiLms, ReadOrder::UpdateThenRead);
    }

    #[test]
    fn grad_matches_finite_differences_lrms() {
        fd_check(RecurrentKind::Lrms, ReadOrder::UpdateThenRead);
    }

    #[test]
    fn grad_matches_finite_differences_softmax() {
        let mut rng = Rng::new(20);
        let (t, d) = (5, 4);
        let seq = rand_seq(&mut rng, t, d);
        let weights = rand_vec(&mut rng, t * d);
        let objective =
            |seq: &QkvSequence| -> f64 { dot(&softmax_attention(seq, false), &weights) };
        let (dq, dk, dv) = softmax_attention_grad(&seq, false, &weights);
        let h = 1e-5;
        for idx in 0..t * d {
            for field in 0..3 {
                let mut lo = seq.clone();
                let mut hi = seq.clone();
                let (a, loslot, hislot) = match field {
                    0 => (dq[idx], &mut lo.q[idx], &mut hi.q[idx]),
                    1 => (dk[idx], &mut lo.k[idx], &mut hi.k[idx]),
                    _ => (dv[idx], &mut lo.v[idx], &mut hi.v[idx]),
                };
                *loslot -= h;
                *hislot += h;
                let numeric = (objective(&hi) - objective(&lo)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(21);
        let (t, d) = (4, 3);
        let seq = rand_seq(&mut rng, t, d);
        let sched = BetaSchedule::new(vec![0.5; t], 2);
        let zeros = vec![0.0; t * d];
        for kind in [RecurrentKind::Lms, RecurrentKind::MultiLms, RecurrentKind::Lrms] {
            let g = run_recurrent_grad(&seq, &sched, kind, ReadOrder::UpdateThenRead, &zeros)
                .unwrap();
            assert!(g.dq.iter().all(|x| *x == 0.0));
            assert!(g.dk.iter().all(|x| *x == 0.0));
            assert!(g.dv.iter().all(|x| *x == 0.0));
            assert!(g.dbeta.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn beta_gradient_vanishes_under_sigmoid_saturation() {
        // A gate driven to sigmoid(+-20) passes at most sigmoid'(20) ~ 2e-9
        // of the beta gradient back to its pre-activation.
        let mut rng = Rng::new(22);
        let (t, d) = (6, 4);
        let seq = rand_seq(&mut rng, t, d);
        let upstream = rand_vec(&mut rng, t * d);
        for pre in [20.0f64, -20.0] {
            let sig = 1.0 / (1.0 + (-pre).exp());
            let dsig = sig * (1.0 - sig);
            let sched = BetaSchedule::uniform(t, sig, 1);
            let g = run_recurrent_grad(
                &seq,
                &sched,
                RecurrentKind::Lms,
                ReadOrder::UpdateThenRead,
                &upstream,
            )
            .unwrap();
            for db in &g.dbeta {
                assert!((db * dsig).abs() <= 1e-7, "saturated gate grad {}", db * dsig);
            }
        }
    }

    #[test]
    fn lms_update_grows_with_outliers_but_lrms_does_not() {
        let mut rng = Rng::new(23);
        let d = 4;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let beta = 0.5;
        let v_base = rand_vec(&mut rng, d);
        let update_norm = |next: &AttentionState| {
            let delta: Vec<f64> = next.s.iter().zip(&s.s).map(|(a, b)| a - b).collect();
            l2_norm(&delta)
        };
        let outlier: Vec<f64> = v_base.iter().map(|x| x * 1e6).collect();
        let lms_small = update_norm(&lms_step(&s, &k, &v_base, beta));
        let lms_big = update_norm(&lms_step(&s, &k, &outlier, beta));
        assert!(lms_big > 1e5 * lms_small.max(1e-3));
        let lrms_small = update_norm(&lrms_step(&s, &k, &v_base, beta));
        let lrms_big = update_norm(&lrms_step(&s, &k, &outlier, beta));
        assert!((lrms_big - lrms_small).abs() <= 1e-9 * lrms_small);
        assert!((lrms_big - beta * l2_norm(&k)).abs() <= 1e-12);
    }
}
