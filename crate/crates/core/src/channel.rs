//! Time-varying MIMO channel generation and prompt packaging.
//!
//! A channel trace follows the first-order autoregression
//! `H_i = rho * H_{i-1} + sqrt(1 - rho^2) * W_i` with `W_i` complex Gaussian,
//! starting from `H_1 ~ CN(0, I)`. Transmissions use a normalized QPSK
//! constellation and observations pass through additive noise and an optional
//! b-bit midrise quantizer applied per real component.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_cgauss, ComplexMatrix, Rng};

/// Default quantizer range.
pub const QUANT_LO: f64 = -4.0;
pub const QUANT_HI: f64 = 4.0;

/// Quantizer resolution: `Bits(b)` for a b-bit uniform quantizer, `None`
/// for an ideal (unquantized) front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuantBitsRepr", into = "QuantBitsRepr")]
pub enum QuantBits {
    None,
    Bits(u8),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum QuantBitsRepr {
    Bits(u8),
    Tag(String),
}

impl TryFrom<QuantBitsRepr> for QuantBits {
    type Error = String;
    fn try_from(r: QuantBitsRepr) -> std::result::Result<Self, String> {
        match r {
            QuantBitsRepr::Bits(b) => {
                if (1..=16).contains(&b) {
                    Ok(QuantBits::Bits(b))
                } else {
                    Err(format!("quantizer bits must be in 1..=16, got {b}"))
                }
            }
            QuantBitsRepr::Tag(s) if s == "none" => Ok(QuantBits::None),
            QuantBitsRepr::Tag(s) => Err(format!("invalid bits value '{s}' (use 1..16 or \"none\")")),
        }
    }
}

impl From<QuantBits> for QuantBitsRepr {
    fn from(b: QuantBits) -> Self {
        match b {
            QuantBits::None => QuantBitsRepr::Tag("none".to_string()),
            QuantBits::Bits(b) => QuantBitsRepr::Bits(b),
        }
    }
}

impl QuantBits {
    /// Applies the configured quantizer to one real component.
    pub fn apply(self, v: f64) -> f64 {
        match self {
            QuantBits::None => v,
            QuantBits::Bits(b) => quantize_uniform(v, b),
        }
    }
}

impl std::fmt::Display for QuantBits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantBits::None => write!(f, "none"),
            QuantBits::Bits(b) => write!(f, "{b}"),
        }
    }
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    // JSON has no literal for infinity, so the noiseless sentinel is the
    // string "inf".
    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tag(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Tag(s) => Err(serde::de::Error::custom(format!("invalid snr_db '{s}'"))),
        }
    }
}

/// Generation parameters for one channel/prompt family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Transmit antennas.
    pub m1: usize,
    /// Receive antennas.
    pub m2: usize,
    /// Memory factor in [0, 1); larger means slower channel variation.
    pub rho: f64,
    /// Channel-variation noise std (per entry).
    pub sigma_w: f64,
    /// Average SNR in dB; `f64::INFINITY` is the noiseless sentinel.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Quantizer resolution.
    pub bits: QuantBits,
    /// Context length K.
    pub k: usize,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.m1 < 1 || self.m2 < 1 {
            return Err(Error::contract("antenna counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::contract(format!("rho must be in [0,1), got {}", self.rho)));
        }
        if !(self.sigma_w >= 0.0) {
            return Err(Error::contract(format!("sigma_w must be >= 0, got {}", self.sigma_w)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::contract("snr_db must be finite or +inf"));
        }
        if self.k < 1 {
            return Err(Error::contract("context length K must be >= 1"));
        }
        Ok(())
    }

    /// Per-entry noise variance `sigma^2 = 10^(-snr_db/10)`; 0 when noiseless.
    pub fn sigma2(&self) -> f64 {
        if self.snr_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }
}

/// A length-(K+1) sequence of channel matrices plus its generation params.
#[derive(Debug, Clone)]
pub struct ChannelTrace {
    pub params: ChannelParams,
    pub h: Vec<ComplexMatrix>,
}

impl ChannelTrace {
    /// Channel at the query position (index K+1, the last matrix).
    pub fn query_channel(&self) -> &ComplexMatrix {
        self.h.last().expect("trace is non-empty")
    }
}

/// Context pairs plus the held-out query for one in-context task.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// (x_i, y_i) pairs, i = 1..K.
    pub context: Vec<(ComplexMatrix, ComplexMatrix)>,
    pub query_y: ComplexMatrix,
    pub target_x: ComplexMatrix,
    /// Generation seed; the trace is regenerable as
    /// `evolve_trace(&mut Rng::new(seed).fork(0), params)`.
    pub seed: u64,
}

/// Draws one QPSK symbol vector with per-antenna power 1/m1, so every draw
/// has unit norm (exactly so when 2*m1 is a power of two, e.g. the 2x2
/// default; within 2 ulps otherwise since 1/(2*m1) is then not
/// representable).
pub fn sample_qpsk(rng: &mut Rng, m1: usize) -> ComplexMatrix {
    assert!(m1 >= 1);
    let s = 1.0 / (2.0 * m1 as f64).sqrt();
    let mut data = Vec::with_capacity(m1);
    for _ in 0..m1 {
        let re = if rng.pick(2) == 0 { s } else { -s };
        let im = if rng.pick(2) == 0 { s } else { -s };
        data.push(Complex64::new(re, im));
    }
    ComplexMatrix::from_vec(m1, 1, data)
}

/// Generates the K+1 channel matrices of one trace with `H_1 ~ CN(0, I)`.
pub fn evolve_trace(rng: &mut Rng, params: &ChannelParams) -> ChannelTrace {
    let h1 = sample_cgauss(rng, params.m2, params.m1, 1.0);
    evolve_trace_from(rng, params, h1)
}

/// Same recursion from a caller-supplied initial channel, used e.g. to start
/// from the stationary distribution.
pub fn evolve_trace_from(rng: &mut Rng, params: &ChannelParams, h1: ComplexMatrix) -> ChannelTrace {
    assert_eq!((h1.rows(), h1.cols()), (params.m2, params.m1));
    let steps = params.k + 1;
    let mut h = Vec::with_capacity(steps);
    h.push(h1);
    let drift = (1.0 - params.rho * params.rho).sqrt();
    let var_w = params.sigma_w * params.sigma_w;
    for _ in 1..steps {
        let w = sample_cgauss(rng, params.m2, params.m1, var_w);
        let prev = h.last().expect("non-empty");
        h.push(prev.scale_re(params.rho).add(&w.scale_re(drift)));
    }
    ChannelTrace {
        params: params.clone(),
        h,
    }
}

/// b-bit midrise uniform quantizer over the default range [-4, 4].
pub fn quantize_uniform(v: f64, bits: u8) -> f64 {
    quantize_uniform_range(v, bits, QUANT_LO, QUANT_HI)
}

/// b-bit midrise uniform quantizer over [lo, hi]: step `delta = (hi-lo)/2^b`,
/// output levels `lo + delta*(n + 0.5)` for n = 0..2^b-1, saturating outside
/// the range. Midrise means no zero level; b = 1 is the sign quantizer
/// scaled to the half-range.
pub fn quantize_uniform_range(v: f64, bits: u8, lo: f64, hi: f64) -> f64 {
    assert!((1..=16).contains(&bits), "bits must be in 1..=16");
    assert!(lo < hi);
    let delta = (hi - lo) / (1u32 << bits) as f64;
    let level = lo + delta * (((v - lo) / delta).floor() + 0.5);
    level.clamp(lo + delta / 2.0, hi - delta / 2.0)
}

/// One noisy, quantized observation `y = Q_b(H x + e)` with `e` i.i.d.
/// complex Gaussian of per-entry variance `sigma^2`. The quantizer acts on
/// the real and imaginary components independently.
pub fn observe(
    rng: &mut Rng,
    h: &ComplexMatrix,
    x: &ComplexMatrix,
    params: &ChannelParams,
) -> Result<ComplexMatrix> {
    if h.cols() != x.rows() || x.cols() != 1 {
        return Err(Error::ShapeMismatch {
            context: "observe",
            expected: format!("H cols = x rows, x a column ({} x 1)", h.cols()),
            got: format!("H {}x{}, x {}x{}", h.rows(), h.cols(), x.rows(), x.cols()),
        });
    }
    let e = sample_cgauss(rng, h.rows(), 1, params.sigma2());
    let clean = h.matmul(x).add(&e);
    let data = clean
        .entries()
        .iter()
        .map(|z| Complex64::new(params.bits.apply(z.re), params.bits.apply(z.im)))
        .collect();
    Ok(ComplexMatrix::from_vec(h.rows(), 1, data))
}

/// Builds one prompt and returns the trace it was generated from.
///
/// Sub-streams are forked per role (trace / symbols / noise), so the trace
/// is regenerable from the prompt seed alone and symbol or noise redraws
/// never perturb the channel.
pub fn make_prompt_with_trace(rng: &Rng, params: &ChannelParams) -> (Prompt, ChannelTrace) {
    let mut trace_rng = rng.fork(0);
    let trace = evolve_trace(&mut trace_rng, params);
    let prompt = make_prompt_from_trace(rng, &trace);
    (prompt, trace)
}

/// Builds a prompt over an existing trace with fresh symbols and noise.
/// Used when resampling a fixed channel pool; the prompt seed then records
/// the symbol/noise stream, not the trace.
pub fn make_prompt_from_trace(rng: &Rng, trace: &ChannelTrace) -> Prompt {
    let params = &trace.params;
    let mut symbol_rng = rng.fork(1);
    let mut noise_rng = rng.fork(2);
    let mut pairs = Vec::with_capacity(trace.h.len());
    for h in &trace.h {
        let x = sample_qpsk(&mut symbol_rng, params.m1);
        let y = observe(&mut noise_rng, h, &x, params).expect("shapes consistent by construction");
        pairs.push((x, y));
    }
    let (target_x, query_y) = pairs.pop().expect("K+1 pairs");
    Prompt {
        context: pairs,
        query_y,
        target_x,
        seed: rng.seed(),
    }
}

/// Builds one prompt: K context pairs plus the held-out query/target pair.
pub fn make_prompt(rng: &Rng, params: &ChannelParams) -> Prompt {
    make_prompt_with_trace(rng, params).0
}

/// Standard evaluation defaults: 2x2 antennas, rho 0.99, sigma_w 0.1,
/// SNR 30 dB, 6-bit quantizer, context length 20.
pub fn default_eval_params() -> ChannelParams {
    ChannelParams {
        m1: 2,
        m2: 2,
        rho: 0.99,
        sigma_w: 0.1,
        snr_db: 30.0,
        bits: QuantBits::Bits(6),
        k: 20,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn qpsk_entries_and_norm() {
        let mut rng = Rng::new(1);
        let s1 = 1.0 / 2f64.sqrt();
        for _ in 0..50 {
            let x = sample_qpsk(&mut rng, 1);
            let z = x.get(0, 0);
            assert!(z.re.abs() == s1 && z.im.abs() == s1);
            // (1/sqrt(2))^2 is one ulp off 0.5 in f64
            assert!((x.norm_sqr() - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
        for _ in 0..50 {
            let x = sample_qpsk(&mut rng, 2);
            for z in x.entries() {
                assert!(z.re.abs() == 0.5 && z.im.abs() == 0.5);
            }
            assert_eq!(x.norm_sqr(), 1.0);
        }
    }

    #[test]
    fn qpsk_constellation_is_uniform() {
        let n = 100_000;
        let mut rng = Rng::new(2);
        let mut mean = Complex64::new(0.0, 0.0);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let x = sample_qpsk(&mut rng, 2);
            for z in x.entries() {
                mean += z;
                let idx = (usize::from(z.re > 0.0) << 1) | usize::from(z.im > 0.0);
                counts[idx] += 1;
            }
        }
        mean /= (2 * n) as f64;
        assert!(mean.norm() <= 0.02, "mean {mean}");
        for c in counts {
            let freq = c as f64 / (2 * n) as f64;
            assert!((0.2..=0.3).contains(&freq), "constellation freq {freq}");
        }
    }

    fn params(rho: f64, sigma_w: f64) -> ChannelParams {
        ChannelParams {
            m1: 2,
            m2: 2,
            rho,
            sigma_w,
            snr_db: 30.0,
            bits: QuantBits::None,
            k: 20,
        }
    }

    #[test]
    fn trace_has_k_plus_one_matrices() {
        let mut rng = Rng::new(3);
        let t = evolve_trace(&mut rng, &params(0.9, 0.1));
        assert_eq!(t.h.len(), 21);
        assert!(t.h.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn trace_memoryless_and_noiseless_limits() {
        // rho = 0, sigma_w = 0: every later channel is exactly zero.
        let mut rng = Rng::new(4);
        let t = evolve_trace(&mut rng, &params(0.0, 0.0));
        for h in &t.h[1..] {
            assert_eq!(h.frobenius_norm(), 0.0);
        }
        // sigma_w = 0: geometric decay of the initial channel.
        let mut rng = Rng::new(5);
        let t = evolve_trace(&mut rng, &params(0.7, 0.0));
        let mut expect = t.h[0].clone();
        for h in &t.h[1..] {
            expect = expect.scale_re(0.7);
            assert!(h.max_abs_diff(&expect) <= 1e-15);
        }
    }

    #[test]
    fn trace_variance_follows_ar1_recursion() {
        // Var(H_i) = rho^{2(i-1)} + (1 - rho^{2(i-1)}) sigma_w^2.
        let p = params(0.99, 0.1);
        let n_traces = 10_000;
        let root = Rng::new(6);
        let checked = [1usize, 5, 20]; // trace indices (0-based), i = idx+1
        let mut sums = [0.0f64; 3];
        for t in 0..n_traces {
            let mut rng = root.fork(t as u64);
            let trace = evolve_trace(&mut rng, &p);
            for (slot, &idx) in checked.iter().enumerate() {
                sums[slot] += trace.h[idx].norm_sqr() / 4.0;
            }
        }
        for (slot, &idx) in checked.iter().enumerate() {
            let i = idx + 1;
            let r = p.rho.powi(2 * (i as i32 - 1));
            let expect = r + (1.0 - r) * p.sigma_w * p.sigma_w;
            let got = sums[slot] / n_traces as f64;
            let rel = (got - expect).abs() / expect;
            assert!(rel <= 0.05, "i={i}: var {got} vs {expect} (rel {rel})");
        }
        // Spot value from the recursion at i = 2.
        let v2 = 0.99f64.powi(2) + (1.0 - 0.99f64.powi(2)) * 0.01;
        assert!((v2 - 0.980299).abs() < 1e-12);
    }

    #[test]
    fn trace_lag_correlation_from_stationary_start() {
        // With H_1 ~ CN(0, sigma_w^2) the process is stationary and the
        // lag-tau autocovariance is rho^tau * sigma_w^2.
        let p = params(0.9, 0.1);
        let var = p.sigma_w * p.sigma_w;
        let n_traces = 10_000;
        let root = Rng::new(7);
        for tau in [1usize, 3] {
            let mut acc = 0.0;
            let mut count = 0usize;
            for t in 0..n_traces {
                let mut rng = root.fork(t as u64);
                let h1 = sample_cgauss(&mut rng, p.m2, p.m1, var);
                let trace = evolve_trace_from(&mut rng, &p, h1);
                for i in 0..trace.h.len() - tau {
                    for (a, b) in trace.h[i].entries().iter().zip(trace.h[i + tau].entries()) {
                        acc += (a * b.conj()).re;
                        count += 1;
                    }
                }
            }
            let got = acc / count as f64;
            let expect = p.rho.powi(tau as i32) * var;
            let rel = (got - expect).abs() / expect;
            assert!(rel <= 0.10, "tau={tau}: cov {got} vs {expect} (rel {rel})");
        }
    }

    #[test]
    fn quantizer_matches_enumerated_levels() {
        // 6 bits: delta = 0.125, levels at -4 + 0.125 (n + 0.5).
        assert_eq!(quantize_uniform(0.03, 6), 0.0625);
        // 1 bit: delta = 4, levels {-2, +2}.
        assert_eq!(quantize_uniform(-0.5, 1), -2.0);
        // Saturation at the top level.
        assert_eq!(quantize_uniform(10.0, 6), 3.9375);
        assert_eq!(quantize_uniform(-10.0, 6), -3.9375);
    }

    proptest! {
        #[test]
        fn quantizer_properties(v in -6.0f64..6.0, w in -6.0f64..6.0, bits in 1u8..=6) {
            let delta = 8.0 / (1u32 << bits) as f64;
            let qv = quantize_uniform(v, bits);
            // Monotone non-decreasing.
            let (lo, hi) = if v <= w { (v, w) } else { (w, v) };
            prop_assert!(quantize_uniform(lo, bits) <= quantize_uniform(hi, bits));
            // Output is one of the 2^bits levels.
            let n = ((qv - QUANT_LO) / delta - 0.5).round();
            prop_assert!((0.0..(1u32 << bits) as f64).contains(&n));
            prop_assert!((QUANT_LO + delta * (n + 0.5) - qv).abs() <= 1e-12);
            // Idempotent on its own levels.
            prop_assert_eq!(quantize_uniform(qv, bits), qv);
            // In-range error bound.
            if (QUANT_LO..=QUANT_HI).contains(&v) {
                prop_assert!((qv - v).abs() <= delta / 2.0 + 1e-12);
            }
            // Odd symmetry away from decision boundaries.
            let cell = (v - QUANT_LO) / delta;
            if (cell - cell.round()).abs() > 1e-9 {
                prop_assert_eq!(quantize_uniform(-v, bits), -qv);
            }
        }
    }

    #[test]
    fn observe_noiseless_unquantized_is_exact() {
        let mut rng = Rng::new(8);
        let p = ChannelParams {
            snr_db: f64::INFINITY,
            ..params(0.9, 0.1)
        };
        let h = sample_cgauss(&mut rng, 2, 2, 1.0);
        let x = sample_qpsk(&mut rng, 2);
        let y = observe(&mut rng, &h, &x, &p).unwrap();
        assert_eq!(y, h.matmul(&x));
    }

    #[test]
    fn observe_quantizes_componentwise() {
        let mut rng = Rng::new(9);
        let p = ChannelParams {
            snr_db: f64::INFINITY,
            bits: QuantBits::Bits(6),
            ..params(0.9, 0.1)
        };
        let h = ComplexMatrix::identity(2);
        let x = sample_qpsk(&mut rng, 2);
        let y = observe(&mut rng, &h, &x, &p).unwrap();
        for (yi, xi) in y.entries().iter().zip(x.entries()) {
            assert_eq!(yi.re, quantize_uniform(xi.re, 6));
            assert_eq!(yi.im, quantize_uniform(xi.im, 6));
        }
    }

    #[test]
    fn observe_noise_energy_at_zero_db() {
        // With H = 0 the observation is pure noise, so E||y||^2 = m2 * sigma^2.
        let p = ChannelParams {
            snr_db: 0.0,
            bits: QuantBits::None,
            ..params(0.9, 0.1)
        };
        let h = ComplexMatrix::zeros(2, 2);
        let x = sample_qpsk(&mut Rng::new(10), 2);
        let mut rng = Rng::new(11);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += observe(&mut rng, &h, &x, &p).unwrap().norm_sqr();
        }
        let got = acc / n as f64;
        let expect = 2.0;
        assert!((got - expect).abs() / expect <= 0.03, "noise energy {got}");
    }

    #[test]
    fn observe_rejects_shape_mismatch() {
        let mut rng = Rng::new(12);
        let p = params(0.9, 0.1);
        let h = ComplexMatrix::zeros(2, 2);
        let x = ComplexMatrix::zeros(3, 1);
        assert!(matches!(
            observe(&mut rng, &h, &x, &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn prompt_shapes_and_unit_power() {
        let p = ChannelParams { k: 1, ..params(0.9, 0.1) };
        let prompt = make_prompt(&Rng::new(13), &p);
        assert_eq!(prompt.context.len(), 1);
        assert_eq!(prompt.query_y.rows(), 2);
        assert_eq!(prompt.target_x.rows(), 2);
        for (x, _) in &prompt.context {
            assert_eq!(x.norm_sqr(), 1.0);
        }
        assert_eq!(prompt.target_x.norm_sqr(), 1.0);
    }

    #[test]
    fn prompt_static_channel_limit() {
        // sigma_w = 0 and rho near 1: all pairs effectively share one channel.
        let p = ChannelParams {
            rho: 1.0 - 1e-12,
            sigma_w: 0.0,
            ..params(0.9, 0.0)
        };
        let (_, trace) = make_prompt_with_trace(&Rng::new(14), &p);
        for h in &trace.h[1..] {
            assert!(h.max_abs_diff(&trace.h[0]) <= 1e-9);
        }
    }

    #[test]
    fn prompt_generation_is_deterministic_and_trace_regenerable() {
        let p = params(0.95, 0.1);
        let rng = Rng::new(15);
        let (a, trace) = make_prompt_with_trace(&rng, &p);
        let b = make_prompt(&rng, &p);
        assert_eq!(a, b);
        let regen = evolve_trace(&mut Rng::new(a.seed).fork(0), &p);
        assert_eq!(trace.h.len(), regen.h.len());
        for (x, y) in trace.h.iter().zip(&regen.h) {
            assert_eq!(x, y);
        }
    }
}
