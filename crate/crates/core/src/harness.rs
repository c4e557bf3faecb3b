//! Evaluation protocol: seeded Monte-Carlo MSE estimation, parameter
//! sweeps with common random numbers across methods, and CSV emission.

use std::path::Path;
use std::sync::Arc;

use crate::baselines::{lmmse_estimate, zero_predictor};
use crate::channel::{make_prompt_with_trace, ChannelParams, ChannelTrace, Prompt, QuantBits};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model};
use crate::numerics::Rng;

/// An equalizer under evaluation.
#[derive(Clone)]
pub enum Method {
    Zero,
    Lmmse,
    Model { name: String, model: Arc<Model> },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Zero => "zero",
            Method::Lmmse => "lmmse",
            Method::Model { name, .. } => name,
        }
    }

    pub fn from_checkpoint(name: impl Into<String>, path: &Path) -> Result<Method> {
        let (model, _) = load_checkpoint(path)?;
        Ok(Method::Model {
            name: name.into(),
            model: Arc::new(model),
        })
    }

    fn estimate(&self, prompt: &Prompt, trace: &ChannelTrace, params: &ChannelParams) -> Result<crate::numerics::ComplexMatrix> {
        match self {
            Method::Zero => Ok(zero_predictor(params.m1)),
            Method::Lmmse => lmmse_estimate(trace.query_channel(), &prompt.query_y, params.sigma2()),
            Method::Model { model, .. } => model.predict(prompt),
        }
    }
}

/// Per-prompt losses plus a digest of the consumed prompts, used to assert
/// common random numbers across methods.
pub struct EvalDetail {
    pub mean: f64,
    pub se: f64,
    pub losses: Vec<f64>,
    pub prompt_digest: u64,
}

fn fnv1a_f64(hash: &mut u64, v: f64) {
    let mut h = *hash;
    for b in v.to_bits().to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    *hash = h;
}

/// Order-sensitive digest over every float in the prompt.
pub fn prompt_digest(prompt: &Prompt) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for (x, y) in &prompt.context {
        for z in x.entries().iter().chain(y.entries()) {
            fnv1a_f64(&mut h, z.re);
            fnv1a_f64(&mut h, z.im);
        }
    }
    for z in prompt.query_y.entries().iter().chain(prompt.target_x.entries()) {
        fnv1a_f64(&mut h, z.re);
        fnv1a_f64(&mut h, z.im);
    }
    h
}

pub fn mean_and_se(losses: &[f64]) -> (f64, f64) {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    if losses.len() < 2 {
        return (mean, 0.0);
    }
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates one method over `n_eval` seeded prompts with fixed channel
/// parameters; returns per-prompt squared errors at the query position.
/// Prompt i comes from the fork `(seed, i)`, so results are independent of
/// evaluation order or parallel partitioning.
pub fn evaluate_detailed(
    method: &Method,
    params: &ChannelParams,
    n_eval: usize,
    seed: u64,
) -> Result<EvalDetail> {
    if n_eval < 1 {
        return Err(Error::contract("n_eval must be >= 1"));
    }
    params.validate()?;
    let root = Rng::new(seed);
    let mut losses = Vec::with_capacity(n_eval);
    let mut digest = 0xCBF2_9CE4_8422_2325u64;
    for i in 0..n_eval {
        let (prompt, trace) = make_prompt_with_trace(&root.fork(i as u64), params);
        fnv1a_f64(&mut digest, prompt_digest(&prompt) as f64);
        let estimate = method.estimate(&prompt, &trace, params)?;
        losses.push(estimate.sub(&prompt.target_x).norm_sqr());
    }
    let (mean, se) = mean_and_se(&losses);
    Ok(EvalDetail {
        mean,
        se,
        losses,
        prompt_digest: digest,
    })
}

/// Mean squared error and its standard error at the query position.
pub fn evaluate(
    method: &Method,
    params: &ChannelParams,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let detail = evaluate_detailed(method, params, n_eval, seed)?;
    Ok((detail.mean, detail.se))
}

/// Per-context-position mean squared errors for a model (positions 1..K+1).
pub fn evaluate_model_positions(
    model: &Model,
    params: &ChannelParams,
    n_eval: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let root = Rng::new(seed);
    let mut per_position: Vec<Vec<f64>> = vec![Vec::with_capacity(n_eval); params.k + 1];
    for i in 0..n_eval {
        let (prompt, _) = make_prompt_with_trace(&root.fork(i as u64), params);
        let fwd = model.forward(&prompt)?;
        for (slot, err) in per_position.iter_mut().zip(fwd.position_errors()) {
            slot.push(err);
        }
    }
    Ok(per_position)
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rho,
    SnrDb,
    Bits,
    MSteps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::Bits => "bits",
            SweepAxis::MSteps => "m_steps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "snr_db" => Ok(SweepAxis::SnrDb),
            "bits" => Ok(SweepAxis::Bits),
            "m_steps" => Ok(SweepAxis::MSteps),
            other => Err(Error::Parse(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    /// Channel parameters for every non-swept field.
    pub fixed: ChannelParams,
    pub n_eval: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub axis: String,
    pub value: f64,
    pub method: String,
    pub mse: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn cell_params(axis: SweepAxis, fixed: &ChannelParams, value: f64) -> Result<ChannelParams> {
    let mut p = fixed.clone();
    match axis {
        SweepAxis::Rho => p.rho = value,
        SweepAxis::SnrDb => p.snr_db = value,
        SweepAxis::Bits => {
            let b = value as u8;
            if (b as f64 - value).abs() > 0.0 || !(1..=16).contains(&b) {
                return Err(Error::contract(format!("bits grid value {value} is not in 1..=16")));
            }
            p.bits = QuantBits::Bits(b);
        }
        SweepAxis::MSteps => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::contract(format!("m_steps grid value {value} must be a positive integer")));
            }
        }
    }
    p.validate()?;
    Ok(p)
}

/// Runs every (grid value x method) cell. All methods inside one cell see
/// identical prompts (same cell seed), which the digests assert. Rows come
/// out sorted by (value, method name).
pub fn run_sweep(spec: &SweepSpec) -> Result<ResultTable> {
    if spec.grid.is_empty() {
        return Err(Error::contract("sweep grid must be non-empty"));
    }
    if spec.methods.is_empty() {
        return Err(Error::contract("sweep needs at least one method"));
    }
    let mut rows = Vec::with_capacity(spec.grid.len() * spec.methods.len());
    for (ci, &value) in spec.grid.iter().enumerate() {
        let params = cell_params(spec.axis, &spec.fixed, value)?;
        let cell_seed = Rng::new(spec.seed).fork(ci as u64).seed();
        let mut cell_digest: Option<u64> = None;
        for method in &spec.methods {
            // the m_steps axis re-reads the closed-form step count at
            // inference time; other methods just repeat across the grid
            let resolved: Method = match (spec.axis, method) {
                (SweepAxis::MSteps, Method::Model { name, model }) => {
                    let mut m = (**model).clone();
                    m.config.m_steps = value as usize;
                    Method::Model {
                        name: name.clone(),
                        model: Arc::new(m),
                    }
                }
                _ => method.clone(),
            };
            let detail = evaluate_detailed(&resolved, &params, spec.n_eval, cell_seed)?;
            match cell_digest {
                None => cell_digest = Some(detail.prompt_digest),
                Some(d) => assert_eq!(
                    d, detail.prompt_digest,
                    "methods consumed different prompts within a cell"
                ),
            }
            rows.push(ResultRow {
                axis: spec.axis.name().to_string(),
                value,
                method: method.name().to_string(),
                mse: detail.mean,
                stderr: detail.se,
                n: spec.n_eval,
                seed: cell_seed,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .expect("finite axis values")
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(ResultTable { rows })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "axis,value,method,mse,stderr,n,seed";

/// Writes `axis,value,method,mse,stderr,n,seed` rows. Floats use the
/// shortest round-trip form, so parse(emit(t)) reproduces t exactly.
pub fn emit_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.method, r.mse, r.stderr, r.n, r.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "bad result CSV header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("row {}: expected 7 fields", i + 2)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse(format!("row {}: bad float '{s}'", i + 2)))
        };
        rows.push(ResultRow {
            axis: f[0].to_string(),
            value: parse_f(f[1])?,
            method: f[2].to_string(),
            mse: parse_f(f[3])?,
            stderr: parse_f(f[4])?,
            n: f[5]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad count '{}'", i + 2, f[5])))?,
            seed: f[6]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad seed '{}'", i + 2, f[6])))?,
        });
    }
    Ok(ResultTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::default_eval_params;

    #[test]
    fn zero_predictor_mse_is_one() {
        let params = default_eval_params();
        let (mean, se) = evaluate(&Method::Zero, &params, 300, 42).unwrap();
        assert!((mean - 1.0).abs() <= 3.0 * se + 1e-12, "mean {mean}, se {se}");
        assert!((mean - 1.0).abs() <= 1e-12, "unit-power symbols give exactly 1");
    }

    #[test]
    fn lmmse_noiseless_unquantized_is_exact() {
        let params = ChannelParams {
            snr_db: f64::INFINITY,
            bits: QuantBits::None,
            ..default_eval_params()
        };
        let (mean, _) = evaluate(&Method::Lmmse, &params, 200, 7).unwrap();
        assert!(mean <= 1e-20, "mean {mean}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let params = default_eval_params();
        let a = evaluate(&Method::Lmmse, &params, 100, 9).unwrap();
        let b = evaluate(&Method::Lmmse, &params, 100, 9).unwrap();
        assert_eq!(a, b);
        let detail = evaluate_detailed(&Method::Lmmse, &params, 100, 9).unwrap();
        let (mean, se) = mean_and_se(&detail.losses);
        assert_eq!((mean, se), a);
    }

    #[test]
    fn sweep_shares_prompts_and_orders_rows() {
        let spec = SweepSpec {
            axis: SweepAxis::SnrDb,
            grid: vec![30.0, 0.0, 10.0],
            fixed: default_eval_params(),
            n_eval: 50,
            seed: 5,
            methods: vec![Method::Lmmse, Method::Zero],
        };
        let table = run_sweep(&spec).unwrap();
        assert_eq!(table.rows.len(), 6);
        let values: Vec<f64> = table.rows.iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.0, 0.0, 10.0, 10.0, 30.0, 30.0]);
        // lmmse sorts before zero
        assert_eq!(table.rows[0].method, "lmmse");
        assert_eq!(table.rows[1].method, "zero");
        // zero-predictor MSE is flat at 1 regardless of SNR
        for r in table.rows.iter().filter(|r| r.method == "zero") {
            assert!((r.mse - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lmmse_mse_decreases_with_snr() {
        let spec = SweepSpec {
            axis: SweepAxis::SnrDb,
            grid: vec![0.0, 10.0, 20.0, 30.0],
            fixed: ChannelParams {
                bits: QuantBits::None,
                ..default_eval_params()
            },
            n_eval: 500,
            seed: 11,
            methods: vec![Method::Lmmse],
        };
        let table = run_sweep(&spec).unwrap();
        for pair in table.rows.windows(2) {
            let margin = 3.0 * (pair[0].stderr + pair[1].stderr);
            assert!(
                pair[1].mse < pair[0].mse + margin,
                "MSE should fall with SNR: {} -> {}",
                pair[0].mse,
                pair[1].mse
            );
        }
        // strict decrease end to end
        assert!(table.rows.last().unwrap().mse < table.rows[0].mse);
    }

    #[test]
    fn quantizer_distortion_shrinks_with_bits() {
        // distortion of the LMMSE input: compare b = 1 against b = 6 at a
        // fixed seed; finer quantization must help the analytic baseline
        let mk = |bits| ChannelParams {
            bits: QuantBits::Bits(bits),
            ..default_eval_params()
        };
        let (coarse, _) = evaluate(&Method::Lmmse, &mk(1), 300, 13).unwrap();
        let (fine, _) = evaluate(&Method::Lmmse, &mk(6), 300, 13).unwrap();
        assert!(fine < coarse, "b=6 {fine} vs b=1 {coarse}");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let table = ResultTable {
            rows: vec![
                ResultRow {
                    axis: "snr_db".into(),
                    value: 0.1 + 0.2, // deliberately non-representable
                    method: "lmmse".into(),
                    mse: 1.0 / 3.0,
                    stderr: 2.5e-17,
                    n: 200,
                    seed: 12345,
                },
                ResultRow {
                    axis: "snr_db".into(),
                    value: 30.0,
                    method: "zero".into(),
                    mse: 1.0,
                    stderr: 0.0,
                    n: 200,
                    seed: 12345,
                },
            ],
        };
        emit_csv(&table, &path).unwrap();
        let back = parse_csv(&path).unwrap();
        assert_eq!(table, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3, "header plus one line per row");
    }

    #[test]
    fn empty_table_emits_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_csv(&ResultTable::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&path).unwrap().rows.is_empty());
    }
}
