//! Self-contained verification routines: kernel algebra checks, full-model
//! gradient checks against central finite differences, and the LMMSE
//! estimator oracle. The `kernelcheck`, `gradcheck`, and `oracle-lmmse`
//! CLI commands print these reports; the acceptance tests assert on them.

use num_complex::Complex64;

use crate::attention::{lms_step, lrms_step, multi_lms_step, AttentionState};
use crate::baselines::lmmse_estimate;
use crate::channel::{make_prompt, ChannelParams, QuantBits};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Model, ModelConfig};
use crate::numerics::{sample_cgauss, ComplexMatrix, Rng};

pub const MULTI_ITERATED_TOL: f64 = 1e-10;
pub const GEOMETRIC_LAW_TOL: f64 = 1e-10;
pub const DELTA_FORM_TOL: f64 = 1e-12;
pub const LRMS_EXACT_TOL: f64 = 1e-9;
pub const LMS_OUTLIER_RATIO: f64 = 1e5;
pub const GRADCHECK_REL_TOL: f64 = 1e-3;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;
pub const RIDGE_MATCH_TOL: f64 = 1e-8;

/// Generic dense complex solve via partial-pivot LU. Kept deliberately
/// separate from the Cholesky route so the two can check each other.
pub fn lu_solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::contract("lu_solve: shape mismatch"));
    }
    let m = b.cols();
    let mut lu: Vec<Complex64> = a.entries().to_vec();
    let mut rhs: Vec<Complex64> = b.entries().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (mut pivot_row, mut pivot_mag) = (col, lu[perm[col] * n + col].norm());
        for row in col + 1..n {
            let mag = lu[perm[row] * n + col].norm();
            if mag > pivot_mag {
                pivot_row = row;
                pivot_mag = mag;
            }
        }
        if pivot_mag == 0.0 {
            return Err(Error::contract(format!("lu_solve: singular at column {col}")));
        }
        perm.swap(col, pivot_row);
        let p = perm[col];
        let pivot = lu[p * n + col];
        for row in col + 1..n {
            let r = perm[row];
            let factor = lu[r * n + col] / pivot;
            lu[r * n + col] = factor;
            for j in col + 1..n {
                let sub = factor * lu[p * n + j];
                lu[r * n + j] -= sub;
            }
            for c in 0..m {
                let sub = factor * rhs[p * m + c];
                rhs[r * m + c] -= sub;
            }
        }
    }
    let mut x = ComplexMatrix::zeros(n, m);
    for c in 0..m {
        for row in (0..n).rev() {
            let r = perm[row];
            let mut s = rhs[r * m + c];
            for j in row + 1..n {
                s -= lu[r * n + j] * x.get(j, c);
            }
            x.set(row, c, s / lu[r * n + row]);
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// kernel algebra checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KernelCheckReport {
    /// Max entrywise gap between the closed-form multi-step update and M
    /// iterated single steps.
    pub multi_vs_iterated_max_abs: f64,
    /// Max relative gap of the post-update residual against the geometric
    /// law (1 - beta)^M for unit keys.
    pub geometric_law_max_rel: f64,
    /// Max entrywise gap between the two algebraic single-step forms.
    pub delta_form_max_abs: f64,
    /// Max relative deviation of the LRMS update norm from beta * ||k||
    /// under million-fold value outliers.
    pub lrms_update_max_dev: f64,
    /// Min ratio of the LMS update norm to beta * ||k|| under the same
    /// outliers (grows with the outlier; must exceed 1e5).
    pub lms_outlier_min_ratio: f64,
}

impl KernelCheckReport {
    pub fn pass_multi(&self) -> bool {
        self.multi_vs_iterated_max_abs <= MULTI_ITERATED_TOL
    }
    pub fn pass_geometric(&self) -> bool {
        self.geometric_law_max_rel <= GEOMETRIC_LAW_TOL
    }
    pub fn pass_delta_form(&self) -> bool {
        self.delta_form_max_abs <= DELTA_FORM_TOL
    }
    pub fn pass_robustness(&self) -> bool {
        self.lrms_update_max_dev <= LRMS_EXACT_TOL && self.lms_outlier_min_ratio > LMS_OUTLIER_RATIO
    }
    pub fn pass(&self) -> bool {
        self.pass_multi() && self.pass_geometric() && self.pass_delta_form() && self.pass_robustness()
    }
}

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = rand_vec(rng, n);
    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= nrm;
    }
    v
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn kernelcheck(seed: u64) -> KernelCheckReport {
    let mut rng = Rng::new(seed);
    let dims = [2usize, 8, 16];
    let m_grid = [1usize, 2, 4, 8, 16];

    // closed form vs iterated
    let mut multi_max: f64 = 0.0;
    for trial in 0..1000 {
        let d = dims[trial % dims.len()];
        let m = m_grid[(trial / dims.len()) % m_grid.len()];
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let beta = 0.001 + 0.998 * rng.uniform();
        let closed = multi_lms_step(&s, &k, &v, beta, m);
        let mut iterated = s.clone();
        for _ in 0..m {
            iterated = lms_step(&iterated, &k, &v, beta);
        }
        for (a, b) in closed.s.iter().zip(&iterated.s) {
            multi_max = multi_max.max((a - b).abs());
        }
    }

    // geometric residual law: ||S'k - v|| = (1-beta)^M ||Sk - v||.
    // Trials are drawn with (1-beta)^M well above f64 rounding of the
    // computed residual so the relative bound is measurable.
    let mut geom_max: f64 = 0.0;
    for trial in 0..1000 {
        let d = dims[trial % dims.len()];
        let m = m_grid[(trial / dims.len()) % m_grid.len()];
        let beta_cap = 1.0 - 1e-4f64.powf(1.0 / m as f64);
        let beta = (0.01 + 0.98 * rng.uniform()) * beta_cap.min(0.98);
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = unit_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let before: Vec<f64> = s.apply(&k).iter().zip(&v).map(|(a, b)| a - b).collect();
        let next = multi_lms_step(&s, &k, &v, beta, m);
        let after: Vec<f64> = next.apply(&k).iter().zip(&v).map(|(a, b)| a - b).collect();
        let expect = (1.0 - beta).powi(m as i32) * l2(&before);
        let rel = (l2(&after) - expect).abs() / expect;
        geom_max = geom_max.max(rel);
    }

    // one-step form vs the delta-rule form S(I - beta k k^T) + beta v k^T
    let mut delta_max: f64 = 0.0;
    for trial in 0..1000 {
        let d = dims[trial % dims.len()];
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = rand_vec(&mut rng, d);
        let v = rand_vec(&mut rng, d);
        let beta = rng.uniform();
        let stepped = lms_step(&s, &k, &v, beta);
        let sk = s.apply(&k);
        let mut other = s.s.clone();
        for i in 0..d {
            for j in 0..d {
                other[i * d + j] += beta * (v[i] - sk[i]) * k[j];
            }
        }
        for (a, b) in stepped.s.iter().zip(&other) {
            delta_max = delta_max.max((a - b).abs());
        }
    }

    // bounded vs unbounded updates under outliers
    let mut lrms_dev: f64 = 0.0;
    let mut lms_ratio = f64::INFINITY;
    for _ in 0..100 {
        let d = 6;
        let s = AttentionState::from_vec(d, rand_vec(&mut rng, d * d));
        let k = rand_vec(&mut rng, d);
        let beta = 0.05 + 0.9 * rng.uniform();
        let v: Vec<f64> = rand_vec(&mut rng, d).iter().map(|x| x * 1e6).collect();
        let expect = beta * l2(&k);
        let lrms_next = lrms_step(&s, &k, &v, beta);
        let delta: Vec<f64> = lrms_next.s.iter().zip(&s.s).map(|(a, b)| a - b).collect();
        lrms_dev = lrms_dev.max((l2(&delta) - expect).abs() / expect);
        let lms_next = lms_step(&s, &k, &v, beta);
        let delta: Vec<f64> = lms_next.s.iter().zip(&s.s).map(|(a, b)| a - b).collect();
        lms_ratio = lms_ratio.min(l2(&delta) / expect);
    }

    KernelCheckReport {
        multi_vs_iterated_max_abs: multi_max,
        geometric_law_max_rel: geom_max,
        delta_form_max_abs: delta_max,
        lrms_update_max_dev: lrms_dev,
        lms_outlier_min_ratio: lms_ratio,
    }
}

// ---------------------------------------------------------------------------
// full-model gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub kind: AttentionKind,
    pub params_checked: usize,
    /// Max of |analytic - numeric| / max(scale, floor) over all parameters.
    pub max_rel_err: f64,
    pub worst_tensor: String,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= GRADCHECK_REL_TOL
    }
}

/// Checks every parameter gradient of a 1-layer, d = 8, K = 4 model against
/// central finite differences (h = 1e-4).
pub fn gradcheck_model(kind: AttentionKind, seed: u64) -> Result<GradCheckReport> {
    let k = 4;
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        embed_dim: 8,
        attention: kind,
        m_steps: 4,
        max_seq_len: 2 * k + 1,
        m1: 2,
        m2: 2,
        read_order: Default::default(),
        scaled_softmax: false,
    };
    let mut model = Model::init(cfg, &mut Rng::new(seed))?;
    let params = ChannelParams {
        m1: 2,
        m2: 2,
        rho: 0.95,
        sigma_w: 0.1,
        snr_db: 20.0,
        bits: QuantBits::Bits(6),
        k,
    };
    let prompt = make_prompt(&Rng::new(seed ^ 0x5eed), &params);

    let fwd = model.forward(&prompt)?;
    let analytic = model.backward(&fwd);

    let h = 1e-4;
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for idx in 0..model.layout.total {
        let orig = model.params[idx];
        model.params[idx] = orig + h;
        let lp = model.forward(&prompt)?.loss;
        model.params[idx] = orig - h;
        let lm = model.forward(&prompt)?.loss;
        model.params[idx] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic[idx].abs().max(numeric.abs());
        let rel = (analytic[idx] - numeric).abs()
            / scale.max(GRADCHECK_ABS_FLOOR / GRADCHECK_REL_TOL);
        if rel > max_rel {
            max_rel = rel;
            worst = model.layout.tensor_at(idx).to_string();
        }
    }
    Ok(GradCheckReport {
        kind,
        params_checked: model.layout.total,
        max_rel_err: max_rel,
        worst_tensor: worst,
    })
}

pub fn gradcheck_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    [
        AttentionKind::Softmax,
        AttentionKind::Lms,
        AttentionKind::MultiLms,
        AttentionKind::Lrms,
    ]
    .into_iter()
    .map(|kind| gradcheck_model(kind, seed))
    .collect()
}

// ---------------------------------------------------------------------------
// LMMSE oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LmmseOracleReport {
    /// Max entrywise gap against the independent generic ridge solve.
    pub ridge_max_diff: f64,
    pub lmmse_mse: f64,
    pub lmmse_se: f64,
    pub fitted_mse: f64,
    pub fitted_se: f64,
}

impl LmmseOracleReport {
    pub fn pass_ridge(&self) -> bool {
        self.ridge_max_diff <= RIDGE_MATCH_TOL
    }
    /// No fixed linear filter beats the closed form beyond noise.
    pub fn pass_optimality(&self) -> bool {
        self.lmmse_mse <= self.fitted_mse + 3.0 * self.fitted_se
    }
    pub fn pass(&self) -> bool {
        self.pass_ridge() && self.pass_optimality()
    }
}

/// Compares the closed-form estimator against (a) an independent LU-based
/// ridge solve on random instances and (b) a least-squares linear filter
/// fitted on `n_samples` Gaussian transmissions and scored on a held-out
/// set of the same size.
pub fn lmmse_oracle(seed: u64, n_samples: usize) -> Result<LmmseOracleReport> {
    let mut rng = Rng::new(seed);

    let mut ridge_max: f64 = 0.0;
    for trial in 0..200 {
        let m1 = 2 + trial % 2;
        let m2 = m1 + trial % 3;
        let h = sample_cgauss(&mut rng, m2, m1, 1.0);
        let y = sample_cgauss(&mut rng, m2, 1, 1.0);
        let sigma2 = [0.0, 0.1, 1.0][trial % 3];
        let est = lmmse_estimate(&h, &y, sigma2)?;
        let hh = h.hermitian();
        let a = hh
            .matmul(&h)
            .add(&ComplexMatrix::identity(m1).scale_re(2.0 * sigma2));
        let oracle = lu_solve(&a, &hh.matmul(&y))?;
        ridge_max = ridge_max.max(est.max_abs_diff(&oracle));
    }

    // Fixed channel, Gaussian inputs with E||x||^2 = 1; fit W minimizing
    // sum ||x - W y||^2 on a training set, score on a held-out set.
    let m1 = 2;
    let m2 = 2;
    let h = sample_cgauss(&mut rng, m2, m1, 1.0);
    let sigma2 = 0.1;
    let draw = |rng: &mut Rng| {
        let x = sample_cgauss(rng, m1, 1, 1.0 / m1 as f64);
        let e = sample_cgauss(rng, m2, 1, sigma2);
        let y = h.matmul(&x).add(&e);
        (x, y)
    };

    let mut r_yy = ComplexMatrix::zeros(m2, m2);
    let mut r_xy = ComplexMatrix::zeros(m1, m2);
    for _ in 0..n_samples {
        let (x, y) = draw(&mut rng);
        r_yy = r_yy.add(&y.matmul(&y.hermitian()));
        r_xy = r_xy.add(&x.matmul(&y.hermitian()));
    }
    // W = R_xy R_yy^{-1}, solved as R_yy W^H = R_xy^H via the LU oracle.
    let w_h = lu_solve(&r_yy, &r_xy.hermitian())?;
    let w = w_h.hermitian();

    let mut lmmse_errs = Vec::with_capacity(n_samples);
    let mut fitted_errs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (x, y) = draw(&mut rng);
        let lm = lmmse_estimate(&h, &y, sigma2)?;
        lmmse_errs.push(lm.sub(&x).norm_sqr());
        fitted_errs.push(w.matmul(&y).sub(&x).norm_sqr());
    }
    let stats = |errs: &[f64]| {
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (lmmse_mse, lmmse_se) = stats(&lmmse_errs);
    let (fitted_mse, fitted_se) = stats(&fitted_errs);

    Ok(LmmseOracleReport {
        ridge_max_diff: ridge_max,
        lmmse_mse,
        lmmse_se,
        fitted_mse,
        fitted_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solve_inverts_random_systems() {
        let mut rng = Rng::new(31);
        for n in 1..=5 {
            let a = sample_cgauss(&mut rng, n, n, 1.0);
            let b = sample_cgauss(&mut rng, n, 2, 1.0);
            let x = lu_solve(&a, &b).unwrap();
            let rel = a.matmul(&x).sub(&b).frobenius_norm() / b.frobenius_norm().max(1.0);
            assert!(rel <= 1e-10, "n={n} residual {rel}");
        }
    }

    #[test]
    fn lu_solve_reports_singularity() {
        let one = Complex64::new(1.0, 0.0);
        let a = ComplexMatrix::from_vec(2, 2, vec![one, one, one, one]);
        let b = ComplexMatrix::from_vec(2, 1, vec![one, one]);
        assert!(lu_solve(&a, &b).is_err());
    }

    #[test]
    fn kernelcheck_smoke() {
        let report = kernelcheck(1234);
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn lmmse_oracle_small_sample_smoke() {
        let report = lmmse_oracle(7, 2000).unwrap();
        assert!(report.pass_ridge(), "{report:?}");
        assert!(report.pass_optimality(), "{report:?}");
    }
}
