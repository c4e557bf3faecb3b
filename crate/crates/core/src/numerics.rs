//! Complex dense linear algebra and seeded complex-Gaussian sampling.
//!
//! Everything downstream (channel generation, the LMMSE baseline, prompt
//! packaging) runs on [`ComplexMatrix`] values and draws randomness through
//! the splittable [`Rng`]. Matrices are immutable once returned and all
//! operations are pure, so values can be shared freely across tasks.

use num_complex::Complex64;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Entrywise tolerance for the Hermitian precondition of [`solve_hpd`].
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Dense complex matrix, row-major, double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    /// Builds from row-major entries. Panics if the entry count disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        assert_eq!(data.len(), rows * cols, "entry count must be rows*cols");
        ComplexMatrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(p, j);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        ComplexMatrix::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        ComplexMatrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: Complex64) -> ComplexMatrix {
        let data = self.data.iter().map(|a| a * s).collect();
        ComplexMatrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale_re(&self, s: f64) -> ComplexMatrix {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Squared Euclidean norm; for column vectors this is ||x||^2.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Solves `A X = B` for Hermitian positive-definite `A` via Cholesky.
///
/// The factorization `A = L L^H` fails loudly on the first non-positive
/// pivot, which catches modeling bugs (a Gram matrix plus positive shift is
/// always HPD). The Hermitian precondition is checked entrywise against
/// [`HERMITIAN_TOL`].
pub fn solve_hpd(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            context: "solve_hpd",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    if b.rows() != n {
        return Err(Error::ShapeMismatch {
            context: "solve_hpd",
            expected: format!("{n} rows in B"),
            got: format!("{} rows", b.rows()),
        });
    }
    let mut herm_dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            herm_dev = herm_dev.max((a.get(i, j) - a.get(j, i).conj()).norm());
        }
    }
    if herm_dev > HERMITIAN_TOL {
        return Err(Error::contract(format!(
            "solve_hpd: matrix not Hermitian (max |A - A^H| = {herm_dev:.3e})"
        )));
    }

    // Lower Cholesky factor, row-major.
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut d = a.get(j, j).re;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        // relative pivot test: a pivot wiped out by cancellation means the
        // matrix is singular at working precision
        let scale = a.get(j, j).re.abs().max(f64::MIN_POSITIVE);
        if !(d.is_finite() && d > 1e-12 * scale) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[j * n + j] = Complex64::new(ljj, 0.0);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / ljj;
        }
    }

    // L Y = B, then L^H X = Y, one right-hand side at a time.
    let m = b.cols();
    let mut x = ComplexMatrix::zeros(n, m);
    for c in 0..m {
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut s = b.get(i, c);
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i].conj() * x.get(k, c);
            }
            x.set(i, c, s / l[i * n + i]);
        }
    }
    Ok(x)
}

/// Seeded, splittable random generator.
///
/// A stream is a pure function of its seed, so identical seeds reproduce
/// identical sample sequences bit-exactly. [`Rng::fork`] derives an
/// independent child stream from `(seed, index)` without touching the parent
/// state, which is how parallel or enumerated tasks get their own streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream derived from `(seed, index)`. Pure: does not consume
    /// state from `self`, and the same pair always yields the same stream.
    pub fn fork(&self, index: u64) -> Rng {
        let child = mix64(
            self.seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15)
                .wrapping_mul(2 * index + 1)
                ^ mix64(index),
        );
        Rng::new(child)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn pick(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal N(0, 1).
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

/// Samples a matrix with i.i.d. circularly-symmetric complex Gaussian
/// entries of per-entry variance `var` (real and imaginary parts each carry
/// `var/2`). `var = 0` gives the zero matrix while consuming the same
/// number of draws, so seeded streams stay aligned across variance choices.
pub fn sample_cgauss(rng: &mut Rng, rows: usize, cols: usize, var: f64) -> ComplexMatrix {
    assert!(var >= 0.0, "variance must be nonnegative");
    let s = (var / 2.0).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = s * rng.normal();
        let im = s * rng.normal();
        data.push(Complex64::new(re, im));
    }
    ComplexMatrix::from_vec(rows, cols, data)
}
