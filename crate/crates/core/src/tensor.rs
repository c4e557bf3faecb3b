//! Flat row-major f64 tensor primitives for the transformer.
//!
//! Weights are stored (out x in) so a linear layer is `y = x W^T + b`;
//! the three matmul shapes below cover the forward and both backward
//! products without any transposed copies.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y = x W^T + b. x: m x k, w: n x k, b: n, y: m x n.
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(y.len(), m * n);
    for i in 0..m {
        let xrow = &x[i * k..(i + 1) * k];
        let yrow = &mut y[i * n..(i + 1) * n];
        for j in 0..n {
            yrow[j] = b[j] + dot(xrow, &w[j * k..(j + 1) * k]);
        }
    }
}

/// dx += dy W. dy: m x n, w: n x k, dx: m x k.
pub(crate) fn matmul_acc(dy: &[f64], w: &[f64], m: usize, n: usize, k: usize, dx: &mut [f64]) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let dxrow = &mut dx[i * k..(i + 1) * k];
        for (p, &c) in dyrow.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let wrow = &w[p * k..(p + 1) * k];
            for (o, wv) in dxrow.iter_mut().zip(wrow) {
                *o += c * wv;
            }
        }
    }
}

/// dW += dy^T x. dy: m x n, x: m x k, dW: n x k.
pub(crate) fn matmul_tn_acc(dy: &[f64], x: &[f64], m: usize, n: usize, k: usize, dw: &mut [f64]) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let xrow = &x[i * k..(i + 1) * k];
        for (p, &c) in dyrow.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let dwrow = &mut dw[p * k..(p + 1) * k];
            for (o, xv) in dwrow.iter_mut().zip(xrow) {
                *o += c * xv;
            }
        }
    }
}

/// db += column sums of dy (m x n).
pub(crate) fn colsum_acc(dy: &[f64], m: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        for (b, v) in db.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
            *b += v;
        }
    }
}

/// y = W x + b for one vector. w: n x k, x: k, y: n.
pub(crate) fn matvec_bias(w: &[f64], x: &[f64], b: &[f64], y: &mut [f64]) {
    let k = x.len();
    for (j, o) in y.iter_mut().enumerate() {
        *o = b[j] + dot(x, &w[j * k..(j + 1) * k]);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization. Writes the normalized rows (pre gain/bias)
/// into `xhat`, the reciprocal std into `rstd`, and `g * xhat + b` into `y`.
pub(crate) fn layernorm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    t: usize,
    d: usize,
    xhat: &mut [f64],
    rstd: &mut [f64],
    y: &mut [f64],
) {
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        let xh = &mut xhat[i * d..(i + 1) * d];
        let yr = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xh[j] = h;
            yr[j] = g[j] * h + b[j];
        }
    }
}

/// Layer norm backward: accumulates into dx, dg, db.
pub(crate) fn layernorm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    t: usize,
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let dn = d as f64;
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] += rstd[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}
