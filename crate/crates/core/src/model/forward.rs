//! Forward pass with full activation caching for the handwritten backward.

use num_complex::Complex64;

use crate::attention::{
    run_recurrent_cached, softmax_attention_cached, BetaSchedule, QkvSequence, RecurrentCache,
};
use crate::channel::Prompt;
use crate::error::{Error, Result};
use crate::numerics::ComplexMatrix;
use crate::tensor::{layernorm, linear, matvec_bias, sigmoid};

use super::Model;

/// Flattens a complex column vector by stacking real parts then imaginary
/// parts: `[re_0..re_{m-1}, im_0..im_{m-1}]`.
pub fn flatten_complex(v: &ComplexMatrix) -> Vec<f64> {
    let m = v.rows();
    let mut out = vec![0.0; 2 * m];
    for (i, z) in v.entries().iter().enumerate() {
        out[i] = z.re;
        out[m + i] = z.im;
    }
    out
}

/// Inverse of [`flatten_complex`].
pub fn unflatten_complex(v: &[f64]) -> ComplexMatrix {
    assert!(v.len() % 2 == 0 && !v.is_empty());
    let m = v.len() / 2;
    let data = (0..m).map(|i| Complex64::new(v[i], v[m + i])).collect();
    ComplexMatrix::from_vec(m, 1, data)
}

pub(crate) struct LnCache {
    pub rstd: Vec<f64>,
    pub xhat: Vec<f64>,
}

pub(crate) enum AttnCache {
    /// Per-head attention probabilities.
    Softmax(Vec<Vec<f64>>),
    /// Per-head recurrence caches.
    Recurrent(Vec<RecurrentCache>),
}

pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub ln1_out: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// T x heads sigmoid write gates (adaptive kinds only).
    pub beta: Vec<f64>,
    pub attn: AttnCache,
    pub concat: Vec<f64>,
    pub ln2: LnCache,
    pub ln2_out: Vec<f64>,
    pub fc_pre: Vec<f64>,
    pub gelu_out: Vec<f64>,
}

/// All activations of one forward pass plus the prompt-derived targets.
pub struct Forward {
    /// Token count 2K+1.
    pub t: usize,
    /// Prediction count K+1.
    pub n_pred: usize,
    pub(crate) raw_x: Vec<f64>,
    pub(crate) raw_y: Vec<f64>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) lnf: LnCache,
    pub(crate) lnf_out: Vec<f64>,
    /// Predictions at the y-token positions, flat (K+1) x 2*m1.
    pub preds: Vec<f64>,
    pub(crate) targets: Vec<f64>,
    /// Mean over the K+1 positions of the squared prediction error.
    pub loss: f64,
}

impl Forward {
    /// Squared error per y position.
    pub fn position_errors(&self) -> Vec<f64> {
        let w = self.preds.len() / self.n_pred;
        (0..self.n_pred)
            .map(|j| {
                self.preds[j * w..(j + 1) * w]
                    .iter()
                    .zip(&self.targets[j * w..(j + 1) * w])
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum()
            })
            .collect()
    }

    /// Squared error at the final (query) position, the evaluation metric.
    pub fn final_error(&self) -> f64 {
        *self.position_errors().last().expect("at least one position")
    }
}

pub(crate) fn targets_from_prompt(prompt: &Prompt) -> Vec<f64> {
    let mut out = Vec::new();
    for (x, _) in &prompt.context {
        out.extend_from_slice(&flatten_complex(x));
    }
    out.extend_from_slice(&flatten_complex(&prompt.target_x));
    out
}

/// Mean squared error of per-position predictions against the prompt's
/// transmitted symbols (complex squared norm, averaged over positions).
pub fn loss_mse(preds: &[f64], prompt: &Prompt) -> f64 {
    let targets = targets_from_prompt(prompt);
    assert_eq!(preds.len(), targets.len(), "prediction/target length mismatch");
    let n_pred = prompt.context.len() + 1;
    preds
        .iter()
        .zip(&targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n_pred as f64
}

pub(crate) fn extract_head(src: &[f64], t: usize, d: usize, h: usize, hd: usize, dst: &mut [f64]) {
    for i in 0..t {
        dst[i * hd..(i + 1) * hd].copy_from_slice(&src[i * d + h * hd..i * d + (h + 1) * hd]);
    }
}

pub(crate) fn scatter_head_acc(
    dst: &mut [f64],
    t: usize,
    d: usize,
    h: usize,
    hd: usize,
    src: &[f64],
) {
    for i in 0..t {
        for j in 0..hd {
            dst[i * d + h * hd + j] += src[i * hd + j];
        }
    }
}

impl Model {
    fn check_prompt(&self, prompt: &Prompt) -> Result<usize> {
        let cfg = &self.config;
        let k = prompt.context.len();
        let t = Model::token_count(k);
        if t > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "prompt needs {t} tokens but max_seq_len is {}",
                cfg.max_seq_len
            )));
        }
        let dims_ok = prompt.query_y.rows() == cfg.m2
            && prompt.target_x.rows() == cfg.m1
            && prompt
                .context
                .iter()
                .all(|(x, y)| x.rows() == cfg.m1 && y.rows() == cfg.m2);
        if !dims_ok {
            return Err(Error::ShapeMismatch {
                context: "embed_prompt",
                expected: format!("x: {}x1, y: {}x1", cfg.m1, cfg.m2),
                got: "prompt with different antenna dimensions".into(),
            });
        }
        Ok(t)
    }

    fn embed_with_raw(&self, prompt: &Prompt) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let t = self.check_prompt(prompt)?;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let k = prompt.context.len();

        let mut raw_x = Vec::with_capacity(k * 2 * cfg.m1);
        let mut raw_y = Vec::with_capacity((k + 1) * 2 * cfg.m2);
        for (x, y) in &prompt.context {
            raw_x.extend_from_slice(&flatten_complex(x));
            raw_y.extend_from_slice(&flatten_complex(y));
        }
        raw_y.extend_from_slice(&flatten_complex(&prompt.query_y));

        let wx = self.slice(self.layout.embed_x_w);
        let bx = self.slice(self.layout.embed_x_b);
        let wy = self.slice(self.layout.embed_y_w);
        let by = self.slice(self.layout.embed_y_b);
        let pos = self.slice(self.layout.pos);

        let mut tokens = vec![0.0; t * d];
        let (xw, yw) = (2 * cfg.m1, 2 * cfg.m2);
        for tk in 0..t {
            let row = &mut tokens[tk * d..(tk + 1) * d];
            if tk % 2 == 0 {
                let j = tk / 2;
                matvec_bias(wy, &raw_y[j * yw..(j + 1) * yw], by, row);
            } else {
                let j = (tk - 1) / 2;
                matvec_bias(wx, &raw_x[j * xw..(j + 1) * xw], bx, row);
            }
            for (r, p) in row.iter_mut().zip(&pos[tk * d..(tk + 1) * d]) {
                *r += p;
            }
        }
        Ok((tokens, raw_x, raw_y))
    }

    /// Embeds a prompt into its 2K+1 token vectors (projection plus learned
    /// positional embedding), interleaved `[y_1, x_1, ..., y_K, x_K, y_{K+1}]`.
    pub fn embed_prompt(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(self.embed_with_raw(prompt)?.0)
    }

    /// Full causal forward pass; returns predictions at every y position
    /// together with the cached activations needed for backward.
    pub fn forward(&self, prompt: &Prompt) -> Result<Forward> {
        let (tokens, raw_x, raw_y) = self.embed_with_raw(prompt)?;
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let hidden = 4 * d;
        let k = prompt.context.len();
        let t = Model::token_count(k);
        let n_pred = k + 1;

        let mut stream = tokens;
        let mut blocks = Vec::with_capacity(cfg.layers);

        let mut qh = vec![0.0; t * hd];
        let mut kh = vec![0.0; t * hd];
        let mut vh = vec![0.0; t * hd];

        for blk in &self.layout.blocks {
            let x = stream;

            let mut ln1 = LnCache {
                rstd: vec![0.0; t],
                xhat: vec![0.0; t * d],
            };
            let mut ln1_out = vec![0.0; t * d];
            layernorm(
                &x,
                self.slice(blk.ln1_g),
                self.slice(blk.ln1_b),
                t,
                d,
                &mut ln1.xhat,
                &mut ln1.rstd,
                &mut ln1_out,
            );

            let mut q = vec![0.0; t * d];
            let mut kk = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            linear(&ln1_out, self.slice(blk.wq), self.slice(blk.bq), t, d, d, &mut q);
            linear(&ln1_out, self.slice(blk.wk), self.slice(blk.bk), t, d, d, &mut kk);
            linear(&ln1_out, self.slice(blk.wv), self.slice(blk.bv), t, d, d, &mut v);

            let beta = if let (Some(wbeta), Some(bbeta)) = (blk.wbeta, blk.bbeta) {
                let mut b = vec![0.0; t * heads];
                linear(
                    &ln1_out,
                    self.slice(wbeta),
                    self.slice(bbeta),
                    t,
                    d,
                    heads,
                    &mut b,
                );
                for v in &mut b {
                    *v = sigmoid(*v);
                }
                b
            } else {
                Vec::new()
            };

            let mut concat = vec![0.0; t * d];
            let attn = if let Some(kind) = cfg.attention.recurrent() {
                let mut caches = Vec::with_capacity(heads);
                for h in 0..heads {
                    extract_head(&q, t, d, h, hd, &mut qh);
                    extract_head(&kk, t, d, h, hd, &mut kh);
                    extract_head(&v, t, d, h, hd, &mut vh);
                    let seq = QkvSequence::new(t, hd, qh.clone(), kh.clone(), vh.clone());
                    let sched = BetaSchedule::new(
                        (0..t).map(|i| beta[i * heads + h]).collect(),
                        cfg.m_steps,
                    );
                    let (out, cache) =
                        run_recurrent_cached(&seq, &sched, kind, cfg.read_order)?;
                    scatter_head_acc(&mut concat, t, d, h, hd, &out);
                    caches.push(cache);
                }
                AttnCache::Recurrent(caches)
            } else {
                let mut probs = Vec::with_capacity(heads);
                for h in 0..heads {
                    extract_head(&q, t, d, h, hd, &mut qh);
                    extract_head(&kk, t, d, h, hd, &mut kh);
                    extract_head(&v, t, d, h, hd, &mut vh);
                    let seq = QkvSequence::new(t, hd, qh.clone(), kh.clone(), vh.clone());
                    let (out, p) = softmax_attention_cached(&seq, cfg.scaled_softmax);
                    scatter_head_acc(&mut concat, t, d, h, hd, &out);
                    probs.push(p);
                }
                AttnCache::Softmax(probs)
            };

            let mut res1 = vec![0.0; t * d];
            linear(&concat, self.slice(blk.wo), self.slice(blk.bo), t, d, d, &mut res1);
            for (r, xi) in res1.iter_mut().zip(&x) {
                *r += xi;
            }

            let mut ln2 = LnCache {
                rstd: vec![0.0; t],
                xhat: vec![0.0; t * d],
            };
            let mut ln2_out = vec![0.0; t * d];
            layernorm(
                &res1,
                self.slice(blk.ln2_g),
                self.slice(blk.ln2_b),
                t,
                d,
                &mut ln2.xhat,
                &mut ln2.rstd,
                &mut ln2_out,
            );

            let mut fc_pre = vec![0.0; t * hidden];
            linear(
                &ln2_out,
                self.slice(blk.fc_w),
                self.slice(blk.fc_b),
                t,
                d,
                hidden,
                &mut fc_pre,
            );
            let gelu_out: Vec<f64> = fc_pre.iter().map(|x| crate::tensor::gelu(*x)).collect();

            let mut x_next = vec![0.0; t * d];
            linear(
                &gelu_out,
                self.slice(blk.proj_w),
                self.slice(blk.proj_b),
                t,
                hidden,
                d,
                &mut x_next,
            );
            for (o, r) in x_next.iter_mut().zip(&res1) {
                *o += r;
            }

            blocks.push(BlockCache {
                ln1,
                ln1_out,
                q,
                k: kk,
                v,
                beta,
                attn,
                concat,
                ln2,
                ln2_out,
                fc_pre,
                gelu_out,
            });
            stream = x_next;
        }

        let x_final = &stream;
        let mut lnf = LnCache {
            rstd: vec![0.0; t],
            xhat: vec![0.0; t * d],
        };
        let mut lnf_out = vec![0.0; t * d];
        layernorm(
            x_final,
            self.slice(self.layout.ln_f_g),
            self.slice(self.layout.ln_f_b),
            t,
            d,
            &mut lnf.xhat,
            &mut lnf.rstd,
            &mut lnf_out,
        );

        let out_w = self.slice(self.layout.readout_w);
        let out_b = self.slice(self.layout.readout_b);
        let pw = 2 * cfg.m1;
        let mut preds = vec![0.0; n_pred * pw];
        for j in 0..n_pred {
            let tok = 2 * j;
            matvec_bias(
                out_w,
                &lnf_out[tok * d..(tok + 1) * d],
                out_b,
                &mut preds[j * pw..(j + 1) * pw],
            );
        }

        let targets = targets_from_prompt(prompt);
        let loss = preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n_pred as f64;

        Ok(Forward {
            t,
            n_pred,
            raw_x,
            raw_y,
            blocks,
            lnf,
            lnf_out,
            preds,
            targets,
            loss,
        })
    }

    /// Deterministic final-position estimate, as an m1 x 1 complex vector.
    pub fn predict(&self, prompt: &Prompt) -> Result<ComplexMatrix> {
        let fwd = self.forward(prompt)?;
        let pw = 2 * self.config.m1;
        Ok(unflatten_complex(&fwd.preds[(fwd.n_pred - 1) * pw..]))
    }
}
