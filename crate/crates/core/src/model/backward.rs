//! Handwritten reverse-mode pass over the cached forward activations.

use crate::attention::{
    run_recurrent_backward, softmax_attention_backward, BetaSchedule, QkvSequence,
};
use crate::tensor::{colsum_acc, gelu_grad, layernorm_backward, matmul_acc, matmul_tn_acc};

use super::forward::{extract_head, scatter_head_acc, AttnCache, Forward};
use super::{Model, Slot};

/// Two disjoint mutable gradient slices (slots must be in layout order).
fn two_slices(grads: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.off + a.len() <= b.off);
    let (left, right) = grads.split_at_mut(b.off);
    (&mut left[a.range()], &mut right[..b.len()])
}

impl Model {
    /// Gradients of the forward loss with respect to every parameter.
    pub fn backward(&self, fwd: &Forward) -> Vec<f64> {
        let mut grads = self.grad_buffer();
        self.backward_into(fwd, &mut grads, 1.0);
        grads
    }

    /// Accumulates `scale * d(loss)/d(params)` into `grads`; used to average
    /// gradients over a batch without intermediate buffers.
    pub fn backward_into(&self, fwd: &Forward, grads: &mut [f64], scale: f64) {
        let c = 2.0 * scale / fwd.n_pred as f64;
        let dpreds: Vec<f64> = fwd
            .preds
            .iter()
            .zip(&fwd.targets)
            .map(|(p, t)| c * (p - t))
            .collect();
        self.backward_preds_into(fwd, &dpreds, grads);
    }

    /// Backward from arbitrary upstream gradients on the per-position
    /// predictions (flat (K+1) x 2*m1).
    pub fn backward_preds_into(&self, fwd: &Forward, dpreds: &[f64], grads: &mut [f64]) {
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let hidden = 4 * d;
        let t = fwd.t;
        let pw = 2 * cfg.m1;
        assert_eq!(dpreds.len(), fwd.n_pred * pw);
        assert_eq!(grads.len(), self.layout.total);

        // readout head, applied at y-token positions only
        let mut d_lnf_out = vec![0.0; t * d];
        {
            let wr = self.slice(self.layout.readout_w);
            let gw = &mut grads[self.layout.readout_w.range()];
            for j in 0..fwd.n_pred {
                let tok = 2 * j;
                let dp = &dpreds[j * pw..(j + 1) * pw];
                let h_row = &fwd.lnf_out[tok * d..(tok + 1) * d];
                let drow = &mut d_lnf_out[tok * d..(tok + 1) * d];
                for (o, &dpo) in dp.iter().enumerate() {
                    if dpo == 0.0 {
                        continue;
                    }
                    let wrow = &wr[o * d..(o + 1) * d];
                    let gwrow = &mut gw[o * d..(o + 1) * d];
                    for i in 0..d {
                        gwrow[i] += dpo * h_row[i];
                        drow[i] += dpo * wrow[i];
                    }
                }
            }
            let gb = &mut grads[self.layout.readout_b.range()];
            for j in 0..fwd.n_pred {
                for (o, &dpo) in dpreds[j * pw..(j + 1) * pw].iter().enumerate() {
                    gb[o] += dpo;
                }
            }
        }

        // final layer norm
        let mut d_stream = vec![0.0; t * d];
        {
            let (dg, db) = two_slices(grads, self.layout.ln_f_g, self.layout.ln_f_b);
            layernorm_backward(
                &d_lnf_out,
                &fwd.lnf.xhat,
                &fwd.lnf.rstd,
                self.slice(self.layout.ln_f_g),
                t,
                d,
                &mut d_stream,
                dg,
                db,
            );
        }

        for (bi, blk) in self.layout.blocks.iter().enumerate().rev() {
            let cache = &fwd.blocks[bi];

            // x_next = res1 + proj(gelu(fc(ln2(res1)))); d_stream = dL/dx_next
            let mut d_gelu = vec![0.0; t * hidden];
            matmul_tn_acc(&d_stream, &cache.gelu_out, t, d, hidden, &mut grads[blk.proj_w.range()]);
            colsum_acc(&d_stream, t, d, &mut grads[blk.proj_b.range()]);
            matmul_acc(&d_stream, self.slice(blk.proj_w), t, d, hidden, &mut d_gelu);

            let mut d_fcpre = d_gelu;
            for (g, x) in d_fcpre.iter_mut().zip(&cache.fc_pre) {
                *g *= gelu_grad(*x);
            }

            matmul_tn_acc(&d_fcpre, &cache.ln2_out, t, hidden, d, &mut grads[blk.fc_w.range()]);
            colsum_acc(&d_fcpre, t, hidden, &mut grads[blk.fc_b.range()]);
            let mut d_ln2out = vec![0.0; t * d];
            matmul_acc(&d_fcpre, self.slice(blk.fc_w), t, hidden, d, &mut d_ln2out);

            // skip connection plus the normalized branch
            let mut d_res1 = d_stream.clone();
            {
                let (dg, db) = two_slices(grads, blk.ln2_g, blk.ln2_b);
                layernorm_backward(
                    &d_ln2out,
                    &cache.ln2.xhat,
                    &cache.ln2.rstd,
                    self.slice(blk.ln2_g),
                    t,
                    d,
                    &mut d_res1,
                    dg,
                    db,
                );
            }

            // res1 = x_in + wo(concat): d_res1 feeds both paths
            matmul_tn_acc(&d_res1, &cache.concat, t, d, d, &mut grads[blk.wo.range()]);
            colsum_acc(&d_res1, t, d, &mut grads[blk.bo.range()]);
            let mut d_concat = vec![0.0; t * d];
            matmul_acc(&d_res1, self.slice(blk.wo), t, d, d, &mut d_concat);

            // attention kernels, head by head
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dbeta = vec![0.0; t * heads];
            let mut uh = vec![0.0; t * hd];
            let mut qh = vec![0.0; t * hd];
            let mut kh = vec![0.0; t * hd];
            let mut vh = vec![0.0; t * hd];
            for h in 0..heads {
                extract_head(&d_concat, t, d, h, hd, &mut uh);
                extract_head(&cache.q, t, d, h, hd, &mut qh);
                extract_head(&cache.k, t, d, h, hd, &mut kh);
                extract_head(&cache.v, t, d, h, hd, &mut vh);
                let seq = QkvSequence::new(t, hd, qh.clone(), kh.clone(), vh.clone());
                match &cache.attn {
                    AttnCache::Recurrent(caches) => {
                        let sched = BetaSchedule::new(
                            (0..t).map(|i| cache.beta[i * heads + h]).collect(),
                            cfg.m_steps,
                        );
                        let kg = run_recurrent_backward(&seq, &sched, &caches[h], &uh);
                        scatter_head_acc(&mut dq, t, d, h, hd, &kg.dq);
                        scatter_head_acc(&mut dk, t, d, h, hd, &kg.dk);
                        scatter_head_acc(&mut dv, t, d, h, hd, &kg.dv);
                        for i in 0..t {
                            dbeta[i * heads + h] = kg.dbeta[i];
                        }
                    }
                    AttnCache::Softmax(probs) => {
                        let (dqh, dkh, dvh) = softmax_attention_backward(
                            &seq,
                            cfg.scaled_softmax,
                            &probs[h],
                            &uh,
                        );
                        scatter_head_acc(&mut dq, t, d, h, hd, &dqh);
                        scatter_head_acc(&mut dk, t, d, h, hd, &dkh);
                        scatter_head_acc(&mut dv, t, d, h, hd, &dvh);
                    }
                }
            }

            // q/k/v projections
            let mut d_ln1out = vec![0.0; t * d];
            matmul_tn_acc(&dq, &cache.ln1_out, t, d, d, &mut grads[blk.wq.range()]);
            colsum_acc(&dq, t, d, &mut grads[blk.bq.range()]);
            matmul_acc(&dq, self.slice(blk.wq), t, d, d, &mut d_ln1out);
            matmul_tn_acc(&dk, &cache.ln1_out, t, d, d, &mut grads[blk.wk.range()]);
            colsum_acc(&dk, t, d, &mut grads[blk.bk.range()]);
            matmul_acc(&dk, self.slice(blk.wk), t, d, d, &mut d_ln1out);
            matmul_tn_acc(&dv, &cache.ln1_out, t, d, d, &mut grads[blk.wv.range()]);
            colsum_acc(&dv, t, d, &mut grads[blk.bv.range()]);
            matmul_acc(&dv, self.slice(blk.wv), t, d, d, &mut d_ln1out);

            // write-gate projection through the sigmoid
            if let (Some(wbeta), Some(bbeta)) = (blk.wbeta, blk.bbeta) {
                let mut d_pre = vec![0.0; t * heads];
                for (dp, (db, b)) in d_pre.iter_mut().zip(dbeta.iter().zip(&cache.beta)) {
                    *dp = db * b * (1.0 - b);
                }
                matmul_tn_acc(&d_pre, &cache.ln1_out, t, heads, d, &mut grads[wbeta.range()]);
                colsum_acc(&d_pre, t, heads, &mut grads[bbeta.range()]);
                matmul_acc(&d_pre, self.slice(wbeta), t, heads, d, &mut d_ln1out);
            }

            // ln1 plus the residual skip into the block input
            let mut d_x = d_res1;
            {
                let (dg, db) = two_slices(grads, blk.ln1_g, blk.ln1_b);
                layernorm_backward(
                    &d_ln1out,
                    &cache.ln1.xhat,
                    &cache.ln1.rstd,
                    self.slice(blk.ln1_g),
                    t,
                    d,
                    &mut d_x,
                    dg,
                    db,
                );
            }
            d_stream = d_x;
        }

        // embeddings: positional plus the two type-specific projections
        let (xw, yw) = (2 * cfg.m1, 2 * cfg.m2);
        {
            let gpos = &mut grads[self.layout.pos.range()];
            for tk in 0..t {
                for (g, v) in gpos[tk * d..(tk + 1) * d]
                    .iter_mut()
                    .zip(&d_stream[tk * d..(tk + 1) * d])
                {
                    *g += v;
                }
            }
        }
        for tk in 0..t {
            let drow = &d_stream[tk * d..(tk + 1) * d];
            if tk % 2 == 0 {
                let j = tk / 2;
                let raw = &fwd.raw_y[j * yw..(j + 1) * yw];
                let gw = &mut grads[self.layout.embed_y_w.range()];
                for (o, &g) in drow.iter().enumerate() {
                    for (slot, r) in gw[o * yw..(o + 1) * yw].iter_mut().zip(raw) {
                        *slot += g * r;
                    }
                }
                let gb = &mut grads[self.layout.embed_y_b.range()];
                for (slot, &g) in gb.iter_mut().zip(drow) {
                    *slot += g;
                }
            } else {
                let j = (tk - 1) / 2;
                let raw = &fwd.raw_x[j * xw..(j + 1) * xw];
                let gw = &mut grads[self.layout.embed_x_w.range()];
                for (o, &g) in drow.iter().enumerate() {
                    for (slot, r) in gw[o * xw..(o + 1) * xw].iter_mut().zip(raw) {
                        *slot += g * r;
                    }
                }
                let gb = &mut grads[self.layout.embed_x_b.range()];
                for (slot, &g) in gb.iter_mut().zip(drow) {
                    *slot += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AttentionKind, ModelConfig};
    use super::*;
    use crate::channel::{make_prompt, ChannelParams, QuantBits};
    use crate::numerics::Rng;

    fn small_prompt(k: usize, seed: u64) -> crate::channel::Prompt {
        let p = ChannelParams {
            m1: 2,
            m2: 2,
            rho: 0.95,
            sigma_w: 0.1,
            snr_db: 20.0,
            bits: QuantBits::Bits(4),
            k,
        };
        make_prompt(&Rng::new(seed), &p)
    }

    fn small_model(kind: AttentionKind, k: usize) -> Model {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 4,
            attention: kind,
            m_steps: 3,
            max_seq_len: 2 * k + 1,
            m1: 2,
            m2: 2,
            read_order: Default::default(),
            scaled_softmax: false,
        };
        Model::init(cfg, &mut Rng::new(99)).unwrap()
    }

    #[test]
    fn zero_upstream_gradients_are_zero() {
        let prompt = small_prompt(3, 1);
        for kind in [AttentionKind::Softmax, AttentionKind::Lms] {
            let model = small_model(kind, 3);
            let fwd = model.forward(&prompt).unwrap();
            let mut grads = model.grad_buffer();
            let dpreds = vec![0.0; fwd.preds.len()];
            model.backward_preds_into(&fwd, &dpreds, &mut grads);
            assert!(grads.iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn readout_bias_gradient_is_mean_error_signal() {
        let prompt = small_prompt(4, 2);
        let model = small_model(AttentionKind::Lms, 4);
        let fwd = model.forward(&prompt).unwrap();
        let grads = model.backward(&fwd);
        let pw = 2 * model.config.m1;
        let mut expect = vec![0.0; pw];
        for j in 0..fwd.n_pred {
            for o in 0..pw {
                expect[o] +=
                    2.0 * (fwd.preds[j * pw + o] - fwd.targets[j * pw + o]) / fwd.n_pred as f64;
            }
        }
        let got = &grads[model.layout.readout_b.range()];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12, "readout bias grad {g} vs {e}");
        }
    }

    #[test]
    fn quick_finite_difference_spot_check() {
        // Full per-parameter checks run in the verification suite; this is a
        // fast guard on a few random coordinates for one adaptive kind.
        let prompt = small_prompt(2, 3);
        let mut model = small_model(AttentionKind::MultiLms, 2);
        let fwd = model.forward(&prompt).unwrap();
        let grads = model.backward(&fwd);
        let h = 1e-4;
        let mut pick = Rng::new(7);
        for _ in 0..25 {
            let idx = pick.pick(model.layout.total);
            let orig = model.params[idx];
            model.params[idx] = orig + h;
            let lp = model.forward(&prompt).unwrap().loss;
            model.params[idx] = orig - h;
            let lm = model.forward(&prompt).unwrap().loss;
            model.params[idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = grads[idx].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (grads[idx] - numeric).abs() / denom <= 1e-3,
                "param {idx} ({}): {} vs {numeric}",
                model.layout.tensor_at(idx),
                grads[idx]
            );
        }
    }
}
