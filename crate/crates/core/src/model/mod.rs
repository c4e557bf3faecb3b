//! The trainable in-context equalizer: a small pre-norm transformer with
//! pluggable attention (softmax or one of the adaptive recurrent kernels),
//! trained end to end with handwritten reverse-mode gradients.
//!
//! Prompts are laid out as interleaved tokens `[y_1, x_1, ..., y_K, x_K,
//! y_{K+1}]`; complex vectors are flattened by stacking real parts then
//! imaginary parts. Predictions are read at every y-token position, the
//! evaluation metric uses only the final one.

mod backward;
mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, roundtrip_precision_bound, save_checkpoint, CheckpointMeta};
pub use forward::{flatten_complex, loss_mse, unflatten_complex, Forward};
pub use train::{
    adam_step, train, train_with_sampler, write_loss_curve, AdamState, ChannelPool, TrainConfig,
    TrainResult, TrainStatus, DIVERGENCE_LIMIT,
};

use serde::{Deserialize, Serialize};

use crate::attention::{ReadOrder, RecurrentKind};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Lms,
    MultiLms,
    Lrms,
}

impl AttentionKind {
    pub fn is_adaptive(self) -> bool {
        !matches!(self, AttentionKind::Softmax)
    }

    pub(crate) fn recurrent(self) -> Option<RecurrentKind> {
        match self {
            AttentionKind::Softmax => None,
            AttentionKind::Lms => Some(RecurrentKind::Lms),
            AttentionKind::MultiLms => Some(RecurrentKind::MultiLms),
            AttentionKind::Lrms => Some(RecurrentKind::Lrms),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Lms => "lms",
            AttentionKind::MultiLms => "multi_lms",
            AttentionKind::Lrms => "lrms",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub attention: AttentionKind,
    /// Inner step count for Multi-LMS attention.
    pub m_steps: usize,
    pub max_seq_len: usize,
    /// Transmit antennas (x tokens have 2*m1 real components).
    pub m1: usize,
    /// Receive antennas (y tokens have 2*m2 real components).
    pub m2: usize,
    #[serde(default)]
    pub read_order: ReadOrder,
    /// Divide softmax logits by sqrt(head_dim). Off by default; the raw
    /// inner-product form is the reference behavior.
    #[serde(default)]
    pub scaled_softmax: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a K-length context task.
    pub fn desk_scale(attention: AttentionKind, k: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            embed_dim: 32,
            attention,
            m_steps: 4,
            max_seq_len: 2 * k + 1,
            m1: 2,
            m2: 2,
            read_order: ReadOrder::UpdateThenRead,
            scaled_softmax: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.heads < 1 || self.embed_dim < 1 {
            return Err(Error::contract("layers, heads, embed_dim must be >= 1"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.m_steps < 1 {
            return Err(Error::contract("m_steps must be >= 1"));
        }
        if self.m1 < 1 || self.m2 < 1 {
            return Err(Error::contract("antenna counts must be >= 1"));
        }
        if self.max_seq_len < 1 {
            return Err(Error::contract("max_seq_len must be >= 1"));
        }
        Ok(())
    }
}

/// Offset and shape of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    /// Present only for adaptive attention kinds.
    pub wbeta: Option<Slot>,
    pub bbeta: Option<Slot>,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc_w: Slot,
    pub fc_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
}

/// Complete named layout of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed_x_w: Slot,
    pub embed_x_b: Slot,
    pub embed_y_w: Slot,
    pub embed_y_b: Slot,
    pub pos: Slot,
    pub blocks: Vec<BlockLayout>,
    pub ln_f_g: Slot,
    pub ln_f_b: Slot,
    pub readout_w: Slot,
    pub readout_b: Slot,
    pub total: usize,
    names: Vec<(String, Slot)>,
}

struct LayoutBuilder {
    names: Vec<(String, Slot)>,
    off: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            off: self.off,
            rows,
            cols,
        };
        self.off += slot.len();
        self.names.push((name, slot));
        slot
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.heads;
        let hidden = 4 * d;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            off: 0,
        };
        let embed_x_w = b.add("embed_x.w".into(), d, 2 * cfg.m1);
        let embed_x_b = b.add("embed_x.b".into(), d, 1);
        let embed_y_w = b.add("embed_y.w".into(), d, 2 * cfg.m2);
        let embed_y_b = b.add("embed_y.b".into(), d, 1);
        let pos = b.add("pos".into(), cfg.max_seq_len, d);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("block{l}.{s}");
            let (wbeta, bbeta) = if cfg.attention.is_adaptive() {
                (
                    Some(b.add(p("attn.wbeta"), h, d)),
                    Some(b.add(p("attn.bbeta"), h, 1)),
                )
            } else {
                (None, None)
            };
            blocks.push(BlockLayout {
                ln1_g: b.add(p("ln1.g"), d, 1),
                ln1_b: b.add(p("ln1.b"), d, 1),
                wq: b.add(p("attn.wq"), d, d),
                bq: b.add(p("attn.bq"), d, 1),
                wk: b.add(p("attn.wk"), d, d),
                bk: b.add(p("attn.bk"), d, 1),
                wv: b.add(p("attn.wv"), d, d),
                bv: b.add(p("attn.bv"), d, 1),
                wo: b.add(p("attn.wo"), d, d),
                bo: b.add(p("attn.bo"), d, 1),
                wbeta,
                bbeta,
                ln2_g: b.add(p("ln2.g"), d, 1),
                ln2_b: b.add(p("ln2.b"), d, 1),
                fc_w: b.add(p("mlp.fc_w"), hidden, d),
                fc_b: b.add(p("mlp.fc_b"), hidden, 1),
                proj_w: b.add(p("mlp.proj_w"), d, hidden),
                proj_b: b.add(p("mlp.proj_b"), d, 1),
            });
        }
        let ln_f_g = b.add("ln_f.g".into(), d, 1);
        let ln_f_b = b.add("ln_f.b".into(), d, 1);
        let readout_w = b.add("readout.w".into(), 2 * cfg.m1, d);
        let readout_b = b.add("readout.b".into(), 2 * cfg.m1, 1);
        ParamLayout {
            embed_x_w,
            embed_x_b,
            embed_y_w,
            embed_y_b,
            pos,
            blocks,
            ln_f_g,
            ln_f_b,
            readout_w,
            readout_b,
            total: b.off,
            names: b.names,
        }
    }

    /// All tensors in storage order.
    pub fn named_slots(&self) -> &[(String, Slot)] {
        &self.names
    }

    /// Name of the tensor containing flat index `idx`.
    pub fn tensor_at(&self, idx: usize) -> &str {
        self.names
            .iter()
            .find(|(_, s)| s.range().contains(&idx))
            .map(|(n, _)| n.as_str())
            .unwrap_or("<unknown>")
    }
}

/// A transformer equalizer: configuration, parameter layout, and the flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Initializes with small Gaussian weights (residual output projections
    /// scaled down by sqrt(2 * layers)), unit norm gains, zero biases.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let base_std = 0.02;
        let resid_std = base_std / (2.0 * config.layers as f64).sqrt();

        let fill_normal = |params: &mut Vec<f64>, slot: Slot, std: f64, rng: &mut Rng| {
            for v in &mut params[slot.range()] {
                *v = std * rng.normal();
            }
        };
        let fill_const = |params: &mut Vec<f64>, slot: Slot, c: f64| {
            for v in &mut params[slot.range()] {
                *v = c;
            }
        };

        fill_normal(&mut params, layout.embed_x_w, base_std, rng);
        fill_normal(&mut params, layout.embed_y_w, base_std, rng);
        fill_normal(&mut params, layout.pos, base_std, rng);
        for blk in &layout.blocks {
            fill_const(&mut params, blk.ln1_g, 1.0);
            fill_const(&mut params, blk.ln2_g, 1.0);
            fill_normal(&mut params, blk.wq, base_std, rng);
            fill_normal(&mut params, blk.wk, base_std, rng);
            fill_normal(&mut params, blk.wv, base_std, rng);
            fill_normal(&mut params, blk.wo, resid_std, rng);
            if let Some(wbeta) = blk.wbeta {
                fill_normal(&mut params, wbeta, base_std, rng);
            }
            fill_normal(&mut params, blk.fc_w, base_std, rng);
            fill_normal(&mut params, blk.proj_w, resid_std, rng);
        }
        fill_const(&mut params, layout.ln_f_g, 1.0);
        fill_normal(&mut params, layout.readout_w, base_std, rng);

        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn slice(&self, slot: Slot) -> &[f64] {
        &self.params[slot.range()]
    }

    /// Fresh zeroed gradient buffer matching the parameter vector.
    pub fn grad_buffer(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    /// Token count for a context of length k.
    pub fn token_count(k: usize) -> usize {
        2 * k + 1
    }
}
