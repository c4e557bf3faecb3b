//! Plain-text (TOML) run configuration for the CLI. Every key is optional;
//! omitted keys fall back to the desk-scale defaults.
//!
//! ```toml
//! seed = 2024
//!
//! [channel]           # evaluation / base channel parameters
//! m1 = 2
//! m2 = 2
//! rho = 0.99
//! sigma_w = 0.1
//! snr_db = 30.0       # `inf` selects the noiseless sentinel
//! bits = 6            # 1..16 or "none"
//! k = 20
//!
//! [model]
//! layers = 2
//! heads = 4
//! embed_dim = 32
//! attention = "lms"   # softmax | lms | multi_lms | lrms
//! m_steps = 4
//! max_seq_len = 41    # default 2k+1
//! read_order = "update_then_read"   # or "read_then_update"
//! scaled_softmax = false
//!
//! [train]
//! steps = 5000
//! batch_size = 64
//! learning_rate = 1e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! pool_size = 2000
//! rho_min = 0.9
//! rho_max = 1.0
//! snr_min = 0.0
//! snr_max = 30.0
//! bits_min = 1
//! bits_max = 6
//! checkpoint_every = 0
//!
//! [sweep]
//! axis = "snr_db"     # rho | snr_db | bits | m_steps
//! grid = [0.0, 10.0, 20.0, 30.0]
//! n_eval = 200
//! methods = ["lmmse", "zero", "model:out/checkpoint.ckpt"]
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::attention::ReadOrder;
use crate::channel::{default_eval_params, ChannelParams, QuantBits};
use crate::error::{Error, Result};
use crate::harness::{Method, SweepAxis, SweepSpec};
use crate::model::{AttentionKind, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub n_eval: Option<usize>,
    pub channel: ChannelSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub m1: Option<usize>,
    pub m2: Option<usize>,
    pub rho: Option<f64>,
    pub sigma_w: Option<f64>,
    pub snr_db: Option<f64>,
    pub bits: Option<QuantBits>,
    pub k: Option<usize>,
}

impl ChannelSection {
    pub fn resolve(&self) -> Result<ChannelParams> {
        let d = default_eval_params();
        let p = ChannelParams {
            m1: self.m1.unwrap_or(d.m1),
            m2: self.m2.unwrap_or(d.m2),
            rho: self.rho.unwrap_or(d.rho),
            sigma_w: self.sigma_w.unwrap_or(d.sigma_w),
            snr_db: self.snr_db.unwrap_or(d.snr_db),
            bits: self.bits.unwrap_or(d.bits),
            k: self.k.unwrap_or(d.k),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub embed_dim: Option<usize>,
    pub attention: Option<AttentionKind>,
    pub m_steps: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub read_order: Option<ReadOrder>,
    pub scaled_softmax: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self, channel: &ChannelParams) -> Result<ModelConfig> {
        let d = ModelConfig::desk_scale(
            self.attention.unwrap_or(AttentionKind::Lms),
            channel.k,
        );
        let cfg = ModelConfig {
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            attention: d.attention,
            m_steps: self.m_steps.unwrap_or(d.m_steps),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            m1: channel.m1,
            m2: channel.m2,
            read_order: self.read_order.unwrap_or_default(),
            scaled_softmax: self.scaled_softmax.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub pool_size: Option<usize>,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub snr_min: Option<f64>,
    pub snr_max: Option<f64>,
    pub bits_min: Option<u8>,
    pub bits_max: Option<u8>,
    pub checkpoint_every: Option<usize>,
}

impl TrainSection {
    pub fn resolve(&self, seed: u64, base: ChannelParams) -> Result<TrainConfig> {
        let d = TrainConfig::desk_scale(seed);
        let cfg = TrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            eps: self.eps.unwrap_or(d.eps),
            seed,
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            base,
            rho_range: (
                self.rho_min.unwrap_or(d.rho_range.0),
                self.rho_max.unwrap_or(d.rho_range.1),
            ),
            snr_range: (
                self.snr_min.unwrap_or(d.snr_range.0),
                self.snr_max.unwrap_or(d.snr_range.1),
            ),
            bits_range: (
                self.bits_min.unwrap_or(d.bits_range.0),
                self.bits_max.unwrap_or(d.bits_range.1),
            ),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub n_eval: Option<usize>,
    pub methods: Vec<String>,
}

/// Parses a method spec: `zero`, `lmmse`, or `model:<checkpoint path>`.
/// A model method is named after the checkpoint file stem.
pub fn parse_method(spec: &str) -> Result<Method> {
    match spec {
        "zero" => Ok(Method::Zero),
        "lmmse" => Ok(Method::Lmmse),
        s if s.starts_with("model:") => {
            let path = Path::new(&s[6..]);
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
                .to_string();
            Method::from_checkpoint(name, path)
        }
        other => Err(Error::Parse(format!(
            "unknown method '{other}' (use zero, lmmse, or model:<path>)"
        ))),
    }
}

impl SweepSection {
    pub fn resolve(&self, fixed: ChannelParams, seed: u64, default_n_eval: usize) -> Result<SweepSpec> {
        let methods = self
            .methods
            .iter()
            .map(|m| parse_method(m))
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != methods.len() {
            return Err(Error::contract("duplicate method names in sweep"));
        }
        Ok(SweepSpec {
            axis: SweepAxis::parse(&self.axis)?,
            grid: self.grid.clone(),
            fixed,
            n_eval: self.n_eval.unwrap_or(default_n_eval),
            seed,
            methods,
        })
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_desk_scale_defaults() {
        let cfg = RunConfig::default();
        let channel = cfg.channel.resolve().unwrap();
        assert_eq!(channel, default_eval_params());
        let model = cfg.model.resolve(&channel).unwrap();
        assert_eq!(model.embed_dim, 32);
        assert_eq!(model.attention, AttentionKind::Lms);
        let train = cfg.train.resolve(7, channel).unwrap();
        assert_eq!(train.steps, 5000);
        assert_eq!(train.seed, 7);
    }

    #[test]
    fn toml_overrides_and_sentinels_parse() {
        let text = r#"
            seed = 99
            [channel]
            rho = 0.95
            snr_db = inf
            bits = "none"
            k = 8
            [model]
            attention = "lrms"
            embed_dim = 16
            heads = 2
            [train]
            steps = 10
            batch_size = 2
            [sweep]
            axis = "bits"
            grid = [1.0, 2.0, 6.0]
            methods = ["lmmse", "zero"]
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(99));
        let channel = cfg.channel.resolve().unwrap();
        assert!(channel.snr_db.is_infinite());
        assert_eq!(channel.bits, QuantBits::None);
        assert_eq!(channel.k, 8);
        let model = cfg.model.resolve(&channel).unwrap();
        assert_eq!(model.attention, AttentionKind::Lrms);
        assert_eq!(model.max_seq_len, 17);
        let sweep = cfg
            .sweep
            .unwrap()
            .resolve(channel, 99, 200)
            .unwrap();
        assert_eq!(sweep.grid.len(), 3);
        assert_eq!(sweep.methods.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[channel]\nfrequency = 2.4\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn bad_method_spec_is_a_parse_error() {
        assert!(matches!(parse_method("dfe"), Err(Error::Parse(_))));
    }
}
