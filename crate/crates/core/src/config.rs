//! Run configuration: a flat TOML file whose keys can be overridden from
//! the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::pretrain::{MaskingConfig, PretrainConfig, PretrainMode};
use crate::rng::hash_str;
use crate::sgnn::{AttentionVariant, SGnnConfig};
use crate::synth::SynthConfig;
use crate::tasks::FinetuneConfig;
use crate::text::TextEncoderConfig;
use crate::transe::TransEConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub kg: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,

    pub d_w: usize,
    pub d_k: usize,
    pub d_a: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub aggregators: usize,
    pub entity_heads: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub max_neighbors_per_hop: Option<usize>,
    pub mode: PretrainMode,
    pub attention: AttentionVariant,
    pub scaled_logits: bool,
    pub center_residual: bool,

    pub transe_epochs: usize,
    pub transe_lr: f64,
    pub transe_margin: f64,
    pub transe_batch_size: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub mlm_rate: f64,
    pub dea_mask_rate: f64,
    pub dea_replace_rate: f64,
    pub dea_negatives: usize,
    pub drop_masked_mentions: bool,

    pub finetune_steps: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f64,

    pub threshold: f64,
    pub synth_sentences: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MaskingConfig::default();
        let p = PretrainConfig::default();
        let f = FinetuneConfig::default();
        Self {
            seed: 0,
            kg: None,
            corpus: None,
            vocab: None,
            d_w: 128,
            d_k: 32,
            d_a: 32,
            layers: 4,
            heads: 4,
            ffn_hidden: 512,
            max_seq_len: 64,
            aggregators: 2,
            entity_heads: 1,
            k: 2,
            max_neighbors_per_hop: Some(64),
            mode: PretrainMode::RobertaStyle,
            attention: AttentionVariant::Semantic,
            scaled_logits: false,
            center_residual: false,
            transe_epochs: 200,
            transe_lr: 0.01,
            transe_margin: 1.0,
            transe_batch_size: 32,
            pretrain_steps: p.steps,
            pretrain_batch_size: p.batch_size,
            pretrain_lr: p.lr,
            warmup_steps: p.warmup_steps,
            clip_norm: p.clip_norm,
            mlm_rate: m.mlm_rate,
            dea_mask_rate: m.dea_mask_rate,
            dea_replace_rate: m.dea_replace_rate,
            dea_negatives: m.dea_negatives,
            drop_masked_mentions: m.drop_masked_mentions,
            finetune_steps: f.steps,
            finetune_batch_size: f.batch_size,
            finetune_lr: f.lr,
            threshold: 0.3,
            synth_sentences: SynthConfig::default().sentences,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` overrides using the TOML value syntax; bare
    /// strings need no quotes.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let parsed = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let text = toml::to_string(&table).expect("table serialises");
        Self::from_toml(&text, &format!("--{key}"))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_w", self.d_w),
            ("d_k", self.d_k),
            ("d_a", self.d_a),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("max_seq_len", self.max_seq_len),
            ("aggregators", self.aggregators),
            ("entity_heads", self.entity_heads),
            ("K", self.k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_w.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_w {} not divisible by heads {}", self.d_w, self.heads)));
        }
        if !self.d_k.is_multiple_of(self.entity_heads) {
            return Err(Error::Config(format!(
                "d_k {} not divisible by entity_heads {}",
                self.d_k, self.entity_heads
            )));
        }
        Ok(())
    }

    /// Hash of the canonical TOML form, excluding input paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.kg = None;
        c.corpus = None;
        c.vocab = None;
        hash_str(&c.to_toml())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let text = TextEncoderConfig {
            vocab_size,
            d_w: self.d_w,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            max_seq_len: self.max_seq_len,
        };
        let sgnn = SGnnConfig {
            d_k: self.d_k,
            d_w: self.d_w,
            d_a: self.d_a,
            layers: self.k,
            attention: self.attention,
            scaled_logits: self.scaled_logits,
            center_residual: self.center_residual,
        };
        let fusion = FusionConfig {
            d_w: self.d_w,
            d_k: self.d_k,
            d_h: self.d_w,
            token_heads: self.heads,
            entity_heads: self.entity_heads,
            aggregators: self.aggregators,
        };
        ModelConfig {
            text,
            sgnn,
            fusion,
            k: self.k,
            max_neighbors_per_hop: self.max_neighbors_per_hop,
        }
    }

    pub fn transe_config(&self) -> TransEConfig {
        TransEConfig {
            dim: self.d_k,
            margin: self.transe_margin,
            lr: self.transe_lr,
            epochs: self.transe_epochs,
            neg_per_pos: 1,
            batch_size: self.transe_batch_size,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            mode: self.mode,
            masking: MaskingConfig {
                mlm_rate: self.mlm_rate,
                dea_mask_rate: self.dea_mask_rate,
                dea_replace_rate: self.dea_replace_rate,
                dea_negatives: self.dea_negatives,
                drop_masked_mentions: self.drop_masked_mentions,
                ..MaskingConfig::default()
            },
            lr: self.pretrain_lr,
            warmup_steps: self.warmup_steps,
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            clip_norm: self.clip_norm,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune_lr,
            steps: self.finetune_steps,
            batch_size: self.finetune_batch_size,
            clip_norm: self.clip_norm,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            sentences: self.synth_sentences,
            ..SynthConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml(), "x").unwrap();
        assert_eq!(back, c);
        let o = c.with_override("K", "1").unwrap().with_override("mode", "bert_style").unwrap();
        assert_eq!(o.k, 1);
        assert_eq!(o.mode, PretrainMode::BertStyle);
        assert_ne!(o.hash(), c.hash());
        assert!(c.with_override("K", "0").is_err());
        assert!(RunConfig::from_toml("nope = 1", "x").is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml("seed = 5\nd_w = 16\nheads = 2", "x").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.layers, RunConfig::default().layers);
    }
}
