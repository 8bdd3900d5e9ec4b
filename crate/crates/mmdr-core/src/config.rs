//! Single JSON configuration with sections {model, fusion, encoders, data,
//! train, eval}; every default is overridable from a partial file.

use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::lm::decode::DecodeCfg;
use crate::lm::decoder::DecoderCfg;
use crate::lm::lora::LoraTarget;
use crate::lm::parse::ParseCfg;
use crate::video::CueDims;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub fusion: FusionSection,
    pub encoders: EncoderSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ff_mult: usize,
    /// Optional template override files keyed by scenario tag (I, Q, S).
    pub template_files: BTreeMap<String, PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_llm: 64,
            layers: 2,
            heads: 4,
            max_len: 256,
            ff_mult: 4,
            template_files: BTreeMap::new(),
        }
    }
}

impl ModelSection {
    pub fn decoder_cfg(&self) -> DecoderCfg {
        DecoderCfg {
            d_llm: self.d_llm,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            ff_mult: self.ff_mult,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub n_f: usize,
    pub d_f: usize,
    pub heads: usize,
    pub concat_heads: bool,
    pub merge_width: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            n_f: 4,
            d_f: 32,
            heads: 4,
            concat_heads: false,
            merge_width: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub clusters: usize,
    pub d_cue: usize,
    pub conv_width: usize,
    pub cue_dims: CueDims,
    pub share_cross_kv: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            n_mels: 40,
            win_ms: 25.0,
            hop_ms: 10.0,
            clusters: 8,
            d_cue: 32,
            conv_width: 3,
            cue_dims: CueDims::default(),
            share_cross_kv: false,
        }
    }
}

impl EncoderSection {
    pub fn mel_cfg(&self) -> MelConfig {
        MelConfig {
            n_mels: self.n_mels,
            win_ms: self.win_ms,
            hop_ms: self.hop_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long samples are cut into windows of this many seconds.
    pub window_s: f64,
    /// Trailing remainders shorter than this are dropped.
    pub min_remainder_s: f64,
    pub target_fps: f64,
    pub frame_decimation: usize,
    pub audio_rate_hz: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            window_s: 180.0,
            min_remainder_s: 10.0,
            target_fps: 30.0,
            frame_decimation: 6,
            audio_rate_hz: 16000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Stop early once train accuracy reaches this level.
    pub early_stop_acc: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lr: 1e-4,
            epochs: 100,
            batch: 4,
            early_stop_acc: 0.98,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
    pub lr: f64,
    pub warmup_frac: f64,
    pub max_steps: usize,
    pub batch: usize,
    /// Stop once full-train answer accuracy reaches this level...
    pub target_train_acc: f64,
    /// ...and the recent mean batch loss is this sharp. Sampled decoding
    /// needs a peaked answer distribution, not just a correct argmax.
    pub target_train_loss: f64,
    pub eval_every: usize,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection {
            rank: 4,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O],
            lr: 3e-3,
            warmup_frac: 0.05,
            max_steps: 2000,
            batch: 8,
            target_train_acc: 0.95,
            target_train_loss: 0.05,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: PretrainSection,
    pub lora: LoraSection,
    /// Adapter-stage freeze axes; base decoder weights always stay frozen
    /// unless `train_decoder` is set.
    pub train_shared_w: bool,
    pub train_adapters: bool,
    pub train_encoders: bool,
    pub train_fusion_core: bool,
    pub train_decoder: bool,
    /// Train encoders jointly with the adapter stage instead of requiring a
    /// pretrained encoder checkpoint.
    pub joint: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain: PretrainSection::default(),
            lora: LoraSection::default(),
            train_shared_w: true,
            train_adapters: true,
            train_encoders: false,
            train_fusion_core: false,
            train_decoder: false,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub top_p: f64,
    pub temperature: f64,
    pub greedy: bool,
    pub max_new_tokens: usize,
    pub parse: ParseCfg,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            top_p: 0.9,
            temperature: 1.0,
            greedy: false,
            max_new_tokens: 4,
            parse: ParseCfg::default(),
        }
    }
}

impl EvalSection {
    pub fn decode_cfg(&self) -> DecodeCfg {
        DecodeCfg {
            top_p: self.top_p,
            temperature: self.temperature,
            greedy: self.greedy,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Full-scale preset mirroring the reference training regime: rank-64
    /// adapters at 1e-5 peak learning rate for 400k steps, 1e-4 encoder
    /// pretraining. Not runnable at desk scale; kept for configuration parity.
    pub fn full_scale() -> Config {
        let mut cfg = Config::default();
        cfg.train.lora.rank = 64;
        cfg.train.lora.alpha = 16.0;
        cfg.train.lora.dropout = 0.05;
        cfg.train.lora.lr = 1e-5;
        cfg.train.lora.max_steps = 400_000;
        cfg.train.lora.batch = 8;
        cfg.train.pretrain.lr = 1e-4;
        cfg.train.pretrain.epochs = 100;
        cfg.train.pretrain.batch = 4;
        cfg
    }

    /// Canonical key-sorted JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON; checkpoints carry it and loaders
    /// reject mismatches.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_stably() {
        let cfg = Config::default();
        let json = cfg.canonical_json();
        let back: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"fusion": {"n_f": 2}}"#).unwrap();
        assert_eq!(cfg.fusion.n_f, 2);
        assert_eq!(cfg.fusion.d_f, 32);
        assert_eq!(cfg.model.d_llm, 64);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let r: std::result::Result<Config, _> = serde_json::from_str(r#"{"fusio": {}}"#);
        assert!(r.is_err());
    }

    #[test]
    fn full_scale_preset_changes_adapter_rank() {
        let cfg = Config::full_scale();
        assert_eq!(cfg.train.lora.rank, 64);
        assert_eq!(cfg.train.lora.lr, 1e-5);
        assert_eq!(cfg.train.pretrain.lr, 1e-4);
    }
}
