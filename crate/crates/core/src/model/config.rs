use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::byte_codec::Vocab;
use crate::error::{Error, Result};
use crate::msc::KSeries;

fn default_max_positions() -> usize {
    1024
}

fn default_beam() -> usize {
    5
}

fn default_length_penalty() -> f64 {
    1.0
}

/// Architecture of the encoder-decoder. An empty `msc_layers` gives the
/// plain transformer baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub k_series: KSeries,
    /// Encoder layers that contextualize their input before self-attention.
    pub msc_layers: Vec<usize>,
    /// Admit odd scopes above 7 in `k_series`.
    #[serde(default)]
    pub allow_large_scopes: bool,
    #[serde(default)]
    pub vocab: Vocab,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_length_penalty")]
    pub length_penalty: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 6+6 layers, 8 heads, d=512, FFN 2048, MSC on the first encoder layer.
    pub fn full() -> Self {
        ModelConfig {
            d_model: 512,
            ffn_dim: 2048,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            dropout: 0.1,
            k_series: KSeries::new(vec![0, 0, 3, 3, 5, 5, 7, 7]).expect("valid"),
            msc_layers: vec![0],
            allow_large_scopes: false,
            vocab: Vocab::default(),
            max_positions: default_max_positions(),
            beam: default_beam(),
            length_penalty: default_length_penalty(),
        }
    }

    /// Small model that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            ffn_dim: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            k_series: KSeries::new(vec![0, 0, 1, 1, 3, 5, 5, 7]).expect("valid"),
            msc_layers: vec![0],
            allow_large_scopes: false,
            vocab: Vocab::default(),
            max_positions: 256,
            beam: default_beam(),
            length_penalty: default_length_penalty(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "full_baseline" => Ok(Self::full().baseline()),
            "desk_baseline" => Ok(Self::desk().baseline()),
            _ => Err(Error::Config(format!(
                "unknown model preset {name:?}; expected full, desk, full_baseline or desk_baseline"
            ))),
        }
    }

    /// Same architecture with MSC removed.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            msc_layers: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.k_series.validate(self.allow_large_scopes)?;
        if self.d_model == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "d_model, ffn_dim and heads must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config(
                "need at least one encoder and one decoder layer".into(),
            ));
        }
        if !self.msc_layers.is_empty() && !self.d_model.is_multiple_of(self.k_series.n()) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by the {} groups of the k-series",
                self.d_model,
                self.k_series.n()
            )));
        }
        if let Some(&bad) = self.msc_layers.iter().find(|&&l| l >= self.enc_layers) {
            return Err(Error::Config(format!(
                "msc layer {bad} outside encoder layers 0..{}",
                self.enc_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.max_positions == 0 || self.beam == 0 {
            return Err(Error::Config(
                "max_positions and beam must be positive".into(),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            heads: 7,
            ..ModelConfig::full()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn msc_layer_out_of_range_rejected() {
        let cfg = ModelConfig {
            msc_layers: vec![6],
            ..ModelConfig::full()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn large_scopes_need_override() {
        let mut cfg: ModelConfig = serde_json::from_str(
            &serde_json::to_string(&ModelConfig::desk())
                .unwrap()
                .replace("0,0,1,1,3,5,5,7", "0,0,1,1,3,5,9,9"),
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        cfg.allow_large_scopes = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let cfg = ModelConfig::desk();
        let back: ModelConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.baseline().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
