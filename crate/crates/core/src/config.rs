use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CatError, Result};

/// Which structural component is removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No history-guided branch; only the utterance-filtered document.
    WoLeft,
    /// No relevance gate; plain concatenation of both branches.
    #[serde(rename = "wo_56")]
    Wo56,
    /// The history branch is not guided by the last utterance.
    #[serde(rename = "wo_G", alias = "wo_g")]
    WoG,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "wo_left" => Ok(Ablation::WoLeft),
            "wo_56" => Ok(Ablation::Wo56),
            "wo_G" | "wo_g" => Ok(Ablation::WoG),
            other => Err(format!("unknown ablation {other:?} (none|wo_left|wo_56|wo_G)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Two-pass deliberation decoder fed by the gated concatenation.
    #[default]
    Dd,
    /// Merge-attention first pass feeding the deliberation second pass.
    Edd,
}

impl std::str::FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dd" => Ok(DecoderKind::Dd),
            "edd" => Ok(DecoderKind::Edd),
            other => Err(format!("unknown decoder {other:?} (dd|edd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<AdamSettings> for cat_tensor::AdamConfig {
    fn from(a: AdamSettings) -> Self {
        cat_tensor::AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub filter: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub decoder: DecoderKind,
    pub ablation: Ablation,
    pub positional_encoding: bool,
    pub history_rounds: usize,
    pub remove_greetings: usize,
    pub max_doc_len: usize,
    pub max_utt_len: usize,
    pub beam_size: usize,
    pub length_normalize: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub checkpoint_every: usize,
    pub adam: AdamSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 304,
            heads: 8,
            layers: 3,
            filter: 2048,
            dropout: 0.1,
            label_smoothing: 0.0,
            decoder: DecoderKind::Dd,
            ablation: Ablation::None,
            positional_encoding: true,
            history_rounds: 2,
            remove_greetings: 2,
            max_doc_len: 800,
            max_utt_len: 40,
            beam_size: 5,
            length_normalize: false,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            min_freq: 2,
            checkpoint_every: 5,
            adam: AdamSettings::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for the synthetic experiments.
    pub fn tiny() -> Self {
        Self {
            hidden: 64,
            heads: 2,
            layers: 2,
            filter: 128,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("filter", self.filter),
            ("max_doc_len", self.max_doc_len),
            ("max_utt_len", self.max_utt_len),
            ("beam_size", self.beam_size),
            ("batch_size", self.batch_size),
            ("min_freq", self.min_freq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CatError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(CatError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CatError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CatError::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.adam.lr <= 0.0 || self.adam.eps <= 0.0 {
            return Err(CatError::Config("adam lr and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(CatError::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.decoder == DecoderKind::Edd && self.ablation == Ablation::WoLeft {
            return Err(CatError::Config(
                "decoder edd needs the history branch; it cannot be combined with ablation wo_left".into(),
            ));
        }
        Ok(())
    }

    /// Loads a TOML or JSON file (chosen by extension; TOML otherwise).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
        let cfg: ModelConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_setup() {
        let c = ModelConfig::default();
        assert_eq!((c.hidden, c.heads, c.layers, c.filter), (304, 8, 3, 2048));
        assert_eq!((c.max_doc_len, c.max_utt_len, c.beam_size), (800, 40, 5));
        assert_eq!(c.history_rounds, 2);
        assert_eq!(c.adam, AdamSettings::default());
        c.validate().unwrap();
    }

    #[test]
    fn rejects_edd_without_left_branch() {
        let c = ModelConfig {
            decoder: DecoderKind::Edd,
            ablation: Ablation::WoLeft,
            ..ModelConfig::tiny()
        };
        assert!(matches!(c.validate(), Err(CatError::Config(_))));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            hidden: 10,
            heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn parses_ablation_keys() {
        for (s, a) in [
            ("none", Ablation::None),
            ("wo_left", Ablation::WoLeft),
            ("wo_56", Ablation::Wo56),
            ("wo_G", Ablation::WoG),
        ] {
            assert_eq!(s.parse::<Ablation>().unwrap(), a);
        }
        let c: ModelConfig = toml::from_str("ablation = \"wo_56\"\nhidden = 64\nheads = 4").unwrap();
        assert_eq!(c.ablation, Ablation::Wo56);
        assert_eq!(c.layers, 3);
        let c: ModelConfig = serde_json::from_str(r#"{"ablation":"wo_G","decoder":"edd"}"#).unwrap();
        assert_eq!((c.ablation, c.decoder), (Ablation::WoG, DecoderKind::Edd));
    }
}
