use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{HsacnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word embedding width `d`.
    pub embed_dim: usize,
    /// Word-level encoder width `d_w`.
    pub word_hidden: usize,
    /// Sentence-level encoder width `d_s`.
    pub sentence_hidden: usize,
    /// Prediction-layer width `d_l`.
    pub latent: usize,
    pub kernel_width: usize,
    pub heads: usize,
    pub clip: usize,
    pub dropout_embed: f64,
    pub dropout_ffn: f64,
    pub dropout_predict: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            word_hidden: 150,
            sentence_hidden: 150,
            latent: 32,
            kernel_width: 3,
            heads: 2,
            clip: 16,
            dropout_embed: 0.3,
            dropout_ffn: 0.5,
            dropout_predict: 0.5,
        }
    }
}

impl ModelConfig {
    /// Small widths used by the planted-signal experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 32,
            word_hidden: 32,
            sentence_hidden: 32,
            latent: 8,
            ..ModelConfig::default()
        }
    }

    pub fn word_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.embed_dim,
            hidden_dim: self.word_hidden,
            kernel_width: self.kernel_width,
            heads: self.heads,
            clip: self.clip,
        }
    }

    pub fn sentence_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.word_hidden,
            hidden_dim: self.sentence_hidden,
            ..self.word_encoder()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.word_encoder().validate()?;
        self.sentence_encoder().validate()?;
        if self.latent == 0 {
            return Err(HsacnError::Parameter("latent dimension must be at least 1".into()));
        }
        for (name, rate) in [
            ("embed", self.dropout_embed),
            ("ffn", self.dropout_ffn),
            ("predict", self.dropout_predict),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(HsacnError::Parameter(format!("{name} dropout {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Table sizes fixed by the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub vocab: usize,
    pub users: usize,
    pub items: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.word_encoder().head_dim(), 75);
        assert_eq!(c.sentence_encoder().input_dim, 150);
        assert_eq!(
            (c.dropout_embed, c.dropout_ffn, c.dropout_predict),
            (0.3, 0.5, 0.5)
        );
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::tiny();
        c.latent = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.dropout_predict = 1.0;
        assert!(c.validate().is_err());
    }
}
