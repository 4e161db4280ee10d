//! A small wav2vec-2.0-style acoustic model.
//!
//! Raw 16 kHz audio passes through a strided convolutional encoder, a
//! projection, span masking and a pre-norm transformer. Self-supervised
//! training contrasts masked context vectors against Gumbel-softmax product
//! quantized targets; fine-tuning adds a CTC head.

mod network;
mod params;
pub mod tape;

pub use network::{
    apply_masking, contrastive_loss, encode_features, forward_ctc, frame_count, pretrain_loss, quantize, sample_mask,
    sinusoidal_positions, CtcStep, Graph, ModelError, PretrainNoise, PretrainStepOutput, Quantized,
};
pub use params::{ModelParameters, Params, ParamsError};

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// One convolution of the feature encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: Vec<ConvLayer>,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_transformer_layers: usize,
    pub quantizer_groups: usize,
    pub entries_per_group: usize,
    pub codevector_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub num_negatives: usize,
    pub temperature: f64,
    pub diversity_weight: f64,
    /// Output width of the CTC head including blank; `None` before fine-tuning.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 20 ms frames from a 325-sample receptive field.
    fn default() -> Self {
        Self {
            encoder_layers: vec![
                ConvLayer { channels: 16, kernel: 10, stride: 5 },
                ConvLayer { channels: 32, kernel: 8, stride: 8 },
                ConvLayer { channels: 64, kernel: 8, stride: 8 },
            ],
            model_dim: 64,
            ffn_dim: 128,
            num_heads: 4,
            num_transformer_layers: 2,
            quantizer_groups: 2,
            entries_per_group: 16,
            codevector_dim: 32,
            mask_prob: 0.15,
            mask_span: 4,
            num_negatives: 10,
            temperature: 0.1,
            diversity_weight: 0.1,
            vocab_size: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &'static str| Err(ModelError::Config(what));
        if self.encoder_layers.is_empty() {
            return bad("encoder needs at least one layer");
        }
        if self.encoder_layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return bad("encoder layers need positive channels, kernel and stride");
        }
        if self.model_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return bad("model_dim, ffn_dim and num_heads must be positive");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if self.quantizer_groups == 0 || self.entries_per_group == 0 {
            return bad("quantizer needs positive groups and entries");
        }
        if self.codevector_dim == 0 || self.codevector_dim % self.quantizer_groups != 0 {
            return bad("codevector_dim must be a positive multiple of quantizer_groups");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must lie in (0, 1)");
        }
        if self.mask_span == 0 {
            return bad("mask_span must be at least 1");
        }
        if !(self.temperature > 0.0) || !(self.diversity_weight >= 0.0) {
            return bad("temperature must be positive and diversity_weight nonnegative");
        }
        if self.vocab_size == Some(0) {
            return bad("vocab_size must be positive");
        }
        Ok(())
    }

    /// Samples spanned by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for l in &self.encoder_layers {
            field += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        field
    }

    /// Samples between consecutive output frames.
    pub fn total_stride(&self) -> usize {
        self.encoder_layers.iter().map(|l| l.stride).product()
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_layers.last().map_or(0, |l| l.channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_stride(), 320);
        assert_eq!(c.receptive_field(), 325);
        assert_eq!(frame_count(&c, 325), Some(1));
        assert_eq!(frame_count(&c, 324), None);
        assert_eq!(frame_count(&c, 16_000), Some(49));
    }

    #[test]
    fn invariants() {
        let ok = ModelConfig::default();
        assert!(ModelConfig { num_heads: 5, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { mask_prob: 1.0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { mask_span: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { codevector_dim: 31, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { temperature: 0.0, ..ok }.validate().is_err());
    }
}
