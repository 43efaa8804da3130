use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder-decoder model.
///
/// `d_local_in` and `d_global_in` default to the widths of the region-query
/// features (64) and the whole-image embedding (512) the model is built to
/// consume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_text_len: usize,
    pub n_local_features: usize,
    pub d_local_in: usize,
    pub d_global_in: usize,
    pub adapter_reduction: usize,
    pub dropout: f64,
    /// Insert adapters in the decoder as well as the encoder.
    pub decoder_adapters: bool,
    /// Give the masked-token objective its own output head instead of reusing
    /// the decoder output projection.
    pub separate_vmlm_head: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 128,
            max_text_len: 32,
            n_local_features: 4,
            d_local_in: 64,
            d_global_in: 512,
            adapter_reduction: 8,
            dropout: 0.0,
            decoder_adapters: true,
            separate_vmlm_head: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapter_reduction == 0 || self.d_model % self.adapter_reduction != 0 {
            return fail(format!(
                "adapter_reduction {} must divide d_model {}",
                self.adapter_reduction, self.d_model
            ));
        }
        if self.vocab_size <= crate::data::RESERVED_TOKENS {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.d_ffn == 0 || self.max_text_len == 0 || self.d_local_in == 0 || self.d_global_in == 0
        {
            return fail("d_ffn, max_text_len, d_local_in and d_global_in must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn bottleneck(&self) -> usize {
        self.d_model / self.adapter_reduction
    }
}
