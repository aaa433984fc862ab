use alloc::format;

use crate::error::{Error, Result};

/// Reserved token ids shared by the vocabulary and the decoder.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_SPECIAL: usize = 4;

/// Shape of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Visual tokens (sampled frames) per video.
    pub max_visual_tokens: usize,
    /// Longest token sequence, including begin and end markers.
    pub max_text_len: usize,
    pub feature_dim: usize,
    pub ln_eps: f64,
    /// When false the visual features are ignored and the encoder sees only
    /// its positional table (text-only baseline).
    pub use_visual_features: bool,
}

impl ModelConfig {
    /// Desk-scale default: d=64, 4 heads, 2+2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            vocab_size,
            max_visual_tokens: 8,
            max_text_len: 32,
            feature_dim: 2048,
            ln_eps: 1e-5,
            use_visual_features: true,
        }
    }

    /// GPT-2-small-sized preset (d=768, 12 heads, 12+12 layers).
    pub fn full_structure(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_encoder_layers: 12,
            n_decoder_layers: 12,
            d_ff: 3072,
            vocab_size,
            max_visual_tokens: 8,
            max_text_len: 64,
            feature_dim: 2048,
            ln_eps: 1e-5,
            use_visual_features: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_visual_tokens", self.max_visual_tokens),
            ("max_text_len", self.max_text_len),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < NUM_SPECIAL {
            return Err(Error::Config(format!("vocab_size {} is below {NUM_SPECIAL}", self.vocab_size)));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must hold at least begin and end".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// ```text
    /// D·d + N·d + V·d + T·d                       embeddings and positions
    /// + L_enc · (4d² + 4d + 2·2d + 2·d·f + f + d)    attention, 2 norms, feedforward
    /// + L_dec · (8d² + 8d + 3·2d + 2·d·f + f + d)    self + cross attention, 3 norms, feedforward
    /// + 2d + d·V + V                              final norm and output head
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let ff = 2 * d * f + f + d;
        let attn = 4 * d * d + 4 * d;
        self.feature_dim * d
            + self.max_visual_tokens * d
            + v * d
            + self.max_text_len * d
            + self.n_encoder_layers * (attn + 2 * 2 * d + ff)
            + self.n_decoder_layers * (2 * attn + 3 * 2 * d + ff)
            + 2 * d
            + d * v
            + v
    }
}
