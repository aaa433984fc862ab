//! Teacher-forced forward pass of the encoder-decoder on a tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::attention::{causal_mask, key_mask, linear, multi_head_attention, AttnVars};
use super::params::{FfIdx, ModelParams, NormIdx};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vision::VisualFeatureSet;

/// Visual features padded to the configured token count.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    /// `[N×D]`, rows past the real frame count are zero.
    pub features: Tensor,
    /// `true` for real rows, `false` for padding.
    pub mask: Vec<bool>,
}

impl VisualInput {
    pub fn from_set(set: &VisualFeatureSet, params: &ModelParams) -> Result<Self> {
        Self::from_tensor(&set.to_tensor(), params)
    }

    /// Pads an `[n×D]` feature matrix with zero rows up to `N`.
    pub fn from_tensor(features: &Tensor, params: &ModelParams) -> Result<Self> {
        let cfg = params.config();
        let (rows, cols) = features.dims2()?;
        if cols != cfg.feature_dim {
            return Err(Error::Dimension {
                op: "embed_visual",
                lhs: features.shape().to_vec(),
                rhs: vec![cfg.max_visual_tokens, cfg.feature_dim],
            });
        }
        if rows > cfg.max_visual_tokens {
            return Err(Error::Shape {
                shape: features.shape().to_vec(),
                reason: format!("more than {} visual tokens", cfg.max_visual_tokens),
            });
        }
        let n = cfg.max_visual_tokens;
        let mut data = features.data().to_vec();
        data.resize(n * cols, 0.0);
        let mut mask = vec![true; rows];
        mask.resize(n, false);
        Ok(Self {
            features: Tensor::new(vec![n, cols], data)?,
            mask,
        })
    }
}

/// Model parameters recorded on one tape.
pub struct Net<'p> {
    params: &'p ModelParams,
    bound: Bound,
}

impl<'p> Net<'p> {
    /// Binds every parameter, as trainable leaves or as constants.
    pub fn bind(tape: &mut Tape, params: &'p ModelParams, trainable: bool) -> Self {
        Self {
            params,
            bound: params.store().bind(tape, trainable),
        }
    }

    /// Binds only what a decoder step reads (no visual embedding, no encoder).
    pub fn bind_decoder(tape: &mut Tape, params: &'p ModelParams) -> Self {
        let l = params.layout();
        let mut skip = vec![l.visual_proj, l.visual_pos];
        for layer in &l.encoder {
            let a = &layer.attn;
            skip.extend([layer.ln1.gain, layer.ln1.bias, layer.ln2.gain, layer.ln2.bias]);
            skip.extend([a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]);
            skip.extend([layer.ff.w1, layer.ff.b1, layer.ff.w2, layer.ff.b2]);
        }
        Self {
            params,
            bound: params.store().bind_except(tape, false, &skip),
        }
    }

    /// Wraps parameters already bound on a tape by [`crate::params::ParamStore::bind`].
    pub fn from_bound(params: &'p ModelParams, bound: Bound) -> Self {
        Self { params, bound }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    fn var(&self, i: usize) -> Var {
        self.bound.var(i)
    }

    pub(crate) fn norm(&self, tape: &mut Tape, x: Var, idx: &NormIdx) -> Result<Var> {
        let eps = self.params.config().ln_eps;
        tape.layer_norm(x, self.var(idx.gain), self.var(idx.bias), eps)
    }

    pub(crate) fn feedforward(&self, tape: &mut Tape, x: Var, idx: &FfIdx) -> Result<Var> {
        let h = linear(tape, x, self.var(idx.w1), self.var(idx.b1))?;
        let h = tape.gelu(h)?;
        linear(tape, h, self.var(idx.w2), self.var(idx.b2))
    }

    pub(crate) fn attn(&self, idx: &super::params::AttnIdx) -> AttnVars {
        AttnVars::bind(idx, &self.bound)
    }

    /// `E_v = f·W_p + P`, one row per visual token.
    pub fn embed_visual(&self, tape: &mut Tape, input: &VisualInput) -> Result<Var> {
        let cfg = self.params.config();
        let features = if cfg.use_visual_features {
            input.features.clone()
        } else {
            Tensor::zeros(input.features.shape())
        };
        let f = tape.constant(features);
        let proj = tape.matmul(f, self.var(self.params.layout().visual_proj))?;
        tape.add(proj, self.var(self.params.layout().visual_pos))
    }

    /// Pre-norm self-attention and feedforward layers over the visual tokens.
    pub fn encode(&self, tape: &mut Tape, ev: Var, visual_mask: &[bool]) -> Result<Var> {
        let cfg = self.params.config();
        let n = tape.value(ev).dims2()?.0;
        let mask = key_mask(n, visual_mask);
        let mut x = ev;
        for layer in &self.params.layout().encoder {
            let h = self.norm(tape, x, &layer.ln1)?;
            let a = multi_head_attention(tape, h, h, h, &self.attn(&layer.attn), cfg.n_heads, Some(&mask), None)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &layer.ln2)?;
            let f = self.feedforward(tape, h, &layer.ff)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Token embeddings plus text positions `start..start+len`.
    pub fn embed_text(&self, tape: &mut Tape, ids: &[u32], start: usize) -> Result<Var> {
        let cfg = self.params.config();
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= cfg.vocab_size {
                return Err(Error::UnknownTokenId(id));
            }
            rows.push(id as usize);
        }
        let end = start + ids.len();
        if ids.is_empty() || end > cfg.max_text_len {
            return Err(Error::SequenceTooLong {
                position: end.saturating_sub(1),
                max: cfg.max_text_len,
            });
        }
        let layout = self.params.layout();
        let tok = tape.gather_rows(self.var(layout.token_emb), &rows)?;
        let positions: Vec<usize> = (start..end).collect();
        let pos = tape.gather_rows(self.var(layout.text_pos), &positions)?;
        tape.add(tok, pos)
    }

    /// Final norm and vocabulary head: `h·W_o + b_o`.
    pub fn head(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let layout = self.params.layout();
        let h = self.norm(tape, x, &layout.final_norm)?;
        linear(tape, h, self.var(layout.out_weight), self.var(layout.out_bias))
    }

    /// Teacher-forced decoder over the whole `ids` prefix: logits `[L×V]`.
    pub fn decode(&self, tape: &mut Tape, memory: Var, visual_mask: &[bool], ids: &[u32]) -> Result<Var> {
        let cfg = self.params.config();
        let mut x = self.embed_text(tape, ids, 0)?;
        let len = ids.len();
        let causal = causal_mask(len);
        let cross = key_mask(len, visual_mask);
        for layer in &self.params.layout().decoder {
            let h = self.norm(tape, x, &layer.ln1)?;
            let a = multi_head_attention(tape, h, h, h, &self.attn(&layer.self_attn), cfg.n_heads, Some(&causal), None)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &layer.ln2)?;
            let c = multi_head_attention(
                tape,
                h,
                memory,
                memory,
                &self.attn(&layer.cross_attn),
                cfg.n_heads,
                Some(&cross),
                None,
            )?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, x, &layer.ln3)?;
            let f = self.feedforward(tape, h, &layer.ff)?;
            x = tape.add(x, f)?;
        }
        self.head(tape, x)
    }

    /// Visual embedding, encoder and teacher-forced decoder in one go.
    pub fn forward(&self, tape: &mut Tape, input: &VisualInput, ids: &[u32]) -> Result<Var> {
        let ev = self.embed_visual(tape, input)?;
        let memory = self.encode(tape, ev, &input.mask)?;
        self.decode(tape, memory, &input.mask, ids)
    }
}

/// `E_v` for a feature set, padded rows included.
pub fn embed_visual(features: &VisualFeatureSet, params: &ModelParams) -> Result<Tensor> {
    let input = VisualInput::from_set(features, params)?;
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let ev = net.embed_visual(&mut tape, &input)?;
    Ok(tape.value(ev).clone())
}

/// Encoder memory for an embedded input. `mask` defaults to all rows real.
pub fn encode(ev: &Tensor, params: &ModelParams, mask: Option<&[bool]>) -> Result<Tensor> {
    let rows = ev.dims2()?.0;
    let all = vec![true; rows];
    let mask = mask.unwrap_or(&all);
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let x = tape.constant(ev.clone());
    let memory = net.encode(&mut tape, x, mask)?;
    Ok(tape.value(memory).clone())
}

/// Teacher-forced logits `[L×V]` for a caption prefix.
pub fn forward_logits(params: &ModelParams, input: &VisualInput, ids: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let logits = net.forward(&mut tape, input, ids)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn tiny(d: usize, heads: usize, enc: usize, dec: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_heads: heads,
            n_encoder_layers: enc,
            n_decoder_layers: dec,
            d_ff: 4 * d,
            vocab_size: 6,
            max_visual_tokens: 2,
            max_text_len: 8,
            feature_dim,
            ln_eps: 1e-5,
            use_visual_features: true,
        }
    }

    fn set(rows: usize, cols: usize, values: &[f32]) -> VisualFeatureSet {
        VisualFeatureSet::new("v", cols, values.to_vec(), (0..rows as u32).collect(), None).unwrap()
    }

    #[test]
    fn embed_hand_example() {
        let mut p = ModelParams::init(tiny(2, 1, 0, 1, 3), 1).unwrap();
        p.set("visual.proj", Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap()).unwrap();
        p.set("visual.pos", Tensor::from_rows(&[&[0.5, -0.5], &[0.0, 0.0]]).unwrap()).unwrap();
        let ev = embed_visual(&set(1, 3, &[1.0, 0.0, 2.0]), &p).unwrap();
        assert_eq!(ev.row(0), &[3.5, 1.5]);
    }

    #[test]
    fn zero_features_give_positions() {
        let p = ModelParams::init(tiny(4, 2, 1, 1, 5), 3).unwrap();
        let ev = embed_visual(&set(2, 5, &[0.0; 10]), &p).unwrap();
        assert_eq!(&ev, p.get("visual.pos").unwrap());
    }

    #[test]
    fn zero_projection_gives_positions() {
        let mut p = ModelParams::init(tiny(4, 2, 1, 1, 5), 3).unwrap();
        p.set("visual.proj", Tensor::zeros(&[5, 4])).unwrap();
        let values: Vec<f32> = (0..10).map(|i| i as f32 - 3.5).collect();
        let ev = embed_visual(&set(2, 5, &values), &p).unwrap();
        assert_eq!(&ev, p.get("visual.pos").unwrap());
    }

    #[test]
    fn feature_dim_mismatch() {
        let p = ModelParams::init(tiny(4, 2, 1, 1, 5), 3).unwrap();
        assert!(matches!(
            embed_visual(&set(1, 4, &[0.0; 4]), &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn empty_encoder_is_identity() {
        let p = ModelParams::init(tiny(4, 2, 0, 1, 5), 3).unwrap();
        let ev = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        assert_eq!(encode(&ev, &p, None).unwrap(), ev);
    }

    #[test]
    fn zero_input_zero_biases_give_zero_memory() {
        let p = ModelParams::init(tiny(4, 2, 2, 1, 5), 3).unwrap();
        let ev = Tensor::zeros(&[2, 4]);
        assert_eq!(encode(&ev, &p, None).unwrap(), ev);
    }

    #[test]
    fn position_limit() {
        let p = ModelParams::init(tiny(4, 2, 1, 1, 5), 3).unwrap();
        let input = VisualInput::from_set(&set(1, 5, &[1.0; 5]), &p).unwrap();
        assert!(forward_logits(&p, &input, &[2; 8]).is_ok());
        assert_eq!(
            forward_logits(&p, &input, &[2; 9]).unwrap_err(),
            Error::SequenceTooLong { position: 8, max: 8 }
        );
        assert_eq!(forward_logits(&p, &input, &[2, 6]).unwrap_err(), Error::UnknownTokenId(6));
    }
}
