//! Autoregressive decoding: incremental steps, greedy and beam search.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::attention::{attend, key_mask, linear};
use super::config::{BOS_ID, EOS_ID};
use super::forward::{Net, VisualInput};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::kernels::log_softmax_row;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vision::VisualFeatureSet;

/// Token ids including the begin marker and, when reached, the end marker.
pub type TokenSequence = Vec<u32>;

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    self_k: Tensor,
    self_v: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
}

/// Decoding state for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    ids: Vec<u32>,
    memory: Tensor,
    visual_mask: Vec<bool>,
    /// `Some` when key/value caching is on; each cache then holds one row per
    /// token already run through [`decode_step`].
    cache: Option<Vec<LayerCache>>,
    cached: usize,
}

impl DecoderState {
    /// Encodes the visual input and starts from the begin token.
    pub fn new(params: &ModelParams, input: &VisualInput, use_cache: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, params, false);
        let ev = net.embed_visual(&mut tape, input)?;
        let memory = net.encode(&mut tape, ev, &input.mask)?;
        let memory = tape.value(memory).clone();
        Self::from_memory(params, memory, input.mask.clone(), use_cache)
    }

    /// Starts from precomputed encoder memory.
    pub fn from_memory(params: &ModelParams, memory: Tensor, visual_mask: Vec<bool>, use_cache: bool) -> Result<Self> {
        let (rows, cols) = memory.dims2()?;
        if cols != params.config().d_model || rows != visual_mask.len() {
            return Err(Error::Dimension {
                op: "decoder_memory",
                lhs: memory.shape().to_vec(),
                rhs: vec![visual_mask.len(), params.config().d_model],
            });
        }
        let cache = if use_cache {
            let mut tape = Tape::new();
            let net = Net::bind_decoder(&mut tape, params);
            let m = tape.constant(memory.clone());
            let mut layers = Vec::new();
            for layer in &params.layout().decoder {
                let w = net.attn(&layer.cross_attn);
                let k = linear(&mut tape, m, w.wk, w.bk)?;
                let v = linear(&mut tape, m, w.wv, w.bv)?;
                layers.push(LayerCache {
                    self_k: Tensor::zeros(&[1, cols]),
                    self_v: Tensor::zeros(&[1, cols]),
                    cross_k: tape.value(k).clone(),
                    cross_v: tape.value(v).clone(),
                });
            }
            Some(layers)
        } else {
            None
        };
        Ok(Self {
            ids: vec![BOS_ID],
            memory,
            visual_mask,
            cache,
            cached: 0,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn memory(&self) -> &Tensor {
        &self.memory
    }

    /// Tokens whose keys and values are cached (0 without caching).
    pub fn cached_len(&self) -> usize {
        self.cached
    }

    pub fn push(&mut self, id: u32) {
        self.ids.push(id);
    }

    pub fn into_ids(self) -> TokenSequence {
        self.ids
    }
}

/// Logits `[V]` for the token following `state.ids()`.
pub fn decode_step(state: &mut DecoderState, params: &ModelParams) -> Result<Tensor> {
    let cfg = params.config();
    let t = state.ids.len() - 1;
    if t >= cfg.max_text_len {
        return Err(Error::SequenceTooLong {
            position: t,
            max: cfg.max_text_len,
        });
    }
    let mut tape = Tape::new();
    let Some(cache) = state.cache.as_mut() else {
        let net = Net::bind_decoder(&mut tape, params);
        let memory = tape.constant(state.memory.clone());
        let logits = net.decode(&mut tape, memory, &state.visual_mask, &state.ids)?;
        let v = tape.value(logits);
        let row = v.row(v.shape()[0] - 1).to_vec();
        return Tensor::new(vec![row.len()], row);
    };
    // Run every token not yet cached; normally just the newest one.
    let mut last = Vec::new();
    for pos in state.cached..state.ids.len() {
        tape.reset();
        let net = Net::bind_decoder(&mut tape, params);
        let mut x = net.embed_text(&mut tape, &state.ids[pos..=pos], pos)?;
        let cross_mask = key_mask(1, &state.visual_mask);
        for (layer, c) in params.layout().decoder.iter().zip(cache.iter_mut()) {
            let h = net.norm(&mut tape, x, &layer.ln1)?;
            let w = net.attn(&layer.self_attn);
            let q = linear(&mut tape, h, w.wq, w.bq)?;
            let k = linear(&mut tape, h, w.wk, w.bk)?;
            let v = linear(&mut tape, h, w.wv, w.bv)?;
            if pos == 0 {
                c.self_k = tape.value(k).clone();
                c.self_v = tape.value(v).clone();
            } else {
                c.self_k = Tensor::concat_rows(&[&c.self_k, tape.value(k)])?;
                c.self_v = Tensor::concat_rows(&[&c.self_v, tape.value(v)])?;
            }
            let ks = tape.constant(c.self_k.clone());
            let vs = tape.constant(c.self_v.clone());
            let ctx = attend(&mut tape, q, ks, vs, cfg.n_heads, None, None)?;
            let a = linear(&mut tape, ctx, w.wo, w.bo)?;
            x = tape.add(x, a)?;

            let h = net.norm(&mut tape, x, &layer.ln2)?;
            let w = net.attn(&layer.cross_attn);
            let q = linear(&mut tape, h, w.wq, w.bq)?;
            let ks = tape.constant(c.cross_k.clone());
            let vs = tape.constant(c.cross_v.clone());
            let ctx = attend(&mut tape, q, ks, vs, cfg.n_heads, Some(&cross_mask), None)?;
            let a = linear(&mut tape, ctx, w.wo, w.bo)?;
            x = tape.add(x, a)?;

            let h = net.norm(&mut tape, x, &layer.ln3)?;
            let f = net.feedforward(&mut tape, h, &layer.ff)?;
            x = tape.add(x, f)?;
        }
        let logits = net.head(&mut tape, x)?;
        last = tape.value(logits).data().to_vec();
        state.cached = pos + 1;
    }
    Tensor::new(vec![last.len()], last)
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    /// Beam search of the given width (at least 1).
    Beam(usize),
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Captions a video. The result starts with the begin token and has at most
/// `max_len` tokens (also capped by the positional table), ending with the
/// end token unless the cap was hit first.
pub fn generate(
    features: &VisualFeatureSet,
    params: &ModelParams,
    strategy: Strategy,
    max_len: usize,
) -> Result<TokenSequence> {
    let input = VisualInput::from_set(features, params)?;
    generate_from_input(&input, params, strategy, max_len)
}

pub fn generate_from_input(
    input: &VisualInput,
    params: &ModelParams,
    strategy: Strategy,
    max_len: usize,
) -> Result<TokenSequence> {
    let cap = max_len.min(params.config().max_text_len + 1).max(1);
    let state = DecoderState::new(params, input, true)?;
    match strategy {
        Strategy::Greedy => greedy(state, params, cap),
        Strategy::Beam(k) => beam(state, params, k.max(1), cap),
    }
}

fn greedy(mut state: DecoderState, params: &ModelParams, cap: usize) -> Result<TokenSequence> {
    while state.ids.len() < cap {
        let logits = decode_step(&mut state, params)?;
        let next = argmax(logits.data());
        state.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(state.into_ids())
}

struct Hyp {
    state: DecoderState,
    logp: f64,
}

/// Cumulative log-probability divided by the number of generated tokens.
fn normalized(logp: f64, len: usize) -> f64 {
    logp / (len.saturating_sub(1).max(1)) as f64
}

fn beam(start: DecoderState, params: &ModelParams, k: usize, cap: usize) -> Result<TokenSequence> {
    let mut alive = vec![Hyp { state: start, logp: 0.0 }];
    let mut finished: Vec<(TokenSequence, f64)> = Vec::new();
    while !alive.is_empty() && finished.len() < k && alive[0].state.ids.len() < cap {
        // (logp, hypothesis index, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in alive.iter_mut().enumerate() {
            let logits = decode_step(&mut hyp.state, params)?;
            let lp = log_softmax_row(logits.data());
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.logp + l, h, tok as u32)));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(k);
        for (logp, h, tok) in cands {
            if next.len() == k || finished.len() >= k {
                break;
            }
            let mut state = alive[h].state.clone();
            state.push(tok);
            if tok == EOS_ID {
                let n = normalized(logp, state.ids.len());
                finished.push((state.into_ids(), n));
            } else {
                next.push(Hyp { state, logp });
            }
        }
        alive = next;
    }
    for hyp in alive {
        let n = normalized(hyp.logp, hyp.state.ids.len());
        finished.push((hyp.state.into_ids(), n));
    }
    // First best wins ties, so earlier-finished hypotheses are preferred.
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.1 > finished[best].1 {
            best = i;
        }
    }
    Ok(finished.swap_remove(best).0)
}
