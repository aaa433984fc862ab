use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIdx {
    pub ln1: NormIdx,
    pub self_attn: AttnIdx,
    pub ln2: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln3: NormIdx,
    pub ff: FfIdx,
}

/// Positions of every model tensor inside the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub visual_proj: usize,
    pub visual_pos: usize,
    pub token_emb: usize,
    pub text_pos: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub decoder: Vec<DecoderLayerIdx>,
    pub final_norm: NormIdx,
    pub out_weight: usize,
    pub out_bias: usize,
}

/// Weights of the encoder-decoder model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut Rng>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => rng.normal_tensor(shape, INIT_STD),
            None => Tensor::zeros(shape),
        };
        self.store.insert(&name, t, true)
    }

    fn bias(&mut self, name: String, n: usize) -> usize {
        self.store.insert(&name, Tensor::zeros(&[n]), false)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.store.insert(&format!("{prefix}.gain"), Tensor::ones(&[d]), false),
            bias: self.bias(format!("{prefix}.bias"), d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.weight(format!("{prefix}.wq"), &[d, d]),
            bq: self.bias(format!("{prefix}.bq"), d),
            wk: self.weight(format!("{prefix}.wk"), &[d, d]),
            bk: self.bias(format!("{prefix}.bk"), d),
            wv: self.weight(format!("{prefix}.wv"), &[d, d]),
            bv: self.bias(format!("{prefix}.bv"), d),
            wo: self.weight(format!("{prefix}.wo"), &[d, d]),
            bo: self.bias(format!("{prefix}.bo"), d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.weight(format!("{prefix}.w1"), &[d, f]),
            b1: self.bias(format!("{prefix}.b1"), f),
            w2: self.weight(format!("{prefix}.w2"), &[f, d]),
            b2: self.bias(format!("{prefix}.b2"), d),
        }
    }
}

fn build(config: &ModelConfig, rng: Option<&mut Rng>) -> (ParamStore, Layout) {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let visual_proj = b.weight("visual.proj".into(), &[config.feature_dim, d]);
    let visual_pos = b.weight("visual.pos".into(), &[config.max_visual_tokens, d]);
    let token_emb = b.weight("text.token_emb".into(), &[v, d]);
    let text_pos = b.weight("text.pos".into(), &[config.max_text_len, d]);
    let encoder = (0..config.n_encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff: b.ff(&format!("{p}.ff"), d, f),
            }
        })
        .collect();
    let decoder = (0..config.n_decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff: b.ff(&format!("{p}.ff"), d, f),
            }
        })
        .collect();
    let final_norm = b.norm("final_norm", d);
    let out_weight = b.weight("head.weight".into(), &[d, v]);
    let out_bias = b.bias("head.bias".into(), v);
    let layout = Layout {
        visual_proj,
        visual_pos,
        token_emb,
        text_pos,
        encoder,
        decoder,
        final_norm,
        out_weight,
        out_bias,
    };
    (b.store, layout)
}

impl ModelParams {
    /// Weights and tables ~ Normal(0, 0.02), biases zero, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (store, layout) = build(&config, Some(&mut rng));
        Ok(Self { config, store, layout })
    }

    /// Every weight and bias zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (store, layout) = build(&config, None);
        Ok(Self { config, store, layout })
    }

    /// Rebuilds parameters from named tensors, requiring exactly the
    /// layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if named.len() != params.store.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                params.store.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            params.store.set(&name, t)?;
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.store.get(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.store.set(name, t)
    }
}
