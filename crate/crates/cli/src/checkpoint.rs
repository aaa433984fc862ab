//! Checkpoint file format.
//!
//! `"MMCK"` | version u32 | config block (u32 length + canonical text) |
//! vocab block | tensor block | optimizer flag u8 [step u64 | first-moment
//! tensor block | second-moment tensor block] | CRC32 of all prior bytes.
//!
//! A tensor block is a u32 count followed by, per tensor, name (u16 length +
//! UTF-8), rank u8, dims u32×rank and the f64 payload. The vocab block is
//! min-frequency u32, count u32 and one u16-prefixed string per non-special
//! token.

use std::collections::BTreeMap;
use std::path::Path;

use capcore::data::Vocabulary;
use capcore::model::{ModelConfig, NUM_SPECIAL};
use capcore::rng::RngState;
use capcore::training::{LossForm, ModelCheckpoint, OptimizerState, TrainConfig, CHECKPOINT_VERSION};
use capcore::{Precision, Tensor};

use crate::bytes::{Reader, Writer};
use crate::error::FormatError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";

/// Fields of the config block in file order.
#[derive(Debug, Clone, PartialEq)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    global_step: u64,
    loss_scale: f64,
    skipped_steps: u64,
    rng: RngState,
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Wide => "wide",
        Precision::Half => "half",
    }
}

fn loss_form_name(f: LossForm) -> &'static str {
    match f {
        LossForm::Mean => "mean",
        LossForm::Sum => "sum",
    }
}

/// Floats use the shortest text that parses back to the same bits.
fn canonical_text(h: &Header) -> String {
    let m = &h.model;
    let t = &h.train;
    let lines: Vec<(&str, String)> = vec![
        ("model.d_model", m.d_model.to_string()),
        ("model.n_heads", m.n_heads.to_string()),
        ("model.n_encoder_layers", m.n_encoder_layers.to_string()),
        ("model.n_decoder_layers", m.n_decoder_layers.to_string()),
        ("model.d_ff", m.d_ff.to_string()),
        ("model.vocab_size", m.vocab_size.to_string()),
        ("model.max_visual_tokens", m.max_visual_tokens.to_string()),
        ("model.max_text_len", m.max_text_len.to_string()),
        ("model.feature_dim", m.feature_dim.to_string()),
        ("model.ln_eps", format!("{:?}", m.ln_eps)),
        ("model.use_visual_features", m.use_visual_features.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.learning_rate", format!("{:?}", t.learning_rate)),
        ("train.weight_decay", format!("{:?}", t.weight_decay)),
        ("train.accumulation_steps", t.accumulation_steps.to_string()),
        ("train.clip_norm", format!("{:?}", t.clip_norm)),
        ("train.lambda", format!("{:?}", t.lambda)),
        ("train.loss_scaling", t.loss_scaling.to_string()),
        ("train.loss_scale", format!("{:?}", t.loss_scale)),
        ("train.seed", t.seed.to_string()),
        ("train.loss_form", loss_form_name(t.loss_form).to_string()),
        ("train.precision", precision_name(t.precision).to_string()),
        ("train.max_len", t.max_len.to_string()),
        ("state.epoch", h.epoch.to_string()),
        ("state.global_step", h.global_step.to_string()),
        ("state.loss_scale", format!("{:?}", h.loss_scale)),
        ("state.skipped_steps", h.skipped_steps.to_string()),
        ("state.rng_seed", h.rng.seed.to_string()),
        ("state.rng_word_pos", h.rng.word_pos.to_string()),
    ];
    lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_text(text: &str) -> Result<Header, FormatError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Invalid(format!("config line without '=': {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(FormatError::Invalid(format!("duplicate config key {k}")));
        }
    }
    let mut take = |k: &str| map.remove(k).ok_or_else(|| FormatError::Invalid(format!("missing config key {k}")));
    fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T, FormatError> {
        v.parse().map_err(|_| FormatError::Invalid(format!("bad value for {k}: {v:?}")))
    }
    macro_rules! get {
        ($k:literal) => {
            num($k, take($k)?)?
        };
    }
    let model = ModelConfig {
        d_model: get!("model.d_model"),
        n_heads: get!("model.n_heads"),
        n_encoder_layers: get!("model.n_encoder_layers"),
        n_decoder_layers: get!("model.n_decoder_layers"),
        d_ff: get!("model.d_ff"),
        vocab_size: get!("model.vocab_size"),
        max_visual_tokens: get!("model.max_visual_tokens"),
        max_text_len: get!("model.max_text_len"),
        feature_dim: get!("model.feature_dim"),
        ln_eps: get!("model.ln_eps"),
        use_visual_features: get!("model.use_visual_features"),
    };
    let mut train = TrainConfig {
        epochs: get!("train.epochs"),
        batch_size: get!("train.batch_size"),
        learning_rate: get!("train.learning_rate"),
        weight_decay: get!("train.weight_decay"),
        accumulation_steps: get!("train.accumulation_steps"),
        clip_norm: get!("train.clip_norm"),
        lambda: get!("train.lambda"),
        loss_scaling: get!("train.loss_scaling"),
        loss_scale: get!("train.loss_scale"),
        seed: get!("train.seed"),
        ..TrainConfig::default()
    };
    train.loss_form = match take("train.loss_form")?.as_str() {
        "mean" => LossForm::Mean,
        "sum" => LossForm::Sum,
        other => return Err(FormatError::Invalid(format!("unknown loss form {other:?}"))),
    };
    train.precision = match take("train.precision")?.as_str() {
        "wide" => Precision::Wide,
        "half" => Precision::Half,
        other => return Err(FormatError::Invalid(format!("unknown precision {other:?}"))),
    };
    train.max_len = get!("train.max_len");
    let header = Header {
        model,
        train,
        epoch: get!("state.epoch"),
        global_step: get!("state.global_step"),
        loss_scale: get!("state.loss_scale"),
        skipped_steps: get!("state.skipped_steps"),
        rng: RngState {
            seed: get!("state.rng_seed"),
            word_pos: get!("state.rng_word_pos"),
        },
    };
    if let Some(k) = map.keys().next() {
        return Err(FormatError::Invalid(format!("unknown config key {k}")));
    }
    Ok(header)
}

fn write_tensors<'a>(w: &mut Writer, tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), FormatError> {
    w.u32(u32::try_from(tensors.len()).map_err(|_| FormatError::Invalid("too many tensors".into()))?);
    for (name, t) in tensors {
        w.str16(name)?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| FormatError::Invalid(format!("{name}: rank too high")))?;
        w.u8(rank);
        for &d in t.shape() {
            w.u32(u32::try_from(d).map_err(|_| FormatError::Invalid(format!("{name}: extent too large")))?);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    Ok(())
}

fn read_tensors(r: &mut Reader) -> Result<Vec<(String, Tensor)>, FormatError> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.str16()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::Truncated)?;
        if r.remaining() < n.saturating_mul(8) {
            return Err(FormatError::Truncated);
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn encode_checkpoint(ck: &ModelCheckpoint) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(ck.version);
    let header = Header {
        model: ck.model_config.clone(),
        train: ck.train_config.clone(),
        epoch: ck.epoch,
        global_step: ck.global_step,
        loss_scale: ck.loss_scale,
        skipped_steps: ck.skipped_steps,
        rng: ck.rng,
    };
    w.str32(&canonical_text(&header))?;
    w.u32(ck.vocab.min_frequency() as u32);
    let words = &ck.vocab.tokens()[NUM_SPECIAL.min(ck.vocab.len())..];
    w.u32(words.len() as u32);
    for t in words {
        w.str16(t)?;
    }
    write_tensors(&mut w, ck.params.iter().map(|(n, t)| (n.as_str(), t)))?;
    match &ck.optimizer {
        None => w.u8(0),
        Some(opt) => {
            if opt.m.len() != ck.params.len() || opt.v.len() != ck.params.len() {
                return Err(FormatError::Invalid("optimizer state does not match the parameters".into()));
            }
            w.u8(1);
            w.u64(opt.t);
            write_tensors(&mut w, ck.params.iter().zip(&opt.m).map(|((n, _), t)| (n.as_str(), t)))?;
            write_tensors(&mut w, ck.params.iter().zip(&opt.v).map(|((n, _), t)| (n.as_str(), t)))?;
        }
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("four bytes")) {
        // A short file fails here too; report what is more useful.
        return Err(check_truncation(body).unwrap_or(FormatError::Checksum));
    }
    let mut r = Reader::new(&body[8..]);
    let header = parse_text(&r.str32()?)?;
    let min_freq = r.u32()? as usize;
    let count = r.u32()? as usize;
    let words = (0..count).map(|_| r.str16()).collect::<Result<Vec<_>, _>>()?;
    let mut vocab = Vocabulary::from_tokens(words).map_err(|e| FormatError::Invalid(e.to_string()))?;
    vocab.set_min_frequency(min_freq);
    let params = read_tensors(&mut r)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = read_tensors(&mut r)?;
            let v = read_tensors(&mut r)?;
            let names_match = |block: &[(String, Tensor)]| {
                block.len() == params.len()
                    && block.iter().zip(&params).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
            };
            if !names_match(&m) || !names_match(&v) {
                return Err(FormatError::Invalid("optimizer tensors do not match the parameters".into()));
            }
            Some(OptimizerState {
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
                t,
            })
        }
        other => return Err(FormatError::Invalid(format!("bad optimizer flag {other}"))),
    };
    r.expect_end()?;
    if vocab.len() != header.model.vocab_size {
        return Err(FormatError::Invalid(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            header.model.vocab_size
        )));
    }
    Ok(ModelCheckpoint {
        version,
        model_config: header.model,
        train_config: header.train,
        vocab,
        params,
        optimizer,
        epoch: header.epoch,
        global_step: header.global_step,
        loss_scale: header.loss_scale,
        skipped_steps: header.skipped_steps,
        rng: header.rng,
    })
}

/// Walks the framing of a body whose checksum failed; `Some(Truncated)`
/// when it ends early.
fn check_truncation(body: &[u8]) -> Option<FormatError> {
    let mut r = Reader::new(body.get(8..)?);
    let walk = |r: &mut Reader| -> Result<(), FormatError> {
        r.str32()?;
        r.u32()?;
        let n = r.u32()?;
        for _ in 0..n {
            r.str16()?;
        }
        read_tensors(r)?;
        if r.u8()? == 1 {
            r.u64()?;
            read_tensors(r)?;
            read_tensors(r)?;
        }
        Ok(())
    };
    match walk(&mut r) {
        Err(FormatError::Truncated) => Some(FormatError::Truncated),
        _ => None,
    }
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<(), FormatError> {
    crate::bytes::write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, FormatError> {
    decode_checkpoint(&std::fs::read(path)?)
}
