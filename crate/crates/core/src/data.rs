//! Tokenization, vocabulary, caption records, splitting and batching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BOS_ID, EOS_ID, NUM_SPECIAL, PAD_ID, UNK_ID};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vision::VisualFeatureSet;

/// Surface forms of the four reserved ids, in id order.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Joiner between an action and its justification.
pub const JUSTIFICATION_JOINER: &str = " because ";

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(core::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Bijection between tokens and ids; ids 0–3 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first
    /// (ties in byte order), until the vocabulary holds `cap` entries
    /// including the specials.
    pub fn build(corpus: &[Vec<String>], min_freq: usize, cap: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        if cap <= NUM_SPECIAL {
            return Err(Error::Config(format!("vocabulary cap {cap} leaves no room past the specials")));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tokens in corpus {
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap - NUM_SPECIAL);
        let mut vocab = Self::from_tokens(ranked.iter().map(|(t, _)| t.to_string()).collect())?;
        vocab.min_frequency = min_freq;
        Ok(vocab)
    }

    /// Vocabulary whose ordinary tokens are `tokens`, taking ids from 4 on.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut ids = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens: all,
            ids,
            min_frequency: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn set_min_frequency(&mut self, n: usize) {
        self.min_frequency = n;
    }

    /// All tokens in id order, specials included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id))
    }

    /// `[bos, ids…, eos]`, out-of-vocabulary words mapped to unk.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS_ID];
        out.extend(normalize_and_tokenize(text).iter().map(|t| self.id(t)));
        out.push(EOS_ID);
        out
    }

    /// Space-joined tokens with every special id dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let t = self.token(id)?;
            if (id as usize) >= NUM_SPECIAL {
                words.push(t);
            }
        }
        Ok(words.join(" "))
    }
}

/// Where a record's visual input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VisualSource {
    /// A feature file.
    Features(String),
    /// A directory of frame images.
    Frames(String),
}

/// One video with its reference texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub video_id: String,
    pub source: VisualSource,
    pub captions: Vec<String>,
    pub action: Option<String>,
    pub justification: Option<String>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Corpus("record with empty video_id".into()));
        }
        if self.captions.is_empty() {
            return Err(Error::Corpus(format!("{}: no captions", self.video_id)));
        }
        if self.action.is_some() != self.justification.is_some() {
            return Err(Error::Corpus(format!(
                "{}: action and justification must appear together",
                self.video_id
            )));
        }
        Ok(())
    }
}

/// Training texts of a record: the joined action-justification pair when
/// present, otherwise the captions.
pub fn format_action_justification(record: &CaptionRecord) -> Vec<String> {
    match (&record.action, &record.justification) {
        (Some(a), Some(j)) => vec![format!("{}{JUSTIFICATION_JOINER}{}", a.trim(), j.trim())],
        _ => record.captions.clone(),
    }
}

/// Inverse of the pair join: splits at the first joiner.
pub fn parse_action_justification(text: &str) -> Option<(String, String)> {
    let (a, j) = text.split_once(JUSTIFICATION_JOINER)?;
    Some((a.to_string(), j.to_string()))
}

/// Partitions records by video into `(train, test)`.
///
/// Distinct video ids are sorted, shuffled with `seed`, and the first
/// `round(fraction·videos)` (kept between 1 and videos−1) go to test.
/// Records keep their input order on each side.
pub fn split(records: &[CaptionRecord], test_fraction: f64, seed: u64) -> Result<(Vec<CaptionRecord>, Vec<CaptionRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} is not inside (0, 1)")));
    }
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    if videos.len() < 2 {
        return Err(Error::Corpus(format!("need at least 2 videos to split, got {}", videos.len())));
    }
    let mut order: Vec<&str> = videos.into_iter().collect();
    Rng::new(seed).shuffle(&mut order);
    let n = order.len();
    let n_test = (libm::round(test_fraction * n as f64) as usize).clamp(1, n - 1);
    let test_ids: BTreeSet<&str> = order[..n_test].iter().copied().collect();
    let (test, train): (Vec<CaptionRecord>, Vec<CaptionRecord>) =
        records.iter().cloned().partition(|r| test_ids.contains(r.video_id.as_str()));
    Ok((train, test))
}

/// One (video, reference text) training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub video_id: String,
    pub text: String,
}

/// One example per training text of every record.
pub fn expand_examples(records: &[CaptionRecord]) -> Vec<Example> {
    records
        .iter()
        .flat_map(|r| {
            format_action_justification(r).into_iter().map(|text| Example {
                video_id: r.video_id.clone(),
                text,
            })
        })
        .collect()
}

/// Padded teacher-forcing batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub video_ids: Vec<String>,
    /// Per example `[n_i×D]` features, unpadded.
    pub features: Vec<Tensor>,
    /// `[B×T]`: `[bos, words…, eos, pad…]`.
    pub input_ids: Vec<Vec<u32>>,
    /// `[B×T]`: input shifted left by one, eos in the last column.
    pub target_ids: Vec<Vec<u32>>,
    /// `[B×T]`: positions that contribute to the loss.
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Width `T` of the padded text rows.
    pub fn width(&self) -> usize {
        self.input_ids.first().map_or(0, Vec::len)
    }

    /// Non-pad target tokens.
    pub fn token_count(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Per example `[N]` masks: real rows then padding.
    pub fn visual_mask(&self, n_tokens: usize) -> Vec<Vec<bool>> {
        self.features
            .iter()
            .map(|f| (0..n_tokens).map(|i| i < f.shape()[0]).collect())
            .collect()
    }

    /// Targets with non-loss positions as `None`.
    pub fn masked_targets(&self, row: usize) -> Vec<Option<usize>> {
        self.target_ids[row]
            .iter()
            .zip(&self.loss_mask[row])
            .map(|(&t, &m)| m.then_some(t as usize))
            .collect()
    }
}

/// Token ids of one example, capped at `max_len` with eos kept last.
pub fn example_ids(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold bos and eos")));
    }
    let mut ids = vocab.encode(text);
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(EOS_ID);
    }
    Ok(ids)
}

/// Batches `examples` in order, `batch_size` at a time (last may be short).
pub fn batch_examples(
    examples: &[Example],
    features: &BTreeMap<String, VisualFeatureSet>,
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut out = Vec::new();
    for chunk in examples.chunks(batch_size) {
        let mut seqs = Vec::with_capacity(chunk.len());
        let mut feats = Vec::with_capacity(chunk.len());
        for ex in chunk {
            let f = features
                .get(&ex.video_id)
                .ok_or_else(|| Error::Corpus(format!("{}: no features available", ex.video_id)))?;
            feats.push(f.to_tensor());
            seqs.push(example_ids(&ex.text, vocab, max_len)?);
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut batch = Batch {
            video_ids: chunk.iter().map(|e| e.video_id.clone()).collect(),
            features: feats,
            input_ids: Vec::new(),
            target_ids: Vec::new(),
            loss_mask: Vec::new(),
        };
        for mut ids in seqs {
            ids.resize(width, PAD_ID);
            let mut target: Vec<u32> = ids[1..].to_vec();
            target.push(EOS_ID);
            batch.loss_mask.push(ids.iter().map(|&t| t != PAD_ID && t != EOS_ID).collect());
            batch.input_ids.push(ids);
            batch.target_ids.push(target);
        }
        out.push(batch);
    }
    Ok(out)
}

/// Expands records into examples and batches them in record order.
pub fn make_batches(
    records: &[CaptionRecord],
    features: &BTreeMap<String, VisualFeatureSet>,
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    batch_examples(&expand_examples(records), features, vocab, batch_size, max_len)
}
