#![allow(dead_code)]

pub mod reference;

use capcore::model::{ModelConfig, ModelParams};
use capcore::vision::VisualFeatureSet;
use capcore::{Rng, Tensor};

pub fn toy_config(d: usize, heads: usize, enc: usize, dec: usize, vocab: usize, n: usize, feature_dim: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        n_encoder_layers: enc,
        n_decoder_layers: dec,
        d_ff: 4 * d,
        vocab_size: vocab,
        max_visual_tokens: n,
        max_text_len: 8,
        feature_dim,
        ln_eps: 1e-5,
        use_visual_features: true,
    }
}

/// Seeded parameters with every tensor redrawn at a scale where attention
/// and layer norms are far from their trivial regimes.
pub fn lively_params(config: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let store = p.store_mut();
    for i in 0..store.len() {
        let shape = store.tensor(i).shape().to_vec();
        let name = store.name(i).to_string();
        let mut t = rng.normal_tensor(&shape, if store.decays(i) { 0.4 } else { 0.1 });
        if name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        *store.tensor_mut(i) = t;
    }
    p
}

pub fn random_features(rng: &mut Rng, rows: usize, cols: usize) -> VisualFeatureSet {
    let v = (0..rows * cols).map(|_| rng.normal(0.0, 1.0) as f32).collect();
    VisualFeatureSet::new("v", cols, v, (0..rows as u32).collect(), None).unwrap()
}

pub fn feature_rows(set: &VisualFeatureSet) -> reference::Mat {
    reference::mat(&set.to_tensor())
}

/// Largest `|a−b| / max(|a|, |b|, 1)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn tensor_rows(t: &Tensor) -> reference::Mat {
    reference::mat(t)
}

/// Small synthetic corpus: `videos` videos with two captions each over a
/// tiny vocabulary, random features with `rows` frames of `dim` values.
pub fn toy_data(videos: usize, rows: usize, dim: usize, seed: u64) -> capcore::training::TrainData {
    use capcore::data::{expand_examples, normalize_and_tokenize, CaptionRecord, VisualSource, Vocabulary};
    use std::collections::BTreeMap;
    let words = ["red", "car", "stops", "man", "walks", "dog", "runs", "fast", "slowly", "left"];
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();
    let mut features = BTreeMap::new();
    for v in 0..videos {
        let id = format!("video{v}");
        let caption = |rng: &mut Rng| {
            let n = 1 + rng.below(5);
            (0..n).map(|_| words[rng.below(words.len())]).collect::<Vec<_>>().join(" ")
        };
        let captions = vec![caption(&mut rng), caption(&mut rng)];
        records.push(CaptionRecord {
            video_id: id.clone(),
            source: VisualSource::Features(format!("{id}.mmvc")),
            captions,
            action: None,
            justification: None,
        });
        features.insert(id.clone(), {
            let mut s = random_features(&mut rng, rows, dim);
            s.video_id = id;
            s
        });
    }
    let corpus: Vec<Vec<String>> = records.iter().flat_map(|r| r.captions.iter().map(|c| normalize_and_tokenize(c))).collect();
    let vocab = Vocabulary::build(&corpus, 1, 100).unwrap();
    capcore::training::TrainData {
        examples: expand_examples(&records),
        features,
        vocab,
    }
}

/// Reads the `H`/`R` block format used by the metric fixtures.
pub fn read_pairs(text: &str) -> Vec<capcore::metrics::EvalPair> {
    let mut out = Vec::new();
    let mut hyp: Option<Vec<String>> = None;
    let mut refs = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            if let Some(h) = hyp.take() {
                out.push(capcore::metrics::EvalPair::new(h, std::mem::take(&mut refs)).unwrap());
            }
            continue;
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        let words = rest.split_whitespace().map(String::from).collect();
        match tag {
            "H" => hyp = Some(words),
            "R" => refs.push(words),
            other => panic!("bad tag {other}"),
        }
    }
    out
}

/// `key=value` lines into a map.
pub fn read_expected(text: &str) -> std::collections::BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}
