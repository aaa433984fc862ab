#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capcore::data::{CaptionRecord, VisualSource, Vocabulary};
use capcore::model::{ModelConfig, ModelParams};
use capcore::training::{LossForm, ModelCheckpoint, OptimizerState, TrainConfig, CHECKPOINT_VERSION};
use capcore::vision::VisualFeatureSet;
use capcore::rng::RngState;
use capcore::{Precision, Rng};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_capcore"));
    // Keep the caller's CAPCORE_* settings out of the runs.
    for (k, _) in std::env::vars() {
        if k.starts_with("CAPCORE_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn word(rng: &mut Rng) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let n = 1 + rng.below(8);
    (0..n).map(|_| LETTERS[rng.below(LETTERS.len())] as char).collect()
}

/// Text with characters that need escaping in JSON.
fn text(rng: &mut Rng) -> String {
    const ODD: [&str; 6] = ["\"", "\\", "é", "日本", "\t", "🚗"];
    let mut parts = Vec::new();
    for _ in 0..1 + rng.below(6) {
        if rng.below(5) == 0 {
            parts.push(ODD[rng.below(ODD.len())].to_string());
        } else {
            parts.push(word(rng));
        }
    }
    parts.join(" ")
}

pub fn random_features(rng: &mut Rng) -> VisualFeatureSet {
    let rows = 1 + rng.below(8);
    let cols = 1 + rng.below(40);
    let values = (0..rows * cols)
        .map(|_| match rng.below(20) {
            0 => 0.0,
            1 => -0.0,
            2 => f32::MIN_POSITIVE / 4.0,
            3 => f32::MAX,
            _ => rng.normal(0.0, 10.0) as f32,
        })
        .collect();
    let mut idx: Vec<u32> = (0..rows).map(|_| rng.below(1000) as u32).collect();
    idx.sort_unstable();
    VisualFeatureSet::new(text(rng), cols, values, idx, None).unwrap()
}

pub fn random_record(rng: &mut Rng, id: String) -> CaptionRecord {
    let path = format!("{}/{}", word(rng), word(rng));
    let source = if rng.below(2) == 0 {
        VisualSource::Features(path)
    } else {
        VisualSource::Frames(path)
    };
    let paired = rng.below(3) == 0;
    CaptionRecord {
        video_id: id,
        source,
        captions: (0..1 + rng.below(3)).map(|_| text(rng)).collect(),
        action: paired.then(|| text(rng)),
        justification: paired.then(|| text(rng)),
    }
}

pub fn random_manifest(rng: &mut Rng) -> Vec<CaptionRecord> {
    let n = rng.below(6);
    (0..n).map(|i| {
        let id = format!("{i}-{}", text(rng));
        random_record(rng, id)
    })
    .collect()
}

pub fn random_checkpoint(rng: &mut Rng) -> ModelCheckpoint {
    let mut tokens = BTreeSet::new();
    for _ in 0..1 + rng.below(12) {
        tokens.insert(text(rng));
    }
    let mut vocab = Vocabulary::from_tokens(tokens.into_iter().collect()).unwrap();
    vocab.set_min_frequency(1 + rng.below(4));
    let heads = [1usize, 2, 4][rng.below(3)];
    let d = heads * (1 + rng.below(2));
    let model = ModelConfig {
        d_model: d,
        n_heads: heads,
        n_encoder_layers: rng.below(3),
        n_decoder_layers: 1 + rng.below(2),
        d_ff: 1 + rng.below(9),
        vocab_size: vocab.len(),
        max_visual_tokens: 1 + rng.below(5),
        max_text_len: 2 + rng.below(10),
        feature_dim: 1 + rng.below(6),
        ln_eps: rng.uniform(1e-9, 1e-3),
        use_visual_features: rng.below(2) == 0,
    };
    let params = ModelParams::init(model.clone(), rng.next_u64()).unwrap();
    let train = TrainConfig {
        epochs: 1 + rng.below(100),
        batch_size: 1 + rng.below(64),
        learning_rate: rng.uniform(1e-7, 1.0),
        weight_decay: rng.uniform(0.0, 0.1),
        accumulation_steps: 1 + rng.below(8),
        clip_norm: rng.uniform(0.1, 5.0),
        lambda: rng.uniform(0.0, 1e-2),
        loss_scaling: rng.below(2) == 0,
        loss_scale: 2f64.powi(rng.below(20) as i32),
        seed: rng.next_u64(),
        loss_form: if rng.below(2) == 0 { LossForm::Mean } else { LossForm::Sum },
        precision: if rng.below(2) == 0 { Precision::Wide } else { Precision::Half },
        max_len: 2 + rng.below(40),
    };
    let named: Vec<(String, capcore::Tensor)> = params
        .store()
        .iter()
        .map(|(n, t)| (n.to_string(), rng.normal_tensor(t.shape(), 1.0)))
        .collect();
    let optimizer = (rng.below(2) == 0).then(|| {
        let mut o = OptimizerState::new(params.store());
        for t in o.m.iter_mut().chain(o.v.iter_mut()) {
            *t = rng.normal_tensor(t.shape(), 1e-3);
        }
        o.t = rng.next_u64() >> 1;
        o
    });
    ModelCheckpoint {
        version: CHECKPOINT_VERSION,
        model_config: model,
        train_config: train,
        vocab,
        params: named,
        optimizer,
        epoch: rng.below(1000),
        global_step: rng.next_u64() >> 1,
        loss_scale: 2f64.powi(rng.below(30) as i32 - 10),
        skipped_steps: rng.next_u64() >> 40,
        rng: RngState {
            seed: rng.next_u64(),
            word_pos: ((rng.next_u64() as u128) << 8) | rng.below(256) as u128,
        },
    }
}

pub fn read_dir_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

/// `key=value` lines into a map.
pub fn read_expected(text: &str) -> std::collections::BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

/// Turns the `H`/`R` metric fixture into a captions file and a reference
/// manifest, one video per block.
pub fn golden_as_files(text: &str) -> (String, String) {
    let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
    for line in text.lines().map(str::trim) {
        if let Some(h) = line.strip_prefix("H ") {
            blocks.push((h.to_string(), Vec::new()));
        } else if let Some(r) = line.strip_prefix("R ") {
            blocks.last_mut().expect("reference after a hypothesis").1.push(r.to_string());
        }
    }
    let mut captions = String::new();
    let mut records = Vec::new();
    for (i, (h, refs)) in blocks.into_iter().enumerate() {
        let id = format!("pair{i:02}");
        captions.push_str(&format!("{id}\t{h}\n"));
        records.push(CaptionRecord {
            video_id: id.clone(),
            source: VisualSource::Features(format!("{id}.mmvc")),
            captions: refs,
            action: None,
            justification: None,
        });
    }
    (captions, capcore_cli::manifest::format_manifest(&records))
}
