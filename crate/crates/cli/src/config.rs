//! Run configuration.
//!
//! Sources, later ones winning: built-in defaults, the TOML file given by
//! `--config`, environment variables, command-line flags. An environment
//! variable `CAPCORE_<SECTION>_<KEY>` sets `<key>` in `[<section>]`;
//! `CAPCORE_SEED` and `CAPCORE_OUT` set the top-level keys. Values are read
//! as TOML literals when they parse as one, otherwise as strings.

use std::path::{Path, PathBuf};

use capcore::metrics::MetricConfig;
use capcore::model::ModelConfig;
use capcore::training::{LossForm, TrainConfig};
use capcore::vision::{ResNetMiniConfig, SamplePolicy};
use capcore::Precision;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "CAPCORE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    pub data: DataSection,
    pub extract: ExtractSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            extract: ExtractSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Input manifest of extract, split, train and generate.
    pub manifest: Option<PathBuf>,
    /// Reference manifest of evaluate.
    pub references: Option<PathBuf>,
    /// Captions file of evaluate.
    pub captions: Option<PathBuf>,
    pub test_fraction: f64,
    pub min_frequency: usize,
    /// Vocabulary size limit, special tokens included.
    pub vocab_cap: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            references: None,
            captions: None,
            test_fraction: 0.2,
            min_frequency: 1,
            vocab_cap: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Uniform,
    FirstN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    pub policy: Policy,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for ExtractSection {
    fn default() -> Self {
        let r = ResNetMiniConfig::default();
        Self {
            stage_channels: r.stage_channels,
            blocks_per_stage: r.blocks_per_stage,
            input_size: r.input_size,
            feature_dim: r.feature_dim,
            frames_per_video: capcore::vision::DEFAULT_FRAMES_PER_VIDEO,
            policy: Policy::Uniform,
            threads: 0,
        }
    }
}

impl ExtractSection {
    pub fn resnet(&self) -> ResNetMiniConfig {
        ResNetMiniConfig {
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            input_size: self.input_size,
            feature_dim: self.feature_dim,
        }
    }

    pub fn sample_policy(&self) -> SamplePolicy {
        match self.policy {
            Policy::Uniform => SamplePolicy::Uniform,
            Policy::FirstN => SamplePolicy::FirstN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Defaults to four times `d_model`.
    pub d_ff: Option<usize>,
    pub max_visual_tokens: usize,
    pub max_text_len: usize,
    /// Off gives the text-only baseline.
    pub use_visual_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(capcore::model::NUM_SPECIAL);
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            d_ff: None,
            max_visual_tokens: m.max_visual_tokens,
            max_text_len: m.max_text_len,
            use_visual_features: true,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            vocab_size,
            max_visual_tokens: self.max_visual_tokens,
            max_text_len: self.max_text_len,
            feature_dim,
            use_visual_features: self.use_visual_features,
            ..ModelConfig::desk(vocab_size)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Width {
    Wide,
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub clip_norm: f64,
    pub lambda: f64,
    pub loss_scaling: bool,
    pub loss_scale: f64,
    pub loss_form: Form,
    pub precision: Width,
    pub max_len: usize,
    /// Checkpoints kept on disk.
    pub keep_last: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            accumulation_steps: t.accumulation_steps,
            clip_norm: t.clip_norm,
            lambda: t.lambda,
            loss_scaling: t.loss_scaling,
            loss_scale: t.loss_scale,
            loss_form: Form::Mean,
            precision: Width::Wide,
            max_len: t.max_len,
            keep_last: 3,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            accumulation_steps: self.accumulation_steps,
            clip_norm: self.clip_norm,
            lambda: self.lambda,
            loss_scaling: self.loss_scaling,
            loss_scale: self.loss_scale,
            seed,
            loss_form: match self.loss_form {
                Form::Mean => LossForm::Mean,
                Form::Sum => LossForm::Sum,
            },
            precision: match self.precision {
                Width::Wide => Precision::Wide,
                Width::Half => Precision::Half,
            },
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    pub strategy: Decoding,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            strategy: Decoding::Greedy,
            beam_width: 3,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub bleu_smoothing: bool,
    pub stemming: bool,
    pub rouge_beta: f64,
    pub meteor_search_cap: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let m = MetricConfig::default();
        Self {
            bleu_smoothing: m.bleu_smoothing,
            stemming: m.stemming,
            rouge_beta: m.rouge_beta,
            meteor_search_cap: m.meteor_search_cap,
        }
    }
}

impl MetricsSection {
    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            bleu_smoothing: self.bleu_smoothing,
            stemming: self.stemming,
            rouge_beta: self.rouge_beta,
            meteor_search_cap: self.meteor_search_cap,
        }
    }
}

/// One flag-level override: dotted key and value.
pub type Override = (String, Value);

fn set(table: &mut Table, key: &str, value: Value) {
    match key.split_once('.') {
        Some((section, rest)) => {
            let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
            if !entry.is_table() {
                *entry = Value::Table(Table::new());
            }
            set(entry.as_table_mut().expect("table"), rest, value);
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn literal(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

const SECTIONS: [&str; 6] = ["data", "extract", "model", "train", "generate", "metrics"];

/// Maps `CAPCORE_*` variables to dotted keys. Unrecognized names are
/// reported and skipped.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out = Vec::new();
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let rest = rest.to_ascii_lowercase();
        if rest == "seed" || rest == "out" {
            out.push((rest, literal(&value)));
            continue;
        }
        match rest.split_once('_') {
            Some((section, key)) if SECTIONS.contains(&section) => {
                out.push((format!("{section}.{key}"), literal(&value)));
            }
            _ => log::warn!("ignoring environment variable {name}"),
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Layers the sources and validates the result.
pub fn resolve(file: Option<&Path>, env: Vec<Override>, flags: Vec<Override>) -> CliResult<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let parsed: Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for (k, v) in env.into_iter().chain(flags) {
        set(&mut table, &k, v);
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("test fraction {} must lie strictly between 0 and 1", self.data.test_fraction));
        }
        if self.train.keep_last == 0 {
            return bad("keep_last must be at least 1".into());
        }
        if self.generate.beam_width == 0 || self.generate.max_len == 0 {
            return bad("beam_width and max_len must be positive".into());
        }
        if self.extract.frames_per_video == 0 {
            return bad("frames_per_video must be positive".into());
        }
        if self.extract.frames_per_video > self.model.max_visual_tokens {
            return bad(format!(
                "{} frames per video exceed {} visual tokens",
                self.extract.frames_per_video, self.model.max_visual_tokens
            ));
        }
        self.extract.resnet().validate()?;
        self.train.train_config(self.seed).validate()?;
        self.model.model_config(capcore::model::NUM_SPECIAL, 1).validate()?;
        if !(self.metrics.rouge_beta > 0.0) {
            return bad("rouge_beta must be positive".into());
        }
        Ok(())
    }

    /// TOML text of the resolved configuration with absolute paths.
    pub fn echo(&self) -> String {
        let mut c = self.clone();
        let abs = |p: &mut PathBuf| {
            if let Ok(a) = std::path::absolute(&*p) {
                *p = a;
            }
        };
        abs(&mut c.out);
        for p in [&mut c.data.manifest, &mut c.data.references, &mut c.data.captions, &mut c.generate.checkpoint]
            .into_iter()
            .flatten()
        {
            abs(p);
        }
        toml::to_string(&c).expect("config serializes")
    }
}
