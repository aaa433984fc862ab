//! Per-frame visual features from a small residual CNN.
//!
//! The extractor mirrors the usual residual layout: a stride-2 stem, then
//! stages of basic blocks (conv-norm-relu-conv-norm plus a shortcut), global
//! average pooling, and a linear lift to the feature dimension. Batch
//! normalization runs in inference form with running statistics frozen at
//! mean 0 / variance 1, so each norm is `x / sqrt(1 + eps) * gain + bias`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-channel pixel mean applied after scaling to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
/// Per-channel pixel standard deviation applied after scaling to `[0, 1]`.
pub const PIXEL_STD: f64 = 0.5;
pub const BN_EPS: f64 = 1e-5;
/// Sampled frames per video unless configured otherwise.
pub const DEFAULT_FRAMES_PER_VIDEO: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetMiniConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Square input extent in pixels; frames have 3 channels.
    pub input_size: usize,
    pub feature_dim: usize,
}

impl Default for ResNetMiniConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            input_size: 224,
            feature_dim: 2048,
        }
    }
}

impl ResNetMiniConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be non-empty and positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.input_size < 32 {
            return Err(Error::Config(format!("input size {} is below 32", self.input_size)));
        }
        Ok(())
    }

    /// Short identifier of the architecture, recorded with extracted features.
    pub fn tag(&self, seed: u64) -> String {
        let chans: Vec<String> = self.stage_channels.iter().map(|c| format!("{c}")).collect();
        format!(
            "resnet-mini:c{}:b{}:in{}:d{}:seed{}",
            chans.join("-"),
            self.blocks_per_stage,
            self.input_size,
            self.feature_dim,
            seed
        )
    }
}

/// Visual features of one video: one `feature_dim` row per sampled frame.
///
/// Values are stored as `f32`, the precision of the on-disk feature format.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSet {
    pub video_id: String,
    rows: usize,
    cols: usize,
    features: Vec<f32>,
    frame_indices: Vec<u32>,
    /// Extractor identifier; not stored in feature files.
    pub extractor_tag: Option<String>,
}

impl VisualFeatureSet {
    pub fn new(
        video_id: impl Into<String>,
        cols: usize,
        features: Vec<f32>,
        frame_indices: Vec<u32>,
        extractor_tag: Option<String>,
    ) -> Result<Self> {
        let rows = frame_indices.len();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("feature set needs at least one row and column".into()));
        }
        if features.len() != rows * cols {
            return Err(Error::Shape {
                shape: vec![rows, cols],
                reason: format!("expected {} values, got {}", rows * cols, features.len()),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature set" });
        }
        if frame_indices.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("frame indices must be ascending".into()));
        }
        Ok(Self {
            video_id: video_id.into(),
            rows,
            cols,
            features,
            frame_indices,
            extractor_tag,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn frame_indices(&self) -> &[u32] {
        &self.frame_indices
    }

    /// Features widened to an `[N×D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.rows, self.cols],
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplePolicy {
    Uniform,
    FirstN,
}

/// Frame indices to keep from a clip of `total` frames.
pub fn sample_frames(total: usize, n: usize, policy: SamplePolicy) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidArgument(format!("cannot sample {n} frames from {total}")));
    }
    let mut idx: Vec<usize> = match policy {
        SamplePolicy::FirstN => (0..n).collect(),
        SamplePolicy::Uniform if n == 1 => vec![0],
        SamplePolicy::Uniform => (0..n)
            .map(|i| libm::round(i as f64 * (total - 1) as f64 / (n - 1) as f64) as usize)
            .collect(),
    };
    // right-shift repair of collisions
    for i in 1..idx.len() {
        if idx[i] <= idx[i - 1] {
            idx[i] = idx[i - 1] + 1;
        }
    }
    Ok(idx)
}

/// Maps a `[3×H×W]` frame with values in `[0, 1]` to the standardized
/// range expected by the extractor.
pub fn standardize_frame(raw: &Tensor) -> Tensor {
    let data = raw.data().iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD).collect();
    Tensor::from_parts(raw.shape().to_vec(), data)
}

/// Residual CNN feature extractor with its weights.
#[derive(Debug, Clone)]
pub struct ResNetMini {
    config: ResNetMiniConfig,
    params: ParamStore,
    seed: u64,
}

/// Parameter names of one residual block.
#[derive(Debug, Clone)]
pub struct BlockNames {
    pub conv1: String,
    pub bn1: (String, String),
    pub conv2: String,
    pub bn2: (String, String),
    pub proj: Option<String>,
    pub stride: usize,
}

impl ResNetMini {
    /// Seeded initialization: Kaiming-normal convolutions, unit norm gains,
    /// zero biases.
    pub fn new(config: ResNetMiniConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let conv = |rng: &mut Rng, co: usize, ci: usize, k: usize| {
            let fan_in = (ci * k * k) as f64;
            rng.normal_tensor(&[co, ci, k, k], libm::sqrt(2.0 / fan_in))
        };
        let c0 = config.stage_channels[0];
        p.insert("stem.conv", conv(&mut rng, c0, 3, 3), true);
        p.insert("stem.bn.gain", Tensor::ones(&[c0]), false);
        p.insert("stem.bn.bias", Tensor::zeros(&[c0]), false);
        let mut c_in = c0;
        for (s, &c) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let pre = format!("stage{s}.block{b}");
                p.insert(&format!("{pre}.conv1"), conv(&mut rng, c, c_in, 3), true);
                p.insert(&format!("{pre}.bn1.gain"), Tensor::ones(&[c]), false);
                p.insert(&format!("{pre}.bn1.bias"), Tensor::zeros(&[c]), false);
                p.insert(&format!("{pre}.conv2"), conv(&mut rng, c, c, 3), true);
                p.insert(&format!("{pre}.bn2.gain"), Tensor::ones(&[c]), false);
                p.insert(&format!("{pre}.bn2.bias"), Tensor::zeros(&[c]), false);
                if c_in != c {
                    p.insert(&format!("{pre}.proj"), conv(&mut rng, c, c_in, 1), true);
                }
                c_in = c;
            }
        }
        let d = config.feature_dim;
        p.insert("lift.weight", rng.normal_tensor(&[c_in, d], libm::sqrt(1.0 / c_in as f64)), true);
        p.insert("lift.bias", Tensor::zeros(&[d]), false);
        Ok(Self { config, params: p, seed })
    }

    pub fn config(&self) -> &ResNetMiniConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tag(&self) -> String {
        self.config.tag(self.seed)
    }

    /// Names of every block in forward order.
    pub fn blocks(&self) -> Vec<BlockNames> {
        let mut out = Vec::new();
        let mut c_in = self.config.stage_channels[0];
        for (s, &c) in self.config.stage_channels.iter().enumerate() {
            for b in 0..self.config.blocks_per_stage {
                let pre = format!("stage{s}.block{b}");
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push(BlockNames {
                    conv1: format!("{pre}.conv1"),
                    bn1: (format!("{pre}.bn1.gain"), format!("{pre}.bn1.bias")),
                    conv2: format!("{pre}.conv2"),
                    bn2: (format!("{pre}.bn2.gain"), format!("{pre}.bn2.bias")),
                    proj: (c_in != c).then(|| format!("{pre}.proj")),
                    stride,
                });
                c_in = c;
            }
        }
        out
    }

    fn norm(&self, tape: &mut Tape, bound: &Bound, x: Var, names: &(String, String)) -> Result<Var> {
        let g = bound.var(self.params.index_of(&names.0)?);
        let b = bound.var(self.params.index_of(&names.1)?);
        tape.channel_affine(x, g, b, 1.0 / libm::sqrt(1.0 + BN_EPS))
    }

    /// One residual block applied to `x`.
    pub fn block_forward(&self, tape: &mut Tape, bound: &Bound, x: Var, block: &BlockNames) -> Result<Var> {
        let k1 = bound.var(self.params.index_of(&block.conv1)?);
        let k2 = bound.var(self.params.index_of(&block.conv2)?);
        let h = tape.conv2d(x, k1, block.stride, 1)?;
        let h = self.norm(tape, bound, h, &block.bn1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, k2, 1, 1)?;
        let h = self.norm(tape, bound, h, &block.bn2)?;
        let shortcut = match &block.proj {
            Some(name) => {
                let kp = bound.var(self.params.index_of(name)?);
                tape.conv2d(x, kp, block.stride, 0)?
            }
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        tape.relu(sum)
    }

    /// Feature vector `[1×D]` of one standardized `[3×H×W]` frame.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, frame: Var) -> Result<Var> {
        let stem = bound.var(self.params.index_of("stem.conv")?);
        let h = tape.conv2d(frame, stem, 2, 1)?;
        let h = self.norm(tape, bound, h, &("stem.bn.gain".into(), "stem.bn.bias".into()))?;
        let mut h = tape.relu(h)?;
        for block in self.blocks() {
            h = self.block_forward(tape, bound, h, &block)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let c = tape.value(pooled).numel();
        let pooled = tape.reshape(pooled, &[1, c])?;
        let w = bound.var(self.params.index_of("lift.weight")?);
        let b = bound.var(self.params.index_of("lift.bias")?);
        let lifted = tape.matmul(pooled, w)?;
        tape.add_bias(lifted, b)
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if frame.shape() != [3, s, s] {
            return Err(Error::Shape {
                shape: frame.shape().to_vec(),
                reason: format!("expected a [3×{s}×{s}] frame"),
            });
        }
        if !frame.all_finite() {
            return Err(Error::NonFinite { op: "frame pixels" });
        }
        Ok(())
    }

    /// One feature row per standardized frame.
    pub fn extract_features(
        &self,
        video_id: &str,
        frames: &[Tensor],
        frame_indices: &[u32],
    ) -> Result<VisualFeatureSet> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("no frames to extract".into()));
        }
        if frames.len() != frame_indices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} frame indices",
                frames.len(),
                frame_indices.len()
            )));
        }
        let mut values = Vec::with_capacity(frames.len() * self.config.feature_dim);
        for frame in frames {
            self.check_frame(frame)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(frame.clone());
            let f = self.forward(&mut tape, &bound, x)?;
            values.extend(tape.value(f).data().iter().map(|&v| v as f32));
        }
        VisualFeatureSet::new(
            video_id,
            self.config.feature_dim,
            values,
            frame_indices.to_vec(),
            Some(self.tag()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ResNetMiniConfig {
        ResNetMiniConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            input_size: 32,
            feature_dim: 16,
        }
    }

    #[test]
    fn sample_frames_examples() {
        assert_eq!(sample_frames(10, 10, SamplePolicy::Uniform).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_frames(9, 3, SamplePolicy::Uniform).unwrap(), vec![0, 4, 8]);
        assert_eq!(sample_frames(5, 1, SamplePolicy::Uniform).unwrap(), vec![0]);
        assert_eq!(sample_frames(5, 3, SamplePolicy::FirstN).unwrap(), vec![0, 1, 2]);
        assert!(sample_frames(3, 4, SamplePolicy::Uniform).is_err());
    }

    #[test]
    fn uniform_sampling_is_strictly_increasing() {
        for total in 1..60 {
            for n in 1..=total {
                let idx = sample_frames(total, n, SamplePolicy::Uniform).unwrap();
                assert_eq!(idx.len(), n);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(*idx.last().unwrap() < total);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ResNetMiniConfig::default().validate().is_ok());
        let mut c = small();
        c.input_size = 16;
        assert!(c.validate().is_err());
        let mut c = small();
        c.feature_dim = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.stage_channels = vec![4, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_frame_gives_zero_feature() {
        let net = ResNetMini::new(small(), 1).unwrap();
        let f = net.extract_features("v", &[Tensor::zeros(&[3, 32, 32])], &[0]).unwrap();
        assert!(f.features().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_identical_rows() {
        let net = ResNetMini::new(small(), 2).unwrap();
        let frame = Rng::new(5).uniform_tensor(&[3, 32, 32], -1.0, 1.0);
        let f = net.extract_features("v", &[frame.clone(), frame], &[0, 1]).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert!(f.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn extraction_rejects_bad_frames() {
        let net = ResNetMini::new(small(), 2).unwrap();
        let wrong = Tensor::zeros(&[1, 32, 32]);
        assert!(matches!(net.extract_features("v", &[wrong], &[0]), Err(Error::Shape { .. })));
        let mut nan = Tensor::zeros(&[3, 32, 32]);
        nan.data_mut()[7] = f64::NAN;
        assert!(matches!(net.extract_features("v", &[nan], &[0]), Err(Error::NonFinite { .. })));
        assert!(net.extract_features("v", &[], &[]).is_err());
    }

    #[test]
    fn feature_set_invariants() {
        assert!(VisualFeatureSet::new("v", 2, vec![0.0; 4], vec![3, 1], None).is_err());
        assert!(VisualFeatureSet::new("v", 2, vec![0.0; 3], vec![0, 1], None).is_err());
        assert!(VisualFeatureSet::new("v", 2, vec![0.0, f32::NAN], vec![0], None).is_err());
        assert!(VisualFeatureSet::new("v", 2, vec![], vec![], None).is_err());
        let ok = VisualFeatureSet::new("v", 2, vec![1.0, 2.0, 3.0, 4.0], vec![0, 5], None).unwrap();
        assert_eq!(ok.to_tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn standardize_maps_unit_range() {
        let raw = Tensor::new(vec![3, 1, 1], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(standardize_frame(&raw).data(), &[-1.0, 0.0, 1.0]);
    }
}
