use alloc::string::String;
use alloc::vec::Vec;

use super::optim::OptimizerState;
use super::TrainConfig;
use crate::data::Vocabulary;
use crate::model::ModelConfig;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    /// Parameter tensors in layout order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub loss_scale: f64,
    pub skipped_steps: u64,
    /// Shuffling stream position.
    pub rng: RngState,
}
