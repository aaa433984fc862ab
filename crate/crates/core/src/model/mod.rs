//! Encoder-decoder transformer over visual tokens.

pub mod attention;
pub mod config;
pub mod decode;
pub mod forward;
pub mod params;

pub use config::{ModelConfig, BOS_ID, EOS_ID, NUM_SPECIAL, PAD_ID, UNK_ID};
pub use decode::{argmax, decode_step, generate, generate_from_input, DecoderState, Strategy, TokenSequence};
pub use forward::{embed_visual, encode, forward_logits, Net, VisualInput};
pub use params::{ModelParams, INIT_STD};
