//! The MTFA detection network and its checkpoint format.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{class_defaults, MaskKind, ModelConfig};
pub use network::{AttentionMaps, AttentionTrace, ForwardOutput, FramePrediction, MaskTrace, Mtfa};
