//! 3D convolutional encoder/decoder networks and their checkpoints.

mod checkpoint;
pub mod layers;
mod model;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Architecture, Checkpoint, CheckpointKind, CheckpointManifest,
    CheckpointMeta, TensorEntry, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MANIFEST,
};
pub use model::{
    clone_decoder_architecture, load_tensors, Decoder, DecoderCache, DecoderOutput, Encoder, EncoderCache,
    ModelConfig, Parameters, KERNEL, LEAKY_SLOPE, PADDING, STRIDE,
};
