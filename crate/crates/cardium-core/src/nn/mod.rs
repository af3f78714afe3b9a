//! Double-precision neural-network substrate: named parameter storage, a
//! tape-based reverse-mode autodiff graph, transformer building blocks, the
//! AdamW optimizer, a finite-difference gradient checker, and a shared
//! model-checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::{CheckpointError, ModelCheckpoint};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use layers::{
    AttnOut, DecoderBlock, DecoderTaps, EncoderBlock, FeedForward, ForwardMode, LayerNorm, Linear,
    MlpHead, MultiHeadAttention, LAYER_NORM_EPS,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{normal_init, ones, xavier_uniform, zeros, ParamError, ParamStore, Parameter};
