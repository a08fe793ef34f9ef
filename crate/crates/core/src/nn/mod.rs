//! Minimal neural-network toolkit: matrices on a differentiable tape,
//! a handful of layers, optimizers, and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::{transfer, Checkpoint, TransferAction, TransferEntry, TransferReport};
pub use gradcheck::{check_gradients, perturb, GradientSample};
pub use graph::{Graph, Var};
pub use layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{warmup_cosine, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
