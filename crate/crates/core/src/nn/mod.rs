//! Differentiable computation substrate: tensors, a reverse-mode tape,
//! layers, the optimizer, checkpoints and the finite-difference oracle.
//!
//! The tape provides every primitive the learnable modules rely on:
//! pointwise, depth-wise and strided 3×3 convolutions, nearest and
//! pixel-shuffle resampling, matrix products, softmax, layer normalization,
//! GELU, elementwise arithmetic, reductions, L1 loss and (via
//! [`Graph::l2_normalize_rows`] and [`Graph::matmul_t`]) cosine similarity.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::CheckpointHeader;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv1x1, Conv3, DwConv3, LayerNorm, Linear, ParamBuilder};
pub use optim::{AdamW, GradAccumulator};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;
