//! Slicing-sorting attention and a softmax multi-head baseline on a small
//! tape-based autodiff engine, with an encoder, synthetic tasks, training and
//! diagnostics.

pub mod alloc_probe;
pub mod analysis;
pub mod attention;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;
pub mod training;

pub use attention::{
    extract_permutation_matrix, mha_forward, slice_sort_backward, slice_sort_forward,
    sort_direction, PermutationRecord, SortDirection, SortStrategy,
};
pub use encoder::{count_params, model_forward, AttentionKind, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
