//! Sparse attention inference and analysis engine.
//!
//! Each attention head predicts a per-query connectivity mask from a cheap
//! low-rank approximation of its attention matrix, then computes exact
//! attention values only at the masked positions. The crate is organised
//! bottom-up:
//!
//! * [`linalg`]: dense and CSR matrices plus the sparse kernels.
//! * [`attention`]: dense multi-head attention and a Linformer baseline,
//!   used as oracles and comparison points.
//! * [`predictor`]: low-rank attention, thresholding and top-k mask
//!   prediction.
//! * [`sparse_mhsa`]: masked QK, sparse softmax and the sparse
//!   attention-value product.
//! * [`vit`]: a small ViT forward pass that can dispatch any of the three
//!   attention modes, plus the weight file format.
//! * [`distill`]: distillation losses and predictor-only training.
//! * [`flops`]: analytic MAC accounting.

pub mod attention;
pub mod distill;
pub mod error;
pub mod flops;
pub mod linalg;
pub mod predictor;
pub mod rng;
pub mod sparse_mhsa;
pub mod vit;

pub use attention::{AttentionHeadParams, LinformerParams};
pub use error::{Error, Result};
pub use linalg::{CsrMatrix, DenseMatrix};
pub use predictor::{ConnectivityMask, PredictorParams};
pub use sparse_mhsa::{SparseAttention, SparsifinerOptions};
pub use vit::{AttentionMode, LayerParams, Model, ModelConfig};
pub use flops::{FlopAccounting, FlopReport};

