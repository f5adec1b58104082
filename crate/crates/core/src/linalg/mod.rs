//! Dense and compressed-sparse-row primitives.

mod csr;
mod dense;

pub use csr::{sp_dense_matmul, spsp_rowscore, top_k_row, CsrMatrix, RowView};
pub use dense::{dense_matmul, softmax_rows, DenseMatrix};

pub(crate) use dense::{dot, softmax_in_place};
