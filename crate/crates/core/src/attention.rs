//! Dense multi-head self-attention and the Linformer low-rank baseline.
//!
//! These are the reference paths the sparse pipeline is checked against.

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{softmax_rows, DenseMatrix};

/// Per-head Q/K/V projections, each `d_model × d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

impl AttentionHeadParams {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix, w_v: DenseMatrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(dim_mismatch(
                "AttentionHeadParams::new",
                format!("W_q, W_k, W_v all {}x{}", w_q.rows(), w_q.cols()),
                format!(
                    "W_k {}x{}, W_v {}x{}",
                    w_k.rows(),
                    w_k.cols(),
                    w_v.rows(),
                    w_v.cols()
                ),
            ));
        }
        if w_q.cols() == 0 {
            return Err(Error::InvalidArgument("d_head must be at least 1".into()));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    /// Softmax temperature `1/√d_head`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }

    /// `(Q, K, V)` for the token matrix `x`.
    pub fn project(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
        if x.cols() != self.d_model() {
            return Err(dim_mismatch(
                "attention projection",
                format!("x with {} columns", self.d_model()),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        Ok((x.matmul(&self.w_q)?, x.matmul(&self.w_k)?, x.matmul(&self.w_v)?))
    }
}

/// Linformer head: the keys and values are compressed along the token axis
/// by `e_proj` and `f_proj` (`k_lin × n`).
#[derive(Clone, Debug, PartialEq)]
pub struct LinformerParams {
    pub head: AttentionHeadParams,
    pub e_proj: DenseMatrix,
    pub f_proj: DenseMatrix,
}

impl LinformerParams {
    pub fn new(head: AttentionHeadParams, e_proj: DenseMatrix, f_proj: DenseMatrix) -> Result<Self> {
        if e_proj.shape() != f_proj.shape() {
            return Err(dim_mismatch(
                "LinformerParams::new",
                format!("F with shape {}x{}", e_proj.rows(), e_proj.cols()),
                format!("{}x{}", f_proj.rows(), f_proj.cols()),
            ));
        }
        if e_proj.rows() == 0 {
            return Err(Error::InvalidArgument("Linformer projection rank must be at least 1".into()));
        }
        Ok(Self { head, e_proj, f_proj })
    }

    pub fn rank(&self) -> usize {
        self.e_proj.rows()
    }
}

/// Full attention for one head. Returns the `n × n` attention matrix and the
/// `n × d_head` head output.
pub fn naive_attention_head(
    x: &DenseMatrix,
    p: &AttentionHeadParams,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (q, k, v) = p.project(x)?;
    let attn = softmax_rows(&q.matmul_transposed(&k)?, p.scale())?;
    let out = attn.matmul(&v)?;
    Ok((attn, out))
}

fn check_output_projection(heads: &[AttentionHeadParams], w_o: &DenseMatrix) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("at least one attention head is required".into()));
    }
    let concat: usize = heads.iter().map(|h| h.d_head()).sum();
    if concat != w_o.rows() {
        return Err(dim_mismatch(
            "output projection",
            format!("W_o with {concat} rows (sum of head widths)"),
            format!("{}x{}", w_o.rows(), w_o.cols()),
        ));
    }
    Ok(())
}

/// Concatenates per-head outputs and applies the output projection.
pub(crate) fn project_heads(outputs: &[DenseMatrix], w_o: &DenseMatrix) -> Result<DenseMatrix> {
    DenseMatrix::hstack(outputs)?.matmul(w_o)
}

pub fn multi_head_attention(
    x: &DenseMatrix,
    heads: &[AttentionHeadParams],
    w_o: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_output_projection(heads, w_o)?;
    let outs = heads
        .iter()
        .map(|h| naive_attention_head(x, h).map(|(_, o)| o))
        .collect::<Result<Vec<_>>>()?;
    project_heads(&outs, w_o)
}

/// `softmax(Q (E K)ᵀ / √d_head) · (F V)`.
pub fn linformer_head(x: &DenseMatrix, p: &LinformerParams) -> Result<DenseMatrix> {
    if p.e_proj.cols() != x.rows() {
        return Err(dim_mismatch(
            "linformer_head",
            format!("projections over {} tokens", x.rows()),
            format!("{}x{}", p.e_proj.rows(), p.e_proj.cols()),
        ));
    }
    let (q, k, v) = p.head.project(x)?;
    let k_proj = p.e_proj.matmul(&k)?;
    let v_proj = p.f_proj.matmul(&v)?;
    let attn = softmax_rows(&q.matmul_transposed(&k_proj)?, p.head.scale())?;
    attn.matmul(&v_proj)
}

/// Multi-head Linformer with token projections shared across heads.
pub fn linformer_mhsa(
    x: &DenseMatrix,
    heads: &[AttentionHeadParams],
    e_proj: &DenseMatrix,
    f_proj: &DenseMatrix,
    w_o: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_output_projection(heads, w_o)?;
    let outs = heads
        .iter()
        .map(|h| {
            let p = LinformerParams::new(h.clone(), e_proj.clone(), f_proj.clone())?;
            linformer_head(x, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    project_heads(&outs, w_o)
}
