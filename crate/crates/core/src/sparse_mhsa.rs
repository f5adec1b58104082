//! Sparse full-rank attention guided by a connectivity mask.
//!
//! Only the masked query/key pairs are ever scored, so both the QK and the
//! attention-value stages cost `nnz(mask) · d_head` multiply-adds per head.

use crate::attention::{project_heads, AttentionHeadParams};
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{dot, sp_dense_matmul, softmax_in_place, CsrMatrix, DenseMatrix};
use crate::predictor::{
    lowrank_attention, predict_mask, sparsify_lowrank, ConnectivityMask, PredictorParams,
};

/// How the low-rank attention is sparsified before up-projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Thresholding {
    /// Keep entries strictly above `tau`, falling back to the row maximum.
    #[default]
    Strict,
    /// Keep every nonzero entry.
    Disabled,
}

/// How masked attention weights are normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Softmax over the kept support only; rows sum to 1.
    #[default]
    Renormalized,
    /// Entries of the full softmax at masked positions; rows sum to at most
    /// one. Needs every logit of a row for the normaliser, so it costs dense
    /// QK work and exists for analysis only.
    MaskedFull,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SparsifinerOptions {
    pub thresholding: Thresholding,
    pub normalization: Normalization,
}

/// Sparse attention weights sharing the mask's pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAttention {
    attn: CsrMatrix,
    normalization: Normalization,
}

impl SparseAttention {
    pub fn csr(&self) -> &CsrMatrix {
        &self.attn
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn into_csr(self) -> CsrMatrix {
        self.attn
    }
}

/// `⟨q_i, k_j⟩ / √d_head` at every stored `(i, j)` of the mask.
pub fn masked_qk(q: &DenseMatrix, k: &DenseMatrix, mask: &ConnectivityMask) -> Result<CsrMatrix> {
    check_qk(q, k, mask)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let out = mask.csr().map_values(|i, j, _| dot(q.row(i), k.row(j)) * scale);
    out.validate()?;
    Ok(out)
}

fn check_qk(q: &DenseMatrix, k: &DenseMatrix, mask: &ConnectivityMask) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(dim_mismatch(
            "masked_qk",
            format!("K shaped like Q ({}x{})", q.rows(), q.cols()),
            format!("{}x{}", k.rows(), k.cols()),
        ));
    }
    if mask.n() != q.rows() {
        return Err(dim_mismatch(
            "masked_qk",
            format!("{n}x{n} mask", n = q.rows()),
            format!("{n}x{n}", n = mask.n()),
        ));
    }
    Ok(())
}

/// Max-stabilised softmax over each row's stored logits.
pub fn sparse_row_softmax(logits: &CsrMatrix) -> Result<SparseAttention> {
    if let Some(row) = (0..logits.rows()).find(|&i| logits.row_nnz(i) == 0) {
        return Err(Error::EmptyRow { row });
    }
    let mut attn = logits.clone();
    for i in 0..attn.rows() {
        softmax_in_place(attn.row_values_mut(i), 1.0);
    }
    Ok(SparseAttention {
        attn,
        normalization: Normalization::Renormalized,
    })
}

/// Full-softmax values restricted to the mask, without renormalising.
pub fn masked_full_softmax(q: &DenseMatrix, k: &DenseMatrix, mask: &ConnectivityMask) -> Result<SparseAttention> {
    check_qk(q, k, mask)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut attn = masked_qk(q, k, mask)?;
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows()).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for v in attn.row_values_mut(i) {
            *v = (*v - max).exp() / z;
        }
    }
    Ok(SparseAttention {
        attn,
        normalization: Normalization::MaskedFull,
    })
}

/// `Ã · V` touching only stored attention weights.
pub fn sparse_attention_value(attn: &SparseAttention, v: &DenseMatrix) -> Result<DenseMatrix> {
    if attn.attn.rows() != v.rows() {
        return Err(dim_mismatch(
            "sparse_attention_value",
            format!("V with {} rows", attn.attn.rows()),
            format!("{}x{}", v.rows(), v.cols()),
        ));
    }
    sp_dense_matmul(&attn.attn, v)
}

/// Measured work for one head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadStats {
    pub n: usize,
    pub d_head: usize,
    pub budget: usize,
    pub mask_nnz: usize,
    pub saturated_rows: usize,
    pub qk_macs: u64,
    pub av_macs: u64,
    /// `W_down·K` plus `Q·K_projᵀ`.
    pub lowrank_macs: u64,
    /// Multiply-adds actually performed by the sparse up-projection.
    pub upproj_macs: u64,
}

/// Everything one head produces, kept for inspection and dumps.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub out: DenseMatrix,
    pub a_down: DenseMatrix,
    pub a_down_sparse: CsrMatrix,
    pub mask: ConnectivityMask,
    pub attn: SparseAttention,
    pub stats: HeadStats,
}

fn upproj_work(a_down_sparse: &CsrMatrix, w_up: &CsrMatrix) -> u64 {
    a_down_sparse
        .col_idx()
        .iter()
        .map(|&k| w_up.row_nnz(k) as u64)
        .sum()
}

/// Predict a mask from `(q, k)` and compute sparse attention for one head.
pub fn sparsifiner_head_qkv(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    pred: &PredictorParams,
    opts: SparsifinerOptions,
) -> Result<HeadOutput> {
    let a_down = lowrank_attention(q, k, pred)?;
    let a_down_sparse = match opts.thresholding {
        Thresholding::Strict => sparsify_lowrank(&a_down, pred.tau()),
        Thresholding::Disabled => CsrMatrix::from_dense(&a_down),
    };
    let mask = predict_mask(&a_down_sparse, pred)?;
    let attn = match opts.normalization {
        Normalization::Renormalized => sparse_row_softmax(&masked_qk(q, k, &mask)?)?,
        Normalization::MaskedFull => masked_full_softmax(q, k, &mask)?,
    };
    let out = sparse_attention_value(&attn, v)?;

    let (n, d_head, n_down) = (q.rows() as u64, q.cols() as u64, pred.n_down() as u64);
    let nnz = mask.nnz() as u64;
    let stats = HeadStats {
        n: q.rows(),
        d_head: q.cols(),
        budget: mask.budget(),
        mask_nnz: mask.nnz(),
        saturated_rows: mask.saturated_rows(),
        qk_macs: nnz * d_head,
        av_macs: nnz * v.cols() as u64,
        lowrank_macs: 2 * n * n_down * d_head,
        upproj_macs: upproj_work(&a_down_sparse, pred.w_up()),
    };
    Ok(HeadOutput {
        out,
        a_down,
        a_down_sparse,
        mask,
        attn,
        stats,
    })
}

pub fn sparsifiner_head(
    x: &DenseMatrix,
    head: &AttentionHeadParams,
    pred: &PredictorParams,
    opts: SparsifinerOptions,
) -> Result<HeadOutput> {
    let (q, k, v) = head.project(x)?;
    sparsifiner_head_qkv(&q, &k, &v, pred, opts)
}

#[derive(Clone, Debug)]
pub struct SparsifinerOutput {
    pub out: DenseMatrix,
    pub masks: Vec<ConnectivityMask>,
    pub stats: Vec<HeadStats>,
}

/// Multi-head sparse attention: every head predicts its own mask from the
/// shared predictor, heads are concatenated and projected by `w_o`.
pub fn sparsifiner_mhsa(
    x: &DenseMatrix,
    heads: &[AttentionHeadParams],
    pred: &PredictorParams,
    w_o: &DenseMatrix,
    opts: SparsifinerOptions,
) -> Result<SparsifinerOutput> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("at least one attention head is required".into()));
    }
    let concat: usize = heads.iter().map(|h| h.d_head()).sum();
    if concat != w_o.rows() {
        return Err(dim_mismatch(
            "sparsifiner_mhsa",
            format!("W_o with {concat} rows"),
            format!("{}x{}", w_o.rows(), w_o.cols()),
        ));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut masks = Vec::with_capacity(heads.len());
    let mut stats = Vec::with_capacity(heads.len());
    for h in heads {
        let r = sparsifiner_head(x, h, pred, opts)?;
        outs.push(r.out);
        masks.push(r.mask);
        stats.push(r.stats);
    }
    Ok(SparsifinerOutput {
        out: project_heads(&outs, w_o)?,
        masks,
        stats,
    })
}
