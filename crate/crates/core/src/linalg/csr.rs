use std::cmp::Ordering;

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::DenseMatrix;

/// Compressed sparse row matrix.
///
/// Invariants, enforced by every constructor:
/// `row_ptr[0] == 0`, `row_ptr` non-decreasing with `row_ptr[rows] == nnz`,
/// column indices strictly increasing within a row and `< cols`, and all
/// stored values finite.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Borrowed view of one CSR row.
#[derive(Clone, Copy, Debug)]
pub struct RowView<'a> {
    pub cols: &'a [usize],
    pub values: &'a [f64],
}

impl<'a> RowView<'a> {
    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.cols.iter().copied().zip(self.values.iter().copied())
    }

    pub fn contains(&self, col: usize) -> bool {
        self.cols.binary_search(&col).is_ok()
    }
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedCsr(msg));
        if self.row_ptr.len() != self.rows + 1 {
            return bad(format!(
                "row_ptr has length {}, expected {}",
                self.row_ptr.len(),
                self.rows + 1
            ));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] != 0".into());
        }
        let nnz = self.row_ptr[self.rows];
        if self.col_idx.len() != nnz || self.values.len() != nnz {
            return bad(format!(
                "nnz {nnz} but {} column indices and {} values",
                self.col_idx.len(),
                self.values.len()
            ));
        }
        for i in 0..self.rows {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            if s > e {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let cols = &self.col_idx[s..e];
            if let Some(&c) = cols.iter().find(|&&c| c >= self.cols) {
                return bad(format!("column {c} out of range in row {i}"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("columns not strictly increasing in row {i}"));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CSR values".into()));
        }
        Ok(())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Stores every nonzero entry of `dense`.
    pub fn from_dense(dense: &DenseMatrix) -> Self {
        Self::from_dense_filtered(dense, |v| v != 0.0)
    }

    /// Stores the entries of `dense` for which `keep` returns true.
    pub fn from_dense_filtered(dense: &DenseMatrix, mut keep: impl FnMut(f64) -> bool) -> Self {
        let mut row_ptr = Vec::with_capacity(dense.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..dense.rows() {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if keep(v) {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: dense.rows(),
            cols: dense.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Builds from per-row `(col, value)` lists. Entries within a row are
    /// sorted; duplicate columns are rejected.
    pub fn from_row_entries(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        let n_rows = rows.len();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self::new(n_rows, cols, row_ptr, col_idx, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Fraction of stored entries, `nnz / (rows · cols)`.
    pub fn density(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            0.0
        } else {
            self.nnz() as f64 / total as f64
        }
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> RowView<'_> {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        RowView {
            cols: &self.col_idx[s..e],
            values: &self.values[s..e],
        }
    }

    #[inline]
    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let r = self.row(i);
        r.cols.binary_search(&j).ok().map(|p| r.values[p])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter() {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Same pattern, values replaced by `f(row, col, value)`.
    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> CsrMatrix {
        let mut values = Vec::with_capacity(self.nnz());
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter() {
                values.push(f(i, j, v));
            }
        }
        CsrMatrix {
            values,
            ..self.clone()
        }
    }

    pub(crate) fn row_values_mut(&mut self, i: usize) -> &mut [f64] {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        &mut self.values[s..e]
    }

    /// True if both matrices store exactly the same positions.
    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }
}

/// Indices of the `k` largest positive entries of a sparse row.
///
/// Ordering is by value descending, then column ascending. Zero and negative
/// entries are never selected, so fewer than `k` indices come back when the
/// row has fewer positive entries.
pub fn top_k_row(row: RowView<'_>, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top_k_row: k must be at least 1".into()));
    }
    let mut cand: Vec<(usize, f64)> = row.iter().filter(|&(_, v)| v > 0.0).collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
    };
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    Ok(cand.into_iter().map(|(c, _)| c).collect())
}

/// Sparse-sparse product `a · b` (row-wise Gustavson).
///
/// Work is proportional to the sum, over the stored entries `a[i,k]`, of the
/// number of stored entries in row `k` of `b`. Entries that cancel to exactly
/// zero are not stored.
pub fn spsp_rowscore(a: &CsrMatrix, b: &CsrMatrix) -> Result<CsrMatrix> {
    if a.cols != b.rows {
        return Err(dim_mismatch(
            "spsp_rowscore",
            format!("rhs with {} rows", a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut acc = vec![0.0; b.cols];
    let mut seen = vec![usize::MAX; b.cols];
    let mut touched = Vec::new();

    let mut row_ptr = Vec::with_capacity(a.rows + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..a.rows {
        touched.clear();
        for (k, aik) in a.row(i).iter() {
            for (j, bkj) in b.row(k).iter() {
                if seen[j] != i {
                    seen[j] = i;
                    acc[j] = 0.0;
                    touched.push(j);
                }
                acc[j] += aik * bkj;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            if acc[j] != 0.0 {
                col_idx.push(j);
                values.push(acc[j]);
            }
        }
        row_ptr.push(col_idx.len());
    }
    let out = CsrMatrix {
        rows: a.rows,
        cols: b.cols,
        row_ptr,
        col_idx,
        values,
    };
    if out.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spsp_rowscore".into()));
    }
    Ok(out)
}

/// Sparse-dense product touching only the stored entries of `a`;
/// performs exactly `nnz(a) · b.cols()` multiply-adds.
pub fn sp_dense_matmul(a: &CsrMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows() {
        return Err(dim_mismatch(
            "sp_dense_matmul",
            format!("rhs with {} rows", a.cols),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols());
    for i in 0..a.rows {
        let out_row = out.row_mut(i);
        for (k, aik) in a.row(i).iter() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out.check_finite("sp_dense_matmul")?;
    Ok(out)
}
