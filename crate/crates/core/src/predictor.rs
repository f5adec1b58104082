//! Connectivity-mask predictor.
//!
//! A head's attention is approximated at low rank by compressing the keys
//! along the token axis with `w_down`. The approximation is thresholded,
//! projected back to `n` columns through the sparse basis `w_up`, and the
//! top `budget` scores of every query row become the connectivity mask.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{softmax_rows, spsp_rowscore, top_k_row, CsrMatrix, DenseMatrix};

/// Scalar predictor hyperparameters, stored alongside model configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub n_down: usize,
    pub tau: f64,
    pub budget: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            n_down: 32,
            tau: 0.05,
            budget: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub(crate) w_down: DenseMatrix,
    pub(crate) w_up: CsrMatrix,
    pub(crate) tau: f64,
    pub(crate) budget: usize,
}

impl PredictorParams {
    /// `w_down` and `w_up` are both `n_down × n`.
    pub fn new(w_down: DenseMatrix, w_up: CsrMatrix, tau: f64, budget: usize) -> Result<Self> {
        if w_down.rows() == 0 {
            return Err(Error::InvalidArgument("n_down must be at least 1".into()));
        }
        if w_up.shape() != w_down.shape() {
            return Err(dim_mismatch(
                "PredictorParams::new",
                format!("W_up {}x{}", w_down.rows(), w_down.cols()),
                format!("{}x{}", w_up.rows(), w_up.cols()),
            ));
        }
        check_tau(tau)?;
        check_budget(budget, w_down.cols())?;
        Ok(Self {
            w_down,
            w_up,
            tau,
            budget,
        })
    }

    pub fn w_down(&self) -> &DenseMatrix {
        &self.w_down
    }

    pub fn w_up(&self) -> &CsrMatrix {
        &self.w_up
    }

    pub fn n_down(&self) -> usize {
        self.w_down.rows()
    }

    /// Sequence length the predictor was built for.
    pub fn n_tokens(&self) -> usize {
        self.w_down.cols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn config(&self) -> PredictorConfig {
        PredictorConfig {
            n_down: self.n_down(),
            tau: self.tau,
            budget: self.budget,
        }
    }

    /// Fraction of stored basis entries.
    pub fn w_up_density(&self) -> f64 {
        self.w_up.density()
    }

    pub fn with_budget(&self, budget: usize) -> Result<Self> {
        check_budget(budget, self.n_tokens())?;
        Ok(Self {
            budget,
            ..self.clone()
        })
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { tau, ..self.clone() })
    }

    pub fn with_w_up(&self, w_up: CsrMatrix) -> Result<Self> {
        Self::new(self.w_down.clone(), w_up, self.tau, self.budget)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

fn check_budget(budget: usize, n: usize) -> Result<()> {
    if budget < 1 || budget > n {
        return Err(Error::InvalidArgument(format!(
            "budget must lie in [1, {n}], got {budget}"
        )));
    }
    Ok(())
}

/// Binary `n × n` connectivity mask. Every row holds between 1 and `budget`
/// entries, all equal to 1, and always includes its diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMask {
    mask: CsrMatrix,
    budget: usize,
}

impl ConnectivityMask {
    /// Builds a mask from per-row column lists, checking the invariants.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>, budget: usize) -> Result<Self> {
        if rows.len() != n {
            return Err(dim_mismatch("ConnectivityMask", format!("{n} rows"), format!("{}", rows.len())));
        }
        let entries = rows
            .into_iter()
            .map(|r| r.into_iter().map(|c| (c, 1.0)).collect())
            .collect();
        let m = Self {
            mask: CsrMatrix::from_row_entries(n, entries)?,
            budget,
        };
        m.validate()?;
        Ok(m)
    }

    /// Every query connected to every key.
    pub fn full(n: usize) -> Self {
        let rows = (0..n).map(|_| (0..n).map(|c| (c, 1.0)).collect()).collect();
        Self {
            mask: CsrMatrix::from_row_entries(n, rows).expect("sorted"),
            budget: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let n = self.mask.rows();
        if self.mask.cols() != n {
            return Err(Error::MalformedCsr(format!(
                "mask must be square, got {}x{}",
                n,
                self.mask.cols()
            )));
        }
        if self.mask.values().iter().any(|&v| v != 1.0) {
            return Err(Error::MalformedCsr("mask values must all be 1".into()));
        }
        for i in 0..n {
            let row = self.mask.row(i);
            if row.is_empty() || row.len() > self.budget {
                return Err(Error::MalformedCsr(format!(
                    "mask row {i} has {} entries, budget {}",
                    row.len(),
                    self.budget
                )));
            }
            if !row.contains(i) {
                return Err(Error::MalformedCsr(format!("mask row {i} misses its diagonal")));
            }
        }
        Ok(())
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.mask.rows()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn nnz(&self) -> usize {
        self.mask.nnz()
    }

    /// Entries used per row.
    pub fn budget_used(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.mask.row_nnz(i)).collect()
    }

    pub fn row_indices(&self, i: usize) -> &[usize] {
        self.mask.row(i).cols
    }

    /// Number of rows holding exactly `budget` entries.
    pub fn saturated_rows(&self) -> usize {
        (0..self.n()).filter(|&i| self.mask.row_nnz(i) == self.budget).count()
    }
}

/// Low-rank attention `softmax(Q (W_down K)ᵀ / √d_head)`, shape `n × n_down`.
pub fn lowrank_attention(q: &DenseMatrix, k: &DenseMatrix, p: &PredictorParams) -> Result<DenseMatrix> {
    if q.shape() != k.shape() {
        return Err(dim_mismatch(
            "lowrank_attention",
            format!("K shaped like Q ({}x{})", q.rows(), q.cols()),
            format!("{}x{}", k.rows(), k.cols()),
        ));
    }
    if p.w_down.cols() != k.rows() {
        return Err(dim_mismatch(
            "lowrank_attention",
            format!("W_down with {} columns", k.rows()),
            format!("{}x{}", p.w_down.rows(), p.w_down.cols()),
        ));
    }
    let k_proj = p.w_down.matmul(k)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    softmax_rows(&q.matmul_transposed(&k_proj)?, scale)
}

/// Keeps entries strictly above `tau`. A row with no such entry keeps its
/// largest entry (lowest column on ties).
pub fn sparsify_lowrank(a_down: &DenseMatrix, tau: f64) -> CsrMatrix {
    let mut rows = Vec::with_capacity(a_down.rows());
    for i in 0..a_down.rows() {
        let row = a_down.row(i);
        let mut kept: Vec<(usize, f64)> =
            row.iter().copied().enumerate().filter(|&(_, v)| v > tau).collect();
        if kept.is_empty() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if !row.is_empty() {
                kept.push((best, row[best]));
            }
        }
        rows.push(kept);
    }
    CsrMatrix::from_row_entries(a_down.cols(), rows).expect("ascending columns")
}

/// Connectivity scores `Ã_down · W_up` (sparse-sparse product), `n × n`.
pub fn connectivity_scores(a_down_sparse: &CsrMatrix, p: &PredictorParams) -> Result<CsrMatrix> {
    if a_down_sparse.cols() != p.w_up.rows() {
        return Err(dim_mismatch(
            "predict_mask",
            format!("low-rank attention with {} columns", p.w_up.rows()),
            format!("{}x{}", a_down_sparse.rows(), a_down_sparse.cols()),
        ));
    }
    if a_down_sparse.rows() != p.w_up.cols() {
        return Err(dim_mismatch(
            "predict_mask",
            format!("{} query rows", p.w_up.cols()),
            format!("{}", a_down_sparse.rows()),
        ));
    }
    spsp_rowscore(a_down_sparse, &p.w_up)
}

/// Top-`budget` positive connectivity scores per row, binarised.
///
/// The diagonal is always part of the mask: if the selection misses it, it
/// replaces the lowest-scoring selected column when the row is already at
/// budget, otherwise it is added.
pub fn predict_mask(a_down_sparse: &CsrMatrix, p: &PredictorParams) -> Result<ConnectivityMask> {
    let scores = connectivity_scores(a_down_sparse, p)?;
    mask_from_scores(&scores, p.budget)
}

pub fn mask_from_scores(scores: &CsrMatrix, budget: usize) -> Result<ConnectivityMask> {
    if budget < 1 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let n = scores.rows();
    if scores.cols() != n {
        return Err(dim_mismatch("mask_from_scores", format!("{n}x{n} scores"), format!("{}x{}", n, scores.cols())));
    }
    let budget = budget.min(n.max(1));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut sel = top_k_row(scores.row(i), budget)?;
        if !sel.contains(&i) {
            if sel.len() == budget {
                sel.pop();
            }
            sel.push(i);
        }
        sel.sort_unstable();
        rows.push(sel);
    }
    ConnectivityMask::from_rows(n, rows, budget)
}

/// `⌈keep_rate · n⌉`. Products within 1e-9 of an integer snap to it first.
pub fn budget_from_keep_rate(keep_rate: f64, n: usize) -> Result<usize> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep rate must lie in (0, 1], got {keep_rate}"
        )));
    }
    let product = keep_rate * n as f64;
    let nearest = product.round();
    let b = if (product - nearest).abs() <= 1e-9 * product.max(1.0) {
        nearest
    } else {
        product.ceil()
    };
    Ok((b as usize).max(1).min(n.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{naive_attention_head, AttentionHeadParams};
    use crate::rng::{random_csr, random_stochastic, uniform_matrix, SeededRng};
    use proptest::prelude::*;

    fn params(rng: &mut SeededRng, n: usize, n_down: usize, budget: usize, density: f64) -> PredictorParams {
        let w_down = uniform_matrix(rng, n_down, n, 1.0);
        let w_up = random_csr(rng, n_down, n, density, 1.0);
        PredictorParams::new(w_down, w_up, 0.05, budget).unwrap()
    }

    #[test]
    fn params_validation() {
        let w = DenseMatrix::zeros(2, 4);
        let up = CsrMatrix::zeros(2, 4);
        assert!(PredictorParams::new(w.clone(), up.clone(), 0.0, 2).is_err());
        assert!(PredictorParams::new(w.clone(), up.clone(), 1.0, 2).is_err());
        assert!(PredictorParams::new(w.clone(), up.clone(), 0.05, 0).is_err());
        assert!(PredictorParams::new(w.clone(), up.clone(), 0.05, 5).is_err());
        assert!(PredictorParams::new(w.clone(), CsrMatrix::zeros(3, 4), 0.05, 2).is_err());
        assert!(PredictorParams::new(DenseMatrix::zeros(0, 4), CsrMatrix::zeros(0, 4), 0.05, 2).is_err());
        assert!(PredictorParams::new(w, up, 0.05, 4).is_ok());
    }

    #[test]
    fn full_rank_lowrank_attention_is_full_attention() {
        let mut rng = SeededRng::new(1);
        let head = AttentionHeadParams::new(
            uniform_matrix(&mut rng, 4, 3, 1.0),
            uniform_matrix(&mut rng, 4, 3, 1.0),
            uniform_matrix(&mut rng, 4, 3, 1.0),
        )
        .unwrap();
        let x = uniform_matrix(&mut rng, 6, 4, 1.0);
        let (q, k, _) = head.project(&x).unwrap();
        let p = PredictorParams::new(DenseMatrix::identity(6), CsrMatrix::identity(6), 0.05, 6).unwrap();
        let a_down = lowrank_attention(&q, &k, &p).unwrap();
        let (a, _) = naive_attention_head(&x, &head).unwrap();
        assert!(a_down.max_abs_diff(&a).unwrap() < 1e-10);
    }

    #[test]
    fn zero_query_gives_uniform_rows() {
        let mut rng = SeededRng::new(2);
        let p = params(&mut rng, 8, 4, 2, 0.5);
        let q = DenseMatrix::zeros(8, 3);
        let k = uniform_matrix(&mut rng, 8, 3, 1.0);
        let a = lowrank_attention(&q, &k, &p).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn lowrank_matches_step_by_step() {
        let mut rng = SeededRng::new(3);
        let p = params(&mut rng, 8, 4, 2, 0.5);
        let q = uniform_matrix(&mut rng, 8, 3, 1.0);
        let k = uniform_matrix(&mut rng, 8, 3, 1.0);
        let a = lowrank_attention(&q, &k, &p).unwrap();
        for i in 0..8 {
            let logits: Vec<f64> = (0..4)
                .map(|r| {
                    (0..3)
                        .map(|t| {
                            let kp: f64 = (0..8).map(|j| p.w_down.get(r, j) * k.get(j, t)).sum();
                            q.get(i, t) * kp
                        })
                        .sum::<f64>()
                        / 3f64.sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for r in 0..4 {
                assert!((a.get(i, r) - logits[r].exp() / z).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lowrank_rejects_wrong_token_count() {
        let mut rng = SeededRng::new(4);
        let p = params(&mut rng, 8, 4, 2, 0.5);
        let q = DenseMatrix::zeros(7, 3);
        assert!(lowrank_attention(&q, &q, &p).is_err());
    }

    #[test]
    fn uniform_row_falls_back_to_first_max() {
        let a = DenseMatrix::filled(1, 32, 1.0 / 32.0).unwrap();
        let s = sparsify_lowrank(&a, 0.05);
        assert_eq!(s.nnz(), 1);
        assert_eq!(s.row(0).cols, &[0]);
    }

    #[test]
    fn direct_threshold() {
        let a = DenseMatrix::from_rows(&[[0.9, 0.1, 0.0, 0.0]]).unwrap();
        let s = sparsify_lowrank(&a, 0.05);
        assert_eq!(s.row(0).cols, &[0, 1]);
        assert_eq!(s.row(0).values, &[0.9, 0.1]);
    }

    #[test]
    fn threshold_is_strict() {
        let a = DenseMatrix::from_rows(&[[0.05, 0.95]]).unwrap();
        assert_eq!(sparsify_lowrank(&a, 0.05).row(0).cols, &[1]);
    }

    #[test]
    fn threshold_count_matches_scalar_loop() {
        let mut rng = SeededRng::new(5);
        let a = random_stochastic(&mut rng, 40, 32, 3.0);
        let s = sparsify_lowrank(&a, 0.05);
        let mut expect = 0;
        for i in 0..40 {
            let mut c = 0;
            for j in 0..32 {
                if a.get(i, j) > 0.05 {
                    c += 1;
                }
            }
            expect += c.max(1);
        }
        assert_eq!(s.nnz(), expect);
    }

    #[test]
    fn identity_basis_passes_lowrank_ranking_through() {
        let mut rng = SeededRng::new(6);
        let n = 10;
        // Diagonal-dominant low-rank attention: each row peaks on its own index.
        let mut a = random_stochastic(&mut rng, n, n, 0.5);
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        let a_sparse = CsrMatrix::from_dense(&a);
        let p = PredictorParams::new(DenseMatrix::identity(n), CsrMatrix::identity(n), 0.05, 3).unwrap();
        let m = predict_mask(&a_sparse, &p).unwrap();
        for i in 0..n {
            let mut expect = top_k_row(a_sparse.row(i), 3).unwrap();
            expect.sort_unstable();
            assert_eq!(m.row_indices(i), &expect[..]);
        }
    }

    #[test]
    fn full_budget_keeps_every_positive_column() {
        let mut rng = SeededRng::new(7);
        let n = 12;
        let w_up = CsrMatrix::from_dense(&DenseMatrix::filled(4, n, 0.3).unwrap());
        let p = PredictorParams::new(uniform_matrix(&mut rng, 4, n, 1.0), w_up, 0.05, n).unwrap();
        let a = CsrMatrix::from_dense(&random_stochastic(&mut rng, n, 4, 1.0));
        let m = predict_mask(&a, &p).unwrap();
        assert_eq!(m.nnz(), n * n);
        assert!(m.csr().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_mask_matches_dense_sort_oracle() {
        let mut rng = SeededRng::new(8);
        let (n, n_down, budget) = (16, 4, 4);
        let p = params(&mut rng, n, n_down, budget, 0.6);
        let a = sparsify_lowrank(&random_stochastic(&mut rng, n, n_down, 2.0), 0.05);
        let m = predict_mask(&a, &p).unwrap();

        let dense_scores = a.to_dense().matmul(&p.w_up.to_dense()).unwrap();
        for i in 0..n {
            let mut cand: Vec<(usize, f64)> =
                dense_scores.row(i).iter().copied().enumerate().filter(|e| e.1 > 0.0).collect();
            cand.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            let mut sel: Vec<usize> = cand.iter().take(budget).map(|e| e.0).collect();
            if !sel.contains(&i) {
                if sel.len() == budget {
                    sel.pop();
                }
                sel.push(i);
            }
            sel.sort_unstable();
            assert_eq!(m.row_indices(i), &sel[..], "row {i}");
        }
    }

    #[test]
    fn empty_score_rows_fall_back_to_diagonal() {
        let p = PredictorParams::new(DenseMatrix::zeros(2, 5), CsrMatrix::zeros(2, 5), 0.05, 3).unwrap();
        let a = sparsify_lowrank(&DenseMatrix::filled(5, 2, 0.5).unwrap(), 0.05);
        let m = predict_mask(&a, &p).unwrap();
        for i in 0..5 {
            assert_eq!(m.row_indices(i), &[i]);
        }
    }

    #[test]
    fn keep_rate_budgets() {
        assert_eq!(budget_from_keep_rate(0.2, 197).unwrap(), 40);
        assert_eq!(budget_from_keep_rate(1.0, 197).unwrap(), 197);
        assert_eq!(budget_from_keep_rate(0.05, 197).unwrap(), 10);
        assert_eq!(budget_from_keep_rate(0.25, 4).unwrap(), 1);
        assert_eq!(budget_from_keep_rate(0.01, 197).unwrap(), 2);
        assert!(budget_from_keep_rate(0.0, 197).is_err());
        assert!(budget_from_keep_rate(1.5, 197).is_err());
        assert!(budget_from_keep_rate(f64::NAN, 197).is_err());
    }

    proptest! {
        #[test]
        fn mask_invariants_and_monotonicity(seed in any::<u64>(), n in 2usize..24, n_down in 1usize..8,
                                            b1 in 1usize..24, b2 in 1usize..24) {
            let mut rng = SeededRng::new(seed);
            let (b1, b2) = (b1.min(n), b2.min(n));
            let (lo, hi) = (b1.min(b2), b1.max(b2));
            let p = params(&mut rng, n, n_down, lo, 0.4);
            let a = sparsify_lowrank(&random_stochastic(&mut rng, n, n_down, 2.0), 0.05);
            let m_lo = predict_mask(&a, &p).unwrap();
            let m_hi = predict_mask(&a, &p.with_budget(hi).unwrap()).unwrap();
            prop_assert!(m_lo.validate().is_ok());
            prop_assert!(m_hi.validate().is_ok());
            for i in 0..n {
                for c in m_lo.row_indices(i) {
                    prop_assert!(m_hi.row_indices(i).contains(c));
                }
            }
        }

        #[test]
        fn selection_is_scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let p = params(&mut rng, 12, 4, 3, 0.5);
            let a = sparsify_lowrank(&random_stochastic(&mut rng, 12, 4, 2.0), 0.05);
            let scores = connectivity_scores(&a, &p).unwrap();
            let scaled = scores.map_values(|_, _, v| v * s);
            prop_assert_eq!(mask_from_scores(&scores, 3).unwrap(), mask_from_scores(&scaled, 3).unwrap());
        }
    }
}
