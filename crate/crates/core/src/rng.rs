//! Seeded random generation for synthetic models and test instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{CsrMatrix, DenseMatrix};

/// Deterministic generator; identical seeds give identical streams on every
/// platform.
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen::<f64>() < p
    }

    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.0.gen())
    }
}

/// Symmetric uniform matrix with entries in `[-bound, bound)`.
pub fn uniform_matrix(rng: &mut SeededRng, rows: usize, cols: usize, bound: f64) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    DenseMatrix::new(rows, cols, data).expect("finite by construction")
}

/// Fan-in scaled initialisation: `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    uniform_matrix(rng, rows, cols, 1.0 / (rows.max(1) as f64).sqrt())
}

/// Random CSR matrix where each entry is stored with probability `density`.
pub fn random_csr(rng: &mut SeededRng, rows: usize, cols: usize, density: f64, bound: f64) -> CsrMatrix {
    let mut entries = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::new();
        for j in 0..cols {
            if rng.bernoulli(density) {
                let mut v = rng.uniform(-bound, bound);
                if v == 0.0 {
                    v = bound;
                }
                row.push((j, v));
            }
        }
        entries.push(row);
    }
    CsrMatrix::from_row_entries(cols, entries).expect("sorted by construction")
}

/// Row-stochastic matrix built from softmax of random logits.
pub fn random_stochastic(rng: &mut SeededRng, rows: usize, cols: usize, spread: f64) -> DenseMatrix {
    let logits = uniform_matrix(rng, rows, cols, spread);
    crate::linalg::softmax_rows(&logits, 1.0).expect("nonempty")
}
