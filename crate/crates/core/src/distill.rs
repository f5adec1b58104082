//! Distillation objectives and predictor-only (phase-1) training.
//!
//! Phase 1 freezes the backbone and fits each layer's `w_down`/`w_up` so
//! that the dense connectivity scores `A_down · W_up` match the teacher's
//! attention maps. Training runs through the dense low-rank softmax and a
//! dense up-projection; thresholding and top-k are applied only at inference.
//! Phase 2 is available as forward loss evaluation only.

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{softmax_rows, CsrMatrix, DenseMatrix};
use crate::predictor::{lowrank_attention, PredictorParams};
use crate::vit::{AttentionMode, Image, Model};

/// Floor applied to both distributions before taking logs in the KL term.
pub const KL_EPS: f64 = 1e-12;

/// Magnitude below which `w_up` entries are dropped after phase 1.
pub const WUP_PRUNE_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_token: f64,
    pub lambda_cls: f64,
    pub lambda_attn: f64,
    pub weight_decay: f64,
}

impl LossWeights {
    /// Predictor-only distillation.
    pub fn phase1() -> Self {
        Self {
            lambda_token: 0.0,
            lambda_cls: 0.0,
            lambda_attn: 1.0,
            weight_decay: 0.05,
        }
    }

    /// Joint fine-tuning weights.
    pub fn phase2() -> Self {
        Self {
            lambda_token: 0.5,
            lambda_cls: 0.5,
            lambda_attn: 0.0,
            weight_decay: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_token", self.lambda_token),
            ("lambda_cls", self.lambda_cls),
            ("lambda_attn", self.lambda_attn),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Teacher signals for one input.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    /// Tokens after the last block.
    pub tokens: DenseMatrix,
    pub class_probs: Vec<f64>,
    /// `attn[layer][head]`, each `n × n` and row-stochastic.
    pub attn: Vec<Vec<DenseMatrix>>,
}

impl TeacherOutputs {
    pub fn validate(&self) -> Result<()> {
        check_distribution(&self.class_probs, "teacher class probabilities")?;
        for (l, heads) in self.attn.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                check_row_stochastic(a, &format!("teacher attention {l}.{h}"))?;
            }
        }
        Ok(())
    }

    /// Runs `model` densely on `image` and records what a frozen teacher
    /// provides.
    pub fn from_model(model: &Model, image: &Image) -> Result<Self> {
        let out = model.forward(image, AttentionMode::Dense)?;
        let mut attn = Vec::with_capacity(model.layers.len());
        for (layer, trace) in model.layers.iter().zip(&out.layers) {
            let heads = layer
                .heads
                .iter()
                .map(|h| {
                    let (q, k, _) = h.project(&trace.attn_input)?;
                    softmax_rows(&q.matmul_transposed(&k)?, h.scale())
                })
                .collect::<Result<Vec<_>>>()?;
            attn.push(heads);
        }
        Ok(Self {
            tokens: out.tokens,
            class_probs: softmax(&out.scores),
            attn,
        })
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} must be nonnegative and finite")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_row_stochastic(a: &DenseMatrix, what: &str) -> Result<()> {
    for i in 0..a.rows() {
        check_distribution(a.row(i), &format!("{what} row {i}"))?;
    }
    Ok(())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-entropy `-log softmax(scores)[label]`.
pub fn loss_cls(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok((lse - scores[label]).max(0.0))
}

fn mse(a: &DenseMatrix, b: &DenseMatrix, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_mismatch(
            op,
            format!("{}x{}", b.rows(), b.cols()),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// Mean squared error between final tokens.
pub fn loss_token_distill(x: &DenseMatrix, x_teach: &DenseMatrix) -> Result<f64> {
    mse(x, x_teach, "loss_token_distill")
}

/// `KL(pred ‖ teach)` with both distributions floored at [`KL_EPS`].
pub fn loss_cls_distill(pred_probs: &[f64], teach_probs: &[f64]) -> Result<f64> {
    if pred_probs.len() != teach_probs.len() {
        return Err(dim_mismatch(
            "loss_cls_distill",
            format!("{} classes", teach_probs.len()),
            format!("{}", pred_probs.len()),
        ));
    }
    check_distribution(pred_probs, "predicted probabilities")?;
    check_distribution(teach_probs, "teacher probabilities")?;
    let kl: f64 = pred_probs
        .iter()
        .zip(teach_probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.max(KL_EPS).ln() - q.max(KL_EPS).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// MSE between predicted connectivity scores and the teacher attention.
pub fn loss_attn_distill(scores: &DenseMatrix, a_teach: &DenseMatrix) -> Result<f64> {
    mse(scores, a_teach, "loss_attn_distill")
}

/// [`loss_attn_distill`] averaged over several layer/head pairs.
pub fn loss_attn_distill_mean(pairs: &[(DenseMatrix, DenseMatrix)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no attention maps supplied".into()));
    }
    let mut total = 0.0;
    for (s, t) in pairs {
        total += loss_attn_distill(s, t)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Sum of squares of the stored basis entries.
pub fn l2_reg(w_up: &CsrMatrix) -> f64 {
    w_up.values().iter().map(|v| v * v).sum()
}

/// Individual loss terms. `cls` is absent when no classification pass ran
/// (predictor-only training).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: Option<f64>,
    pub token: f64,
    pub cls_distill: f64,
    pub attn: f64,
}

/// `cls + λ_token·token + λ_cls·KL + λ_attn·attn`. The basis sparsity term
/// is applied as optimizer weight decay, not here.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(parts.cls.unwrap_or(0.0)
        + weights.lambda_token * parts.token
        + weights.lambda_cls * parts.cls_distill
        + weights.lambda_attn * parts.attn)
}

/// Drops basis entries with `|w| < threshold`; returns the pruned matrix and
/// its density.
pub fn prune_wup(w_up: &CsrMatrix, threshold: f64) -> (CsrMatrix, f64) {
    let rows = (0..w_up.rows())
        .map(|i| w_up.row(i).iter().filter(|&(_, v)| v.abs() >= threshold).collect())
        .collect();
    let pruned = CsrMatrix::from_row_entries(w_up.cols(), rows).expect("pattern subset stays valid");
    let density = pruned.density();
    (pruned, density)
}

/// One head's query/key pair and the teacher attention it should match.
#[derive(Clone, Debug)]
pub struct Phase1Sample {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub teacher: DenseMatrix,
}

impl Phase1Sample {
    pub fn new(q: DenseMatrix, k: DenseMatrix, teacher: DenseMatrix) -> Result<Self> {
        let n = q.rows();
        if k.shape() != q.shape() || teacher.shape() != (n, n) {
            return Err(dim_mismatch(
                "Phase1Sample",
                format!("K {n}x{}, teacher {n}x{n}", q.cols()),
                format!(
                    "K {}x{}, teacher {}x{}",
                    k.rows(),
                    k.cols(),
                    teacher.rows(),
                    teacher.cols()
                ),
            ));
        }
        check_row_stochastic(&teacher, "teacher attention")?;
        Ok(Self { q, k, teacher })
    }
}

/// Gradients of the phase-1 loss.
#[derive(Clone, Debug)]
pub struct Phase1Gradients {
    pub loss: f64,
    pub w_down: DenseMatrix,
    pub w_up: DenseMatrix,
}

fn lowrank_dense(q: &DenseMatrix, k: &DenseMatrix, w_down: &DenseMatrix) -> Result<DenseMatrix> {
    let k_proj = w_down.matmul(k)?;
    softmax_rows(&q.matmul_transposed(&k_proj)?, 1.0 / (q.cols() as f64).sqrt())
}

/// Mean attention-distillation loss over `samples` for dense `w_down`
/// (`n_down × n`) and dense `w_up` (`n_down × n`).
pub fn phase1_loss(samples: &[Phase1Sample], w_down: &DenseMatrix, w_up: &DenseMatrix) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("phase-1 batch is empty".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let scores = lowrank_dense(&s.q, &s.k, w_down)?.matmul(w_up)?;
        total += loss_attn_distill(&scores, &s.teacher)?;
    }
    Ok(total / samples.len() as f64)
}

/// Loss and analytic gradients, backpropagated through the up-projection,
/// the low-rank softmax, and the key down-projection.
pub fn phase1_gradients(
    samples: &[Phase1Sample],
    w_down: &DenseMatrix,
    w_up: &DenseMatrix,
) -> Result<Phase1Gradients> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("phase-1 batch is empty".into()));
    }
    if w_down.shape() != w_up.shape() {
        return Err(dim_mismatch(
            "phase1_gradients",
            format!("W_up {}x{}", w_down.rows(), w_down.cols()),
            format!("{}x{}", w_up.rows(), w_up.cols()),
        ));
    }
    let (n_down, n) = w_down.shape();
    let batch = samples.len() as f64;
    let mut g_down = DenseMatrix::zeros(n_down, n);
    let mut g_up = DenseMatrix::zeros(n_down, n);
    let mut loss = 0.0;

    for s in samples {
        if s.q.rows() != n {
            return Err(dim_mismatch("phase1_gradients", format!("{n} tokens"), format!("{}", s.q.rows())));
        }
        let d_head = s.q.cols();
        let scale = 1.0 / (d_head as f64).sqrt();
        let k_proj = w_down.matmul(&s.k)?;
        let a_down = softmax_rows(&s.q.matmul_transposed(&k_proj)?, scale)?;
        let scores = a_down.matmul(w_up)?;
        loss += loss_attn_distill(&scores, &s.teacher)? / batch;

        // dL/dS for the batch-mean of per-sample MSE over n² entries.
        let coef = 2.0 / ((n * n) as f64 * batch);
        let mut d_scores = scores;
        for (v, t) in d_scores.data_mut().iter_mut().zip(s.teacher.data()) {
            *v = coef * (*v - t);
        }

        // S = A_down · W_up
        let gu = a_down.transpose().matmul(&d_scores)?;
        let d_a = d_scores.matmul_transposed(w_up)?;

        // A_down = softmax(scale · Z), row-wise Jacobian.
        let mut d_z = DenseMatrix::zeros(n, n_down);
        for i in 0..n {
            let a = a_down.row(i);
            let g = d_a.row(i);
            let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
            for (r, out) in d_z.row_mut(i).iter_mut().enumerate() {
                *out = scale * a[r] * (g[r] - inner);
            }
        }

        // Z = Q · K_projᵀ,  K_proj = W_down · K
        let d_kproj = d_z.transpose().matmul(&s.q)?;
        let gd = d_kproj.matmul_transposed(&s.k)?;

        g_up = g_up.add(&gu)?;
        g_down = g_down.add(&gd)?;
    }
    Ok(Phase1Gradients {
        loss,
        w_down: g_down,
        w_up: g_up,
    })
}

/// Plain gradient descent with decoupled weight decay on both predictor
/// matrices. `w_up` is trained dense.
#[derive(Clone, Debug)]
pub struct Phase1Trainer {
    pub w_down: DenseMatrix,
    pub w_up: DenseMatrix,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps_taken: usize,
}

impl Phase1Trainer {
    pub fn new(params: &PredictorParams, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate and weight decay must be finite and >= 0, got {lr}, {weight_decay}"
            )));
        }
        Ok(Self {
            w_down: params.w_down().clone(),
            w_up: params.w_up().to_dense(),
            lr,
            weight_decay,
            steps_taken: 0,
        })
    }

    pub fn loss(&self, samples: &[Phase1Sample]) -> Result<f64> {
        phase1_loss(samples, &self.w_down, &self.w_up)
    }

    /// One update. Returns the loss at the parameters before the update.
    pub fn step(&mut self, samples: &[Phase1Sample]) -> Result<f64> {
        let g = phase1_gradients(samples, &self.w_down, &self.w_up)?;
        let step = self.steps_taken;
        for (tensor, grad) in [("w_down", &g.w_down), ("w_up", &g.w_up)] {
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor, step });
            }
        }
        let (lr, wd) = (self.lr, self.weight_decay);
        for (w, gv) in [(&mut self.w_down, &g.w_down), (&mut self.w_up, &g.w_up)] {
            for (x, d) in w.data_mut().iter_mut().zip(gv.data()) {
                *x -= lr * (d + wd * *x);
            }
        }
        self.steps_taken += 1;
        Ok(g.loss)
    }

    /// Current weights as predictor parameters; exact zeros in `w_up` are
    /// not stored.
    pub fn params(&self, tau: f64, budget: usize) -> Result<PredictorParams> {
        PredictorParams::new(self.w_down.clone(), CsrMatrix::from_dense(&self.w_up), tau, budget)
    }
}

/// A single phase-1 step on `params`.
pub fn phase1_step(
    samples: &[Phase1Sample],
    params: &PredictorParams,
    lr: f64,
    weight_decay: f64,
) -> Result<PredictorParams> {
    let mut t = Phase1Trainer::new(params, lr, weight_decay)?;
    t.step(samples)?;
    if lr == 0.0 {
        return Ok(params.clone());
    }
    t.params(params.tau(), params.budget())
}

/// Dense connectivity scores `A_down · W_up` the predictor assigns.
pub fn connectivity_score_map(q: &DenseMatrix, k: &DenseMatrix, p: &PredictorParams) -> Result<DenseMatrix> {
    lowrank_attention(q, k, p)?.matmul(&p.w_up().to_dense())
}

/// Phase-1 training batches for every layer of `model`: one sample per
/// (image, head), using the dense backbone's queries and keys. Teacher maps
/// come from `teacher(layer, head, image_index)` when it returns `Some`,
/// otherwise from the dense attention itself.
pub fn phase1_batches(
    model: &Model,
    images: &[Image],
    teacher: impl Fn(usize, usize, usize) -> Option<DenseMatrix>,
) -> Result<Vec<Vec<Phase1Sample>>> {
    let mut batches = vec![Vec::new(); model.layers.len()];
    for (idx, image) in images.iter().enumerate() {
        let out = model.forward(image, AttentionMode::Dense)?;
        for (l, (layer, trace)) in model.layers.iter().zip(&out.layers).enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let (q, k, _) = head.project(&trace.attn_input)?;
                let t = match teacher(l, h, idx) {
                    Some(t) => t,
                    None => softmax_rows(&q.matmul_transposed(&k)?, head.scale())?,
                };
                batches[l].push(Phase1Sample::new(q, k, t)?);
            }
        }
    }
    Ok(batches)
}

/// Phase-2 loss terms for one labelled image, evaluated forward only.
pub fn phase2_losses(
    model: &Model,
    image: &Image,
    label: usize,
    teacher: &TeacherOutputs,
    mode: AttentionMode,
) -> Result<LossParts> {
    let out = model.forward(image, mode)?;
    let mut pairs = Vec::new();
    for ((layer, trace), t_heads) in model.layers.iter().zip(&out.layers).zip(&teacher.attn) {
        for (head, t) in layer.heads.iter().zip(t_heads) {
            let (q, k, _) = head.project(&trace.attn_input)?;
            pairs.push((connectivity_score_map(&q, &k, &layer.predictor)?, t.clone()));
        }
    }
    Ok(LossParts {
        cls: Some(loss_cls(&out.scores, label)?),
        token: loss_token_distill(&out.tokens, &teacher.tokens)?,
        cls_distill: loss_cls_distill(&softmax(&out.scores), &teacher.class_probs)?,
        attn: loss_attn_distill_mean(&pairs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_csr, random_stochastic, uniform_matrix, SeededRng};
    use crate::vit::ModelConfig;

    fn sample(rng: &mut SeededRng, n: usize, d: usize) -> Phase1Sample {
        Phase1Sample::new(
            uniform_matrix(rng, n, d, 1.0),
            uniform_matrix(rng, n, d, 1.0),
            random_stochastic(rng, n, n, 2.0),
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((loss_cls(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(loss_cls(&[800.0, 0.0, 0.0], 0).unwrap() < 1e-300);
        assert!(loss_cls(&[1.0, 2.0], 2).is_err());
        // reference: -ln(e^s_l / Σ e^s) computed directly
        let s = [0.2, -1.3, 2.4, 0.7];
        let z: f64 = s.iter().map(|v: &f64| v.exp()).sum();
        assert!((loss_cls(&s, 1).unwrap() - -((-1.3f64).exp() / z).ln()).abs() < 1e-14);
    }

    #[test]
    fn token_mse_cases() {
        let mut rng = SeededRng::new(1);
        let x = uniform_matrix(&mut rng, 4, 3, 1.0);
        assert_eq!(loss_token_distill(&x, &x).unwrap(), 0.0);
        let shifted = x.add(&DenseMatrix::filled(4, 3, 1.0).unwrap()).unwrap();
        assert!((loss_token_distill(&shifted, &x).unwrap() - 1.0).abs() < 1e-15);
        let y = uniform_matrix(&mut rng, 4, 3, 1.0);
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                s += (x.get(i, j) - y.get(i, j)).powi(2);
            }
        }
        assert!((loss_token_distill(&x, &y).unwrap() - s / 12.0).abs() < 1e-15);
        assert!(loss_token_distill(&x, &DenseMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(loss_cls_distill(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((loss_cls_distill(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = [0.1, 0.6, 0.3];
        let q = [0.5, 0.25, 0.25];
        let want: f64 = p.iter().zip(&q).map(|(a, b): (&f64, &f64)| a * (a / b).ln()).sum();
        assert!((loss_cls_distill(&p, &q).unwrap() - want).abs() < 1e-15);
        assert!(loss_cls_distill(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(loss_cls_distill(&[1.0], &[0.5, 0.5]).is_err());
        // zero teacher mass stays finite under the floor
        assert!(loss_cls_distill(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn attention_mse_cases() {
        let mut rng = SeededRng::new(2);
        let t = random_stochastic(&mut rng, 5, 5, 1.0);
        assert_eq!(loss_attn_distill(&t, &t).unwrap(), 0.0);
        let sq: f64 = t.data().iter().map(|v| v * v).sum();
        assert!((loss_attn_distill(&DenseMatrix::zeros(5, 5), &t).unwrap() - sq / 25.0).abs() < 1e-15);
        assert!(loss_attn_distill(&DenseMatrix::zeros(4, 5), &t).is_err());
    }

    #[test]
    fn l2_cases() {
        assert_eq!(l2_reg(&CsrMatrix::zeros(3, 3)), 0.0);
        let one = CsrMatrix::from_row_entries(2, vec![vec![(1, 3.0)]]).unwrap();
        assert_eq!(l2_reg(&one), 9.0);
        let mut rng = SeededRng::new(3);
        let m = random_csr(&mut rng, 6, 9, 0.4, 1.0);
        let dense_sum: f64 = m.to_dense().data().iter().map(|v| v * v).sum();
        assert!((l2_reg(&m) - dense_sum).abs() < 1e-14);
    }

    #[test]
    fn total_loss_weightings() {
        let parts = LossParts {
            cls: Some(1.5),
            token: 0.25,
            cls_distill: 0.75,
            attn: 0.125,
        };
        let zero = LossWeights {
            lambda_token: 0.0,
            lambda_cls: 0.0,
            lambda_attn: 0.0,
            weight_decay: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero).unwrap(), 1.5);
        let p1 = LossParts { cls: None, ..parts };
        assert_eq!(total_loss(&p1, &LossWeights::phase1()).unwrap(), 0.125);
        assert_eq!(total_loss(&parts, &LossWeights::phase2()).unwrap(), 1.5 + 0.5 * 0.25 + 0.5 * 0.75);
        let neg = LossWeights { lambda_attn: -1.0, ..zero };
        assert!(total_loss(&parts, &neg).is_err());
    }

    #[test]
    fn total_loss_is_linear_in_each_weight() {
        let parts = LossParts {
            cls: Some(0.3),
            token: 1.1,
            cls_distill: 0.4,
            attn: 2.2,
        };
        let base = LossWeights::phase2();
        let f = |w: LossWeights| total_loss(&parts, &w).unwrap();
        for l in [0.0, 0.5, 1.0, 3.0] {
            let a = f(LossWeights { lambda_attn: l, ..base });
            assert!((a - (f(base) + l * 2.2)).abs() < 1e-14);
            let t = f(LossWeights { lambda_token: l, ..base });
            assert!((t - (f(LossWeights { lambda_token: 0.0, ..base }) + l * 1.1)).abs() < 1e-14);
        }
    }

    #[test]
    fn prune_cases() {
        let mut rng = SeededRng::new(4);
        let m = random_csr(&mut rng, 5, 12, 0.7, 0.05);
        let (same, _) = prune_wup(&m, 0.0);
        assert_eq!(same, m);
        let (empty, density) = prune_wup(&m, 1.0);
        assert_eq!(empty.nnz(), 0);
        assert_eq!(density, 0.0);
        let (p, density) = prune_wup(&m, 0.02);
        let mut count = 0;
        for v in m.values() {
            if v.abs() >= 0.02 {
                count += 1;
            }
        }
        assert_eq!(p.nnz(), count);
        assert_eq!(density, count as f64 / 60.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut rng = SeededRng::new(5);
        let samples: Vec<_> = (0..2).map(|_| sample(&mut rng, 8, 4)).collect();
        let p = PredictorParams::new(
            uniform_matrix(&mut rng, 4, 8, 0.5),
            random_csr(&mut rng, 4, 8, 0.8, 0.5),
            0.05,
            3,
        )
        .unwrap();
        assert_eq!(phase1_step(&samples, &p, 0.0, 0.05).unwrap(), p);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = SeededRng::new(6);
        let samples: Vec<_> = (0..3).map(|_| sample(&mut rng, 8, 4)).collect();
        let w_down = uniform_matrix(&mut rng, 4, 8, 0.7);
        let w_up = uniform_matrix(&mut rng, 4, 8, 0.7);
        let g = phase1_gradients(&samples, &w_down, &w_up).unwrap();
        assert!((g.loss - phase1_loss(&samples, &w_down, &w_up).unwrap()).abs() < 1e-15);

        let h = 1e-5;
        for which in 0..2 {
            let (base, analytic) = if which == 0 { (&w_down, &g.w_down) } else { (&w_up, &g.w_up) };
            let mut num = Vec::new();
            for idx in 0..base.data().len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.data_mut()[idx] += h;
                minus.data_mut()[idx] -= h;
                let (lp, lm) = if which == 0 {
                    (phase1_loss(&samples, &plus, &w_up).unwrap(), phase1_loss(&samples, &minus, &w_up).unwrap())
                } else {
                    (phase1_loss(&samples, &w_down, &plus).unwrap(), phase1_loss(&samples, &w_down, &minus).unwrap())
                };
                num.push((lp - lm) / (2.0 * h));
            }
            let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            assert!(diff / norm < 1e-4, "tensor {which}: rel err {}", diff / norm);
        }
    }

    #[test]
    fn descent_reduces_loss() {
        let mut rng = SeededRng::new(7);
        let samples: Vec<_> = (0..4).map(|_| sample(&mut rng, 8, 4)).collect();
        let p = PredictorParams::new(
            uniform_matrix(&mut rng, 4, 8, 0.5),
            CsrMatrix::from_dense(&uniform_matrix(&mut rng, 4, 8, 0.5)),
            0.05,
            3,
        )
        .unwrap();
        let mut t = Phase1Trainer::new(&p, 1e-2, 0.05).unwrap();
        let mut prev = t.loss(&samples).unwrap();
        for _ in 0..50 {
            t.step(&samples).unwrap();
            let cur = t.loss(&samples).unwrap();
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let mut rng = SeededRng::new(8);
        let samples = vec![sample(&mut rng, 4, 2)];
        let p = PredictorParams::new(
            DenseMatrix::filled(2, 4, 1e300).unwrap(),
            CsrMatrix::from_dense(&DenseMatrix::filled(2, 4, 1e300).unwrap()),
            0.05,
            2,
        )
        .unwrap();
        let mut t = Phase1Trainer::new(&p, 1.0, 0.0).unwrap();
        assert!(t.step(&samples).is_err());
    }

    #[test]
    fn teacher_outputs_and_phase2_losses() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2.0,
            n_classes: 3,
            predictor: crate::predictor::PredictorConfig {
                n_down: 3,
                tau: 0.05,
                budget: 5,
            },
            linformer_rank: None,
        };
        let m = Model::random(cfg, 9).unwrap();
        let img = Image::random(16, 16, 1);
        let teach = TeacherOutputs::from_model(&m, &img).unwrap();
        teach.validate().unwrap();
        let parts = phase2_losses(&m, &img, 1, &teach, AttentionMode::Dense).unwrap();
        assert_eq!(parts.token, 0.0);
        assert!(parts.cls_distill.abs() < 1e-15);
        assert!(parts.attn > 0.0);
        let total = total_loss(&parts, &LossWeights::phase2()).unwrap();
        assert!((total - parts.cls.unwrap()).abs() < 1e-12);

        let batches = phase1_batches(&m, &[img], |_, _, _| None).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 2);
        assert_eq!(batches[1][1].teacher, teach.attn[1][1]);
    }
}
