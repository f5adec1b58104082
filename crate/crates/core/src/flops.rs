//! Analytic multiply-accumulate accounting for attention.
//!
//! One MAC counts as one FLOP. Only attention-matrix construction and the
//! attention-value product are counted (plus predictor overhead for the
//! sparse model and token projections for Linformer); QKV/output
//! projections and softmax are excluded.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::predictor::budget_from_keep_rate;
use crate::sparse_mhsa::HeadStats;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub qk_macs: u64,
    pub av_macs: u64,
    pub predictor_macs: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.qk_macs + self.av_macs + self.predictor_macs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub per_layer: Vec<LayerFlops>,
    pub total_macs: u64,
}

/// Share of the total spent in each stage, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Breakdown {
    pub qk_pct: f64,
    pub av_pct: f64,
    pub predictor_pct: f64,
}

impl FlopReport {
    fn from_layers(per_layer: Vec<LayerFlops>) -> Self {
        let total_macs = per_layer.iter().map(LayerFlops::total).sum();
        Self { per_layer, total_macs }
    }

    fn uniform(layer: LayerFlops, n_layers: usize) -> Self {
        Self::from_layers(vec![layer; n_layers])
    }

    pub fn mflops(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    pub fn qk_macs(&self) -> u64 {
        self.per_layer.iter().map(|l| l.qk_macs).sum()
    }

    pub fn av_macs(&self) -> u64 {
        self.per_layer.iter().map(|l| l.av_macs).sum()
    }

    pub fn predictor_macs(&self) -> u64 {
        self.per_layer.iter().map(|l| l.predictor_macs).sum()
    }

    pub fn breakdown(&self) -> Breakdown {
        let t = self.total_macs.max(1) as f64;
        Breakdown {
            qk_pct: 100.0 * self.qk_macs() as f64 / t,
            av_pct: 100.0 * self.av_macs() as f64 / t,
            predictor_pct: 100.0 * self.predictor_macs() as f64 / t,
        }
    }
}

/// `n² · d_model` MACs each for QKᵀ and AV, per layer.
pub fn dense_mhsa_flops(n: usize, d_model: usize, n_layers: usize) -> FlopReport {
    let (n, d) = (n as u64, d_model as u64);
    FlopReport::uniform(
        LayerFlops {
            qk_macs: n * n * d,
            av_macs: n * n * d,
            predictor_macs: 0,
        },
        n_layers,
    )
}

/// Which query rows are charged the budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlopAccounting {
    /// Every query row attends to `budget` keys. This is what the mask
    /// predictor in this crate produces, and what measured counts are
    /// compared against.
    #[default]
    Uniform,
    /// The class-token query row attends densely to all `n` keys; the
    /// remaining `n - 1` patch rows are budgeted. This matches the published
    /// DeiT-S budget sweep more closely.
    DenseClsRow,
}

/// Sparse MHSA cost: masked QK and sparse AV over the budgeted rows, plus
/// the predictor's low-rank attention (`2·n·n_down·d_model`) and the
/// up-projection counted as a dense `n·n_down·n` product.
pub fn sparsifiner_mhsa_flops(
    n: usize,
    d_model: usize,
    n_down: usize,
    budget: usize,
    n_layers: usize,
) -> Result<FlopReport> {
    sparsifiner_mhsa_flops_with(n, d_model, n_down, budget, n_layers, FlopAccounting::Uniform)
}

pub fn sparsifiner_mhsa_flops_with(
    n: usize,
    d_model: usize,
    n_down: usize,
    budget: usize,
    n_layers: usize,
    accounting: FlopAccounting,
) -> Result<FlopReport> {
    if budget > n {
        return Err(Error::InvalidArgument(format!("budget {budget} exceeds {n} tokens")));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let (n, d, nd, b) = (n as u64, d_model as u64, n_down as u64, budget as u64);
    let attended = match accounting {
        FlopAccounting::Uniform => n * b,
        FlopAccounting::DenseClsRow => (n - 1) * b + n,
    };
    Ok(FlopReport::uniform(
        LayerFlops {
            qk_macs: attended * d,
            av_macs: attended * d,
            predictor_macs: 2 * n * nd * d + n * nd * n,
        },
        n_layers,
    ))
}

/// Linformer cost: K/V token projections `2·k·n·d_model` (reported as
/// `predictor_macs`), then `n·k·d_model` each for QK and AV.
pub fn linformer_mhsa_flops(n: usize, d_model: usize, k_lin: usize, n_layers: usize) -> FlopReport {
    let (n, d, k) = (n as u64, d_model as u64, k_lin as u64);
    FlopReport::uniform(
        LayerFlops {
            qk_macs: n * k * d,
            av_macs: n * k * d,
            predictor_macs: 2 * k * n * d,
        },
        n_layers,
    )
}

/// Masked QK and AV MACs measured for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MeasuredLayer {
    pub qk_macs: u64,
    pub av_macs: u64,
    pub saturated: bool,
}

impl MeasuredLayer {
    pub fn from_heads(heads: &[HeadStats]) -> Self {
        Self {
            qk_macs: heads.iter().map(|h| h.qk_macs).sum(),
            av_macs: heads.iter().map(|h| h.av_macs).sum(),
            saturated: heads.iter().all(|h| h.saturated_rows == h.n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerDiscrepancy {
    pub analytic_qk: u64,
    pub measured_qk: u64,
    pub analytic_av: u64,
    pub measured_av: u64,
}

impl LayerDiscrepancy {
    pub fn within_analytic(&self) -> bool {
        self.measured_qk <= self.analytic_qk && self.measured_av <= self.analytic_av
    }

    pub fn exact(&self) -> bool {
        self.measured_qk == self.analytic_qk && self.measured_av == self.analytic_av
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub per_layer: Vec<LayerDiscrepancy>,
    pub analytic_macs: u64,
    pub measured_macs: u64,
}

impl Discrepancy {
    /// Analytic over measured masked MACs; 1 when they agree.
    pub fn overcount_ratio(&self) -> f64 {
        if self.measured_macs == 0 {
            return f64::INFINITY;
        }
        self.analytic_macs as f64 / self.measured_macs as f64
    }

    pub fn measured_within_analytic(&self) -> bool {
        self.per_layer.iter().all(LayerDiscrepancy::within_analytic)
    }

    pub fn is_zero(&self) -> bool {
        self.per_layer.iter().all(LayerDiscrepancy::exact)
    }
}

/// Compares the masked QK/AV terms of an analytic report with measured
/// per-layer counts. Measured counts fall below the analytic ones only when
/// rows end up with fewer than `budget` connections.
pub fn measured_vs_analytic(report: &FlopReport, measured: &[MeasuredLayer]) -> Result<Discrepancy> {
    if report.per_layer.len() != measured.len() {
        return Err(Error::InvalidArgument(format!(
            "report has {} layers, measurements have {}",
            report.per_layer.len(),
            measured.len()
        )));
    }
    let per_layer: Vec<LayerDiscrepancy> = report
        .per_layer
        .iter()
        .zip(measured)
        .map(|(a, m)| LayerDiscrepancy {
            analytic_qk: a.qk_macs,
            measured_qk: m.qk_macs,
            analytic_av: a.av_macs,
            measured_av: m.av_macs,
        })
        .collect();
    Ok(Discrepancy {
        analytic_macs: per_layer.iter().map(|l| l.analytic_qk + l.analytic_av).sum(),
        measured_macs: per_layer.iter().map(|l| l.measured_qk + l.measured_av).sum(),
        per_layer,
    })
}

/// One row of a keep-rate sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    pub keep_rate: f64,
    pub budget: usize,
    pub qk_macs: u64,
    pub av_macs: u64,
    pub predictor_macs: u64,
    pub total_mflops: f64,
}

/// MHSA cost for each keep rate. A keep rate of exactly 1 keeps every
/// connection, so no predictor runs and the row is the dense baseline.
pub fn keep_rate_table(
    n: usize,
    d_model: usize,
    n_down: usize,
    n_layers: usize,
    keep_rates: &[f64],
    accounting: FlopAccounting,
) -> Result<Vec<FlopRow>> {
    keep_rates
        .iter()
        .map(|&keep_rate| {
            let budget = budget_from_keep_rate(keep_rate, n)?;
            let r = if keep_rate == 1.0 {
                dense_mhsa_flops(n, d_model, n_layers)
            } else {
                sparsifiner_mhsa_flops_with(n, d_model, n_down, budget, n_layers, accounting)?
            };
            Ok(FlopRow {
                keep_rate,
                budget,
                qk_macs: r.qk_macs(),
                av_macs: r.av_macs(),
                predictor_macs: r.predictor_macs(),
                total_mflops: r.mflops(),
            })
        })
        .collect()
}
