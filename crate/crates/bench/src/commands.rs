use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sparsifiner_core::distill::{phase1_batches, prune_wup, Phase1Trainer};
use sparsifiner_core::flops::{
    dense_mhsa_flops, keep_rate_table, linformer_mhsa_flops, sparsifiner_mhsa_flops_with, FlopRow,
};
use sparsifiner_core::linalg::softmax_rows;
use sparsifiner_core::predictor::budget_from_keep_rate;
use sparsifiner_core::sparse_mhsa::{sparsifiner_head, Thresholding};
use sparsifiner_core::vit::Image;
use sparsifiner_core::{AttentionMode, Model, SparsifinerOptions};

use crate::config::{ModeArg, ModelSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{write_pgm, write_vector_csv};

/// Largest relative class-score error the equivalence check accepts.
pub const EQUIVALENCE_TOL: f64 = 1e-5;

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// `max |a - b| / max |b|`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

fn probe_image(model: &Model, seed: u64) -> Image {
    let s = model.config.image_size;
    Image::random(s, s, seed)
}

/// Mode options under which a full budget reproduces dense attention.
pub fn full_mask_options() -> SparsifinerOptions {
    SparsifinerOptions {
        thresholding: Thresholding::Disabled,
        ..SparsifinerOptions::default()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceRow {
    pub seed: u64,
    pub sparsifiner_rel_err: Option<f64>,
    pub linformer_rel_err: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub rows: Vec<EquivalenceRow>,
    pub csv_path: PathBuf,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.sparsifiner_rel_err, r.linformer_rel_err])
            .flatten()
            .fold(0.0, f64::max)
    }
}

/// Dense class scores against full-budget sparse attention and identity
/// Linformer for one model.
pub fn equivalence_row(model: &Model, seed: u64, mode: ModeArg) -> CliResult<EquivalenceRow> {
    let image = probe_image(model, seed);
    let dense = model.forward(&image, AttentionMode::Dense)?.scores;
    let sparsifiner_rel_err = if matches!(mode, ModeArg::All | ModeArg::Sparsifiner) {
        let full = model.with_budget(model.n_tokens())?;
        let s = full.forward(&image, AttentionMode::Sparsifiner(full_mask_options()))?.scores;
        Some(rel_error(&s, &dense))
    } else {
        None
    };
    let linformer_rel_err = if matches!(mode, ModeArg::All | ModeArg::Linformer) {
        let mut m = model.clone();
        for l in &mut m.layers {
            l.linformer = None;
        }
        let s = m.forward(&image, AttentionMode::Linformer)?.scores;
        Some(rel_error(&s, &dense))
    } else {
        None
    };
    let pass = [sparsifiner_rel_err, linformer_rel_err]
        .iter()
        .flatten()
        .all(|&e| e < EQUIVALENCE_TOL);
    Ok(EquivalenceRow {
        seed,
        sparsifiner_rel_err,
        linformer_rel_err,
        pass,
    })
}

pub fn cmd_equivalence(cfg: &RunConfig) -> CliResult<EquivalenceReport> {
    let mode = cfg.mode_for(
        "equivalence",
        &[ModeArg::All, ModeArg::Sparsifiner, ModeArg::Linformer],
        ModeArg::All,
    )?;
    let seeds: Vec<u64> = match cfg.model {
        ModelSource::File(_) => vec![cfg.seed],
        ModelSource::Synthetic(_) => (0..cfg.equivalence_models as u64).map(|i| cfg.seed + i).collect(),
    };
    // a loaded model is identical for every seed, so build it once
    let loaded = match cfg.model {
        ModelSource::File(_) => Some(cfg.model()?),
        ModelSource::Synthetic(_) => None,
    };
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let model = match &loaded {
                Some(m) => m.clone(),
                None => cfg.model_with_seed(seed)?,
            };
            equivalence_row(&model, seed, mode)
        })
        .collect::<CliResult<Vec<_>>>()?;

    prepare_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("equivalence.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(EquivalenceReport { rows, csv_path })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub keep_rate: f64,
    pub budget: usize,
    pub qk_macs: u64,
    pub av_macs: u64,
    pub predictor_macs: u64,
    pub total_mflops: f64,
    /// Masked QK MACs measured on the probe images, averaged.
    pub measured_qk_macs: Option<f64>,
    pub measured_av_macs: Option<f64>,
    /// Mean mask entries per query row.
    pub mean_row_nnz: Option<f64>,
    /// Fraction of probe images whose top class matches dense mode.
    pub agreement: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
}

struct Measured {
    qk: f64,
    av: f64,
    row_nnz: f64,
    agreement: f64,
}

fn measure(model: &Model, budget: usize, images: &[Image], dense_top: &[usize]) -> CliResult<Measured> {
    let m = model.with_budget(budget)?;
    let (mut qk, mut av, mut nnz, mut rows, mut agree) = (0u64, 0u64, 0usize, 0usize, 0usize);
    for (img, &top) in images.iter().zip(dense_top) {
        let out = m.forward(img, AttentionMode::sparsifiner())?;
        for layer in &out.layers {
            for s in &layer.stats {
                qk += s.qk_macs;
                av += s.av_macs;
                nnz += s.mask_nnz;
                rows += s.n;
            }
        }
        if out.argmax() == top {
            agree += 1;
        }
    }
    let k = images.len() as f64;
    Ok(Measured {
        qk: qk as f64 / k,
        av: av as f64 / k,
        row_nnz: nnz as f64 / rows.max(1) as f64,
        agreement: agree as f64 / k,
    })
}

/// Sparse rows must not cost more as the keep rate drops. The dense row at
/// keep rate 1 is excluded: the predictor overhead can exceed the savings
/// on very small models.
pub fn check_monotone(rows: &[SweepRow]) -> CliResult<()> {
    let mut sparse: Vec<&SweepRow> = rows.iter().filter(|r| r.keep_rate < 1.0).collect();
    sparse.sort_by(|a, b| b.keep_rate.total_cmp(&a.keep_rate));
    for w in sparse.windows(2) {
        if w[1].total_mflops > w[0].total_mflops {
            return Err(CliError::Check(format!(
                "FLOPs rise from {} at keep rate {} to {} at keep rate {}",
                w[0].total_mflops, w[0].keep_rate, w[1].total_mflops, w[1].keep_rate
            )));
        }
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<SweepReport> {
    cfg.mode_for("sweep", &[ModeArg::Sparsifiner], ModeArg::Sparsifiner)?;
    let c = cfg.model_config()?;
    let n = c.n_tokens();
    let table: Vec<FlopRow> = keep_rate_table(
        n,
        c.d_model,
        c.predictor.n_down,
        c.n_layers,
        &cfg.keep_rates,
        cfg.accounting,
    )?;

    let measured: Vec<Option<Measured>> = if cfg.sweep_images > 0 {
        let model = cfg.model()?;
        let images: Vec<Image> = (0..cfg.sweep_images as u64)
            .map(|i| probe_image(&model, cfg.seed.wrapping_add(i)))
            .collect();
        let dense_top = images
            .iter()
            .map(|img| Ok(model.forward(img, AttentionMode::Dense)?.argmax()))
            .collect::<CliResult<Vec<_>>>()?;
        table
            .par_iter()
            .map(|r| measure(&model, r.budget, &images, &dense_top).map(Some))
            .collect::<CliResult<Vec<_>>>()?
    } else {
        table.iter().map(|_| None).collect()
    };

    let rows: Vec<SweepRow> = table
        .into_iter()
        .zip(measured)
        .map(|(r, m)| SweepRow {
            keep_rate: r.keep_rate,
            budget: r.budget,
            qk_macs: r.qk_macs,
            av_macs: r.av_macs,
            predictor_macs: r.predictor_macs,
            total_mflops: r.total_mflops,
            measured_qk_macs: m.as_ref().map(|m| m.qk),
            measured_av_macs: m.as_ref().map(|m| m.av),
            mean_row_nnz: m.as_ref().map(|m| m.row_nnz),
            agreement: m.as_ref().map(|m| m.agreement),
        })
        .collect();

    prepare_out_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    check_monotone(&rows)?;
    for r in &rows {
        if let (Some(qk), Some(av)) = (r.measured_qk_macs, r.measured_av_macs) {
            if qk > r.qk_macs as f64 || av > r.av_macs as f64 {
                return Err(CliError::Check(format!(
                    "measured MACs exceed the analytic count at keep rate {}",
                    r.keep_rate
                )));
            }
        }
    }
    Ok(SweepReport { rows, csv_path })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsRow {
    pub mode: &'static str,
    pub keep_rate: Option<f64>,
    pub budget: Option<usize>,
    pub qk_macs: u64,
    pub av_macs: u64,
    pub predictor_macs: u64,
    pub total_mflops: f64,
}

pub fn flops_rows(cfg: &RunConfig) -> CliResult<Vec<FlopsRow>> {
    let mode = cfg.mode_for(
        "flops",
        &[ModeArg::All, ModeArg::Dense, ModeArg::Sparsifiner, ModeArg::Linformer],
        ModeArg::All,
    )?;
    let c = cfg.model_config()?;
    let (n, d, nd, layers) = (c.n_tokens(), c.d_model, c.predictor.n_down, c.n_layers);
    let mut rows = Vec::new();
    let mut push = |mode, keep_rate, budget, r: sparsifiner_core::FlopReport| {
        rows.push(FlopsRow {
            mode,
            keep_rate,
            budget,
            qk_macs: r.qk_macs(),
            av_macs: r.av_macs(),
            predictor_macs: r.predictor_macs(),
            total_mflops: r.mflops(),
        })
    };
    if matches!(mode, ModeArg::All | ModeArg::Dense) {
        push("dense", None, None, dense_mhsa_flops(n, d, layers));
    }
    if matches!(mode, ModeArg::All | ModeArg::Sparsifiner) {
        for &k in &cfg.keep_rates {
            let b = budget_from_keep_rate(k, n)?;
            push(
                "sparsifiner",
                Some(k),
                Some(b),
                sparsifiner_mhsa_flops_with(n, d, nd, b, layers, cfg.accounting)?,
            );
        }
    }
    match (mode, c.linformer_rank) {
        (ModeArg::All | ModeArg::Linformer, Some(k)) => {
            push("linformer", None, Some(k), linformer_mhsa_flops(n, d, k, layers));
        }
        (ModeArg::Linformer, None) => {
            return Err(CliError::Usage("--mode linformer needs model.linformer_rank".into()));
        }
        _ => {}
    }
    Ok(rows)
}

pub fn cmd_flops(cfg: &RunConfig) -> CliResult<(Vec<FlopsRow>, PathBuf)> {
    let rows = flops_rows(cfg)?;
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("flops.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((rows, path))
}

#[derive(Clone, Debug, Default)]
pub struct DumpRequest {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub image: Option<PathBuf>,
    pub budget: Option<usize>,
}

/// One query's view of a head, as written by `dump-attention`.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub mask: Vec<f64>,
    pub sparse: Vec<f64>,
    pub full: Vec<f64>,
    pub a_down: Vec<f64>,
    /// `n_down` basis rows of length `n`.
    pub w_up: Vec<Vec<f64>>,
}

fn check_bound(what: &str, value: usize, bound: usize) -> CliResult<()> {
    if value >= bound {
        return Err(CliError::Usage(format!(
            "{what} {value} is out of range; valid values are 0..{bound}"
        )));
    }
    Ok(())
}

pub fn attention_dump(model: &Model, image: &Image, req: &DumpRequest) -> CliResult<AttentionDump> {
    let c = &model.config;
    check_bound("layer", req.layer, c.n_layers)?;
    check_bound("head", req.head, c.n_heads)?;
    check_bound("query", req.query, c.n_tokens())?;
    let model = match req.budget {
        Some(b) => {
            check_bound("budget", b.wrapping_sub(1), c.n_tokens())?;
            model.with_budget(b)?
        }
        None => model.clone(),
    };
    let opts = SparsifinerOptions::default();
    let out = model.forward(image, AttentionMode::Sparsifiner(opts))?;
    let x = &out.layers[req.layer].attn_input;
    let layer = &model.layers[req.layer];
    let head = &layer.heads[req.head];
    let h = sparsifiner_head(x, head, &layer.predictor, opts)?;
    let n = c.n_tokens();
    let q = req.query;

    let mut mask = vec![0.0; n];
    for &j in h.mask.row_indices(q) {
        mask[j] = 1.0;
    }
    let mut sparse = vec![0.0; n];
    for (j, v) in h.attn.csr().row(q).iter() {
        sparse[j] = v;
    }
    let (qm, km, _) = head.project(x)?;
    let full = softmax_rows(&qm.matmul_transposed(&km)?, head.scale())?.row(q).to_vec();
    let w_up = layer.predictor.w_up().to_dense().to_rows();
    Ok(AttentionDump {
        mask,
        sparse,
        full,
        a_down: h.a_down.row(q).to_vec(),
        w_up,
    })
}

/// Token rows drop the class token and fold the patches into the grid when
/// the count allows.
fn token_layout(n: usize) -> (usize, usize, usize) {
    let g = ((n.saturating_sub(1)) as f64).sqrt().round() as usize;
    if n > 1 && g * g + 1 == n {
        (1, g, g)
    } else {
        (0, n, 1)
    }
}

pub fn cmd_dump_attention(cfg: &RunConfig, req: &DumpRequest) -> CliResult<Vec<PathBuf>> {
    cfg.mode_for("dump-attention", &[ModeArg::Sparsifiner], ModeArg::Sparsifiner)?;
    let model = cfg.model()?;
    let image = match &req.image {
        Some(p) => Image::read_ppm(p)?,
        None => probe_image(&model, cfg.seed),
    };
    let d = attention_dump(&model, &image, req)?;
    prepare_out_dir(&cfg.out_dir)?;
    let stem = format!("l{}_h{}_q{}", req.layer, req.head, req.query);
    let dir = &cfg.out_dir;
    let mut written = Vec::new();
    let (skip, w, h) = token_layout(d.mask.len());

    for (name, row) in [("mask", &d.mask), ("sparse", &d.sparse), ("full", &d.full)] {
        let csv = dir.join(format!("{stem}_{name}.csv"));
        write_vector_csv(&csv, "token", row)?;
        let pgm = dir.join(format!("{stem}_{name}.pgm"));
        write_pgm(&pgm, w, h, &row[skip..])?;
        written.extend([csv, pgm]);
    }

    let csv = dir.join(format!("{stem}_a_down.csv"));
    write_vector_csv(&csv, "basis", &d.a_down)?;
    let pgm = dir.join(format!("{stem}_a_down.pgm"));
    write_pgm(&pgm, d.a_down.len(), 1, &d.a_down)?;
    written.extend([csv, pgm]);

    let csv = dir.join(format!("l{}_w_up.csv", req.layer));
    let mut wr = csv::Writer::from_path(&csv)?;
    wr.write_record(["basis", "token", "value"])?;
    for (b, row) in d.w_up.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            wr.write_record([b.to_string(), t.to_string(), v.to_string()])?;
        }
    }
    wr.flush()?;
    let stacked: Vec<f64> = d.w_up.iter().flat_map(|r| r[skip..].iter().copied()).collect();
    let pgm = dir.join(format!("l{}_w_up.pgm", req.layer));
    write_pgm(&pgm, w, h * d.w_up.len(), &stacked)?;
    written.extend([csv, pgm]);
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
pub struct LossRecord {
    pub layer: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PruneRecord {
    pub layer: usize,
    pub density_before: f64,
    pub density_after: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub pruning: Vec<PruneRecord>,
    pub model_path: PathBuf,
    pub model: Model,
}

impl TrainReport {
    /// First and last recorded loss per layer.
    pub fn endpoints(&self) -> Vec<(usize, f64, f64)> {
        let layers = self.pruning.len();
        (0..layers)
            .map(|l| {
                let mut it = self.losses.iter().filter(|r| r.layer == l).map(|r| r.loss);
                let first = it.next().unwrap_or(f64::NAN);
                let last = it.next_back().unwrap_or(first);
                (l, first, last)
            })
            .collect()
    }
}

/// Fits every layer's predictor to the frozen dense attention of the same
/// model, prunes the basis, and saves the result.
pub fn cmd_train_phase1(cfg: &RunConfig) -> CliResult<TrainReport> {
    cfg.mode_for("train-phase1", &[ModeArg::Sparsifiner], ModeArg::Sparsifiner)?;
    let mut model = cfg.model()?;
    let t = &cfg.train;
    let images: Vec<Image> = (0..t.images as u64)
        .map(|i| probe_image(&model, cfg.seed.wrapping_add(i)))
        .collect();
    let batches = phase1_batches(&model, &images, |_, _, _| None)?;

    let results = batches
        .par_iter()
        .enumerate()
        .map(|(l, batch)| {
            let pred = &model.layers[l].predictor;
            let mut trainer = Phase1Trainer::new(pred, t.lr, t.weight_decay)?;
            let mut losses = Vec::with_capacity(t.steps + 1);
            for step in 0..t.steps {
                let loss = trainer.step(batch)?;
                losses.push(LossRecord { layer: l, step, loss });
            }
            losses.push(LossRecord {
                layer: l,
                step: t.steps,
                loss: trainer.loss(batch)?,
            });
            let trained = trainer.params(pred.tau(), pred.budget())?;
            let before = trained.w_up_density();
            let (pruned, after) = prune_wup(trained.w_up(), t.prune_threshold);
            Ok((trained.with_w_up(pruned)?, losses, PruneRecord {
                layer: l,
                density_before: before,
                density_after: after,
            }))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut losses = Vec::new();
    let mut pruning = Vec::new();
    for (l, (pred, ls, pr)) in results.into_iter().enumerate() {
        model.layers[l].predictor = pred;
        losses.extend(ls);
        pruning.push(pr);
    }
    // the pruned predictor must still produce valid masks
    model.forward(&images[0], AttentionMode::sparsifiner())?;

    prepare_out_dir(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("phase1_loss.csv"))?;
    for r in &losses {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("phase1_pruning.csv"))?;
    for r in &pruning {
        w.serialize(r)?;
    }
    w.flush()?;
    let model_path = cfg.out_dir.join("phase1.spfw");
    model.save(&model_path)?;
    Ok(TrainReport {
        losses,
        pruning,
        model_path,
        model,
    })
}
