//! Command-line front end: equivalence suites, keep-rate sweeps, FLOP
//! tables, attention dumps and predictor training.
//!
//! Exit statuses: 0 success, 1 failed check, 2 I/O or format error,
//! 64 usage error.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::DumpRequest;
use crate::config::{FileConfig, ModeArg, Overrides, RunConfig};
pub use crate::error::{CliError, CliResult, EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "sparsifiner", version, about = "Sparse attention analysis driver")]
pub struct Cli {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true, env = "SPARSIFINER_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "SPARSIFINER_SEED")]
    pub seed: Option<u64>,
    /// Comma-separated keep rates in (0, 1].
    #[arg(long, global = true, env = "SPARSIFINER_KEEP_RATES", value_delimiter = ',')]
    pub keep_rates: Option<Vec<f64>>,
    #[arg(long, global = true, env = "SPARSIFINER_N_DOWN")]
    pub n_down: Option<usize>,
    #[arg(long, global = true, env = "SPARSIFINER_TAU")]
    pub tau: Option<f64>,
    #[arg(long, global = true, env = "SPARSIFINER_MODE", value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, env = "SPARSIFINER_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Weight file to load instead of a synthetic model.
    #[arg(long, global = true, env = "SPARSIFINER_MODEL")]
    pub model: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dense vs full-budget sparse vs identity Linformer on seeded models.
    Equivalence,
    /// Analytic and measured cost for each keep rate.
    Sweep,
    /// Analytic MHSA cost table.
    Flops,
    /// Mask, sparse and full attention for one query, plus predictor rows.
    DumpAttention {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// PPM image; a seeded random image otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Fit predictors to dense attention, prune the basis, save the model.
    TrainPhase1,
}

impl Cli {
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::read(p)?,
            None => FileConfig::default(),
        };
        RunConfig::resolve(
            file,
            Overrides {
                seed: self.seed,
                keep_rates: self.keep_rates.clone(),
                n_down: self.n_down,
                tau: self.tau,
                mode: self.mode,
                out_dir: self.out_dir.clone(),
                model_path: self.model.clone(),
            },
        )
    }
}

/// Runs a parsed command and returns the text to print.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let cfg = cli.run_config()?;
    let mut out = String::new();
    match &cli.command {
        Command::Equivalence => {
            let r = commands::cmd_equivalence(&cfg)?;
            for row in &r.rows {
                let fmt = |e: Option<f64>| e.map_or("-".to_string(), |v| format!("{v:.3e}"));
                let _ = writeln!(
                    out,
                    "seed {}: sparsifiner {} linformer {} {}",
                    row.seed,
                    fmt(row.sparsifiner_rel_err),
                    fmt(row.linformer_rel_err),
                    if row.pass { "ok" } else { "FAIL" }
                );
            }
            let _ = writeln!(out, "wrote {}", r.csv_path.display());
            if let Some(bad) = r.rows.iter().find(|r| !r.pass) {
                return Err(CliError::Check(format!(
                    "equivalence for seed {} exceeds {:e} (max error {:.3e})",
                    bad.seed,
                    commands::EQUIVALENCE_TOL,
                    r.max_error()
                )));
            }
        }
        Command::Sweep => {
            let r = commands::cmd_sweep(&cfg)?;
            for row in &r.rows {
                let _ = writeln!(
                    out,
                    "keep {:<5} budget {:>4}  {:>10.4} MFLOPs",
                    row.keep_rate, row.budget, row.total_mflops
                );
            }
            let _ = writeln!(out, "wrote {}", r.csv_path.display());
        }
        Command::Flops => {
            let (rows, path) = commands::cmd_flops(&cfg)?;
            for r in &rows {
                let keep = r.keep_rate.map_or(String::new(), |k| format!(" keep {k}"));
                let _ = writeln!(out, "{}{}: {:.4} MFLOPs", r.mode, keep, r.total_mflops);
            }
            let _ = writeln!(out, "wrote {}", path.display());
        }
        Command::DumpAttention {
            layer,
            head,
            query,
            image,
            budget,
        } => {
            let req = DumpRequest {
                layer: *layer,
                head: *head,
                query: *query,
                image: image.clone(),
                budget: *budget,
            };
            for p in commands::cmd_dump_attention(&cfg, &req)? {
                let _ = writeln!(out, "wrote {}", p.display());
            }
        }
        Command::TrainPhase1 => {
            let r = commands::cmd_train_phase1(&cfg)?;
            for ((l, first, last), p) in r.endpoints().into_iter().zip(&r.pruning) {
                let _ = writeln!(
                    out,
                    "layer {l}: loss {first:.6e} -> {last:.6e}, w_up density {:.3} -> {:.3}",
                    p.density_before, p.density_after
                );
            }
            let _ = writeln!(out, "wrote {}", r.model_path.display());
        }
    }
    Ok(out)
}

/// Parses `args`, runs, prints, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
