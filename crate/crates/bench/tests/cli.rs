use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use sparsifiner_bench::commands::{attention_dump, DumpRequest};
use sparsifiner_bench::config::{FileConfig, ModelSource, Overrides, RunConfig};
use sparsifiner_bench::output::parse_pgm;
use sparsifiner_bench::{CliError, EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE};
use sparsifiner_core::vit::Image;
use sparsifiner_core::{Model, ModelConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparsifiner"));
    for (k, _) in std::env::vars() {
        if k.starts_with("SPARSIFINER_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn out_dir(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn read_column(path: &Path, col: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == col).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn equivalence_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["equivalence", "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let pass = read_column(&dir.path().join("equivalence.csv"), "pass");
    assert_eq!(pass.len(), 20);
    assert!(pass.iter().all(|p| p == "true"));
}

#[test]
fn corrupted_weight_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spfw");
    Model::random(ModelConfig::tiny(), 1).unwrap().save(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 9);
    fs::write(&path, &bytes).unwrap();
    let o = run(&["equivalence", "--model", path.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_IO);

    fs::write(&path, b"not a weight file at all").unwrap();
    let o = run(&["sweep", "--model", path.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_IO);
}

#[test]
fn loaded_weight_file_round_trips_through_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spfw");
    Model::random(ModelConfig::tiny(), 3).unwrap().save(&path).unwrap();
    let o = run(&["equivalence", "--model", path.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let d = out_dir(dir.path());
    for args in [
        vec!["sweep", "--mode", "linformer", "--out-dir", &d],
        vec!["equivalence", "--mode", "dense", "--out-dir", &d],
        vec!["sweep", "--mode", "sideways"],
        vec!["sweep", "--keep-rates", ""],
        vec!["sweep", "--keep-rates", "0.5,1.5", "--out-dir", &d],
        vec!["flops", "--mode", "linformer", "--out-dir", &d],
        vec!["frobnicate"],
    ] {
        let o = run(&args);
        assert_eq!(code(&o), EXIT_USAGE, "{args:?}");
    }
}

#[test]
fn dump_bounds_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = out_dir(dir.path());
    for (flag, value, bound) in [("--layer", "2", "0..2"), ("--head", "5", "0..2"), ("--query", "17", "0..17")] {
        let o = run(&["dump-attention", flag, value, "--out-dir", &d]);
        assert_eq!(code(&o), EXIT_USAGE);
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(bound), "{err}");
    }
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&run(&["--help"])), EXIT_OK);
}

#[test]
fn malformed_config_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = [oops").unwrap();
    let o = run(&["flops", "--config", cfg.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_IO);
    fs::write(&cfg, "sede = 3\n").unwrap();
    let o = run(&["flops", "--config", cfg.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_IO);
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "keep_rates = [0.5]\n[sweep]\nimages = 0\n[model]\npreset = \"deit-small\"\n",
    )
    .unwrap();
    let d = out_dir(dir.path());
    let sweep = dir.path().join("sweep.csv");
    let c = cfg.to_str().unwrap();

    assert_eq!(code(&run(&["sweep", "--config", c, "--out-dir", &d])), EXIT_OK);
    assert_eq!(read_column(&sweep, "budget"), ["99"]);

    let o = bin()
        .args(["sweep", "--config", c, "--out-dir", &d])
        .env("SPARSIFINER_KEEP_RATES", "0.2,0.1")
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(read_column(&sweep, "budget"), ["40", "20"]);

    let o = bin()
        .args(["sweep", "--config", c, "--out-dir", &d, "--keep-rates", "0.05"])
        .env("SPARSIFINER_KEEP_RATES", "0.2,0.1")
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(read_column(&sweep, "budget"), ["10"]);
}

#[test]
fn sweep_on_deit_small_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[sweep]\nimages = 0\n[model]\npreset = \"deit-small\"\n").unwrap();
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--keep-rates",
        "1.0,0.5,0.2,0.1",
        "--out-dir",
        &out_dir(dir.path()),
    ]);
    assert_eq!(code(&o), EXIT_OK);
    let mflops: Vec<f64> = read_column(&dir.path().join("sweep.csv"), "total_mflops")
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let published = [357.7, 254.2, 147.5, 111.4];
    for (m, p) in mflops.iter().zip(published) {
        assert!((m - p).abs() / p < 0.02, "{m} vs {p}");
    }
    assert!((mflops[0] - 357.7).abs() < 0.05);
}

#[test]
fn sweep_full_budget_agrees_with_dense() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--keep-rates", "1.0", "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK);
    let sweep = dir.path().join("sweep.csv");
    assert_eq!(read_column(&sweep, "agreement"), ["1.0"]);
    assert_eq!(read_column(&sweep, "mean_row_nnz"), ["17.0"]);
}

#[test]
fn sweep_measured_never_exceeds_analytic() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--tau", "0.3", "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK);
    let sweep = dir.path().join("sweep.csv");
    let analytic = read_column(&sweep, "qk_macs");
    let measured = read_column(&sweep, "measured_qk_macs");
    for (a, m) in analytic.iter().zip(&measured) {
        assert!(m.parse::<f64>().unwrap() <= a.parse::<f64>().unwrap());
    }
}

#[test]
fn flops_table_contents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[model]\npreset = \"deit-small\"\nlinformer_rank = 64\n").unwrap();
    let o = run(&[
        "flops",
        "--config",
        cfg.to_str().unwrap(),
        "--keep-rates",
        "0.5",
        "--out-dir",
        &out_dir(dir.path()),
    ]);
    assert_eq!(code(&o), EXIT_OK);
    let path = dir.path().join("flops.csv");
    assert_eq!(read_column(&path, "mode"), ["dense", "sparsifiner", "linformer"]);
    let dense: f64 = read_column(&path, "total_mflops")[0].parse().unwrap();
    assert!((dense - 357.663744).abs() < 1e-9);
}

#[test]
fn dump_files_and_full_budget_identity() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["dump-attention", "--layer", "1", "--head", "1", "--query", "5", "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let sparse = read_column(&dir.path().join("l1_h1_q5_sparse.csv"), "value");
    let full = read_column(&dir.path().join("l1_h1_q5_full.csv"), "value");
    assert_eq!(sparse.len(), 17);
    for (s, f) in sparse.iter().zip(&full) {
        let (s, f): (f64, f64) = (s.parse().unwrap(), f.parse().unwrap());
        assert!((s - f).abs() <= 1e-12 * f.abs().max(1.0));
    }
    let (w, h, px) = parse_pgm(&fs::read(dir.path().join("l1_h1_q5_mask.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 4));
    assert_eq!(px.len(), 16);
    let (w, h, _) = parse_pgm(&fs::read(dir.path().join("l1_w_up.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 16));
    let (w, h, _) = parse_pgm(&fs::read(dir.path().join("l1_h1_q5_a_down.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 1));
}

#[test]
fn dump_reads_ppm_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    let mut bytes = b"P6\n32 32\n255\n".to_vec();
    bytes.extend((0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8));
    fs::write(&img, bytes).unwrap();
    let o = run(&["dump-attention", "--image", img.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&img, b"P6\n32 32\n255\n\0\0").unwrap();
    let o = run(&["dump-attention", "--image", img.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_IO);
}

#[test]
fn dumped_rows_match_dense_oracle() {
    let model = Model::random(ModelConfig::tiny(), 11).unwrap();
    let image = Image::random(32, 32, 4);
    for budget in [1, 3, 8, 17] {
        for query in [0, 6, 16] {
            let req = DumpRequest {
                layer: 1,
                head: 0,
                query,
                image: None,
                budget: Some(budget),
            };
            let d = attention_dump(&model, &image, &req).unwrap();
            assert_eq!(d.mask[query], 1.0, "diagonal");
            let kept: usize = d.mask.iter().filter(|&&m| m == 1.0).count();
            assert!(kept >= 1 && kept <= budget);
            let z: f64 = d.full.iter().zip(&d.mask).map(|(f, m)| f * m).sum();
            for j in 0..d.full.len() {
                let want = d.mask[j] * d.full[j] / z;
                assert!((d.sparse[j] - want).abs() < 1e-12, "budget {budget} query {query} col {j}");
            }
        }
    }
}

#[test]
fn train_phase1_outputs_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nsteps = 20\nimages = 1\n").unwrap();
    let o = run(&["train-phase1", "--config", cfg.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let losses: Vec<f64> = read_column(&dir.path().join("phase1_loss.csv"), "loss")
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 2 * 21);
    for layer in losses.chunks(21) {
        assert!(layer.windows(2).all(|w| w[1] <= w[0]));
    }
    let model = Model::load(dir.path().join("phase1.spfw")).unwrap();
    assert_eq!(model.config, ModelConfig::tiny());
    let density = read_column(&dir.path().join("phase1_pruning.csv"), "density_after");
    assert_eq!(density.len(), 2);
}

#[test]
fn failing_check_exits_one() {
    // an all-zero basis leaves only the diagonal, so no budget reaches dense
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spfw");
    let mut m = Model::random(ModelConfig::tiny(), 5).unwrap();
    for l in &mut m.layers {
        let empty = sparsifiner_core::CsrMatrix::zeros(l.predictor.n_down(), l.predictor.n_tokens());
        l.predictor = l.predictor.with_w_up(empty).unwrap();
    }
    m.save(&path).unwrap();
    let o = run(&["equivalence", "--model", path.to_str().unwrap(), "--out-dir", &out_dir(dir.path())]);
    assert_eq!(code(&o), EXIT_CHECK);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

proptest! {
    #[test]
    fn keep_rates_validated(rates in prop::collection::vec(-0.5f64..1.5, 1..6)) {
        let r = RunConfig::resolve(
            FileConfig::default(),
            Overrides { keep_rates: Some(rates.clone()), ..Overrides::default() },
        );
        let valid = rates.iter().all(|&k| k > 0.0 && k <= 1.0);
        match r {
            Ok(cfg) => {
                prop_assert!(valid);
                prop_assert_eq!(cfg.keep_rates, rates);
                prop_assert!(matches!(cfg.model, ModelSource::Synthetic(_)));
            }
            Err(e) => {
                prop_assert!(!valid);
                prop_assert!(matches!(e, CliError::Usage(_)));
            }
        }
    }
}
