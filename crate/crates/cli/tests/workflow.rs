use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use amortflow::csvio::{parse_f64, read_table};
use amortflow::model::{read_batch_csv, ConjugateGaussian};
use amortflow_cli::{parse_config, run_command};
use tempfile::TempDir;

fn small_config(model: &str, amortizer: &str) -> String {
    format!(
        r#"{{
  "model": "{model}",
  "amortizer": "{amortizer}",
  "seed": 11,
  "network": {{
    "summary_hidden": [16], "summary_features": 8, "rho_hidden": [8],
    "coupling_layers": 2, "coupling_hidden": [16], "classifier_hidden": [8]
  }},
  "train": {{ "epochs": 2, "batches_per_epoch": 5, "batch_size": 16, "validation_sims": 50 }},
  "simulate": {{ "n_sims": 12, "n_obs": 6 }},
  "diagnose": {{
    "recovery_sims": 20, "recovery_draws": 20, "sbc_sims": 20, "sbc_draws": 19,
    "contraction_sims": 10, "contraction_draws": 20, "n_obs": 6,
    "null_replicas": 19, "reference_sets": 30, "misspec_sets": 5
  }},
  "compare": {{ "sets_per_model": 5, "n_obs": 6 }}
}}"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["amortflow"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_amortflow"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = binary(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn help_exits_0() {
    assert_eq!(binary(&["--help"]).status.code(), Some(0));
    let out = binary(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checkpoint"));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"train":{"epochs":0}}"#);
    let out = binary(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));

    let cfg = write_config(dir.path(), r#"{"model":"nope"}"#);
    let out = binary(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
}

#[test]
fn missing_files_exit_1_with_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_config.json");
    let out = binary(&["simulate", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_config.json"));

    let cfg = write_config(dir.path(), &small_config("conjugate_gaussian", "posterior"));
    let data = dir.path().join("no_such_data.csv");
    let out = binary(&[
        "sample",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--data",
        s(&data),
        "--n-draws",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_data.csv"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let cfg = parse_config(&fs::read_to_string(&path).unwrap());
        assert!(cfg.is_ok(), "{}: {:?}", path.display(), cfg.err());
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn simulate_is_deterministic_and_reparseable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("conjugate_gaussian", "posterior"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(&a)]), 0);
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(&b)]), 0);
    let (fa, fb) = (a.join("simulations.csv"), b.join("simulations.csv"));
    assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap());
    let batch = read_batch_csv(&fa).unwrap();
    assert_eq!((batch.len(), batch.n_obs, batch.obs_dim()), (12, 6, 2));

    let c = dir.path().join("c");
    assert_eq!(
        run(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "12"]),
        0
    );
    assert_ne!(fs::read(&fa).unwrap(), fs::read(c.join("simulations.csv")).unwrap());
}

#[test]
fn model_set_simulation_writes_labels() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("model_pair", "comparison"));
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]), 0);
    let (head, rows) = read_table(&dir.path().join("labels.csv")).unwrap();
    assert_eq!(head, ["dataset", "model_index", "model"]);
    assert_eq!(rows.len(), 12);
}

/// Runs train, simulate, sample and diagnose into `out`; returns the files written.
fn posterior_workflow(cfg: &Path, out: &Path) -> Vec<PathBuf> {
    assert_eq!(run(&["train", "--config", s(cfg), "--out", s(out)]), 0);
    assert_eq!(run(&["simulate", "--config", s(cfg), "--out", s(out)]), 0);
    let data = out.join("simulations.csv");
    assert_eq!(
        run(&[
            "sample",
            "--config",
            s(cfg),
            "--out",
            s(out),
            "--data",
            s(&data),
            "--n-draws",
            "7"
        ]),
        0
    );
    assert_eq!(
        run(&["diagnose", "--config", s(cfg), "--out", s(out), "--data", s(&data)]),
        0
    );
    let mut files: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn posterior_workflow_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("conjugate_gaussian", "posterior"));
    let a = posterior_workflow(&cfg, &dir.path().join("a"));
    let b = posterior_workflow(&cfg, &dir.path().join("b"));
    let names: Vec<_> = a.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
    for expected in [
        "checkpoint.bfc",
        "history.csv",
        "simulations.csv",
        "posterior_draws.csv",
        "recovery.csv",
        "sbc_ranks.csv",
        "sbc_test.csv",
        "contraction.csv",
        "misspec.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{} differs", fa.display());
    }

    // Every emitted CSV reparses with a header and finite numeric fields.
    for f in a.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
        let (head, rows) = read_table(f).unwrap();
        assert!(!head.is_empty() && !rows.is_empty(), "{}", f.display());
        for row in &rows {
            assert_eq!(row.len(), head.len());
        }
    }
    let (head, rows) = read_table(&dir.path().join("a/posterior_draws.csv")).unwrap();
    assert_eq!(head, ["dataset", "draw", "mu_0", "mu_1"]);
    assert_eq!(rows.len(), 12 * 7);
    let (head, rows) = read_table(&dir.path().join("a/history.csv")).unwrap();
    assert_eq!(head, ["epoch", "train_loss", "val_loss"]);
    assert_eq!(rows.len(), 3);
}

#[test]
fn sample_accepts_plain_observation_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("conjugate_gaussian", "posterior"));
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 0);
    let data = dir.path().join("obs.csv");
    fs::write(&data, "x0,x1\n0.5,1.0\n-0.2,0.3\n1.1,0.9\n").unwrap();
    assert_eq!(
        run(&[
            "sample",
            "--config",
            s(&cfg),
            "--out",
            s(dir.path()),
            "--data",
            s(&data),
            "--n-draws",
            "4"
        ]),
        0
    );
    let (_, rows) = read_table(&dir.path().join("posterior_draws.csv")).unwrap();
    assert_eq!(rows.len(), 4);

    fs::write(&data, "x0\n0.5\n").unwrap();
    assert_eq!(
        run(&[
            "sample",
            "--config",
            s(&cfg),
            "--out",
            s(dir.path()),
            "--data",
            s(&data),
            "--n-draws",
            "4"
        ]),
        1
    );
}

#[test]
fn likelihood_workflow_emulates_data() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("gaussian_meanvar", "likelihood"));
    let out = dir.path();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(out)]), 0);
    let data = out.join("simulations.csv");
    assert_eq!(
        run(&[
            "sample",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--data",
            s(&data),
            "--n-draws",
            "3"
        ]),
        0
    );
    let (head, rows) = read_table(&out.join("emulated_data.csv")).unwrap();
    assert_eq!(head, ["dataset", "draw", "x_0"]);
    assert_eq!(rows.len(), 36);
    // diagnose is defined for posterior amortizers only
    assert_eq!(run(&["diagnose", "--config", s(&cfg), "--out", s(out)]), 2);
}

#[test]
fn comparison_workflow_writes_normalized_pmps() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config("model_pair", "comparison"));
    let out = dir.path();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(run(&["compare", "--config", s(&cfg), "--out", s(out)]), 0);
    let first = fs::read(out.join("pmp.csv")).unwrap();
    let (head, rows) = read_table(&out.join("pmp.csv")).unwrap();
    assert_eq!(head, ["dataset", "true_model", "p_normal", "p_student_t"]);
    assert_eq!(rows.len(), 10);
    for row in &rows {
        let total: f64 = row[2..].iter().map(|f| parse_f64(f).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert_eq!(run(&["compare", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(first, fs::read(out.join("pmp.csv")).unwrap());

    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(out)]), 0);
    let data = out.join("simulations.csv");
    assert_eq!(
        run(&["compare", "--config", s(&cfg), "--out", s(out), "--data", s(&data)]),
        0
    );
    let (head, rows) = read_table(&out.join("pmp.csv")).unwrap();
    assert_eq!(head, ["dataset", "p_normal", "p_student_t"]);
    assert_eq!(rows.len(), 12);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let post = write_config(dir.path(), &small_config("conjugate_gaussian", "posterior"));
    assert_eq!(run(&["train", "--config", s(&post), "--out", s(dir.path())]), 0);
    let lik_dir = dir.path().join("lik");
    fs::create_dir(&lik_dir).unwrap();
    let lik = write_config(&lik_dir, &small_config("conjugate_gaussian", "likelihood"));
    assert_eq!(run(&["simulate", "--config", s(&lik), "--out", s(&lik_dir)]), 0);
    let ckpt = dir.path().join("checkpoint.bfc");
    let data = lik_dir.join("simulations.csv");
    let code = run(&[
        "sample",
        "--config",
        s(&lik),
        "--out",
        s(&lik_dir),
        "--data",
        s(&data),
        "--n-draws",
        "2",
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_ne!(code, 0);
}

/// Default networks and training, then sampling through the CLI; posterior
/// means and standard deviations are checked against the conjugate posterior.
#[test]
fn train_then_sample_matches_analytic_posterior() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    let cfg = write_config(
        out,
        r#"{"model":"conjugate_gaussian","amortizer":"posterior","seed":1,"simulate":{"n_sims":100,"n_obs":16}}"#,
    );
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out", s(out)]), 0);
    let data = out.join("simulations.csv");
    assert_eq!(
        run(&[
            "sample",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--data",
            s(&data),
            "--n-draws",
            "1000"
        ]),
        0
    );

    let batch = read_batch_csv(&data).unwrap();
    let (_, rows) = read_table(&out.join("posterior_draws.csv")).unwrap();
    let model = ConjugateGaussian::default();
    let (mut mean_err, mut sd_err) = (0.0f64, 0.0f64);
    for i in 0..batch.len() {
        let draws: Vec<Vec<f64>> = rows[i * 1000..(i + 1) * 1000]
            .iter()
            .map(|r| r[2..].iter().map(|f| parse_f64(f).unwrap()).collect())
            .collect();
        let (mu, var) = model.posterior(batch.data_row(i), batch.n_obs);
        for j in 0..2 {
            let m = draws.iter().map(|d| d[j]).sum::<f64>() / 1000.0;
            let v = draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / 999.0;
            mean_err += (m - mu[j]).abs();
            sd_err += (v.sqrt() - var.sqrt()).abs();
        }
    }
    let cells = (batch.len() * 2) as f64;
    let (mean_err, sd_err) = (mean_err / cells, sd_err / cells);
    assert!(
        mean_err < 0.1 && sd_err < 0.1,
        "average errors: mean {mean_err}, sd {sd_err}"
    );
}
