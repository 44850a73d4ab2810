use std::path::Path;

use crtlab_cli::config::{default_config, parse_config, ExperimentKind};
use crtlab_cli::csvio;
use crtlab_cli::runner::{cells, read_summary, recursion_config, run_experiment, RunManifest};
use crtlab_core::recursion::Recursion;
use crtlab_core::{build_grid, TrajectoryPoint};

fn small(kind: ExperimentKind, out: &Path) -> crtlab_cli::ExperimentConfig {
    let mut c = default_config(kind);
    c.output_dir = out.to_path_buf();
    c.replicates = 2;
    c.iterations = 60;
    c.alphas = vec![0.5, 1.0];
    if kind.is_biased() {
        c.qs = vec![0.5];
    }
    c
}

#[test]
fn trajectories_round_trip_against_a_direct_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(ExperimentKind::CrtKde, dir.path());
    run_experiment(&config).unwrap();
    for cell in cells(&config) {
        let rows = csvio::read(&dir.path().join("trajectories").join(format!("{}.csv", cell.name()))).unwrap();
        assert_eq!(rows.len(), 2 * 61);
        for r in 0..2 {
            let rc = recursion_config(&config, &cell, r);
            let grid = build_grid(&config.target, config.grid.m_grid, config.grid.tail_sds, None).unwrap();
            let (traj, _) = Recursion::start(rc, &config.target, &grid).unwrap().run_to_end().unwrap();
            let stored: Vec<TrajectoryPoint> = rows.iter().filter(|(rr, _)| *rr == r).map(|(_, p)| *p).collect();
            assert_eq!(stored, traj.points);
        }
    }
}

#[test]
fn csv_has_fixed_header_and_lf_endings() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(ExperimentKind::BcrtEcdf, dir.path());
    run_experiment(&config).unwrap();
    let text = std::fs::read_to_string(dir.path().join("trajectories/alpha_0.5_q_0.5.csv")).unwrap();
    assert!(text.starts_with("replicate,t,M_t,w1,mmd,bias_level\n"));
    assert!(!text.contains('\r'));
    let rows = csvio::parse(&text).unwrap();
    let first = rows[0].1;
    assert_eq!((first.t, first.m_t), (0, 25));
    assert!((first.bias_level - 0.2 * 5f64.powf(-0.5)).abs() < 1e-15);
}

#[test]
fn single_replicate_has_zero_sd() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(ExperimentKind::CrtEcdf, dir.path());
    config.replicates = 1;
    run_experiment(&config).unwrap();
    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary.len(), 2);
    for s in summary.values() {
        assert_eq!(s.n_replicates, 1);
        assert_eq!(s.sd_rate_w1, 0.0);
        assert_eq!(s.sd_rate_mmd, 0.0);
    }
}

#[test]
fn summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(ExperimentKind::BcrtKde, dir.path());
    run_experiment(&config).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let cell = &json["alpha_1_q_0.5"];
    for key in ["alpha", "q", "theory_rate", "log_flag", "mean_rate_w1", "sd_rate_w1", "mean_rate_mmd", "sd_rate_mmd", "n_replicates"] {
        assert!(!cell[key].is_null(), "missing {key}");
    }
    assert_eq!(cell["theory_rate"], 0.5);
    assert_eq!(cell["log_flag"], false);
    assert_eq!(json["alpha_0.5_q_0.5"]["log_flag"], true);
}

fn manifest(out: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn manifest_lists_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(ExperimentKind::CrtKde, dir.path());
    let m = run_experiment(&config).unwrap();
    assert_eq!(m, manifest(dir.path()));
    assert!(!m.failed());
    assert_eq!(m.config_hash.len(), 64);
    for f in &m.files {
        let meta = std::fs::metadata(dir.path().join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert!(meta.len() > 0, "{f} empty");
    }
    for expected in [
        "summary.json",
        "trajectories/alpha_0.5.csv",
        "rates/alpha_1.json",
        "snapshots/alpha_1.svg",
        "plots/rate_w1.svg",
        "plots/rate_mmd.svg",
        "plots/phase_diagram.svg",
    ] {
        assert!(m.files.iter().any(|f| f == expected), "{expected} not listed");
    }
}

fn failing_neural(out: &Path) -> String {
    format!(
        r#"kind = "crt_neural"
output_dir = "{}"
replicates = 1
iterations = 4
alphas = [0.1, 1.0]

[neural]
total_per_iteration = 40
eval_samples = 200
target_samples = 200
extended_iterations = 2

[neural.mlp]
hidden_width = 8

[neural.train]
epochs_per_iteration = 1
"#,
        out.display()
    )
}

#[test]
fn failed_cell_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let config = parse_config(&failing_neural(dir.path()), None).unwrap();
    let m = run_experiment(&config).unwrap();
    assert!(m.failed());
    let bad = m.cells.iter().find(|c| c.cell == "alpha_0.1").unwrap();
    assert!(!bad.ok && !bad.errors.is_empty());
    assert!(m.cells.iter().find(|c| c.cell == "alpha_1").unwrap().ok);
    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary.keys().collect::<Vec<_>>(), ["alpha_1"]);
}

fn crtlab(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_crtlab")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "replicates = 2\nalpha = [0.5]\n").unwrap();
    let out = crtlab(&["crt", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha") && err.contains("line 2"), "{err}");

    std::fs::write(&cfg, "kind = \"bcrt_ecdf\"\n").unwrap();
    assert_eq!(crtlab(&["crt", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));

    let run_dir = dir.path().join("neural");
    std::fs::write(&cfg, failing_neural(&run_dir)).unwrap();
    let out = crtlab(&["wgan", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&cfg, "iterations = 30\nalphas = [0.4, 0.8]\n").unwrap();
    let ok_dir = dir.path().join("ok");
    let out = crtlab(&["crt", "--config", cfg.to_str().unwrap(), "--out", ok_dir.to_str().unwrap(), "--replicates", "1", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ok_dir.join("summary.json").exists());

    let out = crtlab(&["plot", "--out", ok_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rate_w1.svg"));
}

#[test]
fn theory_check_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = crtlab(&["theory-check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["all_passed"], true);
    assert!(dir.path().join("theory_report.json").exists());
}

#[test]
fn worker_count_does_not_change_outputs() {
    let read = |p: &Path| std::fs::read(p).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(ExperimentKind::BcrtKde, a.path());
    ca.workers = 1;
    let mut cb = small(ExperimentKind::BcrtKde, b.path());
    cb.workers = 4;
    let ma = run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    for f in &ma.files {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}
