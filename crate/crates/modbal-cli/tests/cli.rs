//! End-to-end checks of the command-line surface: exit codes, file
//! outputs, determinism, and the --no-awc equivalence.

use std::path::Path;
use std::process::{Command, Output};

fn modbal() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modbal"))
}

const TINY: &str = "\
data.snr.R = 8
data.snr.L = 6
data.snr.M = 1
data.snr.W = 0.5
data.n_samples = 80
data.joints = 2
data.latent_dim = 6
data.input_dim.R = 8
data.input_dim.L = 8
data.input_dim.M = 6
data.input_dim.W = 6
model.hidden = 8
model.unified_dim = 4
balance.window_epochs = 1
balance.fim_sample_size = 8
run.epochs = 2
run.batch_size = 16
";

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    modbal().args(args).output().expect("spawn modbal")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_deterministic_and_guards_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out1 = dir.path().join("d1");
    let first = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert!(first.status.success(), "{}", stderr(&first));

    // same outputs again without --force-overwrite: refused
    let refused = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert_eq!(refused.status.code(), Some(3), "{}", stderr(&refused));

    let forced = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
        "--force-overwrite",
    ]);
    assert!(forced.status.success());
    assert_eq!(stdout(&first), stdout(&forced), "checksums must be identical");
}

#[test]
fn missing_snr_key_exits_2_with_key_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "data.snr.R = 8\ndata.snr.L = 6\ndata.snr.M = 1\n");
    let out = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.snr.W"), "{}", stderr(&out));
}

#[test]
fn single_sample_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\n"));
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--set",
        "data.n_samples=1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn train_writes_everything_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("run");
    let args = [
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "7",
    ];
    let first = run(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    for f in ["report.csv", "scores.csv", "balance.csv", "timing.csv", "summary.json", "model.modbal", "config.txt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let report1 = std::fs::read(out_dir.join("report.csv")).unwrap();
    let scores1 = std::fs::read(out_dir.join("scores.csv")).unwrap();

    let mut args2: Vec<&str> = args.to_vec();
    args2.push("--force-overwrite");
    let second = run(&args2);
    assert!(second.status.success());
    assert_eq!(report1, std::fs::read(out_dir.join("report.csv")).unwrap());
    assert_eq!(scores1, std::fs::read(out_dir.join("scores.csv")).unwrap());
}

#[test]
fn no_awc_flag_equals_zero_window_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let flag_dir = dir.path().join("flag");
    let zero_dir = dir.path().join("zero");
    let a = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        flag_dir.to_str().unwrap(),
        "--no-awc",
    ]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        zero_dir.to_str().unwrap(),
        "--set",
        "balance.window_epochs=0",
    ]);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(
        std::fs::read(flag_dir.join("report.csv")).unwrap(),
        std::fs::read(zero_dir.join("report.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(flag_dir.join("scores.csv")).unwrap(),
        std::fs::read(zero_dir.join("scores.csv")).unwrap()
    );
}

#[test]
fn nan_abort_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("nan").to_str().unwrap(),
        "--set",
        "optim.lr=1e308",
        "--set",
        "balance.window_epochs=0",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("NaN"), "{}", stderr(&out));
}

#[test]
fn report_builds_curves_and_k_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let sweep_dir = dir.path().join("sweep");
    for k in [0usize, 1] {
        let out_dir = sweep_dir.join(format!("k{k}"));
        let o = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--set",
            &format!("balance.window_epochs={k}"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let rep_dir = dir.path().join("plots");
    let o = run(&[
        "report",
        "--run",
        sweep_dir.join("k1").to_str().unwrap(),
        "--runs",
        sweep_dir.to_str().unwrap(),
        "--out",
        rep_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let curves = std::fs::read_to_string(rep_dir.join("shapley_curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "epoch,phi_R,phi_L,phi_M,phi_W");
    // header + one row per epoch
    assert_eq!(curves.lines().count(), 3);

    let sweep = std::fs::read_to_string(rep_dir.join("k_sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "K,mpjpe,pa_mpjpe");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("1,"));
}

#[test]
fn report_without_inputs_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_missing_input_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "report",
        "--run",
        dir.path().join("nonexistent").to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn ablate_grid_contains_required_rows_and_matches_no_awc_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let ab_dir = dir.path().join("ablate");
    let o = modbal()
        .env("MODBAL_THREADS", "2")
        .args([
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ab_dir.to_str().unwrap(),
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(ab_dir.join("ablation.csv")).unwrap();
    for needle in ["0,10000,", "10000,0,", "20000,10000,"] {
        assert!(table.contains(needle), "missing grid row {needle} in:\n{table}");
    }
    assert!(table.lines().next().unwrap().starts_with('#'), "sign convention documented");

    // the baseline run equals train --no-awc for the same seed
    let solo = dir.path().join("solo");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        solo.to_str().unwrap(),
        "--seed",
        "5",
        "--no-awc",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(ab_dir.join("baseline/report.csv")).unwrap(),
        std::fs::read(solo.join("report.csv")).unwrap()
    );
}

#[test]
fn profile_emits_table_2_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("prof");
    let o = run(&[
        "profile",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--batches",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out_dir.join("overhead.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "fusion,n_modalities,n_params,forward_ms,backward_ms,pose_est_ms,correlation_ms,score_calc_ms,overhead_pct"
    );
    // 3 fusion kinds x 3 modality counts
    assert_eq!(table.lines().count(), 10);
}
