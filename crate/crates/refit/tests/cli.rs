//! Command-line surface: artifacts, exit codes, determinism, config files.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refit"))
}

fn fresh_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("refit-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_metrics(dir: &Path, scenario: &str) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(dir.join(format!("{scenario}_metrics.csv"))).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(|s| s.to_string()).collect()).collect()
}

#[test]
fn run_writes_all_artifacts_and_refit_beats_biased() {
    let dir = fresh_dir("artifacts");
    let status = bin()
        .args([
            "run",
            "--scenario",
            "shapes128",
            "--penalty",
            "SD",
            "--solver",
            "pd",
            "--sigma",
            "50",
            "--lambda",
            "750",
            "--iters",
            "1500",
            "--seed",
            "1",
            "--out",
        ])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    for stem in ["y", "xhat", "xtilde"] {
        assert!(dir.join(format!("shapes128_SD_{stem}.pgm")).exists(), "missing {stem}.pgm");
        assert!(dir.join(format!("shapes128_SD_{stem}.rfl")).exists(), "missing {stem}.rfl");
    }
    assert!(dir.join("shapes128_SD_trace.csv").exists());
    let rows = read_metrics(&dir, "shapes128");
    assert_eq!(rows.len(), 1);
    let psnr_biased: f64 = rows[0][3].parse().unwrap();
    let psnr_refit: f64 = rows[0][4].parse().unwrap();
    assert!(psnr_refit > psnr_biased, "refit {psnr_refit} vs biased {psnr_biased}");
}

#[test]
fn penalty_all_emits_six_rows_with_identical_biased_columns() {
    let dir = fresh_dir("all");
    let status = bin()
        .args(["run", "--scenario", "shapes128", "--penalty", "all", "--iters", "30", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_metrics(&dir, "shapes128");
    assert_eq!(rows.len(), 6);
    for row in &rows[1..] {
        // psnr_noisy, psnr_biased and fidelity_biased columns match row 0.
        assert_eq!(row[2], rows[0][2]);
        assert_eq!(row[3], rows[0][3]);
        assert_eq!(row[5], rows[0][5]);
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    for args in [
        vec!["run", "--scenario", "shapes128", "--penalty", "XX"],
        vec!["run", "--scenario", "nonsense"],
        vec!["run"],
        vec!["verify", "nonsense"],
        vec!["landscape", "--penalty", "banana"],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "args {args:?} gave {:?}", out.status.code());
    }
}

#[test]
fn identical_configs_produce_byte_identical_metrics() {
    let dir_a = fresh_dir("identical-a");
    let dir_b = fresh_dir("identical-b");
    for dir in [&dir_a, &dir_b] {
        let status = bin()
            .args(["run", "--scenario", "shapes128", "--penalty", "SO", "--iters", "40", "--seed", "5", "--out"])
            .arg(dir)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir_a.join("shapes128_metrics.csv")).unwrap();
    let b = std::fs::read(dir_b.join("shapes128_metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ta = std::fs::read(dir_a.join("shapes128_SO_trace.csv")).unwrap();
    let tb = std::fs::read(dir_b.join("shapes128_SO_trace.csv")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn refit_out_env_var_overrides_the_flag() {
    let flag_dir = fresh_dir("env-flag");
    let env_dir = fresh_dir("env-real");
    let status = bin()
        .args(["run", "--scenario", "shapes128", "--penalty", "SD", "--iters", "10", "--out"])
        .arg(&flag_dir)
        .env("REFIT_OUT", &env_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_dir.join("shapes128_metrics.csv").exists());
    assert!(!flag_dir.join("shapes128_metrics.csv").exists());
}

#[test]
fn config_file_preloads_flags_and_explicit_flags_win() {
    let dir = fresh_dir("config");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "# preset for the shapes experiment\nscenario=shapes128\npenalty=SD\niters=25\nsigma=30\nseed=2\n",
    )
    .unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--sigma", "40", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_metrics(&dir, "shapes128");
    let psnr_noisy: f64 = rows[0][2].parse().unwrap();
    // sigma=40 from the flag (16.1 dB), not sigma=30 from the file (18.6 dB).
    let expected = 10.0 * (255.0f64 * 255.0 / (40.0 * 40.0)).log10();
    assert!((psnr_noisy - expected).abs() < 0.3, "psnr_noisy {psnr_noisy} vs expected {expected}");
}

#[test]
fn landscape_csv_matches_polar_samples() {
    let dir = fresh_dir("landscape");
    let status = bin()
        .args(["landscape", "--penalty", "SD", "--lambda", "1", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(dir.join("landscape_SD.csv")).unwrap();
    let mut pi_a1 = None;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let theta: f64 = cols[0].parse().unwrap();
        let a: f64 = cols[1].parse().unwrap();
        let v: f64 = cols[2].parse().unwrap();
        if theta == 0.0 {
            assert_eq!(v, 0.0, "SD at theta=0, A={a}");
        }
        if (theta - std::f64::consts::PI).abs() < 1e-12 && (a - 1.0).abs() < 1e-12 {
            pi_a1 = Some(v);
        }
    }
    assert!((pi_a1.unwrap() - 2.0).abs() < 1e-12);

    let status = bin().args(["landscape", "--penalty", "HD", "--out"]).arg(&dir).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(dir.join("landscape_HD.csv")).unwrap();
    assert!(text.contains(",inf"), "hard penalty landscape should encode indicators as inf");
}

#[test]
fn verify_equivalence_suite_exits_zero() {
    let out = bin().args(["verify", "equivalence"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 failures"), "{stdout}");
}
