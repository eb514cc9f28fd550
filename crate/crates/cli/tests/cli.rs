use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn condspec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condspec"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulated(dir: &Path) -> PathBuf {
    let o = condspec(
        &[
            "simulate", "--N", "6", "--n", "64", "--seed", "3", "--out", "data",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("data")
}

const SMALL: [&str; 4] = ["--n-j", "4", "--n-h", "2"];

fn fit(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "fit",
        "--series",
        "data/series.csv",
        "--outcomes",
        "data/outcomes.csv",
        "--seed",
        "7",
        "--out",
        out,
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    condspec(&args, dir)
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_checkpoint_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let o = fit(dir.path(), "run1", &["--iters", "60", "--burnin", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("S=60"));
    let run = dir.path().join("run1");
    assert!(run.join("chain.ckpt").is_file());
    let log = read_json(&run.join("fit_log.json"));
    assert_eq!(log["iterations"], 60);
    assert_eq!(log["retained"], 40);
    assert_eq!(log["acceptance_rates"].as_array().unwrap().len(), 3);
    assert!(
        read_json(&run.join("timing.json"))["mean_seconds"]
            .as_f64()
            .unwrap()
            > 0.0
    );
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_hash"], log["config_hash"]);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    assert!(manifest["outputs"]["chain.ckpt"].is_string());
    assert!(manifest["outputs"].get("timing.json").is_none());
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    for out in ["a", "b"] {
        assert_eq!(
            code(&fit(dir.path(), out, &["--iters", "50", "--burnin", "10"])),
            0
        );
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/chain.ckpt"), read("b/chain.ckpt"));
    assert_eq!(read("a/fit_log.json"), read("b/fit_log.json"));
    let (ma, mb) = (
        read_json(&dir.path().join("a/manifest.json")),
        read_json(&dir.path().join("b/manifest.json")),
    );
    assert_eq!(ma["outputs"], mb["outputs"]);
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let o = condspec(
        &[
            "fit",
            "--series",
            "data/series.csv",
            "--outcomes",
            "missing.csv",
            "--seed",
            "1",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.csv"));
    let no_seed = condspec(
        &[
            "fit",
            "--series",
            "data/series.csv",
            "--outcomes",
            "data/outcomes.csv",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(code(&no_seed), 2);
    assert_eq!(
        code(&fit(dir.path(), "x", &["--iters", "10", "--burnin", "10"])),
        2
    );
    assert_eq!(
        code(&condspec(
            &["study", "--replicates", "0", "--seed", "1", "--out", "s"],
            dir.path()
        )),
        2
    );
    assert_eq!(code(&condspec(&["simulate", "--out", "s"], dir.path())), 2);
    let bad_assert = condspec(
        &[
            "study",
            "--seed",
            "1",
            "--out",
            "s",
            "--assert",
            "coverage:0.9",
        ],
        dir.path(),
    );
    assert_eq!(code(&bad_assert), 2);
    assert!(!dir.path().join("s").exists());
}

#[test]
fn summarize_writes_fifteen_functionals_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    assert_eq!(
        code(&fit(
            dir.path(),
            "run",
            &["--iters", "50", "--burnin", "20"]
        )),
        0
    );
    for out in ["s1", "s2"] {
        let o = condspec(
            &[
                "summarize",
                "--checkpoint",
                "run/chain.ckpt",
                "--out",
                out,
                "--u-points",
                "11",
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let s1 = dir.path().join("s1");
    let files = csv_files(&s1);
    assert_eq!(files.len(), 15, "{files:?}");
    for f in &files {
        assert!(
            s1.join(f.replace(".csv", ".json")).is_file(),
            "sidecar for {f}"
        );
        let a = std::fs::read(s1.join(f)).unwrap();
        let b = std::fs::read(dir.path().join("s2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let power = std::fs::read_to_string(s1.join("band_power_1.csv")).unwrap();
    assert_eq!(power.lines().count(), 12);
    let meta = read_json(&s1.join("band_power_1.json"));
    assert_eq!(meta["bands"][0]["lo"], 0.15);
    let surf = std::fs::read_to_string(s1.join("log_spectrum_2.csv")).unwrap();
    // 31 Fourier frequencies at n = 64, 11 outcome points.
    assert_eq!(surf.lines().count(), 1 + 31 * 11);
}

#[test]
fn custom_band_and_derivatives() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    assert_eq!(
        code(&fit(
            dir.path(),
            "run",
            &["--iters", "40", "--burnin", "20"]
        )),
        0
    );
    let o = condspec(
        &[
            "summarize",
            "--checkpoint",
            "run/chain.ckpt",
            "--out",
            "s",
            "--u-points",
            "9",
            "--band",
            "0.04:0.15",
            "--derivatives",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = dir.path().join("s");
    assert_eq!(csv_files(&s).len(), 18);
    let meta = read_json(&s.join("band_coherence_23.json"));
    assert_eq!(meta["bands"][0]["lo"], 0.04);
    assert_eq!(meta["bands"][0]["hi"], 0.15);
    assert_eq!(
        read_json(&s.join("manifest.json"))["settings"]["band"]["lo"],
        0.04
    );
    let bad = condspec(
        &[
            "summarize",
            "--checkpoint",
            "run/chain.ckpt",
            "--out",
            "t",
            "--band",
            "0.3:0.1",
        ],
        dir.path(),
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn config_hash_mismatch_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    assert_eq!(
        code(&fit(
            dir.path(),
            "run",
            &["--iters", "40", "--burnin", "20"]
        )),
        0
    );
    let o = condspec(
        &[
            "summarize",
            "--checkpoint",
            "run/chain.ckpt",
            "--out",
            "s",
            "--expect-config-hash",
            "00ff",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"));

    let path = dir.path().join("run/manifest.json");
    let mut manifest = read_json(&path);
    manifest["config_hash"] = serde_json::json!("deadbeef");
    std::fs::write(&path, manifest.to_string()).unwrap();
    let o = condspec(
        &["summarize", "--checkpoint", "run/chain.ckpt", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let mut bytes = std::fs::read(dir.path().join("run/chain.ckpt")).unwrap();
    bytes[8] = 99;
    std::fs::write(dir.path().join("bad.ckpt"), bytes).unwrap();
    let o = condspec(
        &["summarize", "--checkpoint", "bad.ckpt", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 5\niters = 50\nburnin = 10\nn_j = 3\nn_h = 2\nseries = \"data/series.csv\"\noutcomes = \"data/outcomes.csv\"\n",
    )
    .unwrap();
    let o = condspec(
        &[
            "--config", "run.toml", "fit", "--out", "run", "--iters", "40",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let settings = &read_json(&dir.path().join("run/manifest.json"))["settings"]["model"];
    assert_eq!(settings["iterations"], 40);
    assert_eq!(settings["burn_in"], 10);
    assert_eq!(settings["seed"], 5);
    assert_eq!(settings["n_j"]["fixed"], 3);
    std::fs::write(dir.path().join("bad.toml"), "sed = 5\n").unwrap();
    assert_eq!(
        code(&condspec(
            &["--config", "bad.toml", "fit", "--out", "x"],
            dir.path()
        )),
        2
    );
}

#[test]
fn resumed_chain_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    assert_eq!(
        code(&fit(
            dir.path(),
            "full",
            &["--iters", "60", "--burnin", "20"]
        )),
        0
    );
    assert_eq!(
        code(&fit(
            dir.path(),
            "part",
            &["--iters", "35", "--burnin", "20"]
        )),
        0
    );
    let o = fit(
        dir.path(),
        "rest",
        &[
            "--iters",
            "60",
            "--burnin",
            "20",
            "--resume",
            "part/chain.ckpt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("full/chain.ckpt"), read("rest/chain.ckpt"));
    let changed = fit(
        dir.path(),
        "other",
        &[
            "--iters",
            "60",
            "--burnin",
            "25",
            "--resume",
            "part/chain.ckpt",
        ],
    );
    assert_eq!(code(&changed), 2);
}

#[test]
fn small_study_with_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "study",
        "--N",
        "12",
        "--n",
        "60",
        "--replicates",
        "1",
        "--seed",
        "1",
        "--iters",
        "60",
        "--burnin",
        "20",
        "--n-j",
        "4",
        "--n-h",
        "2",
        "--u-points",
        "21",
    ];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", "ok", "--assert", "coverage:0:1"]);
    let o = condspec(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("assert coverage:0:1: PASS"));
    let report = std::fs::read_to_string(dir.path().join("ok/report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.contains(",bayes,")).count(), 9);
    let manifest = read_json(&dir.path().join("ok/manifest.json"));
    assert!(manifest["outputs"]["report.csv"].is_string());
    assert!(manifest["outputs"]["replicates.json"].is_string());

    let mut args = base.to_vec();
    args.extend_from_slice(&[
        "--out",
        "strict",
        "--assert",
        "coverage:1:1",
        "--assert",
        "coverage:0:1",
    ]);
    let o = condspec(&args, dir.path());
    // One replicate at 40 draws cannot cover every point of all nine curves.
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("assert coverage:1:1: FAIL"));
}

#[test]
fn study_smoke_at_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = condspec(
        &[
            "study",
            "--N",
            "25",
            "--n",
            "300",
            "--replicates",
            "2",
            "--seed",
            "1",
            "--out",
            "s",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("s/report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.contains(",bayes,")).count(), 9);
    let reps = read_json(&dir.path().join("s/replicates.json"));
    assert_eq!(reps.as_array().unwrap().len(), 2);
    assert!(reps[0]["error"].is_null());
}
