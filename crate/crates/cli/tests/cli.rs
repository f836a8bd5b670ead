use std::f64::consts::TAU;
use std::path::Path;
use std::process::{Command, Output};

use hyperspde_cli::artifacts::{content_hash, read_manifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hyperspde"));
    c.env_remove("HYPERSPDE_OUT_DIR");
    c
}

fn write_config(dir: &Path, json: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn run_with(dir: &Path, sub: &str, json: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir, json);
    bin().arg(sub).arg("--config").arg(cfg).args(extra).output().unwrap()
}

fn manifest(dir: &Path) -> Vec<(String, String)> {
    read_manifest(&std::fs::read_to_string(dir.join("manifest.txt")).unwrap())
}

fn lookup<'a>(m: &'a [(String, String)], key: &str) -> &'a str {
    m.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or_else(|| panic!("missing {key}"))
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

const SIMULATE: &str = r#"{"grid": {"n": 64}, "solver": {"steps": 4096, "record_every": 1024}}"#;

#[test]
fn simulate_matches_shifted_initial_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_with(dir.path(), "simulate", SIMULATE, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let path = read_csv(&out.join("path.csv"));
    let w: f64 = path.last().unwrap()[1].parse().unwrap();
    let fin = read_csv(&out.join("final_field.csv"));
    assert_eq!(fin.len(), 64);
    let width2 = 0.125;
    let (mut err, mut norm) = (0.0, 0.0);
    for row in &fin {
        let j: usize = row[1].parse().unwrap();
        let re: f64 = row[2].parse().unwrap();
        let x = TAU * j as f64 / 64.0;
        // nearest periodic image of the shifted point relative to the bump centre
        let d = (x + w - std::f64::consts::PI).rem_euclid(TAU);
        let d = if d > std::f64::consts::PI { d - TAU } else { d };
        let exact = (-d * d / (2.0 * width2)).exp();
        err += (re - exact).powi(2);
        norm += exact * exact;
    }
    let rel = (err / norm).sqrt();
    assert!(rel < 1e-3, "relative error {rel:e}");
}

#[test]
fn manifest_hashes_match_files_and_record_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_with(dir.path(), "simulate", SIMULATE, &["--out", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let m = manifest(&out);
    let mut artifacts = 0;
    for (k, v) in &m {
        if let Some(name) = k.strip_prefix("artifact.") {
            assert_eq!(&content_hash(&std::fs::read(out.join(name)).unwrap()), v, "{name}");
            artifacts += 1;
        }
    }
    assert!(artifacts >= 4);
    assert_eq!(lookup(&m, "seed"), "5");
    assert_eq!(lookup(&m, "status"), "ok");
    assert_eq!(lookup(&m, "inconclusive"), "false");
    // defaults not present in the input file are still recorded
    assert_eq!(lookup(&m, "config.grid.n"), "64");
    assert!(m.iter().any(|(k, _)| k == "config.problem.horizon"));
    assert!(m.iter().any(|(k, _)| k.starts_with("config.study.")));
    let cfg = std::fs::read(out.join("config.json")).unwrap();
    assert_eq!(lookup(&m, "config_hash"), content_hash(&cfg));
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<_> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    for (out, seed) in outs.iter().zip(["1", "1", "2"]) {
        let o = run_with(dir.path(), "simulate", SIMULATE, &["--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &Path| std::fs::read(d.join("final_field.csv")).unwrap();
    assert_eq!(read(&outs[0]), read(&outs[1]));
    assert_ne!(read(&outs[0]), read(&outs[2]));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(dir.path(), "simulate", r#"{"grid": {"n": 64, "nn": 3}}"#, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("nn"));
}

#[test]
fn malformed_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for json in [
        r#"{"grid": {"n": 63}}"#,
        r#"{"solver": {"steps": 0}}"#,
        r#"{"subcommand": "ldp"}"#,
        r#"{"problem": {"u0": {"gaussian_bump": {"width": -1.0}}}}"#,
        "not json",
    ] {
        let o = run_with(dir.path(), "simulate", json, &["--out", dir.path().join("x").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{json}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = bin().arg("simulate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn explicit_euler_blows_up_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let json = r#"{"grid": {"n": 128}, "solver": {"steps": 256, "scheme": "euler_ito"}}"#;
    let o = run_with(dir.path(), "simulate", json, &["--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "blowup");
}

#[test]
fn env_var_overrides_output_dir_but_not_flag() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from_env");
    let cfg = write_config(dir.path(), r#"{"grid": {"n": 32}, "solver": {"steps": 256}, "output_dir": "ignored"}"#);
    let o = bin()
        .current_dir(dir.path())
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env("HYPERSPDE_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.join("manifest.txt").exists());
    assert!(!dir.path().join("ignored").exists());

    let flag_dir = dir.path().join("from_flag");
    let o = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_dir)
        .env("HYPERSPDE_OUT_DIR", dir.path().join("unused"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.join("manifest.txt").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn check_conditions_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"grid": {"n": 64}}"#, "pass"),
        (
            r#"{"grid": {"n": 64}, "problem": {"a": {"kind": "transport", "alpha": {"fourier": {"mean": 1.0, "sin": [0.5]}}}}}"#,
            "warn",
        ),
        (
            r#"{"grid": {"n": 64}, "problem": {"a": null, "b": {"kind": "symmetrized_transport", "alpha": {"const": 1.0}}}}"#,
            "pass",
        ),
    ];
    for (i, (json, verdict)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("c{i}"));
        let o = run_with(dir.path(), "check-conditions", json, &["--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{json}");
        let stdout = String::from_utf8_lossy(&o.stdout);
        for op in ["A", "B", "L", "M"] {
            assert!(stdout.lines().any(|l| l.starts_with(op)), "no {op} row in {stdout}");
        }
        assert!(stdout.contains(&format!("verdict: {verdict}")), "{json}: {stdout}");
        assert_eq!(lookup(&manifest(&out), "summary.verdict"), *verdict);
    }
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["selftest", "--out"]).arg(dir.path()).output().unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let rows = read_csv(&dir.path().join("selftest.csv"));
    assert!(rows.len() >= 20);
    assert!(rows.iter().all(|r| r[1] == "PASS"));
}

#[test]
fn support_reports_inconclusive_with_zero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let json = r#"{"grid": {"n": 32}, "solver": {"steps": 256},
                   "study": {"paths": 4, "deltas": [0.001]}}"#;
    let o = run_with(dir.path(), "support", json, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("INCONCLUSIVE"));
    assert_eq!(lookup(&manifest(&out), "inconclusive"), "true");
}
