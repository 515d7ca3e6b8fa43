use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"sim": {"n_users": 200, "n_ads": 2}, "delta": {"n_boot": 50, "n_bins": 2}, "rsa": {"n_perm": 19}}"#;

fn voilab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voilab")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = voilab(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn stages_one_by_one_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    let summary = ok(&["run", "--config", "cfg.json", "--out", "full"], d);
    assert!(summary.contains("pi_GB") && summary.contains("Behavioral"), "{summary}");

    let progress = voilab(&["simulate", "--config", "cfg.json", "--out", "staged", "--verbose"], d);
    assert_eq!(String::from_utf8_lossy(&progress.stderr).trim(), "[voilab] simulate");
    for stage in ["features", "train", "propensity", "evaluate", "delta", "rsa", "report"] {
        ok(&[stage, "--out", "staged"], d);
    }
    assert_eq!(listing(&d.join("full")), listing(&d.join("staged")));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    let a = ok(&["config", "--config", "cfg.json"], d);
    let b = ok(&["config", "--config", "cfg.json", "--seed", "99"], d);
    assert!(b.contains("\"seed\": 99"), "{b}");
    assert_ne!(a, b);
    // The printed config is already resolved, so feeding it back is a fixed point.
    fs::write(d.join("resolved.json"), &a).unwrap();
    assert_eq!(ok(&["config", "--config", "resolved.json"], d), a);
}

#[test]
fn missing_inputs_and_bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = voilab(&["train", "--out", "nothing_here"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input config.json"));

    fs::write(d.join("bad.json"), r#"{"train_frac": 1.5}"#).unwrap();
    assert!(!voilab(&["run", "--config", "bad.json"], d).status.success());
}

#[test]
fn failed_run_leaves_an_incomplete_marker() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = SMALL.replace(r#""n_perm": 19"#, r#""n_perm": 19, "min_regions": 100000"#);
    fs::write(d.join("cfg.json"), cfg).unwrap();
    let out = voilab(&["run", "--config", "cfg.json", "--out", "o"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("spatial_stats:"));
    assert!(fs::read_to_string(d.join("o/INCOMPLETE")).unwrap().starts_with("stage: rsa"));
}
