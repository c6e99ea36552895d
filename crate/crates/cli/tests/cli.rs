use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rotquant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn rotquant")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("model.json");
    std::fs::write(
        &p,
        r#"{"model": {"hidden_dim": 32, "num_heads": 2, "mlp_dim": 64, "num_layers": 2, "vocab_size": 64, "seq_len": 8}}"#,
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn calibrate_is_reproducible_and_eval_reads_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = run(&["calibrate", "--model-config", &cfg, "--steps", "4", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = run(&["eval", "--manifest", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |k: &str| text.lines().find_map(|l| l.strip_prefix(&format!("{k}\t"))).unwrap().to_string();
    assert_eq!(field("recorded_mse"), field("mse"));
    assert!(text.lines().last().unwrap().starts_with("total\t"));
}

#[test]
fn data_file_and_rotation_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("tokens.qtns");
    let o = run(&["gen-data", "--out", data.to_str().unwrap(), "--sequences", "8", "--seq-len", "8", "--vocab", "64"]);
    assert!(o.status.success());
    let man = dir.path().join("m.json");
    let rot = dir.path().join("rot");
    let o = run(&[
        "calibrate", "--model-config", &cfg, "--data", data.to_str().unwrap(), "--steps", "2",
        "--out", man.to_str().unwrap(), "--export-rotations", rot.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rot.join("r1.qtns").exists() && rot.join("r2.qtns").exists());
    let o = run(&["eval", "--manifest", man.to_str().unwrap(), "--data", data.to_str().unwrap(), "--model-config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sensitivity_lists_every_down_proj_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["sensitivity", "--model-config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let ratios: Vec<f64> = text.lines().map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"hidden_dim": "wide"}}"#).unwrap();
    let out = dir.path().join("m.json");
    let o = run(&["calibrate", "--model-config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.hidden_dim"));

    let o = run(&["eval", "--manifest", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["calibrate", "--weight-bits", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("tokens.qtns");
    std::fs::write(&garbage, b"not a tensor").unwrap();
    let o = run(&["sensitivity", "--data", garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"hidden_dim": 32, "num_heads": 2, "mlp_dim": 64, "num_layers": 2, "vocab_size": 64, "seq_len": 8, "outlier_scale": 1e30}}"#,
    )
    .unwrap();
    let out = dir.path().join("m.json");
    let o = run(&["calibrate", "--model-config", cfg.to_str().unwrap(), "--steps", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn injected_outlier_site_ranks_first() {
    let o = run(&["sensitivity", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("layers.1."), "{text}");
    assert_eq!(text.lines().count(), 2);
}

fn eval_mse(manifest: &Path) -> f64 {
    let o = run(&["eval", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    text.lines().find_map(|l| l.strip_prefix("mse\t")).unwrap().parse().unwrap()
}

#[test]
fn policy_manifest_beats_max_min_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.json");
    let max_min = dir.path().join("max_min.json");
    for (out, init) in [(&policy, "policy"), (&max_min, "max-min-everywhere")] {
        let o = run(&["calibrate", "--steps", "32", "--init", init, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (p, m) = (eval_mse(&policy), eval_mse(&max_min));
    assert!(p < m, "policy {p} vs max_min everywhere {m}");
}

#[test]
fn eval_is_repeatable_and_zero_steps_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let man = dir.path().join("m.json");
    let o = run(&["calibrate", "--model-config", &cfg, "--steps", "0", "--out", man.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&man).unwrap();
    assert!(text.contains("\"init_method\": \"mean_based\""));
    let a = run(&["eval", "--manifest", man.to_str().unwrap()]);
    let b = run(&["eval", "--manifest", man.to_str().unwrap()]);
    assert_eq!(a.stdout, b.stdout);
}
