use std::fs;
use std::process::Command;

fn homsim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_homsim"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let out = homsim().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = homsim().args(["validate", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn oracle_writes_a_dip_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = homsim()
        .args(["oracle", "--desk-scale", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("oracle_dip.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("source,index,delay_ps,tilt_nu_x,tilt_nu_y"));
    // closed form and quadrature for each of the 25 tilts
    assert_eq!(lines.count(), 50);
}

#[test]
fn bad_config_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[grid]\ncounts = [64, 64]\n").unwrap();
    let out = homsim().args(["characterize", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = homsim()
        .args(["characterize", "--config"])
        .arg(dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_run_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = hom_sim::config::SimulationConfig::desk_scale();
    c.grid.counts = [32, 32, 32];
    c.ensemble.realizations = 2;
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, c.to_toml_string()).unwrap();
    let out_dir = dir.path().join("run");
    let out = homsim()
        .args(["single-run", "--realization", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.toml").exists());
    assert!(out_dir.join("fields/signal_output.f64").exists());
}
