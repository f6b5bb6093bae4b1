use std::process::Command;

fn snac() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snac"))
}

#[test]
fn selftest_succeeds() {
    let out = snac().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest ok"));
}

#[test]
fn run_then_report_round_trip() {
    let dir = std::env::temp_dir().join(format!("snac-cli-test-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, "name = \"tiny\"\norbits = 0.02\n").unwrap();
    let out_dir = dir.join("run");
    let out = snac().arg("run").arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "filter.csv", "config.toml", "timing.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let rep = snac().arg("report").arg(&out_dir).output().unwrap();
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    let from_run: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let from_logs: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(from_run, from_logs);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = std::env::temp_dir().join(format!("snac-cli-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "orbits = -1.0\n").unwrap();
    let out = snac().arg("run").arg(&cfg).arg("--out").arg(dir.join("run")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let _ = std::fs::remove_dir_all(&dir);
}
