use std::fs;
use std::process::Command;

use lgenet::pipeline::Config;

const BIN: &str = env!("CARGO_BIN_EXE_lgenet");

#[test]
fn unknown_flag_exits_with_two() {
    let out = Command::new(BIN).args(["synth", "--seed", "1", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_error_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["evaluate", "--confusion"])
        .arg(dir.path().join("missing.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: kind="));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.bin", "b.bin"] {
        let st = Command::new(BIN)
            .args(["synth", "--seed", "7", "--extent", "30", "--out"])
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = fs::read(dir.path().join("a.bin")).unwrap();
    let b = fs::read(dir.path().join("b.bin")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn evaluate_reads_a_confusion_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "a b\n3 1\n0 4\n").unwrap();
    let out = Command::new(BIN).arg("evaluate").arg("--confusion").arg(&path).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("oa=0.875000"), "{text}");
    assert!(text.contains("precision.a=1.000000"), "{text}");
    assert!(text.contains("recall.b=1.000000"), "{text}");
}

#[test]
fn desk_config_survives_toml() {
    let c = Config::desk();
    assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    assert_eq!(c.train.spheres_per_batch, 4);
    assert_eq!(c.train.class_weight_power, 0.5);
    assert!(!c.train.balanced_centers);
    assert_eq!(c.train.bn_refresh_batches, 16);
    let mut bad = c.clone();
    bad.train.class_weight_power = -1.0;
    assert!(bad.validate().is_err());
}
