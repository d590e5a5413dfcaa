use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn perstab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_perstab"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malformed_key_exits_with_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "model = \"heat\"\n[resolution]\nzone_pionts = 8\n").unwrap();
    let out = perstab(&["spectrum", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["key"], "zone_pionts");
}

#[test]
fn missing_config_and_bad_flags_are_config_errors() {
    assert_eq!(perstab(&["spectrum"], &[]).status.code(), Some(2));
    let out = perstab(&["spectrum", "--threads", "many"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(serde_json::from_slice::<serde_json::Value>(&out.stderr).is_ok());
}

#[test]
fn heat_spectrum_is_deterministic_and_manifested() {
    let cfg = configs().join("heat.toml");
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        let out = perstab(&["spectrum", "--config", cfg.to_str().unwrap(), "--out", r.path().to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["spectrum.csv", "spectrum.json", "config.toml"] {
        assert_eq!(std::fs::read(runs[0].path().join(name)).unwrap(), std::fs::read(runs[1].path().join(name)).unwrap());
    }
    let m = json(&runs[0].path().join("manifest.json"));
    assert_eq!(m["command"], "spectrum");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["stages"].as_array().unwrap().iter().any(|s| s["name"] == "eigenvalues"));
    let spec = json(&runs[0].path().join("spectrum.json"));
    assert_eq!(spec["stable"], true);
    // 17 significant digits in every CSV float.
    let csv = std::fs::read_to_string(runs[0].path().join("spectrum.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap().split(',').next().unwrap();
    assert_eq!(first.split('e').next().unwrap().trim_start_matches('-').len(), 18);
}

#[test]
fn environment_overrides_reach_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("heat.toml");
    let out = perstab(
        &["spectrum", "--config", cfg.to_str().unwrap()],
        &[("PERSTAB_OUT", dir.path().to_str().unwrap()), ("PERSTAB_RESOLUTION__ZONE_POINTS", "5")],
    );
    assert!(out.status.success());
    let effective = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(effective.contains("zone_points = 5"));
}

#[test]
fn vdw_report_flags_high_frequency_instability_with_hyperbolic_averages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("vdw.toml");
    let out = perstab(&["stability-report", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let r = json(&dir.path().join("stability.json"));
    assert_eq!(r["d1"]["pass"], false);
    assert_eq!(r["d1"]["worst_is_high_frequency"], true);
    assert_eq!(r["low_frequency"]["pass"], true);
    assert_eq!(json(&dir.path().join("manifest.json"))["pass"], false);
}

#[test]
fn verify_all_writes_pass_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("verify.toml");
    std::fs::write(&cfg, "model = \"heat\"\n[verify]\nonly = [1, 5, 12]\n").unwrap();
    let out = perstab(&["verify-all", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("PASS")).count(), 3);
    let v = json(&dir.path().join("verify.json"));
    assert_eq!(v["pass"], true);
    assert_eq!(v["criteria"].as_array().unwrap().len(), 3);
    assert_eq!(json(&dir.path().join("manifest.json"))["pass"], true);
}

#[test]
fn evolve_snapshots_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("synthetic.toml");
    let out = perstab(
        &["evolve", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        &[
            ("PERSTAB_RESOLUTION__CELLS", "32"),
            ("PERSTAB_EVOLVE__SNAPSHOTS", "true"),
            ("PERSTAB_EVOLVE__TIMES", "{ start = 1.0, stop = 2.0, count = 2, spacing = \"linear\" }"),
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(dir.path().join("snapshots/evolve_0001.bin")).unwrap();
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    let real = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    assert_eq!(word(0), 1);
    // Points along the axis, then components and samples per cell.
    let (points, components, samples) = (word(1) as usize, word(2) as usize, word(3) as usize);
    assert_eq!((points, components, samples), (32 * 16, 2, 16));
    assert_eq!(real(4), 32.0);
    assert_eq!(real(5), 2.0);
    assert_eq!(bytes.len(), 8 * (6 + points * components));
}
