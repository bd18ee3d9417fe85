use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use binaural_beamform::experiment::parse_results_csv;

const CONFIG: &str = r#"{
  "scene": {
    "target": { "angle_deg": 90, "distance_m": 0.8 },
    "interferers": [
      { "angle_deg": 15, "distance_m": 0.8 },
      { "angle_deg": 240, "distance_m": 0.8 }
    ],
    "self_noise_snr_db": 50,
    "duration_s": 0.5
  },
  "methods": [
    { "method": "bmvdr" },
    { "method": "relaxed", "c": [0.5], "k_max": [10] }
  ],
  "sweep": { "r": [1, 2] },
  "output_dir": "out",
  "seed": 4
}"#;

fn beamform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamform")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn version_prints_the_crate_version() {
    let out = beamform(&["version"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("beamform {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn validate_accepts_good_and_names_bad_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = beamform(&["validate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("ok (2 method configurations, 2 interferer counts)"));

    let cfg = write_config(dir.path(), &CONFIG.replace("\"c\": [0.5]", "\"c\": [1.5]"));
    let out = beamform(&["validate", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("methods[1].c"), "{err}");

    let cfg = write_config(dir.path(), &CONFIG.replace("\"r\": [1, 2]", "\"r\": [3]"));
    let out = beamform(&["validate", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("sweep.r"));

    let out = beamform(&["validate", "--config", &dir.path().join("missing.json").to_string_lossy()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("missing.json"));
}

#[test]
fn runs_are_byte_identical_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let res = beamform(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "2"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let csv_a = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("results.csv")).unwrap());
    let rows = parse_results_csv(&csv_a).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.seed == 4));

    let res = beamform(&["run", "--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "9"]);
    assert!(res.status.success());
    let csv_c = fs::read(c.join("results.csv")).unwrap();
    assert_ne!(csv_a, csv_c);
    assert!(parse_results_csv(&csv_c).unwrap().iter().all(|r| r.seed == 9));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(c.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert!(!c.join("bins.json").exists());
}

#[test]
fn default_output_dir_is_relative_to_the_config_and_bins_dump_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let res = beamform(&["run", "--config", &cfg, "--dump-bins"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let out = dir.path().join("out");
    for f in ["results.csv", "results.json", "run_meta.json", "bins.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let bins: serde_json::Value = serde_json::from_slice(&fs::read(out.join("bins.json")).unwrap()).unwrap();
    // 2 variants x 2 interferer counts x 129 bins
    assert_eq!(bins.as_array().map(|a| a.len()), Some(2 * 2 * 129));
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn bad_json_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{ not json");
    let out = beamform(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:") && err.contains("config.json"), "{err}");
}
