use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use xood_cli::{expand_config, outside_band, r_squared, read_scores};

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn xood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xood")).args(args).output().unwrap()
}

fn os(args: &[&str]) -> Vec<OsString> {
    args.iter().map(OsString::from).collect()
}

#[test]
fn config_entries_go_before_command_line_flags() {
    let dir = tmp("config");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "# defaults\nseed = 4\ncalib_fraction=0.3\nforce=true\nmsp=false\n").unwrap();
    let args = os(&["xood", "--config", cfg.to_str().unwrap(), "train", "--seed", "9"]);
    let got = expand_config(args).unwrap();
    let got: Vec<String> = got.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    assert_eq!(
        got[3..],
        ["train", "--seed", "4", "--calib-fraction", "0.3", "--force", "--seed", "9"].map(String::from)
    );
}

#[test]
fn malformed_config_exits_with_code_2() {
    let dir = tmp("badconfig");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "seed 4\n").unwrap();
    let out = xood(&["gen", "--config", cfg.to_str().unwrap(), "--kind", "blobs", "--count", "3", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(xood(&["fit-m"]).status.code(), Some(2));
    let dir = tmp("missing");
    let out = dir.join("f.csv");
    let status = xood(&["extract", "--model", "/nonexistent/net", "--images", "/nonexistent/x", "--out", out.to_str().unwrap()]);
    assert_eq!(status.status.code(), Some(3));
}

#[test]
fn gen_and_distort_write_datasets_and_manifests() {
    let dir = tmp("gen");
    let images = dir.join("blobs.idx");
    let labels = dir.join("blobs.labels.idx");
    let out = xood(&[
        "gen", "--kind", "blobs", "--count", "12", "--seed", "3", "--out", images.to_str().unwrap(), "--labels-out",
        labels.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = xood::data::Dataset::load(&images, Some(&labels)).unwrap();
    assert_eq!(ds.len(), 12);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("blobs.idx.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["kind"], "blobs");
    assert_eq!(manifest["seed"], 3);

    let mixed = dir.join("mixed.xten");
    let mixed_labels = dir.join("mixed.labels");
    let out = xood(&[
        "distort", "--images", images.to_str().unwrap(), "--labels", labels.to_str().unwrap(), "--kind", "mixup", "--seed",
        "5", "--out", mixed.to_str().unwrap(), "--labels-out", mixed_labels.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let back = xood::data::Dataset::load(&mixed, Some(&mixed_labels)).unwrap();
    assert_eq!(back.len(), 12);
    assert_ne!(back.images, ds.images);
}

#[test]
fn eval_writes_header_rows_and_average() {
    let dir = tmp("eval");
    let id = dir.join("id.csv");
    let ood = dir.join("ood.csv");
    let id_scores: String = (0..20).map(|i| format!("{i},{},in\n", 10 + i)).collect();
    fs::write(&id, format!("index,score,decision\n{id_scores}")).unwrap();
    fs::write(&ood, "index,score,decision\n0,1.0,out\n1,2.0,out\n2,30.0,in\n").unwrap();
    let table = dir.join("metrics.csv");
    let out = xood(&[
        "eval", "--id", id.to_str().unwrap(), "--ood", &format!("near={}", ood.display()), "--method", "m", "--in-dist",
        "toy", "--out", table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], xood_cli::METRICS_HEADER);
    assert!(lines[1].starts_with("toy,near,m,"));
    assert!(lines[2].starts_with("toy,average,m,"));
    let f: Vec<f64> = lines[1].split(',').skip(3).map(|v| v.parse().unwrap()).collect();
    assert!((f[0] - 40.0 / 60.0).abs() < 1e-6);
    assert!((f[1] - 2.0 / 3.0).abs() < 1e-6);
    assert!((f[1] + f[3] - 1.0).abs() < 1e-9);
}

#[test]
fn score_files_parse_back() {
    let dir = tmp("scores");
    let p = dir.join("s.csv");
    fs::write(&p, "index,score,decision\n0,-1.5,out\n1,2e-3,in\n").unwrap();
    assert_eq!(read_scores(&p).unwrap(), vec![-1.5, 2e-3]);
    fs::write(&p, "index,value\n0,1\n").unwrap();
    assert!(read_scores(&p).is_err());
}

#[test]
fn helper_statistics() {
    assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    assert!(r_squared(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 1.0, 3.0]) < 0.5);
    let id: Vec<f64> = (0..100).map(f64::from).collect();
    assert_eq!(outside_band(&id, &[-5.0, 50.0, 200.0, 0.5]), 0.5);
}
