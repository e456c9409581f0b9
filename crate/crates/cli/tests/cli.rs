use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ptqcal_core::calibrators::calibrate_mse;
use ptqcal_core::dataio::{profile_dumps, read_cache, write_batch, DumpTensor};
use ptqcal_core::histogram::DEFAULT_BINS;

fn ptqcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptqcal")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two layers of deterministic pseudo-random values, one with a far outlier.
fn dumps(dir: &Path) -> PathBuf {
    let root = dir.join("dumps");
    for batch in 0..3 {
        let a: Vec<f32> = (0..400).map(|i| (((i * 7919 + batch * 104729) % 2003) as f32 - 1001.0) / 300.0).collect();
        let mut b = a.iter().map(|x| x * 0.1).collect::<Vec<_>>();
        if batch == 1 {
            b[17] = 25.0;
        }
        write_batch(&root, "enc.a", batch, &DumpTensor::new(vec![20, 20], a).unwrap()).unwrap();
        write_batch(&root, "enc.b", batch, &DumpTensor::new(vec![400], b).unwrap()).unwrap();
    }
    root
}

#[test]
fn help_lists_every_flag() {
    let o = ptqcal(&["--help"]);
    assert!(o.status.success());
    for cmd in ["calibrate", "stablequant", "compare", "eval-dump"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
    let cases: [(&str, &[&str]); 4] = [
        ("calibrate", &["--dumps", "--refnet", "--method", "--p", "--bits", "--out", "--seed"]),
        ("stablequant", &["--refnet", "--gamma", "--grid-step", "--bits", "--report", "--seed"]),
        ("compare", &["--refnet", "--bits", "--report", "--seed"]),
        ("eval-dump", &["--dumps", "--cache", "--bits"]),
    ];
    for (cmd, flags) in cases {
        let o = ptqcal(&[cmd, "--help"]);
        assert!(o.status.success());
        for f in flags {
            assert!(stdout(&o).contains(f), "{cmd} {f}");
        }
    }
}

#[test]
fn calibrate_refnet_gives_one_entry_per_site_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cache"), dir.path().join("b.cache"));
    let cfg = config("benign.toml");
    for out in [&a, &b] {
        let o = ptqcal(&["calibrate", "--refnet", &cfg, "--method", "mse", "--bits", "8", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let cache = read_cache(&a).unwrap();
    let names: Vec<&str> = cache.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["conv0", "conv1", "conv2", "attn0", "attn1", "head"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let cfg = config("benign.toml");
    let cases: Vec<Vec<&str>> = vec![
        vec!["calibrate", "--refnet", &cfg, "--method", "percentile", "--p", "0.7", "--out", s(&out)],
        vec!["calibrate", "--refnet", &cfg, "--method", "percentile", "--p", "-0.1", "--out", s(&out)],
        vec!["calibrate", "--refnet", &cfg, "--method", "clipped-mse", "--out", s(&out)],
        vec!["calibrate", "--refnet", &cfg, "--method", "fancy", "--out", s(&out)],
        vec!["calibrate", "--refnet", &cfg, "--method", "mse", "--bits", "1", "--out", s(&out)],
        vec!["calibrate", "--method", "mse", "--out", s(&out)],
        vec!["stablequant", "--refnet", &cfg, "--gamma", "-1"],
        vec!["stablequant", "--refnet", &cfg, "--grid-step", "0"],
        vec!["compare", "--refnet", &cfg, "--bits", "17"],
    ];
    for args in cases {
        let o = ptqcal(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    assert!(!out.exists());

    let bad = write_config(dir.path(), "[search]\ngama = 0.5\n");
    let o = ptqcal(&["stablequant", "--refnet", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));
    let o = ptqcal(&["stablequant", "--refnet", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stablequant_on_benign_network_clips_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = ptqcal(&["stablequant", "--refnet", &config("benign.toml"), "--bits", "8", "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("S = {}\n"), "{out}");
    assert!(out.contains("grid points = 1\n"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["clip_set"], serde_json::json!([]));
    assert_eq!(json["grid"], serde_json::json!([0.0]));
}

#[test]
fn stablequant_on_rigged_network_names_conv_layers() {
    let o = ptqcal(&["stablequant", "--refnet", &config("rigged.toml"), "--bits", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("S = {conv0, conv2}\n"), "{out}");
    assert!(out.contains("grid points = 51\n"), "{out}");
}

#[test]
fn compare_at_16_bits_is_lossless_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[refnet]\nseed = 1\n[data]\ncalib = 32\ndev = 16\ntest = 16\n");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for r in [&a, &b] {
        let o = ptqcal(&["compare", "--refnet", &cfg, "--bits", "16", "--report", s(r)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let methods = json["methods"].as_array().unwrap();
    let names: Vec<&str> = methods.iter().map(|m| m["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["percentile", "mse", "entropy", "stablequant"]);
    for m in methods {
        assert_eq!(m["dev_error"], 0.0, "{m}");
        assert_eq!(m["test_error"], 0.0, "{m}");
    }
}

#[test]
fn seed_flag_changes_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("benign.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "0"), (&b, "5")] {
        let o = ptqcal(&["calibrate", "--refnet", &cfg, "--seed", seed, "--method", "max", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn eval_dump_reproduces_calibrated_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dumps(dir.path());
    let cache = dir.path().join("d.cache");
    let o = ptqcal(&["calibrate", "--dumps", s(&root), "--method", "mse", "--bits", "6", "--out", s(&cache)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = ptqcal(&["eval-dump", "--dumps", s(&root), "--cache", s(&cache), "--bits", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 2);

    for (row, (layer, hist)) in rows.iter().zip(profile_dumps(&root, DEFAULT_BINS).unwrap()) {
        assert_eq!(row[0], layer);
        let e_opt = calibrate_mse(&hist, 6).unwrap().error.unwrap();
        let printed: f64 = row[3].parse().unwrap();
        assert!((printed - e_opt).abs() <= 1e-9 * e_opt.abs(), "{layer}: {printed} vs {e_opt}");
        let saturated: f64 = row[5].parse().unwrap();
        assert!((0.0..1.0).contains(&saturated));
    }
}

#[test]
fn eval_dump_reports_missing_layers_and_bad_data() {
    let dir = tempfile::tempdir().unwrap();
    let root = dumps(dir.path());
    let cache = dir.path().join("partial.cache");
    std::fs::write(&cache, "PTQCALIB v1\nenc.a\t3ff0000000000000\t8\tmse\t-\n").unwrap();
    let o = ptqcal(&["eval-dump", "--dumps", s(&root), "--cache", s(&cache), "--bits", "8"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("enc.b"), "{}", stderr(&o));

    let o = ptqcal(&["eval-dump", "--dumps", s(&root), "--cache", s(&cache), "--bits", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    std::fs::write(root.join("enc.a").join("1.aqd"), b"XXXX").unwrap();
    let o = ptqcal(&["calibrate", "--dumps", s(&root), "--method", "max", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));

    std::fs::write(&cache, "PTQCALIB v1\nenc.a\t3ff0\t8\tmse\t-\n").unwrap();
    let o = ptqcal(&["eval-dump", "--dumps", s(&root), "--cache", s(&cache), "--bits", "8"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn zero_dump_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("zeros");
    write_batch(&root, "z", 0, &DumpTensor::new(vec![8], vec![0.0; 8]).unwrap()).unwrap();
    let cache = dir.path().join("z.cache");
    let o = ptqcal(&["calibrate", "--dumps", s(&root), "--method", "mse", "--out", s(&cache)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ptqcal(&["eval-dump", "--dumps", s(&root), "--cache", s(&cache), "--bits", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: Vec<String> = stdout(&o).lines().nth(1).unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
}
