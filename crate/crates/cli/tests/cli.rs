use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisyquant")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn calib_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("calib.json")).unwrap()).unwrap()
}

#[test]
fn verify_theory_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&["verify-theory", "--seed", "1", "--out", p(&a)]), 0);
    assert_eq!(code(&["verify-theory", "--seed", "1", "--out", p(&b)]), 0);
    let n = std::fs::read_to_string(a.join("sweep_n.csv")).unwrap();
    let x = std::fs::read_to_string(a.join("sweep_x.csv")).unwrap();
    assert_eq!(n.lines().count(), 20);
    assert_eq!(x.lines().count(), 14);
    assert_eq!(n, std::fs::read_to_string(b.join("sweep_n.csv")).unwrap());
    assert!(a.join("manifest.json").exists());
    let leftovers: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|e| e == "tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["verify-theory", "--x", "2", "--b", "1", "--out", p(&out)]), 4);
    assert_eq!(code(&["verify-theory", "--no-such-flag", "--out", p(&out)]), 2);
    assert_eq!(code(&["verify-theory", "--n-step", "0", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen-model", "--width", "10", "--heads", "3", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen-data", "--model", p(&tmp.path().join("missing")), "--out", p(&out)]), 3);
    assert_eq!(code(&["verify-theory"]), 2);

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    assert_eq!(code(&["verify-theory", "--config", p(&cfg), "--out", p(&out)]), 2);
    std::fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&["verify-theory", "--config", p(&cfg), "--out", p(&out)]), 2);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"sweep": "x", "elements": 5, "seed": 7}"#).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["verify-theory", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]), 0);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let c = &m["command"]["config"];
    assert_eq!(c["elements"], 5);
    assert_eq!(c["seed"], 9);
    assert_eq!(c["sweep"], "x");
    assert!(!out.join("sweep_n.csv").exists());
    assert!(m["outputs"]["sweep_x.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn calibrate_toggles_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (m, d) = (t.join("m"), t.join("d"));
    assert_eq!(code(&["gen-model", "--seed", "2", "--out", p(&m)]), 0);
    assert_eq!(code(&["gen-data", "--model", p(&m), "--count", "8", "--seed", "3", "--out", p(&d)]), 0);
    let calib = |out: &Path, extra: &[&str]| {
        let mut args = vec!["calibrate", "--model", p(&m), "--data", p(&d), "--out", p(out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&args), 0);
        calib_json(out)
    };
    let off = calib(&t.join("off"), &["--noise-layers", "none"]);
    assert!(off["layers"].as_array().unwrap().iter().all(|l| l["n"] == 0.0));

    let cf = ["--objective", "closed_form", "--min-gain-z", "0"];
    let all = calib(&t.join("all"), &cf);
    let again = calib(&t.join("again"), &cf);
    assert_eq!(all, again);
    for l in all["layers"].as_array().unwrap() {
        assert!(l["n"].as_f64().unwrap() >= 0.0 && l["objective"].as_f64().unwrap() <= 0.0);
    }
    let fc2 = calib(&t.join("fc2"), &["--objective", "closed_form", "--min-gain-z", "0", "--noise-layers", "fc2"]);
    for (a, b) in all["layers"].as_array().unwrap().iter().zip(fc2["layers"].as_array().unwrap()) {
        assert_eq!(a["act"], b["act"]);
        if b["layer_type"] == "fc2" {
            assert_eq!(a["n"], b["n"]);
        } else {
            assert_eq!(b["n"], 0.0);
        }
    }
    assert_eq!(code(&["calibrate", "--model", p(&m), "--data", p(&d), "--out", p(&t.join("x")), "--fitter", "twin", "--percentile", "99"]), 2);
}

#[test]
fn evaluate_writes_reports_and_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (m, d, c, e) = (t.join("m"), t.join("d"), t.join("c"), t.join("e"));
    assert_eq!(code(&["gen-model", "--seed", "1", "--out", p(&m)]), 0);
    assert_eq!(code(&["gen-data", "--model", p(&m), "--count", "6", "--out", p(&d)]), 0);
    assert_eq!(code(&["calibrate", "--model", p(&m), "--data", p(&d), "--out", p(&c)]), 0);
    let calib = c.join("calib.json");
    assert_eq!(code(&["evaluate", "--model", p(&m), "--data", p(&d), "--calib", p(&calib), "--out", p(&e)]), 0);
    let by_type = std::fs::read_to_string(e.join("qe_by_type.csv")).unwrap();
    let types: Vec<&str> = by_type.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(types, ["qkv", "proj", "fc1", "fc2"]);
    let hist = std::fs::read_to_string(e.join("histograms/fc2.input.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count\n"));
    let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 6 * 16 * 256);

    std::fs::write(&calib, "{}").unwrap();
    assert_eq!(code(&["evaluate", "--model", p(&m), "--data", p(&d), "--calib", p(&calib), "--out", p(&e)]), 3);
}

#[test]
fn replay_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    assert_eq!(code(&["verify-theory", "--sweep", "n", "--out", p(&out)]), 0);
    let manifest = out.join("manifest.json");
    assert_eq!(code(&["replay", "--manifest", p(&manifest)]), 0);
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["outputs"]["sweep_n.csv"] = "0".repeat(64).into();
    std::fs::write(&manifest, m.to_string()).unwrap();
    assert_eq!(code(&["replay", "--manifest", p(&manifest)]), 4);
}
