use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmtc_core::fit::{DictionaryComponent, TransformDictionary};
use gmtc_core::formats::{dictionary_to_bytes, CsibinFile};
use gmtc_core::synth::dft_eigensystem;
use gmtc_core::tensor::FieldMode;
use serde_json::Value;

fn gmtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmtc"))
        .args(args)
        .env("GMTC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gmtc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Small synthetic dataset: K=3, N=8, 12k train, 2k test.
fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&[
        "synth", "--k", "3", "--dim", "8", "--n-train", "12000", "--n-test", "2000", "--seed", seed, "--out", s(&out),
    ]);
    out
}

fn points(report: &Value, curve: usize) -> &Vec<Value> {
    report["curves"][curve]["points"].as_array().unwrap()
}

#[test]
fn synth_is_deterministic_and_k1_works() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "5");
    let b = dir.path().join("again");
    ok(&[
        "synth", "--k", "3", "--dim", "8", "--n-train", "12000", "--n-test", "2000", "--seed", "5", "--out", s(&b),
    ]);
    for f in ["train.csibin", "test.csibin", "truth.gmtd", "train.labels", "test.labels"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let one = dir.path().join("one");
    let manifest: Value = serde_json::from_str(&ok(&[
        "synth", "--k", "1", "--dim", "4", "--n-train", "10", "--n-test", "10", "--out", s(&one),
    ]))
    .unwrap();
    assert_eq!(manifest["config"]["k"], 1);
    let real = dir.path().join("real");
    ok(&[
        "synth", "--k", "2", "--dim", "8", "--law", "geometry", "--n-tx", "4", "--mode", "real", "--n-train", "10",
        "--n-test", "10", "--out", s(&real),
    ]);
    let f = CsibinFile::from_bytes(&std::fs::read(real.join("train.csibin")).unwrap()).unwrap();
    assert_eq!((f.data.mode(), f.data.dim()), (FieldMode::Real, 16));
}

#[test]
fn fit_audit_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "1");
    let dict = dir.path().join("fit.gmtd");
    let trace = dir.path().join("trace.json");
    let out = ok(&[
        "fit", "--train", s(&d.join("train.csibin")), "--k", "3", "--audit", "--trace", s(&trace), "--out", s(&dict),
    ]);
    let audit: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(audit["total_scalars"], 2 * 3 * 64 + 2 * 3 * 8 + 2000);
    assert_eq!(audit["formula"], audit["total_scalars"]);
    let t = json(&trace);
    let ll: Vec<f64> = t["log_likelihood"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    let standalone: Value = serde_json::from_str(&ok(&["audit", "--dict", s(&dict)])).unwrap();
    assert_eq!(standalone["parameters"], audit);
    assert_eq!(standalone["encoder_ops_measured"], 8 * 8 + 4 * 8);
}

#[test]
fn bounds_closed_form_gap_and_oracle_ordering() {
    let dir = tempfile::tempdir().unwrap();
    // white K=1 spectrum: R(D) = log2(sigma^2 / D)
    let sigma2 = 2.0;
    let eig = dft_eigensystem(4, &[sigma2; 4]).unwrap();
    let white = TransformDictionary::from_components(FieldMode::Complex, vec![DictionaryComponent { weight: 1.0, eig }]).unwrap();
    let wpath = dir.path().join("white.gmtd");
    std::fs::write(&wpath, dictionary_to_bytes(&white)).unwrap();
    let rep = dir.path().join("white.json");
    ok(&["bounds", "--dict", s(&wpath), "--grid", "distortion:0.1,0.5,1.0,1.9", "--out", s(&rep)]);
    for p in points(&json(&rep), 0) {
        let d = p["target"]["value"].as_f64().unwrap();
        let r = p["theoretical"]["R_cond"].as_f64().unwrap();
        assert!((r - (sigma2 / d).log2()).abs() < 1e-8, "{r} at D={d}");
    }
    assert!(dir.path().join("white.csv").exists());

    let d = synth(dir.path(), "2");
    let fitted = dir.path().join("fit.gmtd");
    ok(&["fit", "--train", s(&d.join("train.csibin")), "--k", "3", "--out", s(&fitted)]);
    let grid = "distortion:0.2,0.5,1,2";
    let (ro, rf) = (dir.path().join("o.json"), dir.path().join("f.json"));
    ok(&["bounds", "--dict", s(&d.join("truth.gmtd")), "--grid", grid, "--tau", "4", "--out", s(&ro)]);
    ok(&["bounds", "--dict", s(&fitted), "--grid", grid, "--tau", "4", "--out", s(&rf)]);
    let (o, f) = (json(&ro), json(&rf));
    let gap = o["curves"][0]["label_overhead"].as_f64().unwrap();
    assert!((gap - 3f64.log2() / 32.0).abs() < 1e-12);
    for (a, b) in points(&o, 0).iter().zip(points(&f, 0)) {
        let (ra, rb) = (a["theoretical"]["R_cond"].as_f64().unwrap(), b["theoretical"]["R_cond"].as_f64().unwrap());
        assert!(ra <= rb + 0.05, "oracle {ra} vs EM {rb}");
        let g = a["theoretical"]["R_gmtc_upper"].as_f64().unwrap() - ra;
        assert!((g - gap).abs() < 1e-12);
    }
}

#[test]
fn encode_decode_round_trip_and_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "3");
    let (truth, test) = (d.join("truth.gmtd"), d.join("test.csibin"));
    let stream = dir.path().join("s.gmtb");
    let summary: Value = serde_json::from_str(&ok(&[
        "encode", "--dict", s(&truth), "--data", s(&test), "--target", "rate:1.5", "--tau", "2", "--out", s(&stream),
    ]))
    .unwrap();
    let rec = dir.path().join("rec.csibin");
    let labels = dir.path().join("rec.labels");
    ok(&["decode", "--dict", s(&truth), "--stream", s(&stream), "--labels-out", s(&labels), "--out", s(&rec)]);

    let orig = CsibinFile::from_bytes(&std::fs::read(&test).unwrap()).unwrap().data;
    let back = CsibinFile::from_bytes(&std::fs::read(&rec).unwrap()).unwrap().data;
    let err: f64 = orig.as_flat().iter().zip(back.as_flat()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let dims = (orig.len() * orig.dim()) as f64;

    let rep = dir.path().join("eval.json");
    ok(&[
        "eval", "--dict", s(&truth), "--data", s(&test), "--grid", "rate:1.5", "--tau", "2", "--out", s(&rep),
    ]);
    let report = json(&rep);
    let e = &points(&report, 0)[0]["empirical"];
    // the CSIBIN payload is f32, so compare loosely
    assert!((err / dims - e["mse"].as_f64().unwrap()).abs() < 1e-4 * e["mse"].as_f64().unwrap());
    let bits = summary["bits_per_dim"].as_f64().unwrap();
    assert!((bits - e["rate_bits_per_dim"].as_f64().unwrap()).abs() < 1e-12);

    let other = synth(dir.path(), "4");
    let out = gmtc(&["decode", "--dict", s(&other.join("truth.gmtd")), "--stream", s(&stream), "--out", s(&rec)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn eval_identity_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "6");
    let out = dir.path().join("copy.csibin");
    let summary: Value = serde_json::from_str(&ok(&["eval", "--identity", "--data", s(&d.join("test.csibin")), "--out", s(&out)])).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(d.join("test.csibin")).unwrap());
    assert_eq!(summary["count"], 2000);
    assert_eq!(summary["dim"], 8);
}

#[test]
fn rd_sweep_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "7");
    let rep = dir.path().join("sweep.json");
    ok(&[
        "rd-sweep", "--dict", s(&d.join("truth.gmtd")), "--data", s(&d.join("test.csibin")), "--train",
        s(&d.join("train.csibin")), "--labels", s(&d.join("test.labels")), "--baselines", "map,oracle-label,tc",
        "--grid", "rate:0.5,1,2,3", "--seed", "9", "--out", s(&rep),
    ]);
    let r = json(&rep);
    assert_eq!(r["seed"], 9);
    assert_eq!(r["config"]["grid"]["grid"], "rate:0.5,1,2,3");
    assert_eq!(r["counts"]["train_blocks"], 12000);
    let schemes: Vec<&str> = r["curves"].as_array().unwrap().iter().map(|c| c["scheme"].as_str().unwrap()).collect();
    assert_eq!(schemes, ["map", "oracle-label", "tc"]);
    for c in 0..3 {
        let e: Vec<(f64, f64)> = points(&r, c)
            .iter()
            .map(|p| (p["empirical"]["rate_bits_per_dim"].as_f64().unwrap(), p["empirical"]["nmse_db"].as_f64().unwrap()))
            .collect();
        assert!(e.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1), "{e:?}");
    }
    let acc = points(&r, 1)[0]["empirical"]["map_accuracy"].as_f64().unwrap();
    assert_eq!(acc, 1.0);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);

    // segmentation path: 16 real values per sample split into 4-dim blocks
    let seg = dir.path().join("seg.json");
    ok(&[
        "rd-sweep", "--data", s(&d.join("test.csibin")), "--train", s(&d.join("train.csibin")), "--fit-k", "1,2",
        "--baselines", "tc", "--segment", "4", "--grid", "rate:1", "--out", s(&seg),
    ]);
    let r = json(&seg);
    assert_eq!(r["counts"]["test_blocks"], 2000 * 4);
    assert_eq!(r["curves"][1]["dim"], 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gmtc(&[]).status.code(), Some(2));
    assert_eq!(gmtc(&["bounds"]).status.code(), Some(2));
    assert_eq!(gmtc(&["--help"]).status.code(), Some(0));
    let d = synth(dir.path(), "8");
    let rep = dir.path().join("r.json");
    let bad_grid = gmtc(&["bounds", "--dict", s(&d.join("truth.gmtd")), "--grid", "bits:1", "--out", s(&rep)]);
    assert_eq!(bad_grid.status.code(), Some(2));
    let junk = dir.path().join("junk.gmtd");
    std::fs::write(&junk, b"GMTD not really").unwrap();
    assert_eq!(gmtc(&["bounds", "--dict", s(&junk), "--out", s(&rep)]).status.code(), Some(3));
    assert_eq!(gmtc(&["audit", "--dict", s(&dir.path().join("missing"))]).status.code(), Some(3));
    let threads = Command::new(env!("CARGO_BIN_EXE_gmtc"))
        .args(["audit", "--dict", s(&d.join("truth.gmtd"))])
        .env("GMTC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    assert!(!rep.exists());
}
