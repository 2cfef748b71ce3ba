use std::path::Path;
use std::process::{Command, Output};

fn lwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwa")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lwa(args);
    assert!(
        out.status.success(),
        "lwa {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn zero_weight_forward_is_finite() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, data, out) = (tmp.path().join("w"), tmp.path().join("d"), tmp.path().join("o"));
    ok(&["init", "--preset", "toy", "--zero", "--out", p(&w)]);
    ok(&["make-dataset", "--preset", "toy", "--out", p(&data)]);
    ok(&[
        "forward",
        "--preset",
        "toy",
        "--weights",
        p(&w.join("weights.lwab")),
        "--input",
        p(&data.join("sample_0000.lwab")),
        "--out",
        p(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["format_version"], 1);
    assert_eq!(summary["vertex_path"], serde_json::json!([63, 126, 252, 778]));
    assert_eq!(summary["left"]["finite"], true);
    assert_eq!(summary["right"]["finite"], true);
    for f in ["left.lwat", "right.lwat"] {
        let mesh = lwa_core::lwat::load_tensor(&out.join(f)).unwrap();
        assert_eq!(mesh.shape(), [778, 3]);
        // every weight, the head bias included, is zero
        assert!(mesh.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn corrupt_weights_report_magic_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["make-dataset", "--preset", "toy", "--out", p(&data)]);
    let bad = tmp.path().join("bad.lwab");
    std::fs::write(&bad, b"JUNKJUNKJUNK").unwrap();
    let out = lwa(&[
        "forward",
        "--preset",
        "toy",
        "--weights",
        p(&bad),
        "--input",
        p(&data.join("sample_0000.lwab")),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("LWAT magic mismatch"), "{err}");
    assert!(err.contains("bad.lwab"), "error names the file: {err}");
}

#[test]
fn image_outside_unit_range_is_rejected() {
    use lwa_core::lwat::{save_tensor, DType};
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img.lwat");
    let mut t = lwa_core::Tensor::zeros(&[3, 16, 16]);
    t.data_mut()[5] = 1.5;
    save_tensor(&img, &t, DType::F64).unwrap();
    let out = lwa(&["forward", "--preset", "toy", "--input", p(&img), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[0, 1]"));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"encoder": {"bogus": 1}}"#).unwrap();
    let out = lwa(&["report", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn resolved_config_is_a_fixed_point() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("w");
    ok(&["init", "--preset", "toy", "--out", p(&w)]);
    let first = std::fs::read_to_string(w.join("config.json")).unwrap();
    let again = tmp.path().join("again");
    ok(&["init", "--config", p(&w.join("config.json")), "--out", p(&again)]);
    assert_eq!(first, std::fs::read_to_string(again.join("config.json")).unwrap());
    assert_eq!(
        std::fs::read(w.join("weights.lwab")).unwrap(),
        std::fs::read(again.join("weights.lwab")).unwrap()
    );
}

#[test]
fn forward_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["make-dataset", "--preset", "toy", "--seed", "4", "--out", p(&data)]);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "forward",
            "--preset",
            "toy",
            "--seed",
            "9",
            "--input",
            p(&data.join("sample_0000.lwab")),
            "--out",
            p(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["left.lwat", "right.lwat", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    let digests = |m: &serde_json::Value| {
        m["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["sha256"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(digests(&ma), digests(&mb));
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["loss_weights"]["smooth"], 0.1);
}

#[test]
fn gradcheck_fault_injection_exits_numeric() {
    let out = lwa(&["gradcheck", "--corrupt-group", "decoder.gcn.1.0"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gradient check failed for: decoder.gcn.1.0"), "{err}");
}

#[test]
fn gradcheck_json_lists_every_group_once() {
    let stdout = ok(&["gradcheck", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["format_version"], 1);
    assert_eq!(v["pass"], true);
    let names: Vec<&str> = v["groups"].as_array().unwrap().iter().map(|g| g["name"].as_str().unwrap()).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
    assert!(names.contains(&"head.left.bias") && names.contains(&"encoder.tokens"));
}

#[test]
fn flops_table_and_unknown_scan_op() {
    let table = ok(&["flops"]);
    assert!(table.contains("Total flops") && table.contains("Image part") && table.contains("Pose part"));
    let out = lwa(&["scan", "--op", "no_such_op"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_op"));
}

#[test]
fn overfit_with_zero_lr_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["make-dataset", "--count", "2", "--out", p(&data)]);
    let out = tmp.path().join("o");
    ok(&["overfit", "--data", p(&data), "--steps", "3", "--lr", "0", "--out", p(&out)]);
    let trace = json(&out.join("trace.json"));
    let losses: Vec<f64> = serde_json::from_value(trace["trace"]["losses"].clone()).unwrap();
    assert_eq!(losses.len(), 4);
    assert!(losses.iter().all(|&l| l == losses[0]));
    assert_eq!(trace["ratio"], 1.0);
}

#[test]
fn make_topology_round_trips_through_config() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = tmp.path().join("topo.json");
    ok(&["make-topology", "--seed", "0", "--out", p(&topo)]);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, format!(r#"{{"topology": {:?}}}"#, p(&topo))).unwrap();
    let report = ok(&["report", "--config", p(&cfg), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["topology_counts"], serde_json::json!([63, 126, 252]));
    assert_eq!(v["total_flops"], v["image_part"].as_u64().unwrap() + v["pose_part"].as_u64().unwrap());
}
