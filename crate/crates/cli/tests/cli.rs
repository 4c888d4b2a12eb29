use std::path::Path;
use std::process::{Command, Output};

fn pairx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairx"))
        .args(args)
        .env_remove("PAIRX_THREADS")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = pairx(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--individuals",
        "4",
        "--train-individuals",
        "0",
        "--size",
        "64",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn explain_identical_images_reports_unit_cosine() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let img = dir.path().join("images/ind000_v0.png");
    let out_dir = dir.path().join("out");
    let out = pairx(&[
        "explain",
        s(&img),
        s(&img),
        "--model",
        s(&dir.path().join("model.pxw")),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cosine_similarity 1.000000"), "{stdout}");
    assert!(stdout.contains("matches "), "{stdout}");
    assert!(out_dir.join("explanation.png").exists());
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("explanation.json")).unwrap()).unwrap();
    assert!(!sidecar["matches"].as_array().unwrap().is_empty());
}

#[test]
fn explain_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let a = dir.path().join("images/ind000_v0.png");
    let b = dir.path().join("images/ind001_v2.png");
    let model = dir.path().join("model.pxw");
    let run = |out: &str, threads: &str| {
        let o = dir.path().join(out);
        let r = pairx(&["explain", s(&a), s(&b), "--model", s(&model), "--out", s(&o), "--seed", "7", "--threads", threads]);
        assert!(r.status.success());
        (std::fs::read(o.join("explanation.png")).unwrap(), std::fs::read(o.join("explanation.json")).unwrap())
    };
    assert_eq!(run("one", "1"), run("two", "2"));
}

#[test]
fn auto_layer_without_train_pairs_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let img = dir.path().join("images/ind000_v0.png");
    let out = pairx(&[
        "explain",
        s(&img),
        s(&img),
        "--model",
        s(&dir.path().join("model.pxw")),
        "--manifest",
        s(&dir.path().join("manifest.jsonl")),
        "--layer",
        "auto",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer auto-selection requires train pairs"));
}

#[test]
fn unreadable_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = pairx(&[
        "explain",
        s(&dir.path().join("missing_a.png")),
        s(&dir.path().join("missing_b.png")),
        "--model",
        s(&dir.path().join("model.pxw")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn degenerate_embedding_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let flat = dir.path().join("flat.png");
    let img = pairx_core::image::RgbImage::filled(64, 64, 0.5);
    pairx_core::image::save_rgb_png(&flat, &img).unwrap();
    let out = pairx(&[
        "explain",
        s(&flat),
        s(&flat),
        "--model",
        s(&dir.path().join("model.pxw")),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_arguments_exit_4() {
    let out = pairx(&["explain", "a.png", "b.png", "--n-matches", "0", "--model", "m.pxw"]);
    assert_eq!(out.status.code(), Some(4));
    let out = pairx(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("run.toml"),
        "model_path = \"model.pxw\"\nn_matches = 3\noutput_dir = \"from_file\"\n",
    )
    .unwrap();
    let img = dir.path().join("images/ind002_v0.png");
    let out_dir = dir.path().join("from_flag");
    let out = pairx(&[
        "explain",
        s(&img),
        s(&img),
        "--config",
        s(&dir.path().join("run.toml")),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("explanation.json")).unwrap()).unwrap();
    assert!(sidecar["matches"].as_array().unwrap().len() <= 3);
    assert_eq!(sidecar["config"]["n_matches"], 3);
    assert!(!dir.path().join("from_file").exists());
}

#[test]
fn eval_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = pairx(&[
        "synth", "--out", s(dir.path()), "--individuals", "4", "--train-individuals", "2", "--size", "64",
    ]);
    assert!(out.status.success());
    let common = |cmd: &str, out: &str| {
        pairx(&[
            cmd,
            "--model",
            s(&dir.path().join("model.pxw")),
            "--manifest",
            s(&dir.path().join("manifest.jsonl")),
            "--correspondences",
            s(&dir.path().join("correspondences.jsonl")),
            "--out",
            s(&dir.path().join(out)),
        ])
    };
    let e = common("eval", "eval");
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(String::from_utf8_lossy(&e.stdout).contains("rho_res"));
    assert!(dir.path().join("eval/report.json").exists());
    let w = common("sweep-layers", "sweep");
    assert!(w.status.success(), "{}", String::from_utf8_lossy(&w.stderr));
    assert_eq!(String::from_utf8_lossy(&w.stdout).matches(" *").count(), 1);
}
