use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ganseg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ganseg"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Value {
    let o = ganseg(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("summary is JSON")
}

fn err(out: &Path, args: &[&str]) -> (i32, Value) {
    let o = ganseg(out, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().unwrap_or_default();
    (o.status.code().unwrap_or(-1), serde_json::from_str(last).expect("error is JSON"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (code, e) = err(dir.path(), &["--config", "/nonexistent/cfg.toml", "pretrain", "--oracle"]);
    assert_eq!(code, 1);
    assert!(e["error"]["message"].as_str().unwrap().contains("/nonexistent/cfg.toml"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "probe_samples = 2\nprobe_sample = 3\n");
    let (_, e) = err(dir.path(), &["--config", s(&cfg), "pretrain", "--oracle"]);
    assert_eq!(e["error"]["kind"], "config");
}

#[test]
fn oracle_checkpoint_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |sub: &str| {
        let out = dir.path().join(sub);
        ok(&out, &["--seed", "7", "pretrain", "--oracle"]);
        let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("pipeline.json")).unwrap()).unwrap();
        m["artifacts"][0]["sha256"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("a"), hash("b"));
}

#[test]
fn analyze_validates_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain", "--oracle"]);
    let g = dir.path().join("pretrain/generator.ckpt");
    let cfg = write(dir.path(), "a.toml", "probe_samples = 0\n");
    let (code, e) = err(dir.path(), &["--config", s(&cfg), "analyze", "--generator", s(&g), "--trgb-probe"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"]["kind"], "usage");
    let (code, _) = err(dir.path(), &["analyze", "--generator", s(&g)]);
    assert_eq!(code, 2);
}

#[test]
fn evaluate_reports_unmatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&g).unwrap();
    let m = ndarray::Array2::<f64>::zeros((4, 4));
    for id in ["x", "y"] {
        ganseg_core::io::write_gray_png(&p.join(format!("{id}.png")), &m).unwrap();
    }
    ganseg_core::io::write_gray_png(&g.join("x.png"), &m).unwrap();
    let out = dir.path().join("runs");
    let (_, e) = err(&out, &["evaluate", "--pred-dir", s(&p), "--gt-dir", s(&g)]);
    assert!(e["error"]["message"].as_str().unwrap().contains("\"y\""));
    ganseg_core::io::write_gray_png(&g.join("y.png"), &m).unwrap();
    let r = ok(&out, &["evaluate", "--pred-dir", s(&p), "--gt-dir", s(&g)]);
    assert_eq!(r["detail"]["miou"], 1.0);
}

#[test]
fn dangling_parent_and_edited_inputs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain", "--oracle"]);
    let g = dir.path().join("pretrain/generator.ckpt");
    let bytes = std::fs::read(&g).unwrap();
    std::fs::write(&g, [bytes.as_slice(), b" "].concat()).unwrap();
    let (_, e) = err(dir.path(), &["viz", "--generator", s(&g)]);
    assert_eq!(e["error"]["kind"], "fingerprint");

    let other = dir.path().join("other");
    std::fs::create_dir_all(&other).unwrap();
    let bad = r#"{"artifacts": [{"id": "a000", "verb": "x", "path": "f", "sha256": "0", "config": null,
        "seed": null, "precision": null, "parents": ["a005"]}]}"#;
    std::fs::write(other.join("pipeline.json"), bad).unwrap();
    let (_, e) = err(&other, &["pretrain", "--oracle"]);
    assert!(e["error"]["message"].as_str().unwrap().contains("a005"));
}

/// Every verb on a 16x16 oracle with tiny budgets.
#[test]
fn oracle_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = d.join("runs");
    let c = |name: &str, text: &str| write(d, name, text);

    let pre = c("pre.toml", "resolution = 16\noracle_edge_px = 1.0\n");
    ok(&run, &["--config", s(&pre), "pretrain", "--oracle"]);
    let g = run.join("pretrain/generator.ckpt");

    let an = c("an.toml", "probe_samples = 4\nscore_crops = 4\nscore_codes = 2\n");
    let r = ok(&run, &["--config", s(&an), "--precision", "double", "analyze", "--generator", s(&g), "--trgb-probe", "--bg-score"]);
    assert_ne!(r["detail"]["seeds"]["trgb_probe"], r["detail"]["seeds"]["bg_score"]);
    let scores: Value = serde_json::from_str(&std::fs::read_to_string(run.join("analyze/layer_scores.json")).unwrap()).unwrap();
    assert_eq!(scores["argmax"], 1);
    assert!(run.join("analyze/trgb_panels.png").exists());

    ok(&run, &["derive-bg", "--generator", s(&g), "--scores", s(&run.join("analyze/layer_scores.json"))]);
    let bg = run.join("derive-bg/background.json");

    let ta = c("ta.toml", "iterations = 4\nbatch = 2\ncalibration_samples = 4\nlog_every = 0\n");
    let probe = run.join("analyze/trgb_probe.json");
    let r = ok(&run, &["--config", s(&ta), "train-alpha", "--generator", s(&g), "--background", s(&bg), "--probe", s(&probe)]);
    assert_eq!(r["detail"]["steps"], 4);
    let alpha = run.join("train-alpha/alpha.ckpt");

    let ext = d.join("ext");
    std::fs::create_dir_all(&ext).unwrap();
    for i in 0..3 {
        let img = ndarray::Array3::<f64>::from_elem((3, 8, 8), i as f64 * 0.3 - 0.3);
        ganseg_core::io::write_rgb_png(&ext.join(format!("{i}.png")), &img).unwrap();
    }
    let ext_run = d.join("ext_run");
    ok(
        &ext_run,
        &["--config", s(&ta), "train-alpha", "--generator", s(&g), "--bg-source", "external", "--bg-dir", s(&ext)],
    );
    let cfg_echo: Value =
        serde_json::from_str(&std::fs::read_to_string(ext_run.join("train-alpha/train_config.json")).unwrap()).unwrap();
    assert_eq!(cfg_echo["bg_source"], "external_images");

    let sa = c("sa.toml", "n = 6\nbatch = 3\nthreshold = 0.5\n");
    let r = ok(&run, &["--config", s(&sa), "sample", "--generator", s(&g), "--alpha", s(&alpha)]);
    assert_eq!(r["detail"]["accepted"], 6);
    let dataset = run.join("sample/dataset");

    let ds = c("ds.toml", "steps = 2\nbatch = 2\nmin_samples = 4\nval_fraction = 0.34\n");
    ok(&run, &["--config", s(&ds), "train-downstream", "--dataset", s(&dataset)]);

    let ev = c("ev.toml", "n = 8\noverlays = 2\n");
    let r = ok(&run, &["--config", s(&ev), "evaluate", "--generator", s(&g), "--alpha", s(&alpha)]);
    let miou = r["detail"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let shapes = d.join("shapes");
    ganseg_core::stylegen::procedural::write_dataset(&shapes, 5, 16, 3).unwrap();
    let seg = run.join("train-downstream/segmenter.ckpt");
    let r = ok(&run, &["evaluate", "--segmenter", s(&seg), "--images", s(&shapes)]);
    assert_eq!(r["detail"]["config"]["mode"], "segmenter");
    let masks = dataset.join("masks");
    ok(&run, &["evaluate", "--pred-dir", s(&masks), "--gt-dir", s(&masks)]);

    ok(&run, &["--config", s(&c("sw.toml", "n = 2\n")), "swap-bg", "--generator", s(&g), "--alpha", s(&alpha), "--background", s(&bg)]);
    assert!(run.join("swap-bg/images/swap_001.png").exists());
    ok(&run, &["--config", s(&c("vz.toml", "n = 2\n")), "viz", "--generator", s(&g), "--alpha", s(&alpha)]);
    assert!(run.join("viz/images/activations_000.png").exists());

    let m: Value = serde_json::from_str(&std::fs::read_to_string(run.join("pipeline.json")).unwrap()).unwrap();
    let arts = m["artifacts"].as_array().unwrap();
    let ids: Vec<&str> = arts.iter().map(|a| a["id"].as_str().unwrap()).collect();
    for a in arts {
        for p in a["parents"].as_array().unwrap() {
            assert!(ids.contains(&p.as_str().unwrap()));
        }
    }
    let alpha_rec = arts.iter().find(|a| a["verb"] == "train-alpha").unwrap();
    assert_eq!(alpha_rec["config"]["iterations"], 4);
    assert_eq!(alpha_rec["parents"].as_array().unwrap().len(), 3);
    let manifest = ganseg_core::pipeline::PipelineManifest::open(&run).unwrap();
    manifest.verify_all().unwrap();
}
