use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const LAYOUT: &str = r#"{"prompt": [0, 1, 3, 9, 2, 1, 5, 10],
 "entries": [{"token_index": 2, "box": [0.0, 0.25, 0.5, 0.75], "label": "red square"},
             {"token_index": 6, "box": [0.5, 0.25, 1.0, 0.75], "label": "blue circle"}]}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxguide"))
        .args(args)
        .env_remove("BOXGUIDE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    layout: PathBuf,
    ckpt: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    let cfg = json!({
        "train": {
            "steps": 3,
            "batch_size": 2,
            "dataset": {"image_size": 8, "min_extent": 2, "max_extent": 4},
            "model": {"grid": 4, "patch": 2, "channels": 3, "d_model": 8, "heads": 2, "blocks": 1,
                      "d_text": 4, "vocab": 12, "ff_mult": 2, "max_tokens": 16, "timesteps": 1000}
        },
        "sample": {"steps": 8},
        "guidance": {"refine_steps": 2, "guided_steps": 3, "eta0": 1.0}
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let layout = root.join("layout.json");
    fs::write(&layout, LAYOUT).unwrap();
    let train_dir = root.join("train");
    let printed = ok(&["train", "--config", s(&config), "--out-dir", s(&train_dir), "--name", "tiny.ckpt"]);
    let ckpt = train_dir.join("tiny.ckpt");
    assert_eq!(printed.trim(), s(&ckpt));
    Setup {
        _dir: dir,
        root,
        config,
        layout,
        ckpt,
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_curve_and_config() {
    let st = setup();
    let dir = st.ckpt.parent().unwrap();
    let curve = fs::read_to_string(dir.join("train_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("step,loss\n"));
    let cfg: Value = serde_json::from_str(&fs::read_to_string(dir.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["steps"], 3);
}

#[test]
fn generate_then_replay_from_manifest() {
    let st = setup();
    let out = st.root.join("gen");
    let stdout = ok(&[
        "generate", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--layout", s(&st.layout),
        "--seeds", "1,2", "--heatmaps", "--out-dir", s(&out),
    ]);
    assert_eq!(stdout.lines().count(), 2);
    for f in ["seed1.ppm", "seed2.ppm", "seed1_trace.jsonl", "seed2_trace.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let first = manifest(&out);
    // 3 guided steps, 2 tokens.
    let maps = first["outputs"].as_array().unwrap().iter().filter(|o| o["path"].as_str().unwrap().ends_with(".pgm")).count();
    assert_eq!(maps, 2 * 3 * 2);

    let again = st.root.join("replay");
    let replay_out = run(&["generate", "--manifest", s(&out.join("manifest.json")), "--out-dir", s(&again)]);
    assert!(replay_out.status.success());
    assert!(!String::from_utf8_lossy(&replay_out.stderr).contains("differs"));
    assert_eq!(manifest(&again)["outputs"], first["outputs"]);
}

#[test]
fn unguided_generation_is_reproducible_and_differs_from_guided() {
    let st = setup();
    let gen = |name: &str, extra: &[&str]| {
        let out = st.root.join(name);
        let mut args = vec!["generate", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--layout", s(&st.layout)];
        args.extend_from_slice(extra);
        let out_s = out.to_str().unwrap().to_string();
        args.extend_from_slice(&["--out-dir", &out_s]);
        let line = ok(&args);
        line.split_whitespace().next().unwrap().to_string()
    };
    let a = gen("u1", &["--unguided", "--seeds", "5"]);
    let b = gen("u2", &["--unguided", "--seeds", "5"]);
    let g = gen("g", &["--seeds", "5"]);
    assert_eq!(a, b);
    assert_ne!(a, g);
}

#[test]
fn eval_and_ablate_write_reports() {
    let st = setup();
    let out = st.root.join("eval");
    let line = ok(&[
        "eval", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--layouts", s(&st.layout),
        "--seeds", "2", "--out-dir", s(&out),
    ]);
    assert!(line.contains("attention-in-box"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 4);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap().lines().count(), 5);

    let out = st.root.join("ablate");
    ok(&[
        "ablate", "--config", s(&st.config), "--checkpoint", s(&st.ckpt), "--layouts", s(&st.layout),
        "--seeds", "1", "--axes", "losses", "--out-dir", s(&out),
    ]);
    let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 5);
}

#[test]
fn bad_invocations_fail_with_messages() {
    let st = setup();
    let out = st.root.join("bad");
    let zero = run(&["eval", "--checkpoint", s(&st.ckpt), "--layouts", s(&st.layout), "--seeds", "0", "--out-dir", s(&out)]);
    assert_eq!(zero.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("--seeds"));

    let axis = run(&[
        "ablate", "--checkpoint", s(&st.ckpt), "--layouts", s(&st.layout), "--seeds", "1", "--axes", "colour",
    ]);
    assert_eq!(axis.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&axis.stderr).contains("unknown axis"));

    let flag = run(&["generate", "--checkpoint", s(&st.ckpt), "--layout", s(&st.layout), "--bogus"]);
    assert_eq!(flag.status.code(), Some(2));

    let missing = run(&["generate", "--checkpoint", s(&st.root.join("nope.ckpt")), "--layout", s(&st.layout)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    let bad_cfg = st.root.join("bad.json");
    fs::write(&bad_cfg, r#"{"sampler": {}}"#).unwrap();
    let cfg = run(&["dataset", "--config", s(&bad_cfg), "--out-dir", s(&out)]);
    assert_eq!(cfg.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&cfg.stderr).contains("unknown field"));
}

#[test]
fn dataset_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    ok(&["dataset", "--count", "3", "--seed", "4", "--out-dir", s(&out)]);
    let index: Value = serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 3);
}
