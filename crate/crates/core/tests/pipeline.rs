use std::path::PathBuf;

use boxguide::eval::{evaluate, RunManifest};
use boxguide::guidance::{run_guided_generation, GuidanceConfig};
use boxguide::layout::load_layout;
use boxguide::model::{load_checkpoint, save_checkpoint, ModelConfig};
use boxguide::scheduler::dataset::DatasetSpec;
use boxguide::scheduler::{train, NoiseSchedule, Optimizer, SampleConfig, TrainConfig};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 12,
        batch_size: 2,
        learning_rate: 0.01,
        optimizer: Optimizer::Adam,
        dataset: DatasetSpec {
            image_size: 8,
            min_extent: 2,
            max_extent: 4,
            ..DatasetSpec::default()
        },
        model: ModelConfig {
            grid: 4,
            patch: 2,
            d_model: 8,
            heads: 2,
            blocks: 1,
            d_text: 4,
            vocab: 12,
            ff_mult: 2,
            max_tokens: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn short_run() -> (SampleConfig, GuidanceConfig) {
    let sample = SampleConfig {
        steps: 8,
        seed: 3,
        ..SampleConfig::default()
    };
    let guidance = GuidanceConfig {
        refine_steps: 2,
        guided_steps: 4,
        eta0: 1.0,
        ..GuidanceConfig::default()
    };
    (sample, guidance)
}

#[test]
fn train_save_generate_evaluate() {
    let schedule = NoiseSchedule::default();
    let (params, report) = train(&tiny(), &schedule, |_, _| {}).unwrap();
    assert_eq!(report.losses.len(), 12);
    assert_eq!(report.checksum, params.checksum());

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    save_checkpoint(&params, &ckpt).unwrap();
    let params = load_checkpoint(&ckpt).unwrap();
    assert_eq!(params.checksum(), report.checksum);

    let layout = load_layout(fixtures().join("layouts/red_blue.json")).unwrap();
    let (sample, guidance) = short_run();
    let (image, trace) = run_guided_generation(&params, &layout, &schedule, &sample, &guidance).unwrap();
    assert_eq!((image.width, image.height), (8, 8));
    assert_eq!(trace.refinements.len(), 8);
    assert_eq!(trace.snapshots.len(), 4);

    let mut jsonl = Vec::new();
    trace.write_jsonl(&mut jsonl).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|v| v["total"].is_f64() && v["self"].is_f64()));

    let files = trace.write_heatmaps(&dir.path().join("maps"), &layout, 4).unwrap();
    assert_eq!(files.len(), 8);
    assert!(files.iter().all(|f| dir.path().join("maps").join(f).is_file()));

    let report = evaluate(&params, std::slice::from_ref(&layout), &schedule, &sample, &guidance, 2).unwrap();
    assert_eq!(report.entries.len(), 4);
    assert!((0.0..=1.0).contains(&report.mean_attention_in_box));
    assert!((0.0..=1.0).contains(&report.centroid_in_box_rate));
}

#[test]
fn evaluation_is_reproducible() {
    let schedule = NoiseSchedule::default();
    let (params, _) = train(&TrainConfig { steps: 2, ..tiny() }, &schedule, |_, _| {}).unwrap();
    let layouts = vec![
        load_layout(fixtures().join("layouts/red_blue.json")).unwrap(),
        load_layout(fixtures().join("layouts/yellow_cyan.json")).unwrap(),
    ];
    let (sample, guidance) = short_run();
    let a = evaluate(&params, &layouts, &schedule, &sample, &guidance, 3).unwrap();
    let b = evaluate(&params, &layouts, &schedule, &sample, &guidance, 3).unwrap();
    assert_eq!(a.entries, b.entries);
    assert_eq!(a.entries.iter().map(|e| e.layout).collect::<Vec<_>>(), [0, 0, 1, 1, 0, 0]);
}

#[test]
fn manifest_round_trips() {
    let (sample, guidance) = short_run();
    let m = RunManifest {
        command: "generate".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        checkpoint: "tiny.ckpt".into(),
        checkpoint_sha256: "00".repeat(32),
        layout: load_layout(fixtures().join("layouts/blue_red.json")).unwrap(),
        sample,
        guidance,
        seeds: vec![3, 4],
        outputs: Vec::new(),
    };
    assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
}

#[test]
fn fixture_layouts_fit_the_default_grid() {
    let grid = ModelConfig::default().grid;
    for name in ["red_blue", "green_magenta", "yellow_cyan", "blue_red"] {
        let layout = load_layout(fixtures().join(format!("layouts/{name}.json"))).unwrap();
        assert_eq!(layout.len(), 2);
        let masks = layout.masks(grid, grid).unwrap();
        assert!(masks.iter().all(|m| m.count() > 0));
        assert!(!masks[0].cells().iter().zip(masks[1].cells()).any(|(a, b)| *a && *b), "{name} boxes overlap");
    }
}
