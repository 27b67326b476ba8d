use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use boxguide::eval::{self, AblationVariant, OutputFile, RunManifest, ABLATION_AXES};
use boxguide::guidance::{run_guided_generation, GuidanceConfig};
use boxguide::image::PnmFormat;
use boxguide::layout::{load_layout, Layout};
use boxguide::model::{load_checkpoint, save_checkpoint, DenoiserParams};
use boxguide::scheduler::dataset::dump_dataset;
use boxguide::scheduler::{train, NoiseSchedule, SampleConfig, TrainConfig};

/// Layout-guided sampling with a toy text-to-image denoiser.
#[derive(Parser)]
#[command(name = "boxguide", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the procedural shapes dataset.
    Train(TrainArgs),
    /// Generate one image per seed for a layout.
    Generate(GenerateArgs),
    /// Score guided (or unguided) generations over many seeds.
    Eval(EvalArgs),
    /// Evaluate a grid of guidance variants.
    Ablate(AblateArgs),
    /// Write dataset samples as PPM files plus an index.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with optional "train", "sample" and "guidance" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "BOXGUIDE_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the configured number of steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file name inside the output directory.
    #[arg(long, default_value = "model.ckpt")]
    name: String,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    layout: Option<PathBuf>,
    /// Replays a manifest written by an earlier run.
    #[arg(long, conflicts_with_all = ["checkpoint", "layout", "seeds", "unguided"])]
    manifest: Option<PathBuf>,
    /// Seeds to generate (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Turn off refinement and redistribution.
    #[arg(long)]
    unguided: bool,
    /// Also write per-step attention heatmaps.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    layouts: Vec<PathBuf>,
    #[arg(long)]
    seeds: usize,
    #[arg(long)]
    unguided: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    layouts: Vec<PathBuf>,
    #[arg(long)]
    seeds: usize,
    /// Axes to vary: losses, redistribution, sampling, margin, refine_steps, guided_steps.
    #[arg(long, value_delimiter = ',', default_value = "losses")]
    axes: Vec<String>,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    train: TrainConfig,
    sample: SampleConfig,
    guidance: GuidanceConfig,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn load_params(path: &Path) -> Result<DenoiserParams> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_layouts(paths: &[PathBuf]) -> Result<Vec<Layout>> {
    paths
        .iter()
        .map(|p| load_layout(p).with_context(|| format!("loading layout {}", p.display())))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = read_config(args.common.config.as_deref())?.train;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = &args.common.out_dir;
    create_dir(out)?;
    let schedule = NoiseSchedule::default();
    let every = (cfg.steps / 20).max(1);
    let (params, report) = train(&cfg, &schedule, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.5}");
        }
    })?;
    let ckpt = out.join(&args.name);
    save_checkpoint(&params, &ckpt)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    fs::write(out.join("train_curve.csv"), curve)?;
    fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn generate(
    checkpoint: &Path,
    params: &DenoiserParams,
    layout: &Layout,
    sample: SampleConfig,
    guidance: GuidanceConfig,
    seeds: &[u64],
    out: &Path,
    heatmaps: bool,
) -> Result<RunManifest> {
    create_dir(out)?;
    let schedule = NoiseSchedule::default();
    let mut outputs = Vec::new();
    let mut record = |name: String| -> Result<()> {
        let sha256 = eval::file_sha256(out.join(&name))?;
        outputs.push(OutputFile { path: name, sha256 });
        Ok(())
    };
    for &seed in seeds {
        let sc = SampleConfig { seed, ..sample };
        let (image, trace) = run_guided_generation(params, layout, &schedule, &sc, &guidance)
            .with_context(|| format!("generating seed {seed}"))?;
        for w in &trace.warnings {
            eprintln!("warning (seed {seed}): {w}");
        }
        let name = format!("seed{seed}.ppm");
        image.write(out.join(&name), PnmFormat::Ppm)?;
        record(name)?;
        let trace_name = format!("seed{seed}_trace.jsonl");
        trace.write_jsonl(BufWriter::new(fs::File::create(out.join(&trace_name))?))?;
        record(trace_name)?;
        if heatmaps {
            let sub = format!("seed{seed}_heatmaps");
            for f in trace.write_heatmaps(&out.join(&sub), layout, params.config().grid)? {
                record(format!("{sub}/{f}"))?;
            }
        }
    }
    Ok(RunManifest {
        command: "generate".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        checkpoint: checkpoint.display().to_string(),
        checkpoint_sha256: params.checksum(),
        layout: layout.clone(),
        sample,
        guidance,
        seeds: seeds.to_vec(),
        outputs,
    })
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let out = &args.common.out_dir;
    let manifest = if let Some(mpath) = &args.manifest {
        let text = fs::read_to_string(mpath).with_context(|| format!("reading manifest {}", mpath.display()))?;
        let m = RunManifest::from_json(&text).context("parsing manifest")?;
        let ckpt = PathBuf::from(&m.checkpoint);
        let params = load_params(&ckpt)?;
        if params.checksum() != m.checkpoint_sha256 {
            bail!("checkpoint {} does not match the manifest checksum", ckpt.display());
        }
        let heatmaps = args.heatmaps || m.outputs.iter().any(|o| o.path.contains("_heatmaps/"));
        let replay = generate(&ckpt, &params, &m.layout, m.sample, m.guidance, &m.seeds, out, heatmaps)?;
        for (a, b) in m.outputs.iter().zip(&replay.outputs) {
            if a != b {
                eprintln!("warning: {} differs from the manifest", b.path);
            }
        }
        replay
    } else {
        let cfg = read_config(args.common.config.as_deref())?;
        let ckpt = args.checkpoint.expect("required by clap");
        let params = load_params(&ckpt)?;
        let layout = load_layout(args.layout.as_ref().expect("required by clap"))?;
        let guidance = if args.unguided {
            GuidanceConfig {
                guided_steps: cfg.guidance.guided_steps,
                ..GuidanceConfig::disabled()
            }
        } else {
            cfg.guidance
        };
        let seeds = if args.seeds.is_empty() { vec![cfg.sample.seed] } else { args.seeds };
        generate(&ckpt, &params, &layout, cfg.sample, guidance, &seeds, out, args.heatmaps)?
    };
    fs::write(out.join("manifest.json"), manifest.to_json())?;
    for o in &manifest.outputs {
        if o.path.ends_with(".ppm") {
            println!("{}  {}", o.sha256, out.join(&o.path).display());
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = read_config(args.common.config.as_deref())?;
    let params = load_params(&args.checkpoint)?;
    let layouts = load_layouts(&args.layouts)?;
    let guidance = if args.unguided {
        GuidanceConfig {
            guided_steps: cfg.guidance.guided_steps,
            ..GuidanceConfig::disabled()
        }
    } else {
        cfg.guidance
    };
    let report = eval::evaluate(&params, &layouts, &NoiseSchedule::default(), &cfg.sample, &guidance, args.seeds)?;
    let out = &args.common.out_dir;
    create_dir(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    report.write_csv(BufWriter::new(fs::File::create(out.join("report.csv"))?))?;
    println!(
        "mean attention-in-box {:.4}  centroid-in-box rate {:.4}  ({} seeds, {:.2}s/image)",
        report.mean_attention_in_box, report.centroid_in_box_rate, report.seeds, report.seconds_per_image
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    for a in &args.axes {
        if !ABLATION_AXES.contains(&a.as_str()) {
            bail!("unknown axis {a:?}; choose from {}", ABLATION_AXES.join(", "));
        }
    }
    let cfg = read_config(args.common.config.as_deref())?;
    let params = load_params(&args.checkpoint)?;
    let layouts = load_layouts(&args.layouts)?;
    let axes: Vec<&str> = args.axes.iter().map(String::as_str).collect();
    let variants: Vec<AblationVariant> = eval::ablation_grid(&cfg.guidance, &axes)
        .into_iter()
        .filter(|v| v.guidance.guided_steps <= cfg.sample.steps)
        .collect();
    let rows = eval::run_ablation(&params, &layouts, &NoiseSchedule::default(), &cfg.sample, &variants, args.seeds)?;
    let out = &args.common.out_dir;
    create_dir(out)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    eval::write_ablation_csv(&rows, BufWriter::new(fs::File::create(out.join("ablation.csv"))?))?;
    eval::write_ablation_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}

fn cmd_dataset(args: DatasetArgs) -> Result<()> {
    let cfg = read_config(args.common.config.as_deref())?;
    dump_dataset(&cfg.train.dataset, args.seed, args.count, &args.common.out_dir)?;
    println!("{}", args.common.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Dataset(a) => cmd_dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
