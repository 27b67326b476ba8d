//! Localization metrics, reports, run manifests and the ablation harness.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::guidance::{run_guided, GuidanceConfig, GuidanceError};
use crate::image::Image;
use crate::layout::{rasterize, Layout, LayoutError};
use crate::model::{self, hex, AttentionRecord, DenoiserParams};
use crate::sampling::SamplingConfig;
use crate::scheduler::dataset::{default_palette, Color};
use crate::scheduler::{NoiseSchedule, SampleConfig};

/// RGB distance beyond which a pixel counts as background.
pub const SEGMENT_THRESHOLD: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least one seed")]
    NoSeeds,
    #[error("need at least one layout")]
    NoLayouts,
    #[error("seed {seed}")]
    Run {
        seed: u64,
        #[source]
        source: GuidanceError,
    },
    #[error("record has no map for prompt position {0}")]
    MissingToken(usize),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("io error")]
    Io(#[from] std::io::Error),
}

/// Share of each entry's attention inside its box, `Σ(m·A)/ΣA`. Entries
/// with zero total attention score 0 and produce a warning.
pub fn attention_in_box(record: &AttentionRecord, layout: &Layout) -> Result<(Vec<f64>, Vec<String>), EvalError> {
    let l = record.self_attn.shape()[0];
    let grid = (l as f64).sqrt().round() as usize;
    let mut out = Vec::with_capacity(layout.len());
    let mut warnings = Vec::new();
    for e in &layout.entries {
        let a = record.cross.get(e.token_index).ok_or(EvalError::MissingToken(e.token_index))?;
        let m = rasterize(&e.bbox, grid, grid)?;
        let total: f64 = a.iter().sum();
        if total <= 0.0 {
            warnings.push(format!("token {}: zero total attention", e.token_index));
            out.push(0.0);
            continue;
        }
        let inside: f64 = a.iter().zip(m.cells()).filter(|(_, &c)| c).map(|(v, _)| v).sum();
        out.push(inside / total);
    }
    Ok((out, warnings))
}

/// Palette color named by the first matching word of a label.
pub fn label_color<'a>(label: &str, palette: &'a [Color]) -> Option<&'a Color> {
    label
        .split_whitespace()
        .find_map(|w| palette.iter().find(|c| c.name == w))
}

/// Nearest-prototype segmentation; `None` marks background.
pub fn segment(image: &Image, palette: &[Color], threshold: f64) -> Vec<Option<usize>> {
    (0..image.height)
        .flat_map(|y| (0..image.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = image.pixel(x, y);
            let (best, dist) = palette
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d2: f64 = c.rgb.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    (i, d2.sqrt())
                })
                .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            (dist <= threshold).then_some(best)
        })
        .collect()
}

/// Whether the centroid of each entry's color segment lies in its box.
/// Entries with no matching pixels, or no color in their label, are false.
pub fn centroid_in_box(image: &Image, layout: &Layout, palette: &[Color], threshold: f64) -> Vec<bool> {
    let seg = segment(image, palette, threshold);
    layout
        .entries
        .iter()
        .map(|e| {
            let Some(color) = label_color(&e.label, palette) else {
                return false;
            };
            let idx = palette.iter().position(|c| c.name == color.name);
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for (i, s) in seg.iter().enumerate() {
                if *s == idx {
                    sx += (i % image.width) as f64 + 0.5;
                    sy += (i / image.width) as f64 + 0.5;
                    n += 1;
                }
            }
            n > 0 && e.bbox.contains(sx / n as f64 / image.width as f64, sy / n as f64 / image.height as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub seed: u64,
    pub layout: usize,
    pub token_index: usize,
    pub label: String,
    pub attention_in_box: f64,
    pub centroid_in_box: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub entries: Vec<EntryResult>,
    pub mean_attention_in_box: f64,
    pub centroid_in_box_rate: f64,
    pub seeds: usize,
    pub seconds_per_image: f64,
    pub warnings: Vec<String>,
}

impl LocalizationReport {
    pub fn from_entries(entries: Vec<EntryResult>, seeds: usize, seconds_per_image: f64, warnings: Vec<String>) -> Self {
        let n = entries.len().max(1) as f64;
        let mean_attention_in_box = entries.iter().map(|e| e.attention_in_box).sum::<f64>() / n;
        let centroid_in_box_rate = entries.iter().filter(|e| e.centroid_in_box).count() as f64 / n;
        Self {
            entries,
            mean_attention_in_box,
            centroid_in_box_rate,
            seeds,
            seconds_per_image,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "seed,layout,token_index,label,attention_in_box,centroid_in_box")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.seed, e.layout, e.token_index, e.label, e.attention_in_box, e.centroid_in_box as u8
            )?;
        }
        Ok(())
    }
}

/// Outputs of one seeded generation.
pub struct SeedOutcome {
    pub image: Image,
    pub record: Option<AttentionRecord>,
    pub entries: Vec<EntryResult>,
    pub warnings: Vec<String>,
}

/// Generates and scores one seed.
pub fn evaluate_seed(
    params: &DenoiserParams,
    layout: &Layout,
    layout_index: usize,
    schedule: &NoiseSchedule,
    sample: &SampleConfig,
    guidance: &GuidanceConfig,
    palette: &[Color],
) -> Result<SeedOutcome, GuidanceError> {
    let (z, trace) = run_guided(params, layout, schedule, sample, guidance)?;
    let image = model::image_from_latent(params.config(), &z);
    let mut warnings = trace.warnings.clone();
    let record = trace.final_record().cloned();
    let masses = match &record {
        Some(r) => {
            let (m, w) = attention_in_box(r, layout).map_err(|e| GuidanceError::Config(e.to_string()))?;
            warnings.extend(w);
            m
        }
        None => vec![0.0; layout.len()],
    };
    let flags = centroid_in_box(&image, layout, palette, SEGMENT_THRESHOLD);
    let entries = layout
        .entries
        .iter()
        .zip(masses.into_iter().zip(flags))
        .map(|(e, (mass, flag))| EntryResult {
            seed: sample.seed,
            layout: layout_index,
            token_index: e.token_index,
            label: e.label.clone(),
            attention_in_box: mass,
            centroid_in_box: flag,
        })
        .collect();
    Ok(SeedOutcome {
        image,
        record,
        entries,
        warnings,
    })
}

/// Runs seeds `0..seeds` (offset by `sample.seed`), cycling through
/// `layouts`, and aggregates the scores. Seeds run in parallel; results are
/// assembled in seed order.
pub fn evaluate(
    params: &DenoiserParams,
    layouts: &[Layout],
    schedule: &NoiseSchedule,
    sample: &SampleConfig,
    guidance: &GuidanceConfig,
    seeds: usize,
) -> Result<LocalizationReport, EvalError> {
    if seeds == 0 {
        return Err(EvalError::NoSeeds);
    }
    if layouts.is_empty() {
        return Err(EvalError::NoLayouts);
    }
    let palette = default_palette();
    let start = Instant::now();
    let outcomes: Vec<Result<(Vec<EntryResult>, Vec<String>), EvalError>> = (0..seeds)
        .into_par_iter()
        .map(|k| {
            let seed = sample.seed.wrapping_add(k as u64);
            let li = k % layouts.len();
            let sc = SampleConfig { seed, ..*sample };
            evaluate_seed(params, &layouts[li], li, schedule, &sc, guidance, &palette)
                .map(|o| (o.entries, o.warnings))
                .map_err(|source| EvalError::Run { seed, source })
        })
        .collect();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for o in outcomes {
        let (e, w) = o?;
        entries.extend(e);
        warnings.extend(w);
    }
    let per_image = start.elapsed().as_secs_f64() / seeds as f64;
    Ok(LocalizationReport::from_entries(entries, seeds, per_image, warnings))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to replay a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub layout: Layout,
    pub sample: SampleConfig,
    pub guidance: GuidanceConfig,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One named guidance setting in an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub axis: String,
    pub name: String,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub name: String,
    pub mean_attention_in_box: f64,
    pub centroid_in_box_rate: f64,
}

/// Variants along the axes of the component, sampling, margin and schedule
/// ablations. `base` supplies every setting not being varied.
pub fn ablation_grid(base: &GuidanceConfig, axes: &[&str]) -> Vec<AblationVariant> {
    use crate::constraints::LossToggles;
    let v = |axis: &str, name: String, guidance: GuidanceConfig| AblationVariant {
        axis: axis.into(),
        name,
        guidance,
    };
    let mut out = Vec::new();
    for &axis in axes {
        match axis {
            "losses" => {
                let sets = [
                    ("none", LossToggles::NONE),
                    ("intra", LossToggles { intra: true, ..LossToggles::NONE }),
                    ("intra+inter", LossToggles { intra: true, inter: true, self_attn: false }),
                    ("intra+inter+self", LossToggles::ALL),
                ];
                for (name, losses) in sets {
                    out.push(v(axis, name.into(), GuidanceConfig { losses, ..*base }));
                }
            }
            "redistribution" => {
                for on in [false, true] {
                    out.push(v(axis, format!("redistribute={on}"), GuidanceConfig { redistribute: on, ..*base }));
                }
            }
            "sampling" => {
                for (k, m) in [(1.0, 1.0), (0.8, 1.0), (1.0, 0.5), (0.8, 0.5)] {
                    let sampling = SamplingConfig {
                        top_fraction: k,
                        keep_fraction: m,
                        ..base.sampling
                    };
                    out.push(v(axis, format!("K={k},M={m}"), GuidanceConfig { sampling, ..*base }));
                }
            }
            "margin" => {
                for g in [0.0, 0.05, 0.1, 0.2] {
                    out.push(v(axis, format!("g={g}"), GuidanceConfig { margin: g, ..*base }));
                }
            }
            "refine_steps" => {
                for tr in [1, 3, 5, 10] {
                    out.push(v(axis, format!("T_R={tr}"), GuidanceConfig { refine_steps: tr, ..*base }));
                }
            }
            "guided_steps" => {
                for td in [10, 25, 40] {
                    out.push(v(axis, format!("T_D={td}"), GuidanceConfig { guided_steps: td, ..*base }));
                }
            }
            _ => {}
        }
    }
    out
}

pub const ABLATION_AXES: [&str; 6] = ["losses", "redistribution", "sampling", "margin", "refine_steps", "guided_steps"];

/// Evaluates every variant on the same seeds and layouts.
pub fn run_ablation(
    params: &DenoiserParams,
    layouts: &[Layout],
    schedule: &NoiseSchedule,
    sample: &SampleConfig,
    variants: &[AblationVariant],
    seeds: usize,
) -> Result<Vec<AblationRow>, EvalError> {
    variants
        .iter()
        .map(|v| {
            let r = evaluate(params, layouts, schedule, sample, &v.guidance, seeds)?;
            Ok(AblationRow {
                axis: v.axis.clone(),
                name: v.name.clone(),
                mean_attention_in_box: r.mean_attention_in_box,
                centroid_in_box_rate: r.centroid_in_box_rate,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "axis,variant,mean_attention_in_box,centroid_in_box_rate")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6}", r.axis, r.name, r.mean_attention_in_box, r.centroid_in_box_rate)?;
    }
    Ok(())
}
