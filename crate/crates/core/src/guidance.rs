//! Layout guidance: latent refinement against the attention constraints and
//! attention redistribution during the first sampling steps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::constraints::{total_loss_var, ConstraintError, LossTerms, LossToggles, MarginMode};
use crate::image::{Image, ImageError, PnmFormat};
use crate::layout::{BinaryMask, Layout, LayoutError};
use crate::model::{self, AttentionOverride, AttentionRecord, DenoiserParams, ForwardOptions, ModelError};
use crate::sampling::{selective_sample, SamplingConfig, SamplingError};
use crate::scheduler::{self, cfg_combine, sample_step, NoiseSchedule, SampleConfig, ScheduleError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("step index {index} outside 0..{guided}")]
    StepIndex { index: usize, guided: usize },
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("sampling step {step} (t = {t})")]
    Step {
        step: usize,
        t: usize,
        #[source]
        source: Box<GuidanceError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("writing trace")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Refinement iterations per guided step (T_R).
    pub refine_steps: usize,
    /// Number of guided sampling steps (T_D), counted from the start.
    pub guided_steps: usize,
    /// Base step size η_0.
    pub eta0: f64,
    pub margin: f64,
    pub margin_mode: MarginMode,
    pub sampling: SamplingConfig,
    pub losses: LossToggles,
    /// Apply top-K / keep-M selection; otherwise the full masks are used.
    pub selective: bool,
    pub redistribute: bool,
    /// Normalize all redistributed maps by one shared maximum.
    pub global_max: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            refine_steps: 5,
            guided_steps: 25,
            eta0: DEFAULT_ETA0,
            margin: 0.1,
            margin_mode: MarginMode::Aggregate,
            sampling: SamplingConfig::default(),
            losses: LossToggles::ALL,
            selective: true,
            redistribute: true,
            global_max: false,
        }
    }
}

/// Calibrated on the fixture model so the first update moves the latent by
/// at most 5% of its norm.
pub const DEFAULT_ETA0: f64 = 0.95;

impl GuidanceConfig {
    /// No refinement and no redistribution.
    pub fn disabled() -> Self {
        Self {
            refine_steps: 0,
            losses: LossToggles::NONE,
            redistribute: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<(), GuidanceError> {
        if self.guided_steps == 0 || self.guided_steps > total_steps {
            return Err(GuidanceError::Config(format!(
                "guided_steps must lie in 1..={total_steps}, got {}",
                self.guided_steps
            )));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(GuidanceError::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !self.margin.is_finite() {
            return Err(GuidanceError::Config("margin must be finite".into()));
        }
        self.sampling.validate()?;
        Ok(())
    }

    fn refines(&self) -> bool {
        self.refine_steps > 0 && self.losses.any()
    }
}

/// η_t = η_0·(1 − step/T_D).
pub fn eta(step_index: usize, cfg: &GuidanceConfig) -> Result<f64, GuidanceError> {
    if step_index >= cfg.guided_steps {
        return Err(GuidanceError::StepIndex {
            index: step_index,
            guided: cfg.guided_steps,
        });
    }
    Ok(cfg.eta0 * (1.0 - step_index as f64 / cfg.guided_steps as f64))
}

/// Redistributed maps: each attending token gets the sum of all attending
/// maps, gated by its own mask and divided by the maximum.
pub fn redistribute(
    record: &AttentionRecord,
    layout: &Layout,
    masks: &[BinaryMask],
    global_max: bool,
) -> Result<AttentionOverride, GuidanceError> {
    let tokens = layout.token_indices();
    let l = masks.first().map_or(0, BinaryMask::len);
    let mut total = vec![0.0; l];
    for &j in &tokens {
        total.iter_mut().zip(record.cross_map(j)).for_each(|(t, a)| *t += a);
    }
    let mut maps: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| total.iter().zip(m.cells()).map(|(&t, &c)| if c { t } else { 0.0 }).collect())
        .collect();
    let peak = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max);
    let shared = maps.iter().map(|m| peak(m)).fold(0.0f64, f64::max);
    for m in &mut maps {
        let p = if global_max { shared } else { peak(m) };
        if p > 0.0 {
            m.iter_mut().for_each(|v| *v /= p);
        }
    }
    Ok(AttentionOverride::new(tokens.into_iter().zip(maps).collect())?)
}

/// Loss of one refinement iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub step: usize,
    pub t: usize,
    pub iteration: usize,
    pub eta: f64,
    #[serde(flatten)]
    pub loss: LossTerms,
    pub grad_norm: f64,
}

/// Everything needed to evaluate the constraints for one latent.
pub struct GuidanceContext<'a> {
    pub params: &'a DenoiserParams,
    pub layout: &'a Layout,
    pub masks: Vec<BinaryMask>,
    pub cond: Tensor,
    pub cfg: GuidanceConfig,
    /// Seed of the sampling generator, combined with a per-iteration counter.
    pub sampling_seed: u64,
}

impl<'a> GuidanceContext<'a> {
    pub fn new(params: &'a DenoiserParams, layout: &'a Layout, cfg: GuidanceConfig, sample_seed: u64) -> Result<Self, GuidanceError> {
        let g = params.config().grid;
        let masks = layout.masks(g, g)?;
        let cond = model::encode_tokens(params, &layout.prompt)?;
        Ok(Self {
            params,
            layout,
            masks,
            cond,
            cfg,
            sampling_seed: cfg.sampling.seed ^ sample_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        })
    }

    /// Sampled inside/outside masks from the current maps.
    pub fn sample_masks(&self, cross: &[Vec<f64>], counter: u64) -> Result<(Vec<BinaryMask>, Vec<BinaryMask>), GuidanceError> {
        if !self.cfg.selective {
            let outside = self.masks.iter().map(BinaryMask::complement).collect();
            return Ok((self.masks.clone(), outside));
        }
        let sc = SamplingConfig {
            seed: self.sampling_seed,
            ..self.cfg.sampling
        };
        let mut rng = sc.step_rng(counter);
        let mut inside = Vec::with_capacity(self.masks.len());
        let mut outside = Vec::with_capacity(self.masks.len());
        for (m, a) in self.masks.iter().zip(cross) {
            inside.push(selective_sample(a, m, &sc, &mut rng)?);
            let rest = m.complement();
            // A box covering the whole grid leaves nothing outside.
            outside.push(if rest.count() == 0 { rest } else { selective_sample(a, &rest, &sc, &mut rng)? });
        }
        Ok((inside, outside))
    }

    /// Loss terms and ∇_z at `z`, with masks either given or sampled from
    /// the maps at `z` using `counter`.
    pub fn loss_and_grad(
        &self,
        z: &Tensor,
        t: usize,
        masks: Option<&(Vec<BinaryMask>, Vec<BinaryMask>)>,
        counter: u64,
    ) -> Result<(LossTerms, Option<Tensor>, (Vec<BinaryMask>, Vec<BinaryMask>)), GuidanceError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.leaf(z.clone());
        let text = tape.constant(self.cond.clone());
        let opts = ForwardOptions {
            record: true,
            ..ForwardOptions::default()
        };
        let out = model::forward(&mut tape, self.params, &bound, zv, t, text, opts)?;
        let cross_all = out.cross.expect("recording on");
        let self_attn = out.self_attn.expect("recording on");
        let cross = self
            .layout
            .token_indices()
            .into_iter()
            .map(|j| tape.column(cross_all, j))
            .collect::<Result<Vec<_>, _>>()?;
        let sampled = match masks {
            Some(m) => m.clone(),
            None => {
                let maps: Vec<Vec<f64>> = cross.iter().map(|&v| tape.value(v).data().to_vec()).collect();
                self.sample_masks(&maps, counter)?
            }
        };
        let vars = total_loss_var(
            &mut tape,
            &cross,
            self_attn,
            &self.masks,
            &sampled.0,
            &sampled.1,
            self.cfg.margin,
            self.cfg.margin_mode,
            self.cfg.losses,
        )?;
        let terms = vars.terms(&tape);
        let grad = match vars.total {
            Some(total) => {
                let mut g = tape.backward(total)?;
                Some(g.take(zv).unwrap_or_else(|| Tensor::zeros(z.shape())))
            }
            None => None,
        };
        Ok((terms, grad, sampled))
    }
}

/// Result of [`refine`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub z: Tensor,
    pub records: Vec<RefineRecord>,
    pub warning: Option<String>,
}

/// T_R gradient steps on the latent at guided step `step_index`.
pub fn refine(ctx: &GuidanceContext<'_>, z: &Tensor, t: usize, step_index: usize) -> Result<Refined, GuidanceError> {
    let mut z = z.clone();
    let mut records = Vec::new();
    if !ctx.cfg.refines() {
        return Ok(Refined { z, records, warning: None });
    }
    let eta_t = eta(step_index, &ctx.cfg)?;
    for it in 0..ctx.cfg.refine_steps {
        let counter = (step_index * ctx.cfg.refine_steps + it) as u64;
        let (loss, grad, _) = ctx.loss_and_grad(&z, t, None, counter)?;
        let grad = grad.expect("some loss enabled");
        if !grad.is_finite() || !loss.total.is_finite() {
            return Ok(Refined {
                z,
                records,
                warning: Some(format!("non-finite gradient at step {step_index}, iteration {it}; refinement stopped")),
            });
        }
        records.push(RefineRecord {
            step: step_index,
            t,
            iteration: it,
            eta: eta_t,
            loss,
            grad_norm: grad.norm(),
        });
        z = z.sub(&grad.scale(eta_t))?;
    }
    Ok(Refined { z, records, warning: None })
}

/// Outcome of [`backtracked_step`].
#[derive(Debug, Clone)]
pub struct Backtracked {
    pub z: Tensor,
    pub before: f64,
    pub after: f64,
    pub halvings: usize,
    /// Whether some trial step was taken; false leaves `z` unchanged.
    pub accepted: bool,
}

/// One refinement step with frozen sampled masks, halving η up to
/// `max_halvings` times until the loss does not increase. Keeps `z` if no
/// trial step succeeds.
pub fn backtracked_step(
    ctx: &GuidanceContext<'_>,
    z: &Tensor,
    t: usize,
    eta0: f64,
    max_halvings: usize,
    counter: u64,
) -> Result<Backtracked, GuidanceError> {
    let (loss, grad, masks) = ctx.loss_and_grad(z, t, None, counter)?;
    let before = loss.total;
    let Some(grad) = grad else {
        return Ok(Backtracked {
            z: z.clone(),
            before,
            after: before,
            halvings: 0,
            accepted: false,
        });
    };
    let mut step = eta0;
    for h in 0..=max_halvings {
        let trial = z.sub(&grad.scale(step))?;
        let (l, _, _) = ctx.loss_and_grad(&trial, t, Some(&masks), counter)?;
        if l.total <= before {
            return Ok(Backtracked {
                z: trial,
                before,
                after: l.total,
                halvings: h,
                accepted: true,
            });
        }
        step /= 2.0;
    }
    Ok(Backtracked {
        z: z.clone(),
        before,
        after: before,
        halvings: max_halvings,
        accepted: false,
    })
}

/// Per-run diagnostics.
#[derive(Debug, Clone, Default)]
pub struct GuidanceTrace {
    pub refinements: Vec<RefineRecord>,
    /// Plain conditional record at each guided step, after refinement.
    pub snapshots: Vec<AttentionRecord>,
    pub warnings: Vec<String>,
}

impl GuidanceTrace {
    /// Record at the last guided step.
    pub fn final_record(&self) -> Option<&AttentionRecord> {
        self.snapshots.last()
    }

    /// One JSON object per refinement iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), GuidanceError> {
        for r in &self.refinements {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `step{k}_token{i}.pgm` heatmaps of every snapshot.
    pub fn write_heatmaps(&self, dir: &std::path::Path, layout: &Layout, grid: usize) -> Result<Vec<String>, GuidanceError> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (k, rec) in self.snapshots.iter().enumerate() {
            for i in layout.token_indices() {
                let name = format!("step{k:02}_token{i}.pgm");
                Image::heatmap(rec.cross_map(i), grid, grid).write(dir.join(&name), PnmFormat::Pgm)?;
                files.push(name);
            }
        }
        Ok(files)
    }
}

/// Seeded sampling with refinement and redistribution on the first T_D steps.
/// Returns the final latent.
pub fn run_guided(
    params: &DenoiserParams,
    layout: &Layout,
    schedule: &NoiseSchedule,
    sample: &SampleConfig,
    guidance: &GuidanceConfig,
) -> Result<(Tensor, GuidanceTrace), GuidanceError> {
    sample.validate(schedule)?;
    guidance.validate(sample.steps)?;
    let ctx = GuidanceContext::new(params, layout, *guidance, sample.seed)?;
    let uncond = model::encode_tokens(params, &[model::BOS])?;
    let ts = schedule.sampling_timesteps(sample.steps)?;
    let mut z = scheduler::initial_latent(&params.config().latent_shape(), sample.seed);
    let mut trace = GuidanceTrace::default();
    for (k, &t) in ts.iter().enumerate() {
        let wrap = |e: GuidanceError| GuidanceError::Step {
            step: k,
            t,
            source: Box::new(e),
        };
        let guided = k < guidance.guided_steps;
        let mut attention_override = None;
        if guided {
            let refined = refine(&ctx, &z, t, k).map_err(wrap)?;
            z = refined.z;
            trace.refinements.extend(refined.records);
            trace.warnings.extend(refined.warning);
            if guidance.redistribute {
                let (_, rec) = model::denoise(params, &z, t, &ctx.cond, None).map_err(|e| wrap(e.into()))?;
                attention_override = Some(redistribute(&rec, layout, &ctx.masks, guidance.global_max).map_err(wrap)?);
                trace.snapshots.push(rec);
            }
        }
        let opts = ForwardOptions {
            record: guided && attention_override.is_none(),
            per_head: false,
            attention_override: attention_override.as_ref(),
        };
        let (c, rec) = model::denoise_with(params, &z, t, &ctx.cond, opts).map_err(|e| wrap(e.into()))?;
        trace.snapshots.extend(rec);
        let (u, _) = model::denoise_with(params, &z, t, &uncond, ForwardOptions::default()).map_err(|e| wrap(e.into()))?;
        let eps = cfg_combine(&u, &c, sample.guidance_scale).map_err(|e| wrap(e.into()))?;
        z = sample_step(&z, &eps, t, ts.get(k + 1).copied(), schedule, sample.clip_denoised).map_err(|e| wrap(e.into()))?;
    }
    Ok((z, trace))
}

/// [`run_guided`] decoded to an image.
pub fn run_guided_generation(
    params: &DenoiserParams,
    layout: &Layout,
    schedule: &NoiseSchedule,
    sample: &SampleConfig,
    guidance: &GuidanceConfig,
) -> Result<(Image, GuidanceTrace), GuidanceError> {
    let (z, trace) = run_guided(params, layout, schedule, sample, guidance)?;
    Ok((model::image_from_latent(params.config(), &z), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BoundingBox, LayoutEntry};
    use crate::model::{init_params, ModelConfig};
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            grid: 4,
            patch: 1,
            d_model: 8,
            heads: 2,
            blocks: 2,
            d_text: 4,
            vocab: 12,
            ff_mult: 2,
            max_tokens: 8,
            ..ModelConfig::default()
        }
    }

    fn two_box_layout() -> Layout {
        let e = |i, b: [f64; 4]| LayoutEntry {
            token_index: i,
            bbox: BoundingBox::try_from(b).unwrap(),
            label: String::new(),
        };
        Layout::new(vec![0, 1, 3, 9], vec![e(2, [0.0, 0.0, 0.5, 1.0]), e(3, [0.5, 0.0, 1.0, 1.0])]).unwrap()
    }

    fn quick_sample() -> SampleConfig {
        SampleConfig {
            steps: 10,
            seed: 4,
            ..SampleConfig::default()
        }
    }

    fn quick_guidance() -> GuidanceConfig {
        GuidanceConfig {
            refine_steps: 2,
            guided_steps: 5,
            eta0: 1.0,
            ..GuidanceConfig::default()
        }
    }

    #[test]
    fn eta_schedule() {
        let cfg = GuidanceConfig {
            eta0: 2.0,
            guided_steps: 25,
            ..GuidanceConfig::default()
        };
        assert_eq!(eta(0, &cfg).unwrap(), 2.0);
        assert!((eta(24, &cfg).unwrap() - 2.0 / 25.0).abs() < 1e-15);
        let v: Vec<f64> = (0..25).map(|k| eta(k, &cfg).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]) && v.iter().all(|&e| e > 0.0));
        assert!(eta(25, &cfg).is_err());
    }

    fn record_with(maps: Vec<Vec<f64>>) -> AttentionRecord {
        let l = maps[0].len();
        AttentionRecord {
            timestep: 0,
            cross: maps,
            self_attn: Tensor::eye(l),
            cross_per_head: None,
        }
    }

    #[test]
    fn redistribution_hand_example() {
        let rec = record_with(vec![vec![0.0; 4], vec![0.2, 0.3, 0.1, 0.0], vec![0.1, 0.1, 0.4, 0.2]]);
        let e = |i| LayoutEntry {
            token_index: i,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            label: String::new(),
        };
        let layout = Layout::new(vec![0, 1, 2], vec![e(1), e(2)]).unwrap();
        let masks = vec![
            BinaryMask::from_indices(4, &[0, 1]),
            BinaryMask::from_indices(4, &[2, 3]),
        ];
        let ov = redistribute(&rec, &layout, &masks, false).unwrap();
        let r1 = ov.get(1).unwrap();
        let r2 = ov.get(2).unwrap();
        let expect1 = [0.75, 1.0, 0.0, 0.0];
        let expect2 = [0.0, 0.0, 1.0, 0.4];
        for k in 0..4 {
            assert!((r1[k] - expect1[k]).abs() < 1e-15);
            assert!((r2[k] - expect2[k]).abs() < 1e-15);
            assert_eq!(r1[k] * r2[k], 0.0);
        }
        assert!(ov.get(0).is_none());

        // Single token with a full mask is plain max normalization.
        let single = Layout::new(vec![0, 1], vec![e(1)]).unwrap();
        let ov = redistribute(&rec, &single, &[BinaryMask::full(1, 4, true)], false).unwrap();
        assert_eq!(ov.get(1).unwrap(), &[0.2 / 0.3, 1.0, 0.1 / 0.3, 0.0]);
    }

    #[test]
    fn redistribution_global_max_variant() {
        let rec = record_with(vec![vec![0.0; 4], vec![0.2, 0.3, 0.1, 0.0], vec![0.1, 0.1, 0.4, 0.2]]);
        let e = |i| LayoutEntry {
            token_index: i,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            label: String::new(),
        };
        let layout = Layout::new(vec![0, 1, 2], vec![e(1), e(2)]).unwrap();
        let masks = vec![BinaryMask::from_indices(4, &[0]), BinaryMask::from_indices(4, &[2, 3])];
        let ov = redistribute(&rec, &layout, &masks, true).unwrap();
        assert!((ov.get(1).unwrap()[0] - 0.6).abs() < 1e-15);
        assert_eq!(ov.get(2).unwrap()[2], 1.0);
    }

    #[test]
    fn refine_is_identity_without_work() {
        let p = init_params(small(), 1).unwrap();
        let layout = two_box_layout();
        let z = scheduler::initial_latent(&p.config().latent_shape(), 1);
        for cfg in [
            GuidanceConfig {
                refine_steps: 0,
                ..quick_guidance()
            },
            GuidanceConfig {
                losses: LossToggles::NONE,
                ..quick_guidance()
            },
        ] {
            let ctx = GuidanceContext::new(&p, &layout, cfg, 0).unwrap();
            let r = refine(&ctx, &z, 500, 0).unwrap();
            assert_eq!(r.z, z);
            assert!(r.records.is_empty());
        }
    }

    #[test]
    fn refine_moves_latent_and_logs() {
        let p = init_params(small(), 1).unwrap();
        let layout = two_box_layout();
        let z = scheduler::initial_latent(&p.config().latent_shape(), 1);
        let ctx = GuidanceContext::new(&p, &layout, quick_guidance(), 0).unwrap();
        let r = refine(&ctx, &z, 500, 1).unwrap();
        assert_ne!(r.z, z);
        assert_eq!(r.records.len(), 2);
        assert!(r.records.iter().all(|x| x.eta == eta(1, &quick_guidance()).unwrap()));
        let mut buf = Vec::new();
        GuidanceTrace {
            refinements: r.records,
            ..GuidanceTrace::default()
        }
        .write_jsonl(&mut buf)
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("intra").is_some() && first.get("eta").is_some());
    }

    #[test]
    fn backtracking_never_increases_loss() {
        let p = init_params(small(), 2).unwrap();
        let layout = two_box_layout();
        let ctx = GuidanceContext::new(&p, &layout, quick_guidance(), 0).unwrap();
        for seed in 0..5 {
            let z = scheduler::initial_latent(&p.config().latent_shape(), seed);
            let b = backtracked_step(&ctx, &z, 300, 50.0, 8, seed).unwrap();
            assert!(b.accepted && b.after <= b.before);
        }
    }

    #[test]
    fn disabled_guidance_matches_plain_sampling() {
        let p = init_params(small(), 3).unwrap();
        let layout = two_box_layout();
        let s = NoiseSchedule::default();
        let (z, trace) = run_guided(&p, &layout, &s, &quick_sample(), &GuidanceConfig {
            guided_steps: 5,
            ..GuidanceConfig::disabled()
        })
        .unwrap();
        let plain = scheduler::sample(&p, &layout.prompt, &s, &quick_sample()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&z), bits(&plain));
        assert_eq!(trace.snapshots.len(), 5);
        assert!(trace.refinements.is_empty());
    }

    #[test]
    fn guided_generation_is_deterministic_and_keeps_params() {
        let p = init_params(small(), 3).unwrap();
        let before = p.checksum();
        let layout = two_box_layout();
        let s = NoiseSchedule::default();
        let (a, ta) = run_guided(&p, &layout, &s, &quick_sample(), &quick_guidance()).unwrap();
        let (b, _) = run_guided(&p, &layout, &s, &quick_sample(), &quick_guidance()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(p.checksum(), before);
        assert_eq!(ta.refinements.len(), 5 * 2);
        assert_eq!(ta.snapshots.len(), 5);
        let plain = scheduler::sample(&p, &layout.prompt, &s, &quick_sample()).unwrap();
        assert_ne!(a, plain);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate(50).is_ok());
        assert!(GuidanceConfig {
            guided_steps: 51,
            ..GuidanceConfig::default()
        }
        .validate(50)
        .is_err());
        assert!(GuidanceConfig {
            eta0: 0.0,
            ..GuidanceConfig::default()
        }
        .validate(50)
        .is_err());
    }
}
