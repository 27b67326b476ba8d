//! Noise schedule, deterministic sampler with classifier-free guidance, and
//! the toy trainer.

pub mod dataset;
mod train;

pub use train::{eps_mse, train, train_step, Optimizer, OptimizerState, TrainConfig, TrainError, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::model::{self, DenoiserParams, ForwardOptions, ModelError, BOS};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("timestep {t} outside 0..{steps}")]
    Timestep { t: usize, steps: usize },
    #[error("shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("{steps} sampling steps do not divide a {total}-step schedule")]
    Steps { steps: usize, total: usize },
    #[error("sampler must move to an earlier timestep, got {from} -> {to:?}")]
    Order { from: usize, to: Option<usize> },
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("guidance scale must be finite and >= 0, got {0}")]
    Scale(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β evenly spaced from `start` to `end` over `steps` timesteps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self, ScheduleError> {
        if steps < 2 || !(0.0 < start && start <= end && end < 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "need steps >= 2 and 0 < start <= end < 1, got {steps}, {start}, {end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.alpha_bars.get(t).copied().ok_or(ScheduleError::Timestep {
            t,
            steps: self.len(),
        })
    }

    /// `steps` evenly spaced timesteps, descending from T−1.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>, ScheduleError> {
        if steps == 0 || !self.len().is_multiple_of(steps) {
            return Err(ScheduleError::Steps {
                steps,
                total: self.len(),
            });
        }
        let stride = self.len() / steps;
        Ok((0..steps).map(|k| self.len() - 1 - k * stride).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule")
    }
}

/// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor, ScheduleError> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, "add_noise", |x, e| a * x + b * e)
        .map_err(|_| ScheduleError::Shape(z0.shape().to_vec(), eps.shape().to_vec()))
}

/// ε_u + s·(ε_c − ε_u).
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor, ScheduleError> {
    uncond
        .zip_map(cond, "cfg_combine", |u, c| u + scale * (c - u))
        .map_err(|_| ScheduleError::Shape(uncond.shape().to_vec(), cond.shape().to_vec()))
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` means the clean
/// end of the chain, ᾱ = 1).
///
/// With `clip`, the predicted z0 is clamped to [-1, 1] and ε re-derived from it.
pub fn sample_step(
    z: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor, ScheduleError> {
    if t_prev.is_some_and(|p| p >= t) {
        return Err(ScheduleError::Order { from: t, to: t_prev });
    }
    if z.shape() != eps.shape() {
        return Err(ScheduleError::Shape(z.shape().to_vec(), eps.shape().to_vec()));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zt, &e)| {
            let mut x0 = (zt - sb * e) / sa;
            let mut e = e;
            if clip {
                let c = x0.clamp(-1.0, 1.0);
                if c != x0 {
                    x0 = c;
                    e = (zt - sa * x0) / sb;
                }
            }
            pa * x0 + pb * e
        })
        .collect();
    Ok(Tensor::new(z.shape(), data).expect("same shape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Clamp the predicted clean latent to [-1, 1] at every step.
    pub clip_denoised: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            seed: 0,
            clip_denoised: true,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), ScheduleError> {
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(ScheduleError::Scale(self.guidance_scale));
        }
        schedule.sampling_timesteps(self.steps).map(|_| ())
    }
}

/// Standard-normal starting latent for a seed.
pub fn initial_latent(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::new(shape, data).expect("latent shape")
}

/// Text features of the prompt and of the unconditional `[BOS]` prompt.
pub fn prompt_features(params: &DenoiserParams, prompt: &[usize]) -> Result<(Tensor, Tensor), ModelError> {
    Ok((model::encode_tokens(params, prompt)?, model::encode_tokens(params, &[BOS])?))
}

/// Classifier-free-guided noise estimate without recording.
pub fn guided_eps(
    params: &DenoiserParams,
    z: &Tensor,
    t: usize,
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
) -> Result<Tensor, ScheduleError> {
    let (c, _) = model::denoise_with(params, z, t, cond, ForwardOptions::default())?;
    let (u, _) = model::denoise_with(params, z, t, uncond, ForwardOptions::default())?;
    cfg_combine(&u, &c, scale)
}

/// Plain sampling: start from seeded noise, run every step with CFG.
pub fn sample(
    params: &DenoiserParams,
    prompt: &[usize],
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor, ScheduleError> {
    cfg.validate(schedule)?;
    let (cond, uncond) = prompt_features(params, prompt)?;
    let ts = schedule.sampling_timesteps(cfg.steps)?;
    let mut z = initial_latent(&params.config().latent_shape(), cfg.seed);
    for (k, &t) in ts.iter().enumerate() {
        let eps = guided_eps(params, &z, t, &cond, &uncond, cfg.guidance_scale)?;
        z = sample_step(&z, &eps, t, ts.get(k + 1).copied(), schedule, cfg.clip_denoised)?;
    }
    Ok(z)
}

pub fn sample_image(
    params: &DenoiserParams,
    prompt: &[usize],
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Image, ScheduleError> {
    let z = sample(params, prompt, schedule, cfg)?;
    Ok(model::image_from_latent(params.config(), &z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_schedule_sanity() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(999).unwrap() < 0.05);
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (999, 979, 19));
        assert!(s.sampling_timesteps(7).is_err());
    }

    #[test]
    fn add_noise_boundaries() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::vector(vec![0.5, -0.25, 1.0]);
        let eps = Tensor::vector(vec![1.0, 1.0, -1.0]);
        let z = add_noise(&z0, &eps, 0, &s).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 0.011);
        }
        let zero = Tensor::zeros(&[3]);
        let z = add_noise(&z0, &zero, 500, &s).unwrap();
        let a = s.alpha_bar(500).unwrap().sqrt();
        for (x, y) in z.data().iter().zip(z0.data()) {
            assert_eq!(*x, a * y);
        }
        assert!(add_noise(&z0, &eps, 1000, &s).is_err());
        assert!(add_noise(&z0, &Tensor::zeros(&[2]), 1, &s).is_err());
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let z0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = initial_latent(&[n], 2);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let z0_var = var(&z0);
        for t in [100, 400, 800] {
            let zt = add_noise(&Tensor::vector(z0.clone()), &eps, t, &s).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let expected = ab * z0_var + (1.0 - ab);
            let got = var(zt.data());
            assert!((got - expected).abs() / expected < 0.05, "t={t}: {got} vs {expected}");
        }
    }

    #[test]
    fn cfg_identities() {
        let a = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let b = Tensor::vector(vec![0.25, 3.0, -1.0]);
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap(), b);
        assert_eq!(cfg_combine(&a, &b, 0.0).unwrap(), a);
        for s in [0.5, 2.0, 7.5] {
            let sum = cfg_combine(&a, &b, s).unwrap().add(&cfg_combine(&b, &a, s).unwrap()).unwrap();
            for (x, y) in sum.data().iter().zip(a.add(&b).unwrap().data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_denoiser_converges_monotonically() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::vector((0..64).map(|i| ((i as f64) * 0.3).sin() * 0.9).collect());
        let noise = initial_latent(&[64], 3);
        let ts = s.sampling_timesteps(50).unwrap();
        let mut z = add_noise(&z0, &noise, ts[0], &s).unwrap();
        let mut last = f64::INFINITY;
        for (k, &t) in ts.iter().enumerate() {
            // The exact ε that maps z back to z0 at this timestep.
            let ab = s.alpha_bar(t).unwrap();
            let eps = z.zip_map(&z0, "eps", |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt()).unwrap();
            z = sample_step(&z, &eps, t, ts.get(k + 1).copied(), &s, false).unwrap();
            let err = z.sub(&z0).unwrap().norm();
            assert!(err < last, "step {k}: {err} >= {last}");
            last = err;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn sample_step_misuse() {
        let s = NoiseSchedule::default();
        let z = Tensor::zeros(&[4]);
        assert!(matches!(sample_step(&z, &z, 10, Some(20), &s, false), Err(ScheduleError::Order { .. })));
        assert!(sample_step(&z, &Tensor::zeros(&[3]), 20, Some(10), &s, false).is_err());
    }

    #[test]
    fn clipping_bounds_the_clean_estimate() {
        let s = NoiseSchedule::default();
        let z = Tensor::vector(vec![3.0, -3.0, 0.1]);
        let eps = Tensor::zeros(&[3]);
        let out = sample_step(&z, &eps, 19, None, &s, true).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0, 0.1 / s.alpha_bar(19).unwrap().sqrt()]);
    }

    #[test]
    fn sampling_is_deterministic_and_finite() {
        let cfg = model::ModelConfig {
            grid: 4,
            patch: 1,
            d_model: 8,
            heads: 2,
            blocks: 1,
            d_text: 4,
            vocab: 12,
            ff_mult: 2,
            max_tokens: 8,
            ..model::ModelConfig::default()
        };
        let p = model::init_params(cfg, 0).unwrap();
        let sc = SampleConfig {
            steps: 10,
            seed: 3,
            ..SampleConfig::default()
        };
        let s = NoiseSchedule::default();
        let a = sample(&p, &[0, 1, 3], &s, &sc).unwrap();
        let b = sample(&p, &[0, 1, 3], &s, &sc).unwrap();
        assert!(a.is_finite());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let unclipped = sample(&p, &[0, 1, 3], &s, &SampleConfig { clip_denoised: false, ..sc }).unwrap();
        assert!(unclipped.is_finite());
    }
}
