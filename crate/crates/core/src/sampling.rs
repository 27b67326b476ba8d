//! Selective sampling of mask cells by attention value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::layout::BinaryMask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplingError {
    #[error("selective sampling needs a non-empty region")]
    EmptyRegion,
    #[error("value map has {values} entries but the region has {region}")]
    Length { values: usize, region: usize },
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("fractions must lie in (0, 1], got top={top} keep={keep}")]
    Fraction { top: f64, keep: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Fraction of the region kept after ranking by value.
    pub top_fraction: f64,
    /// Fraction of the top set retained at random.
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.8,
            keep_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if ok(self.top_fraction) && ok(self.keep_fraction) {
            Ok(())
        } else {
            Err(SamplingError::Fraction {
                top: self.top_fraction,
                keep: self.keep_fraction,
            })
        }
    }

    /// Size of the top set for a region of `n` cells: `ceil(K·n)`.
    pub fn top_count(&self, n: usize) -> usize {
        // The small slack keeps products like 0.7 * 10 = 7.000000000000001 at 7.
        ((self.top_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }

    /// Number of cells finally selected from a region of `n` cells.
    pub fn selected_count(&self, n: usize) -> usize {
        let k = self.top_count(n);
        ((self.keep_fraction * k as f64 + 1e-9).round() as usize).clamp(1, k)
    }

    /// Independent generator for one refinement step.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }
}

/// Ranks the region's cells by value (descending, lower index first on ties),
/// keeps the top `ceil(K·n)`, then draws `max(1, round(M·k))` of those
/// uniformly without replacement.
pub fn selective_sample<R: Rng + ?Sized>(
    values: &[f64],
    region: &BinaryMask,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<BinaryMask, SamplingError> {
    cfg.validate()?;
    if values.len() != region.len() {
        return Err(SamplingError::Length {
            values: values.len(),
            region: region.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(SamplingError::NonFinite { index });
    }
    let mut ranked = region.indices();
    if ranked.is_empty() {
        return Err(SamplingError::EmptyRegion);
    }
    let n = ranked.len();
    // Stable sort keeps ascending index order among equal values.
    ranked.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let k = cfg.top_count(n);
    let m = cfg.selected_count(n);
    let mut cells = vec![false; region.len()];
    for pick in rand::seq::index::sample(rng, k, m) {
        cells[ranked[pick]] = true;
    }
    Ok(BinaryMask::from_cells(region.height(), region.width(), cells))
}
