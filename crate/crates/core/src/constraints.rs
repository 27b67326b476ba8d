//! Layout constraints on attention maps.
//!
//! Three terms, each a sum over attending tokens:
//!
//! * intra-token: `(1 - in/(in + out))²` where `in`/`out` are the token's
//!   cross-attention mass on the sampled inside/outside cells;
//! * inter-token: squared hinge on `in - max_other - g`, where `max_other`
//!   sums the per-cell maximum of the other tokens over the same sampled cells;
//! * self-attention: the intra form applied to `mᵀS`, the self-attention rows
//!   of the full box mask summed together.
//!
//! Everything is built on a [`Tape`] so the same code yields values and
//! gradients. Masks are constants.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::layout::BinaryMask;
use crate::tensor::{Reduce, Tape, Tensor, TensorError, Var};

/// Guards `in + out` against zero.
pub const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("constraints need at least one attending token")]
    NoTokens,
    #[error("token {token}: {what} has length {got}, expected {expected}")]
    Length {
        token: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("token count mismatch: {maps} maps but {masks} masks")]
    TokenCount { maps: usize, masks: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the inter-token margin enters the difference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `d = Σ(m̃·A_i) − Σ max − g`
    #[default]
    Aggregate,
    /// `d = Σ_k((m̃·A_i)_k − g) − Σ max`, i.e. the margin is paid once per grid cell.
    PerElement,
}

/// Attention maps and masks for one evaluation of the constraints.
#[derive(Debug, Clone)]
pub struct ConstraintInput {
    /// `A_i`, one length-L map per attending token.
    pub cross: Vec<Vec<f64>>,
    /// `S`, L×L.
    pub self_attn: Tensor,
    /// Full box masks `m_i`.
    pub masks: Vec<BinaryMask>,
    /// Sampled inside cells `m̃_i`.
    pub inside: Vec<BinaryMask>,
    /// Sampled outside cells `m̂_i`.
    pub outside: Vec<BinaryMask>,
    pub margin: f64,
    pub margin_mode: MarginMode,
}

impl ConstraintInput {
    pub fn tokens(&self) -> usize {
        self.cross.len()
    }

    fn validate(&self) -> Result<(), ConstraintError> {
        let n = self.cross.len();
        if n == 0 {
            return Err(ConstraintError::NoTokens);
        }
        for len in [self.masks.len(), self.inside.len(), self.outside.len()] {
            if len != n {
                return Err(ConstraintError::TokenCount { maps: n, masks: len });
            }
        }
        let l = self.cross[0].len();
        for i in 0..n {
            let checks = [
                ("cross map", self.cross[i].len()),
                ("mask", self.masks[i].len()),
                ("inside mask", self.inside[i].len()),
                ("outside mask", self.outside[i].len()),
            ];
            for (what, got) in checks {
                if got != l {
                    return Err(ConstraintError::Length {
                        token: i,
                        what,
                        got,
                        expected: l,
                    });
                }
            }
        }
        if self.self_attn.shape() != [l, l] {
            return Err(TensorError::Shape {
                op: "self_attn",
                lhs: vec![l, l],
                rhs: self.self_attn.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }
}

/// Values of the three terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub intra: f64,
    pub inter: f64,
    #[serde(rename = "self")]
    pub self_attn: f64,
    pub total: f64,
}

/// Which terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub intra: bool,
    pub inter: bool,
    #[serde(rename = "self")]
    pub self_attn: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossToggles {
    pub const ALL: Self = Self {
        intra: true,
        inter: true,
        self_attn: true,
    };
    pub const NONE: Self = Self {
        intra: false,
        inter: false,
        self_attn: false,
    };

    pub fn any(&self) -> bool {
        self.intra || self.inter || self.self_attn
    }
}

/// Tape handles for the terms of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub intra: Option<Var>,
    pub inter: Option<Var>,
    pub self_attn: Option<Var>,
    /// `None` when every term is toggled off.
    pub total: Option<Var>,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossTerms {
            intra: get(self.intra),
            inter: get(self.inter),
            self_attn: get(self.self_attn),
            total: get(self.total),
        }
    }
}

fn mask_const(tape: &mut Tape, mask: &BinaryMask) -> Var {
    tape.constant(Tensor::vector(mask.to_f64()))
}

fn masked_sum(tape: &mut Tape, map: Var, mask: &BinaryMask) -> Result<Var, TensorError> {
    let m = mask_const(tape, mask);
    let prod = tape.mul(map, m)?;
    tape.sum(prod, Reduce::All)
}

/// `(1 − in/(in + out + ε))²` for one map.
fn ratio_term(tape: &mut Tape, map: Var, inside: &BinaryMask, outside: &BinaryMask) -> Result<Var, TensorError> {
    let a = masked_sum(tape, map, inside)?;
    let b = masked_sum(tape, map, outside)?;
    let den = tape.add(a, b)?;
    let den = tape.add_scalar(den, RATIO_EPS);
    let ratio = tape.div(a, den)?;
    let gap = tape.scale(ratio, -1.0);
    let gap = tape.add_scalar(gap, 1.0);
    Ok(tape.square(gap))
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Intra-token term over all tokens.
pub fn intra_loss_var(
    tape: &mut Tape,
    cross: &[Var],
    inside: &[BinaryMask],
    outside: &[BinaryMask],
) -> Result<Var, ConstraintError> {
    if cross.is_empty() {
        return Err(ConstraintError::NoTokens);
    }
    let terms = cross
        .iter()
        .zip(inside.iter().zip(outside))
        .map(|(&a, (mi, mo))| ratio_term(tape, a, mi, mo))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sum_vars(tape, &terms)?)
}

/// Per-cell maximum of the other tokens' maps on token `i`'s sampled cells.
/// `None` when there is no other token.
pub fn inter_max_var(tape: &mut Tape, cross: &[Var], inside: &BinaryMask, i: usize) -> Result<Option<Var>, ConstraintError> {
    if cross.len() < 2 {
        return Ok(None);
    }
    let m = mask_const(tape, inside);
    let gated = cross
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &a)| tape.mul(a, m))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.stack(&gated)?;
    Ok(Some(tape.max(stacked, Reduce::Axis(0))?))
}

/// Inter-token term over all tokens; a constant zero for a single token.
pub fn inter_loss_var(
    tape: &mut Tape,
    cross: &[Var],
    inside: &[BinaryMask],
    margin: f64,
    mode: MarginMode,
) -> Result<Var, ConstraintError> {
    if cross.is_empty() {
        return Err(ConstraintError::NoTokens);
    }
    if cross.len() < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(cross.len());
    for (i, &a) in cross.iter().enumerate() {
        let own = masked_sum(tape, a, &inside[i])?;
        let rival = inter_max_var(tape, cross, &inside[i], i)?.expect("two or more tokens");
        let rival = tape.sum(rival, Reduce::All)?;
        let d = tape.sub(own, rival)?;
        let offset = match mode {
            MarginMode::Aggregate => margin,
            MarginMode::PerElement => margin * inside[i].len() as f64,
        };
        let d = tape.add_scalar(d, -offset);
        let shortfall = tape.scale(d, -1.0);
        let shortfall = tape.relu(shortfall);
        terms.push(tape.square(shortfall));
    }
    Ok(sum_vars(tape, &terms)?)
}

/// `S_i = m_iᵀ S`: the self-attention rows of the box's cells, summed.
pub fn self_aggregate_var(tape: &mut Tape, self_attn: Var, mask: &BinaryMask) -> Result<Var, ConstraintError> {
    let l = mask.len();
    let row = tape.constant(Tensor::new(&[1, l], mask.to_f64())?);
    let agg = tape.matmul(row, self_attn)?;
    Ok(tape.reshape(agg, &[l])?)
}

/// Self-attention term over all tokens.
pub fn self_loss_var(
    tape: &mut Tape,
    self_attn: Var,
    masks: &[BinaryMask],
    inside: &[BinaryMask],
    outside: &[BinaryMask],
) -> Result<Var, ConstraintError> {
    if masks.is_empty() {
        return Err(ConstraintError::NoTokens);
    }
    let mut terms = Vec::with_capacity(masks.len());
    for i in 0..masks.len() {
        let agg = self_aggregate_var(tape, self_attn, &masks[i])?;
        terms.push(ratio_term(tape, agg, &inside[i], &outside[i])?);
    }
    Ok(sum_vars(tape, &terms)?)
}

/// Builds the enabled terms and their unweighted sum.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var(
    tape: &mut Tape,
    cross: &[Var],
    self_attn: Var,
    masks: &[BinaryMask],
    inside: &[BinaryMask],
    outside: &[BinaryMask],
    margin: f64,
    mode: MarginMode,
    toggles: LossToggles,
) -> Result<LossVars, ConstraintError> {
    let intra = toggles
        .intra
        .then(|| intra_loss_var(tape, cross, inside, outside))
        .transpose()?;
    let inter = toggles
        .inter
        .then(|| inter_loss_var(tape, cross, inside, margin, mode))
        .transpose()?;
    let self_term = toggles
        .self_attn
        .then(|| self_loss_var(tape, self_attn, masks, inside, outside))
        .transpose()?;
    let parts: Vec<Var> = [intra, inter, self_term].into_iter().flatten().collect();
    let total = if parts.is_empty() { None } else { Some(sum_vars(tape, &parts)?) };
    Ok(LossVars {
        intra,
        inter,
        self_attn: self_term,
        total,
    })
}

struct Bound {
    tape: Tape,
    cross: Vec<Var>,
    self_attn: Var,
}

fn bind(input: &ConstraintInput) -> Result<Bound, ConstraintError> {
    input.validate()?;
    let mut tape = Tape::new();
    let cross = input
        .cross
        .iter()
        .map(|a| tape.constant(Tensor::vector(a.clone())))
        .collect();
    let self_attn = tape.constant(input.self_attn.clone());
    Ok(Bound { tape, cross, self_attn })
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

pub fn intra_loss(input: &ConstraintInput) -> Result<f64, ConstraintError> {
    let mut b = bind(input)?;
    let v = intra_loss_var(&mut b.tape, &b.cross, &input.inside, &input.outside)?;
    Ok(scalar(&b.tape, v))
}

pub fn inter_max(input: &ConstraintInput, i: usize) -> Result<Vec<f64>, ConstraintError> {
    let mut b = bind(input)?;
    let l = input.cross[0].len();
    Ok(match inter_max_var(&mut b.tape, &b.cross, &input.inside[i], i)? {
        Some(v) => b.tape.value(v).data().to_vec(),
        None => vec![0.0; l],
    })
}

pub fn inter_loss(input: &ConstraintInput) -> Result<f64, ConstraintError> {
    let mut b = bind(input)?;
    let v = inter_loss_var(&mut b.tape, &b.cross, &input.inside, input.margin, input.margin_mode)?;
    Ok(scalar(&b.tape, v))
}

pub fn self_aggregate(self_attn: &Tensor, mask: &BinaryMask) -> Result<Vec<f64>, ConstraintError> {
    let mut tape = Tape::new();
    let s = tape.constant(self_attn.clone());
    let v = self_aggregate_var(&mut tape, s, mask)?;
    Ok(tape.value(v).data().to_vec())
}

pub fn self_loss(input: &ConstraintInput) -> Result<f64, ConstraintError> {
    let mut b = bind(input)?;
    let v = self_loss_var(&mut b.tape, b.self_attn, &input.masks, &input.inside, &input.outside)?;
    Ok(scalar(&b.tape, v))
}

pub fn total_loss(input: &ConstraintInput) -> Result<LossTerms, ConstraintError> {
    total_loss_with(input, LossToggles::ALL)
}

pub fn total_loss_with(input: &ConstraintInput, toggles: LossToggles) -> Result<LossTerms, ConstraintError> {
    let mut b = bind(input)?;
    let vars = total_loss_var(
        &mut b.tape,
        &b.cross,
        b.self_attn,
        &input.masks,
        &input.inside,
        &input.outside,
        input.margin,
        input.margin_mode,
        toggles,
    )?;
    Ok(vars.terms(&b.tape))
}

/// Appends per-step loss components as CSV rows.
pub struct LossCsv<W: Write> {
    out: W,
}

impl<W: Write> LossCsv<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "step,t,intra,inter,self")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, step: usize, timestep: usize, terms: &LossTerms) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{step},{timestep},{},{},{}",
            terms.intra, terms.inter, terms.self_attn
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
