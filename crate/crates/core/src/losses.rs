//! Budget and parameter-sharing losses with their multiplier dynamics.
//!
//! Loss builders record onto a tape so gradients reach the real-valued
//! switches through the straight-through binarization. Each builder also
//! returns the value of its constraint term (the quantity inside the outer
//! `max(0, .)` before scaling) so multipliers can be updated by projected
//! ascent.

use mdlprune_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskAggregation;

/// User budget and its KKT multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    beta: f64,
    pub lambda: f64,
    /// Ascent step of `lambda`.
    pub lr: f64,
}

impl BudgetState {
    pub fn new(beta: f64, lr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("train.budget", format!("budget must lie in [0, 1], got {beta}")));
        }
        Ok(Self { beta, lambda: 0.0, lr })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `lambda <- max(0, lambda + lr * (mask_mean - beta))`.
    pub fn ascend(&mut self, mask_mean: f64) {
        self.lambda = (self.lambda + self.lr * (mask_mean - self.beta)).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingKind {
    Intersection,
    Union,
    Jaccard,
}

impl SharingKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Intersection => "intersection",
            Self::Union => "union",
            Self::Jaccard => "jaccard",
        }
    }
}

/// Parses `intersection`, `union`, `jaccard` or `none`.
pub fn parse_sharing(s: &str) -> Result<Option<SharingKind>> {
    match s {
        "intersection" => Ok(Some(SharingKind::Intersection)),
        "union" => Ok(Some(SharingKind::Union)),
        "jaccard" => Ok(Some(SharingKind::Jaccard)),
        "none" => Ok(None),
        other => Err(Error::config("train.sharing", format!("unknown sharing loss `{other}`"))),
    }
}

/// Written `fixed:<weight>` or `learned` in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    /// Starts at zero and follows projected ascent on the sharing constraint.
    Learned,
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("train.lambda_ps_mode", format!("expected `learned` or `fixed:<weight>`, got `{s}`"));
        if s == "learned" {
            return Ok(Self::Learned);
        }
        let v: f64 = s.strip_prefix("fixed:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config("train.lambda_ps_mode", format!("fixed weight must be >= 0, got {v}")));
        }
        Ok(Self::Fixed(v))
    }
}

impl std::fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed(v) => write!(f, "fixed:{v}"),
            Self::Learned => f.write_str("learned"),
        }
    }
}

impl Serialize for LambdaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LambdaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingState {
    pub kind: SharingKind,
    pub mode: LambdaMode,
    pub lambda_ps: f64,
    pub lr: f64,
    /// Switch count of one domain.
    pub m: usize,
}

impl SharingState {
    pub fn new(kind: SharingKind, mode: LambdaMode, lr: f64, m: usize) -> Result<Self> {
        let lambda_ps = match mode {
            LambdaMode::Fixed(v) if !(v >= 0.0 && v.is_finite()) => {
                return Err(Error::config("train.lambda_ps_mode", format!("fixed weight must be >= 0, got {v}")))
            }
            LambdaMode::Fixed(v) => v,
            LambdaMode::Learned => 0.0,
        };
        Ok(Self { kind, mode, lambda_ps, lr, m })
    }

    /// Applies projected ascent to `lambda_ps` in learned mode; fixed mode is
    /// left untouched.
    pub fn ascend(&mut self, term: f64) {
        if self.mode == LambdaMode::Learned {
            self.lambda_ps = (self.lambda_ps + self.lr * term).max(0.0);
        }
    }
}

/// A recorded loss together with its unscaled constraint value.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub loss: Var,
    pub constraint: f64,
}

/// Mask mean on the tape from one binary vector per masked layer.
pub fn mask_mean(tape: &mut Tape, layers: &[Var], agg: MaskAggregation) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::State("no masked layers".into()));
    }
    Ok(match agg {
        MaskAggregation::PerLayer => {
            let mut acc = tape.mean(layers[0])?;
            for &l in &layers[1..] {
                let m = tape.mean(l)?;
                acc = tape.add(acc, m)?;
            }
            tape.scale(acc, 1.0 / layers.len() as f32)
        }
        MaskAggregation::Global => {
            let all = tape.concat(layers)?;
            tape.mean(all)?
        }
    })
}

/// `max(0, lambda * (mask_mean - beta))`.
pub fn budget_loss(tape: &mut Tape, mask_mean: Var, st: &BudgetState) -> Term {
    let constraint = tape.item(mask_mean) as f64 - st.beta;
    let shifted = tape.add_scalar(mask_mean, -st.beta as f32);
    let scaled = tape.scale(shifted, st.lambda as f32);
    Term { loss: tape.relu(scaled), constraint }
}

/// Elementwise `a + b - a * b`; boolean OR on binary inputs.
pub fn soft_union(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    let p = tape.mul(a, b)?;
    Ok(tape.sub(s, p)?)
}

fn check_masks(tape: &Tape, masks: &[Var], m: usize) -> Result<()> {
    if masks.len() < 2 {
        return Err(Error::State(format!("sharing losses need at least 2 domains, got {}", masks.len())));
    }
    if let Some(bad) = masks.iter().find(|&&v| tape.shape(v) != [m]) {
        return Err(Error::State(format!("mask of shape {:?}, expected [{m}]", tape.shape(*bad))));
    }
    Ok(())
}

/// Soft size of the intersection: sum of the elementwise product chain.
pub fn intersection_size(tape: &mut Tape, masks: &[Var]) -> Result<Var> {
    let mut acc = masks[0];
    for &m in &masks[1..] {
        acc = tape.mul(acc, m)?;
    }
    Ok(tape.sum(acc))
}

/// Soft size of the union: sum of the pairwise `soft_union` fold.
pub fn union_size(tape: &mut Tape, masks: &[Var]) -> Result<Var> {
    let mut acc = masks[0];
    for &m in &masks[1..] {
        acc = soft_union(tape, acc, m)?;
    }
    Ok(tape.sum(acc))
}

fn weighted(tape: &mut Tape, term: Var, lambda: f64) -> Term {
    let constraint = tape.item(term) as f64;
    let scaled = tape.scale(term, lambda as f32);
    Term { loss: tape.relu(scaled), constraint }
}

/// `max(0, lambda_ps * (1 - |intersection| / (M * beta)))`.
pub fn sharing_intersection(tape: &mut Tape, masks: &[Var], st: &SharingState, beta: f64) -> Result<Term> {
    check_masks(tape, masks, st.m)?;
    if beta <= 0.0 {
        return Err(Error::config("train.budget", "the intersection loss needs a positive budget"));
    }
    let inter = intersection_size(tape, masks)?;
    let ratio = tape.scale(inter, -1.0 / (st.m as f64 * beta) as f32);
    let term = tape.add_scalar(ratio, 1.0);
    Ok(weighted(tape, term, st.lambda_ps))
}

/// `max(0, lambda_ps * (|union| / M - beta))`.
pub fn sharing_union(tape: &mut Tape, masks: &[Var], st: &SharingState, beta: f64) -> Result<Term> {
    check_masks(tape, masks, st.m)?;
    let uni = union_size(tape, masks)?;
    // A true division keeps `|union| / M - beta` exactly zero at the budget.
    let m = tape.constant(Tensor::scalar(st.m as f32));
    let frac = tape.div(uni, m)?;
    let term = tape.add_scalar(frac, -beta as f32);
    Ok(weighted(tape, term, st.lambda_ps))
}

/// `max(0, lambda_ps * (1 - |intersection| / |union|))`, zero for an empty union.
pub fn sharing_jaccard(tape: &mut Tape, masks: &[Var], st: &SharingState) -> Result<Term> {
    check_masks(tape, masks, st.m)?;
    let uni = union_size(tape, masks)?;
    if tape.item(uni) == 0.0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(Term { loss: zero, constraint: 0.0 });
    }
    let inter = intersection_size(tape, masks)?;
    let j = tape.div(inter, uni)?;
    let neg = tape.scale(j, -1.0);
    let term = tape.add_scalar(neg, 1.0);
    Ok(weighted(tape, term, st.lambda_ps))
}

/// Dispatches on `st.kind`.
pub fn sharing_loss(tape: &mut Tape, masks: &[Var], st: &SharingState, beta: f64) -> Result<Term> {
    match st.kind {
        SharingKind::Intersection => sharing_intersection(tape, masks, st, beta),
        SharingKind::Union => sharing_union(tape, masks, st, beta),
        SharingKind::Jaccard => sharing_jaccard(tape, masks, st),
    }
}

/// `ce + lb + lps`.
pub fn total_loss(tape: &mut Tape, ce: Var, lb: Var, lps: Var) -> Result<Var> {
    let a = tape.add(ce, lb)?;
    Ok(tape.add(a, lps)?)
}

/// One ascent step on every budget multiplier and, in learned mode, on
/// `lambda_ps`. `mask_means[d]` pairs with `budgets[d]`.
pub fn update_multipliers(budgets: &mut [BudgetState], mask_means: &[f64], sharing: Option<(&mut SharingState, f64)>) {
    for (b, &m) in budgets.iter_mut().zip(mask_means) {
        b.ascend(m);
    }
    if let Some((st, term)) = sharing {
        st.ascend(term);
    }
}
