//! Compute, parameter and score accounting.
//!
//! MACs count the multiply-accumulates of convolutions and the head only;
//! batch norm, activations and pooling are free. Parameters are counted in
//! bits: 32 per float, 1 per switch, classifier heads excluded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conv_infos, ConvInfo, MultiDomainNet, NetConfig, Step};
use crate::pruner::{current_union, PrunedModel};

pub const FLOAT_BITS: u64 = 32;
pub const SWITCH_BITS: u64 = 1;

/// Which input channels of masked layers a count treats as active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskView {
    /// Every channel the model holds. For a pruned model these are the
    /// retained channels, so `Dense` and `Union` coincide.
    Dense,
    /// The given domain's own mask.
    Domain,
    /// Channels used by at least one domain.
    Union,
}

/// Parameter counts by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub kernel_weights: u64,
    /// Batch norm scales and shifts, summed over domains.
    pub bn_params: u64,
    /// Switches, summed over domains.
    pub switches: u64,
}

impl ParamCount {
    pub fn bits(&self, include_switches: bool) -> u64 {
        let floats = (self.kernel_weights + self.bn_params) * FLOAT_BITS;
        if include_switches {
            floats + self.switches * SWITCH_BITS
        } else {
            floats
        }
    }
}

/// A model whose compute and storage can be counted.
pub trait Costed {
    fn net_config(&self) -> &NetConfig;
    fn steps(&self) -> &[Step];
    /// Active input channels of each masked layer of domain `d`.
    fn active_inputs(&self, d: usize, view: MaskView) -> Result<Vec<usize>>;
    fn params(&self) -> ParamCount;
}

fn check_domain(d: usize, domains: usize) -> Result<()> {
    if d >= domains {
        return Err(Error::UnknownDomain { domain: d, domains });
    }
    Ok(())
}

fn bn_params(config: &NetConfig, plan: &[Step]) -> u64 {
    let per_domain: usize = conv_infos(plan).map(|c| 2 * c.c_out).sum();
    (per_domain * config.domains()) as u64
}

impl Costed for MultiDomainNet {
    fn net_config(&self) -> &NetConfig {
        self.config()
    }

    fn steps(&self) -> &[Step] {
        self.plan()
    }

    fn active_inputs(&self, d: usize, view: MaskView) -> Result<Vec<usize>> {
        check_domain(d, self.num_domains())?;
        Ok(match view {
            MaskView::Dense => self.masked_convs().map(|c| c.c_in).collect(),
            MaskView::Domain => self.masks(d)?.iter().map(|m| m.active()).collect(),
            MaskView::Union => current_union(self).iter().map(|m| m.active()).collect(),
        })
    }

    fn params(&self) -> ParamCount {
        ParamCount {
            kernel_weights: self.kernels().iter().map(|k| k.numel() as u64).sum(),
            bn_params: bn_params(self.config(), self.plan()),
            switches: (self.switch_count() * self.num_domains()) as u64,
        }
    }
}

impl Costed for PrunedModel {
    fn net_config(&self) -> &NetConfig {
        self.config()
    }

    fn steps(&self) -> &[Step] {
        self.plan()
    }

    fn active_inputs(&self, d: usize, view: MaskView) -> Result<Vec<usize>> {
        check_domain(d, self.num_domains())?;
        Ok(match view {
            MaskView::Dense | MaskView::Union => self.tables().iter().map(|t| t.0.len()).collect(),
            MaskView::Domain => self.domains()[d].masks.iter().map(|m| m.active()).collect(),
        })
    }

    fn params(&self) -> ParamCount {
        let retained: usize = self.tables().iter().map(|t| t.0.len()).sum();
        ParamCount {
            kernel_weights: self.kernel_weights() as u64,
            bn_params: bn_params(self.config(), self.plan()),
            switches: (retained * self.num_domains()) as u64,
        }
    }
}

/// MACs of one conv whose input has `active_in` live channels.
pub fn conv_macs(c: &ConvInfo, active_in: usize) -> u64 {
    (c.out_hw.0 * c.out_hw.1 * c.c_out * active_in * c.k * c.k) as u64
}

/// Width of the pooled feature vector fed to the heads.
pub fn feature_width(config: &NetConfig, plan: &[Step]) -> usize {
    conv_infos(plan).last().map(|c| c.c_out).unwrap_or(config.input[0])
}

/// MACs of one forward pass of domain `d` on a single image.
pub fn count_macs<M: Costed + ?Sized>(m: &M, d: usize, view: MaskView) -> Result<u64> {
    let active = m.active_inputs(d, view)?;
    let mut total = 0;
    for c in conv_infos(m.steps()) {
        total += conv_macs(&c, c.slot.map(|s| active[s]).unwrap_or(c.c_in));
    }
    let classes = m.net_config().classes[d];
    Ok(total + (feature_width(m.net_config(), m.steps()) * classes) as u64)
}

/// Mean over domains of `count_macs`.
pub fn mean_macs<M: Costed + ?Sized>(m: &M, view: MaskView) -> Result<f64> {
    let n = m.net_config().domains();
    let mut sum = 0.0;
    for d in 0..n {
        sum += count_macs(m, d, view)? as f64;
    }
    Ok(sum / n as f64)
}

pub fn count_param_bits<M: Costed + ?Sized>(m: &M, include_switches: bool) -> u64 {
    m.params().bits(include_switches)
}

/// Bits of the plain backbone: every kernel and one set of batch norm
/// parameters, no switches.
pub fn backbone_param_bits(config: &NetConfig) -> Result<u64> {
    let plan = config.plan("net.")?;
    let count = ParamCount {
        kernel_weights: conv_infos(&plan).map(|c| (c.c_out * c.c_in * c.k * c.k) as u64).sum(),
        bn_params: conv_infos(&plan).map(|c| 2 * c.c_out as u64).sum(),
        switches: 0,
    };
    Ok(count.bits(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs: u64,
    pub flops: u64,
    pub param_bits: u64,
    /// `flops` over the dense backbone's flops for the same domain.
    pub relative_flop: f64,
    pub relative_params: f64,
}

pub fn cost_report<M: Costed + ?Sized>(m: &M, d: usize, view: MaskView) -> Result<CostReport> {
    let macs = count_macs(m, d, view)?;
    let dense = dense_macs(m.net_config(), d)?;
    let param_bits = count_param_bits(m, true);
    Ok(CostReport {
        macs,
        flops: 2 * macs,
        param_bits,
        relative_flop: macs as f64 / dense as f64,
        relative_params: param_bits as f64 / backbone_param_bits(m.net_config())? as f64,
    })
}

/// MACs of the unmasked backbone plus domain `d`'s head.
pub fn dense_macs(config: &NetConfig, d: usize) -> Result<u64> {
    check_domain(d, config.domains())?;
    let plan = config.plan("net.")?;
    let convs: u64 = conv_infos(&plan).map(|c| conv_macs(&c, c.c_in)).sum();
    Ok(convs + (feature_width(config, &plan) * config.classes[d]) as u64)
}

/// Constants turning per-domain errors into a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConstants {
    /// Exponent applied to each domain's error margin.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Score of one domain at zero error.
    #[serde(default = "default_cap")]
    pub cap: f64,
    /// Maximum allowed error as a multiple of the baseline error.
    #[serde(default = "default_factor")]
    pub err_max_factor: f64,
}

fn default_gamma() -> f64 {
    2.0
}

fn default_cap() -> f64 {
    1000.0
}

fn default_factor() -> f64 {
    2.0
}

impl Default for ScoreConstants {
    fn default() -> Self {
        Self { gamma: default_gamma(), cap: default_cap(), err_max_factor: default_factor() }
    }
}

impl ScoreConstants {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (v, name) in [(self.gamma, "gamma"), (self.cap, "cap"), (self.err_max_factor, "err_max_factor")] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{path}.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub err: Vec<f64>,
    pub err_max: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ScoreInputs {
    /// Scores `err` against a baseline: each domain's allowed error is
    /// `err_max_factor` times the baseline's, and `alpha` is chosen so a
    /// domain at zero error scores `cap`.
    pub fn from_baseline(err: &[f64], baseline_err: &[f64], c: &ScoreConstants) -> Result<Self> {
        if err.len() != baseline_err.len() {
            return Err(Error::Metric(format!("{} errors against {} baseline errors", err.len(), baseline_err.len())));
        }
        let err_max: Vec<f64> = baseline_err.iter().map(|b| c.err_max_factor * b).collect();
        let alpha = err_max.iter().map(|&m| if m > 0.0 { c.cap / m.powf(c.gamma) } else { c.cap }).collect();
        let si = Self { err: err.to_vec(), err_max, gamma: vec![c.gamma; err.len()], alpha };
        si.validate()?;
        Ok(si)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.err.len();
        if self.err_max.len() != n || self.gamma.len() != n || self.alpha.len() != n {
            return Err(Error::Metric("score inputs have mismatched lengths".into()));
        }
        if let Some(e) = self.err.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::Metric(format!("error {e} outside [0, 1]")));
        }
        if self.gamma.iter().chain(&self.alpha).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Metric("gamma and alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Sum over domains of `alpha * max(0, err_max - err)^gamma`.
pub fn s_score(si: &ScoreInputs) -> f64 {
    (0..si.err.len()).map(|d| si.alpha[d] * (si.err_max[d] - si.err[d]).max(0.0).powf(si.gamma[d])).sum()
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Metric(format!("{what} must be positive, got {v}")))
    }
}

/// Score per unit of relative compute.
pub fn s_o(s: f64, o_rel: f64) -> Result<f64> {
    Ok(s / positive(o_rel, "relative compute")?)
}

/// Score per unit of relative parameters.
pub fn s_p(s: f64, p_rel: f64) -> Result<f64> {
    Ok(s / positive(p_rel, "relative parameters")?)
}

pub fn s_e(s_o: f64, s_p: f64, s_o_base: f64, s_p_base: f64) -> Result<f64> {
    Ok(s_o * s_p / (positive(s_o_base, "baseline S_O")? * positive(s_p_base, "baseline S_P")?))
}

/// Tolerances for checking published cells.
pub const SO_SP_TOLERANCE: f64 = 1.0;
pub const SE_TOLERANCE: f64 = 0.01;

/// One published row: relative costs and the four scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureRow {
    pub method: String,
    pub flop: f64,
    pub params: f64,
    pub s: f64,
    pub s_o: f64,
    pub s_p: f64,
    pub s_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureTable {
    pub name: String,
    pub base_s_o: f64,
    pub base_s_p: f64,
    pub rows: Vec<FixtureRow>,
}

/// The fixture file shipped with the crate.
pub const BUILTIN_FIXTURES: &str = include_str!("../fixtures/efficiency_scores.dat");

/// Parses the fixture format: `#` comments, `table <name> <S_O base> <S_P base>`
/// headers, then rows of `<method> <flop> <params> <S> <S_O> <S_P> <S_E>`.
pub fn parse_fixtures(text: &str, source: &str) -> Result<Vec<FixtureTable>> {
    let mut tables: Vec<FixtureTable> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("{source}:{}", i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::config(at.clone(), format!("`{s}` is not a number")));
        if fields[0] == "table" {
            if fields.len() != 4 {
                return Err(Error::config(at, "expected `table <name> <S_O base> <S_P base>`"));
            }
            tables.push(FixtureTable { name: fields[1].into(), base_s_o: num(fields[2])?, base_s_p: num(fields[3])?, rows: vec![] });
            continue;
        }
        let Some(table) = tables.last_mut() else {
            return Err(Error::config(at, "row before any `table` header"));
        };
        if fields.len() != 7 {
            return Err(Error::config(at, format!("expected 7 columns, found {}", fields.len())));
        }
        table.rows.push(FixtureRow {
            method: fields[0].into(),
            flop: num(fields[1])?,
            params: num(fields[2])?,
            s: num(fields[3])?,
            s_o: num(fields[4])?,
            s_p: num(fields[5])?,
            s_e: num(fields[6])?,
        });
    }
    Ok(tables)
}

/// Recomputed scores of one fixture row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCheck {
    pub table: String,
    pub method: String,
    pub s_o: f64,
    pub s_p: f64,
    /// From the published, rounded S_O and S_P cells.
    pub s_e: f64,
    /// From the unrounded recomputed S_O and S_P.
    pub s_e_unrounded: f64,
    pub s_o_ok: bool,
    pub s_p_ok: bool,
    pub s_e_ok: bool,
}

impl RowCheck {
    pub fn passed(&self) -> bool {
        self.s_o_ok && self.s_p_ok && self.s_e_ok
    }
}

pub fn check_row(table: &FixtureTable, row: &FixtureRow) -> Result<RowCheck> {
    let so = s_o(row.s, row.flop)?;
    let sp = s_p(row.s, row.params)?;
    let se = s_e(row.s_o, row.s_p, table.base_s_o, table.base_s_p)?;
    let se_unrounded = s_e(so, sp, table.base_s_o, table.base_s_p)?;
    Ok(RowCheck {
        table: table.name.clone(),
        method: row.method.clone(),
        s_o: so,
        s_p: sp,
        s_e: se,
        s_e_unrounded: se_unrounded,
        s_o_ok: (so - row.s_o).abs() <= SO_SP_TOLERANCE,
        s_p_ok: (sp - row.s_p).abs() <= SO_SP_TOLERANCE,
        s_e_ok: (se - row.s_e).abs() <= SE_TOLERANCE + 1e-9,
    })
}

pub fn check_fixtures(tables: &[FixtureTable]) -> Result<Vec<RowCheck>> {
    tables.iter().flat_map(|t| t.rows.iter().map(move |r| check_row(t, r))).collect()
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub relative_flop: f64,
    pub relative_params: f64,
    pub accuracy: Vec<f64>,
    pub s: f64,
    pub s_o: f64,
    pub s_p: f64,
    pub s_e: f64,
}

/// Per-run figures a report is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub accuracy: Vec<f64>,
    /// Union-mask MACs, mean over domains.
    pub macs: f64,
    pub param_bits: u64,
    pub relative_flop: f64,
    pub relative_params: f64,
    pub sparsity: f64,
}

/// Scores every run against `baseline`'s errors; S_E is relative to the
/// baseline's own S_O and S_P.
pub fn build_report(runs: &[RunSummary], baseline: &RunSummary, c: &ScoreConstants) -> Result<Vec<ReportRow>> {
    let base_err: Vec<f64> = baseline.accuracy.iter().map(|a| 1.0 - a).collect();
    let score = |r: &RunSummary| -> Result<(f64, f64, f64)> {
        let err: Vec<f64> = r.accuracy.iter().map(|a| 1.0 - a).collect();
        let s = s_score(&ScoreInputs::from_baseline(&err, &base_err, c)?);
        Ok((s, s_o(s, r.relative_flop)?, s_p(s, r.relative_params)?))
    };
    let (_, bo, bp) = score(baseline)?;
    runs.iter()
        .map(|r| {
            let (s, so, sp) = score(r)?;
            // A baseline that scores zero leaves S_E undefined.
            let se = if bo > 0.0 && bp > 0.0 { s_e(so, sp, bo, bp)? } else { f64::NAN };
            Ok(ReportRow {
                label: r.label.clone(),
                relative_flop: r.relative_flop,
                relative_params: r.relative_params,
                accuracy: r.accuracy.clone(),
                s,
                s_o: so,
                s_p: sp,
                s_e: se,
            })
        })
        .collect()
}

/// Fixed-width text rendering of report rows.
pub fn render_report(rows: &[ReportRow]) -> String {
    let domains = rows.iter().map(|r| r.accuracy.len()).max().unwrap_or(0);
    let mut out = format!("{:<24} {:>7} {:>7}", "run", "FLOP", "Params");
    for d in 0..domains {
        let _ = write!(out, " {:>6}", format!("d{d}"));
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>8} {:>8}", "S", "S_O", "S_P", "S_E");
    for r in rows {
        let _ = write!(out, "{:<24} {:>7.3} {:>7.3}", r.label, r.relative_flop, r.relative_params);
        for a in &r.accuracy {
            let _ = write!(out, " {:>6.1}", 100.0 * a);
        }
        let _ = writeln!(out, " {:>8.1} {:>8.1} {:>8.1} {:>8.2}", r.s, r.s_o, r.s_p, r.s_e);
    }
    out
}
