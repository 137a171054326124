//! The multi-domain network: a frozen convolutional backbone shared by every
//! domain, gated per domain by binary input-channel switches, with
//! domain-specific batch norm and linear heads.

use mdlprune_autograd::{BatchNormMode, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Conv followed by batch norm and ReLU.
    Conv {
        out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        masked: bool,
    },
    MaxPool {
        size: usize,
    },
}

/// How per-layer switch activity is folded into a single mask mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskAggregation {
    /// Mean of per-layer means; each layer weighs the same.
    #[default]
    PerLayer,
    /// Active switches over all switches.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Class count of each domain's head; its length is the domain count.
    pub classes: Vec<usize>,
    #[serde(default)]
    pub threshold: f32,
    #[serde(default = "default_switch_init")]
    pub switch_init: f32,
    #[serde(default)]
    pub aggregation: MaskAggregation,
    #[serde(default)]
    pub backbone_seed: u64,
}

fn default_switch_init() -> f32 {
    1e-3
}

fn conv(out: usize) -> LayerSpec {
    LayerSpec::Conv { out, k: 3, stride: 1, padding: 1, masked: true }
}

impl NetConfig {
    /// 32x32 RGB input, six 3x3 convs of widths 32-32-64-64-128-128, pooling
    /// after the second and fourth. The first conv is unmasked: with only three
    /// colour channels a domain that drops them all is left blind.
    pub fn standard(classes: Vec<usize>) -> Self {
        Self::stack([3, 32, 32], [32, 32, 64, 64, 128, 128], classes)
    }

    /// A quarter-cost variant on 16x16 inputs for quick experiments.
    pub fn desk_small(classes: Vec<usize>) -> Self {
        Self::stack([3, 16, 16], [16, 16, 32, 32, 64, 64], classes)
    }

    fn stack(input: [usize; 3], widths: [usize; 6], classes: Vec<usize>) -> Self {
        let w = widths;
        let pool = LayerSpec::MaxPool { size: 2 };
        let first = LayerSpec::Conv { out: w[0], k: 3, stride: 1, padding: 1, masked: false };
        Self {
            input,
            layers: vec![first, conv(w[1]), pool.clone(), conv(w[2]), conv(w[3]), pool, conv(w[4]), conv(w[5])],
            classes,
            threshold: 0.0,
            switch_init: default_switch_init(),
            aggregation: MaskAggregation::PerLayer,
            backbone_seed: 0,
        }
    }

    pub fn domains(&self) -> usize {
        self.classes.len()
    }

    /// Checks the config and resolves every layer's geometry.
    ///
    /// `prefix` is prepended to field paths in error messages.
    pub fn plan(&self, prefix: &str) -> Result<Vec<Step>> {
        let field = |f: &str| format!("{prefix}{f}");
        if self.input.contains(&0) {
            return Err(Error::config(field("input"), "dimensions must be positive"));
        }
        if self.classes.is_empty() {
            return Err(Error::config(field("classes"), "at least one domain is required"));
        }
        if let Some(i) = self.classes.iter().position(|&k| k < 2) {
            return Err(Error::config(field(&format!("classes[{i}]")), "a domain needs at least 2 classes"));
        }
        if !self.switch_init.is_finite() || !self.threshold.is_finite() {
            return Err(Error::config(field("switch_init"), "switch_init and threshold must be finite"));
        }
        let [mut c, mut h, mut w] = self.input;
        let mut steps = Vec::new();
        let (mut conv_idx, mut slot) = (0, 0);
        for (i, l) in self.layers.iter().enumerate() {
            let at = |f: &str| field(&format!("layers[{i}].{f}"));
            match *l {
                LayerSpec::Conv { out, k, stride, padding, masked } => {
                    if out == 0 {
                        return Err(Error::config(at("out"), "must be positive"));
                    }
                    if k == 0 {
                        return Err(Error::config(at("k"), "must be positive"));
                    }
                    if stride == 0 {
                        return Err(Error::config(at("stride"), "must be at least 1"));
                    }
                    if h + 2 * padding < k || w + 2 * padding < k {
                        return Err(Error::config(at("k"), format!("kernel exceeds the padded {h}x{w} input")));
                    }
                    let (oh, ow) = ((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1);
                    let info = ConvInfo {
                        conv: conv_idx,
                        c_in: c,
                        c_out: out,
                        k,
                        stride,
                        padding,
                        in_hw: (h, w),
                        out_hw: (oh, ow),
                        slot: masked.then_some(slot),
                    };
                    conv_idx += 1;
                    slot += masked as usize;
                    (c, h, w) = (out, oh, ow);
                    steps.push(Step::Conv(info));
                }
                LayerSpec::MaxPool { size } => {
                    if size == 0 || size > h || size > w {
                        return Err(Error::config(at("size"), format!("pool window must fit the {h}x{w} input")));
                    }
                    (h, w) = (h / size, w / size);
                    steps.push(Step::Pool { size });
                }
            }
        }
        if conv_idx == 0 {
            return Err(Error::config(field("layers"), "at least one conv layer is required"));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvInfo {
    /// Position among conv layers.
    pub conv: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// Position among masked layers, if this conv is masked.
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Conv(ConvInfo),
    Pool { size: usize },
}

/// Binary on/off state of the input channels of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelMask(pub Vec<bool>);

impl ChannelMask {
    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn mean(&self) -> f64 {
        self.active() as f64 / self.len() as f64
    }

    pub fn or(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a || b).collect())
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Indices of active channels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

/// Folds per-layer masks into one mean under `agg`.
pub fn aggregate_mean(masks: &[ChannelMask], agg: MaskAggregation) -> f64 {
    if masks.is_empty() {
        return 1.0;
    }
    match agg {
        MaskAggregation::PerLayer => masks.iter().map(ChannelMask::mean).sum::<f64>() / masks.len() as f64,
        MaskAggregation::Global => {
            let total: usize = masks.iter().map(ChannelMask::len).sum();
            masks.iter().map(ChannelMask::active).sum::<usize>() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskState {
    /// Switches are real-valued and trainable.
    Learning,
    /// Masks fixed to binary, indexed `[domain][masked layer]`.
    Frozen(Vec<Vec<ChannelMask>>),
}

/// Everything one domain owns.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    /// One switch vector per masked layer, of length `c_in`.
    pub switches: Vec<Tensor>,
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub stats: Vec<RunningStats<f32>>,
    /// `[features, classes]`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles for the trainable parameters of one domain.
#[derive(Debug, Clone)]
pub struct DomainVars {
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Tape handles for every domain's switches, `[domain][masked layer]`.
#[derive(Debug, Clone)]
pub struct SwitchVars {
    pub raw: Vec<Vec<Var>>,
    /// Straight-through binarized views of `raw`.
    pub binary: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainNet {
    config: NetConfig,
    plan: Vec<Step>,
    kernels: Vec<Tensor>,
    pub(crate) domains: Vec<DomainParams>,
    pub(crate) state: MaskState,
}

impl MultiDomainNet {
    /// Builds a network with a He-initialized backbone drawn from
    /// `config.backbone_seed`, all switches at `config.switch_init`, identity
    /// batch norm, and heads drawn uniformly from `[-1/sqrt(F), 1/sqrt(F)]`.
    pub fn new(config: NetConfig) -> Result<Self> {
        let plan = config.plan("net.")?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.backbone_seed);
        let convs: Vec<ConvInfo> = conv_infos(&plan).collect();
        let kernels = convs
            .iter()
            .map(|c| {
                let fan_in = (c.c_in * c.k * c.k) as f32;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let n = c.c_out * c.c_in * c.k * c.k;
                Tensor::new(vec![c.c_out, c.c_in, c.k, c.k], (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("kernel shape")
            })
            .collect();
        let features = convs.last().expect("plan has a conv").c_out;
        let domains = config
            .classes
            .iter()
            .map(|&k| {
                let bound = 1.0 / (features as f32).sqrt();
                let mut uniform = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
                let head_w = Tensor::new(vec![features, k], uniform(features * k)).expect("head shape");
                let head_b = Tensor::from_vec(uniform(k));
                DomainParams {
                    switches: convs.iter().filter(|c| c.slot.is_some()).map(|c| Tensor::full(vec![c.c_in], config.switch_init)).collect(),
                    gamma: convs.iter().map(|c| Tensor::full(vec![c.c_out], 1.0)).collect(),
                    beta: convs.iter().map(|c| Tensor::zeros(vec![c.c_out])).collect(),
                    stats: convs.iter().map(|c| RunningStats::new(c.c_out)).collect(),
                    head_w,
                    head_b,
                }
            })
            .collect();
        Ok(Self { config, plan, kernels, domains, state: MaskState::Learning })
    }

    /// Reassembles a network from stored parts, checking every shape.
    pub fn from_parts(config: NetConfig, kernels: Vec<Tensor>, domains: Vec<DomainParams>, state: MaskState) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        let bad = |what: String| Error::State(format!("stored {what} does not match the config"));
        if kernels.len() != reference.kernels.len() {
            return Err(bad("kernel count".into()));
        }
        for (i, (k, r)) in kernels.iter().zip(&reference.kernels).enumerate() {
            if k.shape() != r.shape() {
                return Err(bad(format!("kernel {i}")));
            }
        }
        if domains.len() != reference.domains.len() {
            return Err(bad("domain count".into()));
        }
        for (d, (p, r)) in domains.iter().zip(&reference.domains).enumerate() {
            let shapes = |p: &DomainParams| -> Vec<Vec<usize>> {
                p.switches
                    .iter()
                    .chain(&p.gamma)
                    .chain(&p.beta)
                    .chain([&p.head_w, &p.head_b])
                    .map(|t| t.shape().to_vec())
                    .chain(p.stats.iter().flat_map(|s| [vec![s.mean.len()], vec![s.var.len()]]))
                    .collect()
            };
            if shapes(p) != shapes(r) {
                return Err(bad(format!("parameters of domain {d}")));
            }
        }
        if let MaskState::Frozen(masks) = &state {
            let expect = reference.masks_shape();
            let got: Vec<Vec<usize>> = masks.iter().map(|m| m.iter().map(ChannelMask::len).collect()).collect();
            if got != vec![expect; domains.len()] {
                return Err(bad("mask layout".into()));
            }
        }
        Ok(Self { plan: reference.plan, config, kernels, domains, state })
    }

    fn masks_shape(&self) -> Vec<usize> {
        self.masked_convs().map(|c| c.c_in).collect()
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn plan(&self) -> &[Step] {
        &self.plan
    }

    pub fn convs(&self) -> impl Iterator<Item = ConvInfo> + '_ {
        conv_infos(&self.plan)
    }

    pub fn masked_convs(&self) -> impl Iterator<Item = ConvInfo> + '_ {
        self.convs().filter(|c| c.slot.is_some())
    }

    /// Total switch count of one domain.
    pub fn switch_count(&self) -> usize {
        self.masked_convs().map(|c| c.c_in).sum()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn domain(&self, d: usize) -> Result<&DomainParams> {
        self.domains.get(d).ok_or(Error::UnknownDomain { domain: d, domains: self.domains.len() })
    }

    pub fn domain_mut(&mut self, d: usize) -> Result<&mut DomainParams> {
        let n = self.domains.len();
        self.domains.get_mut(d).ok_or(Error::UnknownDomain { domain: d, domains: n })
    }

    pub fn mask_state(&self) -> &MaskState {
        &self.state
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.state, MaskState::Frozen(_))
    }

    /// Current binary masks of domain `d`, one per masked layer.
    pub fn masks(&self, d: usize) -> Result<Vec<ChannelMask>> {
        let p = self.domain(d)?;
        Ok(match &self.state {
            MaskState::Frozen(m) => m[d].clone(),
            MaskState::Learning => {
                p.switches.iter().map(|s| ChannelMask(s.data().iter().map(|&v| v > self.config.threshold).collect())).collect()
            }
        })
    }

    /// Mean switch activity of domain `d` under the configured aggregation.
    pub fn mask_mean(&self, d: usize) -> Result<f64> {
        Ok(aggregate_mean(&self.masks(d)?, self.config.aggregation))
    }

    /// Fixes every domain's masks to their current binarized value.
    pub fn freeze_masks(&mut self) {
        if self.is_frozen() {
            return;
        }
        let masks = (0..self.domains.len()).map(|d| self.masks(d).expect("domain in range")).collect();
        self.state = MaskState::Frozen(masks);
    }

    /// SHA-256 over the little-endian bytes of the backbone kernels.
    pub fn backbone_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in &self.kernels {
            for v in k.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let ok = x.len() == 4 && x[1..] == self.config.input;
        if !ok {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.config.input);
            return Err(Error::InputShape { expected, got: x.to_vec() });
        }
        Ok(())
    }

    /// Puts every domain's switches on the tape as trainable leaves.
    pub fn bind_switches(&self, tape: &mut Tape) -> Result<SwitchVars> {
        if self.is_frozen() {
            return Err(Error::State("masks are frozen; switches cannot be trained".into()));
        }
        let mut raw = Vec::new();
        let mut binary = Vec::new();
        for p in &self.domains {
            let r: Vec<Var> = p.switches.iter().map(|s| tape.leaf(&s.clone().with_grad())).collect();
            binary.push(r.iter().map(|&v| tape.binarize_ste(v, self.config.threshold)).collect());
            raw.push(r);
        }
        Ok(SwitchVars { raw, binary })
    }

    /// Puts domain `d`'s batch-norm affine parameters and head on the tape as
    /// trainable leaves.
    pub fn bind_domain(&self, tape: &mut Tape, d: usize) -> Result<DomainVars> {
        let p = self.domain(d)?;
        let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(&t.clone().with_grad());
        Ok(DomainVars {
            gamma: p.gamma.iter().map(|t| leaf(tape, t)).collect(),
            beta: p.beta.iter().map(|t| leaf(tape, t)).collect(),
            head_w: leaf(tape, &p.head_w),
            head_b: leaf(tape, &p.head_b),
        })
    }

    /// Train-mode forward of domain `d`: batch statistics are used and folded
    /// into the domain's running estimates. `masks` holds one gate vector per
    /// masked layer.
    pub fn forward_train(&mut self, tape: &mut Tape, d: usize, x: Var, masks: &[Var], vars: &DomainVars) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut stats = std::mem::take(&mut self.domain_mut(d)?.stats);
        let out = self.walk(tape, x, masks, vars, Bn::Train(&mut stats));
        self.domains[d].stats = stats;
        out
    }

    /// Eval-mode logits of domain `d` under its binary masks.
    pub fn logits(&self, d: usize, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let p = self.domain(d)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let masks: Vec<Var> = self.masks(d)?.iter().map(|m| tape.constant(Tensor::from_vec(m.as_f32()))).collect();
        let vars = DomainVars {
            gamma: p.gamma.iter().map(|t| tape.constant(t.clone())).collect(),
            beta: p.beta.iter().map(|t| tape.constant(t.clone())).collect(),
            head_w: tape.constant(p.head_w.clone()),
            head_b: tape.constant(p.head_b.clone()),
        };
        let out = self.walk(&mut tape, xv, &masks, &vars, Bn::Eval(&p.stats))?;
        Ok(tape.to_tensor(out))
    }

    fn walk(&self, tape: &mut Tape, x: Var, masks: &[Var], vars: &DomainVars, mut bn: Bn<'_>) -> Result<Var> {
        let mut h = x;
        for step in &self.plan {
            match *step {
                Step::Conv(c) => {
                    if let Some(slot) = c.slot {
                        h = tape.channel_scale(h, masks[slot])?;
                    }
                    let k = tape.constant(self.kernels[c.conv].clone());
                    h = tape.conv2d(h, k, c.stride, c.padding)?;
                    let mode = match &mut bn {
                        Bn::Train(s) => BatchNormMode::Train(&mut s[c.conv]),
                        Bn::Eval(s) => BatchNormMode::Eval(&s[c.conv]),
                    };
                    h = tape.batchnorm(h, vars.gamma[c.conv], vars.beta[c.conv], mode)?;
                    h = tape.relu(h);
                }
                Step::Pool { size } => h = tape.maxpool2d(h, size)?,
            }
        }
        let f = tape.global_avg_pool(h)?;
        Ok(tape.linear(f, vars.head_w, vars.head_b)?)
    }
}

enum Bn<'a> {
    Train(&'a mut [RunningStats<f32>]),
    Eval(&'a [RunningStats<f32>]),
}

pub(crate) fn conv_infos(plan: &[Step]) -> impl Iterator<Item = ConvInfo> + '_ {
    plan.iter().filter_map(|s| match s {
        Step::Conv(c) => Some(*c),
        Step::Pool { .. } => None,
    })
}
