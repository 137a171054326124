//! Physical removal of input channels that no domain uses.

use mdlprune_autograd::{BatchNormMode, RunningStats, Tape, Tensor};

use crate::error::{Error, Result};
use crate::model::{conv_infos, ChannelMask, ConvInfo, MultiDomainNet, NetConfig, Step};

/// Fraction of channels outside the union mask, per masked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub per_layer: Vec<f64>,
    /// Mean of `per_layer`.
    pub mean: f64,
}

impl SparsityReport {
    pub fn from_union(union: &[ChannelMask]) -> Self {
        let per_layer: Vec<f64> = union.iter().map(|m| 1.0 - m.mean()).collect();
        let mean = if per_layer.is_empty() { 0.0 } else { per_layer.iter().sum::<f64>() / per_layer.len() as f64 };
        Self { per_layer, mean }
    }
}

/// Elementwise OR over domains of the current binary masks, whatever the mask
/// state.
pub fn current_union(net: &MultiDomainNet) -> Vec<ChannelMask> {
    let mut acc: Vec<ChannelMask> = net.masked_convs().map(|c| ChannelMask(vec![false; c.c_in])).collect();
    for d in 0..net.num_domains() {
        for (a, m) in acc.iter_mut().zip(net.masks(d).expect("domain in range")) {
            *a = a.or(&m);
        }
    }
    acc
}

fn require_frozen(net: &MultiDomainNet) -> Result<()> {
    if !net.is_frozen() {
        return Err(Error::State("masks must be frozen first".into()));
    }
    Ok(())
}

/// Per masked layer, the channels active in at least one domain.
pub fn union_mask(net: &MultiDomainNet) -> Result<Vec<ChannelMask>> {
    require_frozen(net)?;
    Ok(current_union(net))
}

pub fn sparsity(net: &MultiDomainNet) -> Result<SparsityReport> {
    Ok(SparsityReport::from_union(&union_mask(net)?))
}

/// Sorted original positions of the channels a pruned layer retains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTable(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedDomain {
    /// Masks over retained channels, one per masked layer.
    pub masks: Vec<ChannelMask>,
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub stats: Vec<RunningStats<f32>>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    config: NetConfig,
    plan: Vec<Step>,
    /// Masked convs hold only their retained input-channel slices.
    kernels: Vec<Tensor>,
    tables: Vec<IndexTable>,
    domains: Vec<PrunedDomain>,
}

/// Keeps input channels `keep` (axis 1) of a `[C_out, C_in, kh, kw]` kernel.
fn slice_kernel(k: &Tensor, keep: &[usize]) -> Tensor {
    let s = k.shape();
    let (co, ci, inner) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(co * keep.len() * inner);
    for o in 0..co {
        for &c in keep {
            out.extend_from_slice(&k.data()[(o * ci + c) * inner..][..inner]);
        }
    }
    Tensor::new(vec![co, keep.len(), s[2], s[3]], out).expect("sliced kernel shape")
}

/// Drops every input channel of a masked conv that is inactive in all domains.
pub fn prune(net: &MultiDomainNet) -> Result<PrunedModel> {
    let union = union_mask(net)?;
    let mut tables = Vec::with_capacity(union.len());
    for (c, u) in net.masked_convs().zip(&union) {
        if u.active() == 0 {
            return Err(Error::DegenerateLayer { layer: c.conv });
        }
        tables.push(IndexTable(u.indices()));
    }
    let kernels = net
        .convs()
        .map(|c| match c.slot {
            Some(s) => slice_kernel(&net.kernels()[c.conv], &tables[s].0),
            None => net.kernels()[c.conv].clone(),
        })
        .collect();
    let mut domains = Vec::with_capacity(net.num_domains());
    for d in 0..net.num_domains() {
        let p = net.domain(d)?;
        let masks = net.masks(d)?.iter().zip(&tables).map(|(m, t)| ChannelMask(t.0.iter().map(|&i| m.0[i]).collect())).collect();
        domains.push(PrunedDomain {
            masks,
            gamma: p.gamma.clone(),
            beta: p.beta.clone(),
            stats: p.stats.clone(),
            head_w: p.head_w.clone(),
            head_b: p.head_b.clone(),
        });
    }
    Ok(PrunedModel { config: net.config().clone(), plan: net.plan().to_vec(), kernels, tables, domains })
}

impl PrunedModel {
    /// Reassembles a pruned model from stored parts, checking consistency.
    pub fn from_parts(config: NetConfig, kernels: Vec<Tensor>, tables: Vec<IndexTable>, domains: Vec<PrunedDomain>) -> Result<Self> {
        let plan = config.plan("net.")?;
        let bad = |what: &str| Error::State(format!("pruned model: {what}"));
        let convs: Vec<ConvInfo> = conv_infos(&plan).collect();
        let masked: Vec<ConvInfo> = convs.iter().copied().filter(|c| c.slot.is_some()).collect();
        if kernels.len() != convs.len() || tables.len() != masked.len() || domains.len() != config.domains() {
            return Err(bad("layer or domain count mismatch"));
        }
        for c in &convs {
            let kept = c.slot.map(|s| tables[s].0.len()).unwrap_or(c.c_in);
            if kernels[c.conv].shape() != [c.c_out, kept, c.k, c.k] {
                return Err(bad(&format!("kernel {} has shape {:?}", c.conv, kernels[c.conv].shape())));
            }
        }
        for (t, c) in tables.iter().zip(&masked) {
            if t.0.is_empty() || t.0.windows(2).any(|w| w[0] >= w[1]) || t.0.iter().any(|&i| i >= c.c_in) {
                return Err(bad(&format!("index table of conv {} is not a sorted subset", c.conv)));
            }
        }
        for d in &domains {
            if d.masks.len() != tables.len() || d.masks.iter().zip(&tables).any(|(m, t)| m.len() != t.0.len()) {
                return Err(bad("domain masks do not match the index tables"));
            }
        }
        Ok(Self { config, plan, kernels, tables, domains })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn plan(&self) -> &[Step] {
        &self.plan
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn tables(&self) -> &[IndexTable] {
        &self.tables
    }

    pub fn domains(&self) -> &[PrunedDomain] {
        &self.domains
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Number of backbone kernel weights kept.
    pub fn kernel_weights(&self) -> usize {
        self.kernels.iter().map(Tensor::numel).sum()
    }

    /// Eval-mode logits of domain `d`: gather retained channels, gate them by
    /// the domain's own mask, convolve with the compacted kernel.
    pub fn forward(&self, d: usize, x: &Tensor) -> Result<Tensor> {
        let p = self.domains.get(d).ok_or(Error::UnknownDomain { domain: d, domains: self.domains.len() })?;
        if x.shape().len() != 4 || x.shape()[1..] != self.config.input {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.config.input);
            return Err(Error::InputShape { expected, got: x.shape().to_vec() });
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for step in &self.plan {
            match *step {
                Step::Conv(c) => {
                    if let Some(slot) = c.slot {
                        h = tape.select_channels(h, &self.tables[slot].0)?;
                        let m = tape.constant(Tensor::from_vec(p.masks[slot].as_f32()));
                        h = tape.channel_scale(h, m)?;
                    }
                    let k = tape.constant(self.kernels[c.conv].clone());
                    h = tape.conv2d(h, k, c.stride, c.padding)?;
                    let g = tape.constant(p.gamma[c.conv].clone());
                    let b = tape.constant(p.beta[c.conv].clone());
                    h = tape.batchnorm(h, g, b, BatchNormMode::Eval(&p.stats[c.conv]))?;
                    h = tape.relu(h);
                }
                Step::Pool { size } => h = tape.maxpool2d(h, size)?,
            }
        }
        let f = tape.global_avg_pool(h)?;
        let w = tape.constant(p.head_w.clone());
        let b = tape.constant(p.head_b.clone());
        let out = tape.linear(f, w, b)?;
        Ok(tape.to_tensor(out))
    }
}

/// `pruned_forward(pm, d, x)`.
pub fn pruned_forward(pm: &PrunedModel, d: usize, x: &Tensor) -> Result<Tensor> {
    pm.forward(d, x)
}
