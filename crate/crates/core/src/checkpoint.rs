//! Binary container for models, pruned models and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MDLPRUNE" | version u32 | flags u32 | entry count u32
//! per entry: name len u16 | name utf-8 | dtype u8 | rank u8 | dims u64 x rank
//!            | offset u64 | nbytes u64
//! payload: entries back to back, in manifest order
//! SHA-256 of every preceding byte
//! ```
//!
//! Offsets are relative to the payload start. `Bits` entries pack one bool
//! per bit, least significant bit first, with zeroed padding up to the byte.
//! Loading validates the whole file before anything is decoded.

use std::path::Path;

use mdlprune_autograd::{RunningStats, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ChannelMask, DomainParams, MaskState, MultiDomainNet, NetConfig};
use crate::pruner::{IndexTable, PrunedDomain, PrunedModel};

pub const MAGIC: &[u8; 8] = b"MDLPRUNE";
pub const VERSION: u32 = 1;

pub const FLAG_FROZEN: u32 = 1;
pub const FLAG_PRUNED: u32 = 1 << 1;
pub const FLAG_DATASET: u32 = 1 << 2;
const KNOWN_FLAGS: u32 = FLAG_FROZEN | FLAG_PRUNED | FLAG_DATASET;

const HEADER_LEN: usize = 8 + 4 + 4 + 4;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U32 = 1,
    U64 = 2,
    Bits = 3,
    Bytes = 4,
}

impl DType {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::F32,
            1 => Self::U32,
            2 => Self::U64,
            3 => Self::Bits,
            4 => Self::Bytes,
            _ => return None,
        })
    }

    /// Payload size of an entry with `numel` elements.
    fn nbytes(self, numel: u64) -> u64 {
        match self {
            Self::F32 | Self::U32 => 4 * numel,
            Self::U64 => 8 * numel,
            Self::Bits => numel.div_ceil(8),
            Self::Bytes => numel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

impl Entry {
    fn numel(&self) -> u64 {
        self.shape.iter().product()
    }
}

/// An ordered set of named, typed arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub flags: u32,
    pub entries: Vec<Entry>,
}

fn dims(shape: &[usize]) -> Vec<u64> {
    shape.iter().map(|&d| d as u64).collect()
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl Container {
    pub fn new(flags: u32) -> Self {
        Self { flags, entries: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<u64>, data: Vec<u8>) {
        self.entries.push(Entry { name: name.into(), dtype, shape, data });
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], values: &[f32]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F32, dims(shape), data);
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push_f32(name, t.shape(), t.data());
    }

    pub fn push_u32(&mut self, name: impl Into<String>, values: &[u32]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::U32, vec![values.len() as u64], data);
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::U64, vec![values.len() as u64], data);
    }

    pub fn push_bits(&mut self, name: impl Into<String>, bits: &[bool]) {
        self.push(name, DType::Bits, vec![bits.len() as u64], pack_bits(bits));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.push(name, DType::Bytes, vec![bytes.len() as u64], bytes.to_vec());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            offset += e.data.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and fully validates a container; `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::integrity(path, msg);
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic: not a checkpoint file".into()));
        }
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(bad(format!("truncated: {} bytes is shorter than the fixed header", bytes.len())));
        }
        let mut r = Reader { bytes: &bytes[..bytes.len() - DIGEST_LEN], pos: MAGIC.len() };
        let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch: file is corrupt or truncated".into()));
        }
        let flags = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(bad(format!("unknown flags {flags:#x}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
        let truncated = || bad("truncated manifest".into());
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16().ok_or_else(truncated)? as usize;
            let name =
                std::str::from_utf8(r.take(len).ok_or_else(truncated)?).map_err(|_| bad("entry name is not utf-8".into()))?.to_string();
            let code = r.u8().ok_or_else(truncated)?;
            let dtype = DType::from_u8(code).ok_or_else(|| bad(format!("entry `{name}` has unknown dtype {code}")))?;
            let rank = r.u8().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(truncated)?);
            }
            let offset = r.u64().ok_or_else(truncated)?;
            let nbytes = r.u64().ok_or_else(truncated)?;
            manifest.push((name, dtype, shape, offset, nbytes));
        }
        let payload = &body[r.pos..];
        let mut expected_offset = 0u64;
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, dtype, shape, offset, nbytes) in manifest {
            let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
            if numel.map(|n| dtype.nbytes(n)) != Some(nbytes) {
                return Err(bad(format!("entry `{name}`: {nbytes} bytes do not fit shape {shape:?}")));
            }
            if offset != expected_offset {
                return Err(bad(format!("entry `{name}`: offset {offset}, expected {expected_offset}")));
            }
            let end = offset.checked_add(nbytes).filter(|&e| e <= payload.len() as u64);
            let Some(end) = end else {
                return Err(bad(format!("entry `{name}` runs past the end of the payload")));
            };
            let data = payload[offset as usize..end as usize].to_vec();
            if dtype == DType::Bits {
                let n = numel.unwrap_or(0);
                if n % 8 != 0 && data.last().is_some_and(|b| b >> (n % 8) != 0) {
                    return Err(bad(format!("entry `{name}`: nonzero padding bits")));
                }
            }
            expected_offset = end;
            entries.push(Entry { name, dtype, shape, data });
        }
        if expected_offset != payload.len() as u64 {
            return Err(bad(format!("{} trailing payload bytes", payload.len() as u64 - expected_offset)));
        }
        Ok(Self { flags, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Typed, path-aware access to a validated container's entries.
struct Decoder<'a> {
    c: &'a Container,
    path: &'a Path,
}

impl Decoder<'_> {
    fn bad(&self, msg: String) -> Error {
        Error::integrity(self.path, msg)
    }

    fn entry(&self, name: &str, dtype: DType) -> Result<&Entry> {
        let e = self.c.entries.iter().find(|e| e.name == name).ok_or_else(|| self.bad(format!("missing entry `{name}`")))?;
        if e.dtype != dtype {
            return Err(self.bad(format!("entry `{name}` has dtype {:?}, expected {dtype:?}", e.dtype)));
        }
        Ok(e)
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name, DType::F32)?;
        let values = e.data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let shape = e.shape.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, values).map_err(|err| self.bad(format!("entry `{name}`: {err}")))
    }

    fn f32s(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.tensor(name)?.data().to_vec())
    }

    fn scalar(&self, name: &str) -> Result<f32> {
        let v = self.f32s(name)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(self.bad(format!("entry `{name}` is not a scalar"))),
        }
    }

    fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let e = self.entry(name, DType::U32)?;
        Ok(e.data.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let e = self.entry(name, DType::U64)?;
        Ok(e.data.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn bits(&self, name: &str) -> Result<Vec<bool>> {
        let e = self.entry(name, DType::Bits)?;
        Ok(unpack_bits(&e.data, e.numel() as usize))
    }

    fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let e = self.entry(name, DType::Bytes)?;
        serde_json::from_slice(&e.data).map_err(|err| self.bad(format!("entry `{name}`: {err}")))
    }

    fn stats(&self, prefix: &str) -> Result<RunningStats<f32>> {
        Ok(RunningStats {
            mean: self.f32s(&format!("{prefix}/mean"))?,
            var: self.f32s(&format!("{prefix}/var"))?,
            momentum: self.scalar(&format!("{prefix}/momentum"))?,
        })
    }

    /// Maps a consistency failure of decoded parts to an integrity error.
    fn consistent<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::Integrity { .. } => e,
            other => self.bad(other.to_string()),
        })
    }
}

fn push_json<T: Serialize>(c: &mut Container, name: &str, value: &T) {
    c.push_bytes(name, &serde_json::to_vec(value).expect("serializable value"));
}

fn push_bn(c: &mut Container, prefix: &str, gamma: &Tensor, beta: &Tensor, stats: &RunningStats<f32>) {
    c.push_tensor(format!("{prefix}/gamma"), gamma);
    c.push_tensor(format!("{prefix}/beta"), beta);
    c.push_f32(format!("{prefix}/mean"), &[stats.mean.len()], &stats.mean);
    c.push_f32(format!("{prefix}/var"), &[stats.var.len()], &stats.var);
    c.push_f32(format!("{prefix}/momentum"), &[], &[stats.momentum]);
}

/// Serializes a multi-domain model.
pub fn model_container(net: &MultiDomainNet) -> Container {
    let frozen = match net.mask_state() {
        MaskState::Frozen(m) => Some(m),
        MaskState::Learning => None,
    };
    let mut c = Container::new(if frozen.is_some() { FLAG_FROZEN } else { 0 });
    push_json(&mut c, "config", net.config());
    for (i, k) in net.kernels().iter().enumerate() {
        c.push_tensor(format!("kernel/{i}"), k);
    }
    for d in 0..net.num_domains() {
        let p = net.domain(d).expect("domain in range");
        for (s, sw) in p.switches.iter().enumerate() {
            c.push_tensor(format!("domain/{d}/switch/{s}"), sw);
        }
        if let Some(masks) = frozen {
            for (s, m) in masks[d].iter().enumerate() {
                c.push_bits(format!("domain/{d}/mask/{s}"), &m.0);
            }
        }
        for i in 0..p.gamma.len() {
            push_bn(&mut c, &format!("domain/{d}/bn/{i}"), &p.gamma[i], &p.beta[i], &p.stats[i]);
        }
        c.push_tensor(format!("domain/{d}/head/w"), &p.head_w);
        c.push_tensor(format!("domain/{d}/head/b"), &p.head_b);
    }
    c
}

/// Serializes a pruned model.
pub fn pruned_container(pm: &PrunedModel) -> Container {
    let mut c = Container::new(FLAG_FROZEN | FLAG_PRUNED);
    push_json(&mut c, "config", pm.config());
    for (i, k) in pm.kernels().iter().enumerate() {
        c.push_tensor(format!("kernel/{i}"), k);
    }
    for (s, t) in pm.tables().iter().enumerate() {
        c.push_u64(format!("table/{s}"), &t.0.iter().map(|&i| i as u64).collect::<Vec<_>>());
    }
    for (d, p) in pm.domains().iter().enumerate() {
        for (s, m) in p.masks.iter().enumerate() {
            c.push_bits(format!("domain/{d}/mask/{s}"), &m.0);
        }
        for i in 0..p.gamma.len() {
            push_bn(&mut c, &format!("domain/{d}/bn/{i}"), &p.gamma[i], &p.beta[i], &p.stats[i]);
        }
        c.push_tensor(format!("domain/{d}/head/w"), &p.head_w);
        c.push_tensor(format!("domain/{d}/head/b"), &p.head_b);
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(MultiDomainNet),
    Pruned(PrunedModel),
}

fn decode_model(dec: &Decoder) -> Result<MultiDomainNet> {
    let config: NetConfig = dec.json("config")?;
    let plan = dec.consistent(config.plan("net."))?;
    let n_convs = crate::model::conv_infos(&plan).count();
    let n_masked = crate::model::conv_infos(&plan).filter(|c| c.slot.is_some()).count();
    let kernels = (0..n_convs).map(|i| dec.tensor(&format!("kernel/{i}"))).collect::<Result<Vec<_>>>()?;
    let frozen = dec.c.flags & FLAG_FROZEN != 0;
    let mut domains = Vec::new();
    let mut masks = Vec::new();
    for d in 0..config.domains() {
        let switches = (0..n_masked).map(|s| dec.tensor(&format!("domain/{d}/switch/{s}"))).collect::<Result<Vec<_>>>()?;
        if frozen {
            masks.push((0..n_masked).map(|s| dec.bits(&format!("domain/{d}/mask/{s}")).map(ChannelMask)).collect::<Result<Vec<_>>>()?);
        }
        let (gamma, beta, stats) = decode_bn(dec, d, n_convs)?;
        domains.push(DomainParams {
            switches,
            gamma,
            beta,
            stats,
            head_w: dec.tensor(&format!("domain/{d}/head/w"))?,
            head_b: dec.tensor(&format!("domain/{d}/head/b"))?,
        });
    }
    let state = if frozen { MaskState::Frozen(masks) } else { MaskState::Learning };
    dec.consistent(MultiDomainNet::from_parts(config, kernels, domains, state))
}

type BnParts = (Vec<Tensor>, Vec<Tensor>, Vec<RunningStats<f32>>);

fn decode_bn(dec: &Decoder, d: usize, n_convs: usize) -> Result<BnParts> {
    let (mut gamma, mut beta, mut stats) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_convs {
        let prefix = format!("domain/{d}/bn/{i}");
        gamma.push(dec.tensor(&format!("{prefix}/gamma"))?);
        beta.push(dec.tensor(&format!("{prefix}/beta"))?);
        stats.push(dec.stats(&prefix)?);
    }
    Ok((gamma, beta, stats))
}

fn decode_pruned(dec: &Decoder) -> Result<PrunedModel> {
    let config: NetConfig = dec.json("config")?;
    let plan = dec.consistent(config.plan("net."))?;
    let n_convs = crate::model::conv_infos(&plan).count();
    let n_masked = crate::model::conv_infos(&plan).filter(|c| c.slot.is_some()).count();
    let kernels = (0..n_convs).map(|i| dec.tensor(&format!("kernel/{i}"))).collect::<Result<Vec<_>>>()?;
    let tables = (0..n_masked)
        .map(|s| Ok(IndexTable(dec.u64s(&format!("table/{s}"))?.into_iter().map(|i| i as usize).collect())))
        .collect::<Result<Vec<_>>>()?;
    let mut domains = Vec::new();
    for d in 0..config.domains() {
        let masks = (0..n_masked).map(|s| dec.bits(&format!("domain/{d}/mask/{s}")).map(ChannelMask)).collect::<Result<Vec<_>>>()?;
        let (gamma, beta, stats) = decode_bn(dec, d, n_convs)?;
        domains.push(PrunedDomain {
            masks,
            gamma,
            beta,
            stats,
            head_w: dec.tensor(&format!("domain/{d}/head/w"))?,
            head_b: dec.tensor(&format!("domain/{d}/head/b"))?,
        });
    }
    dec.consistent(PrunedModel::from_parts(config, kernels, tables, domains))
}

/// Decodes any model checkpoint from validated bytes.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let c = Container::from_bytes(bytes, path)?;
    let dec = Decoder { c: &c, path };
    if c.flags & FLAG_DATASET != 0 {
        return Err(dec.bad("file holds a dataset, not a model".into()));
    }
    if c.flags & FLAG_PRUNED != 0 {
        Ok(Checkpoint::Pruned(decode_pruned(&dec)?))
    } else {
        Ok(Checkpoint::Model(decode_model(&dec)?))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model(net: &MultiDomainNet, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &model_container(net).to_bytes())
}

pub fn save_pruned(pm: &PrunedModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &pruned_container(pm).to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&read(path)?, path)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    split: Split,
    shape: [usize; 3],
    mirror: bool,
    crop: bool,
}

pub fn dataset_container(ds: &Dataset) -> Container {
    let mut c = Container::new(FLAG_DATASET);
    push_json(&mut c, "meta", &DatasetMeta { split: ds.split, shape: ds.shape, mirror: ds.mirror, crop: ds.crop });
    let [ch, h, w] = ds.shape;
    c.push_f32("images", &[ds.len(), ch, h, w], &ds.images);
    c.push_u32("labels", &ds.labels.iter().map(|&l| l as u32).collect::<Vec<_>>());
    c.push_u64("indices", &ds.indices);
    c
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let c = Container::from_bytes(bytes, path)?;
    let dec = Decoder { c: &c, path };
    if c.flags & FLAG_DATASET == 0 {
        return Err(dec.bad("file holds a model, not a dataset".into()));
    }
    let meta: DatasetMeta = dec.json("meta")?;
    let images = dec.tensor("images")?;
    let labels: Vec<usize> = dec.u32s("labels")?.into_iter().map(|l| l as usize).collect();
    let indices = dec.u64s("indices")?;
    let n = labels.len();
    let [ch, h, w] = meta.shape;
    if images.shape() != [n, ch, h, w] || indices.len() != n {
        return Err(dec.bad("dataset arrays disagree on the sample count".into()));
    }
    Ok(Dataset {
        split: meta.split,
        shape: meta.shape,
        images: images.data().to_vec(),
        labels,
        indices,
        mirror: meta.mirror,
        crop: meta.crop,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &dataset_container(ds).to_bytes())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    decode_dataset(&read(path)?, path)
}
