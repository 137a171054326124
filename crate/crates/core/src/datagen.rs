//! Procedural multi-domain image datasets.
//!
//! Every sample is rendered from its own generator seeded by
//! `(spec.seed, global index)`, so generation order and thread count never
//! change the output. The splits occupy consecutive index ranges
//! (`train`, then `val`, then `test`) and are therefore disjoint.

use std::str::FromStr;

use mdlprune_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Environment variable capping data-preparation threads.
pub const THREADS_ENV: &str = "MDLPRUNE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Filled and outlined geometric figures.
    Shapes,
    /// Oriented sinusoidal gratings.
    Textures,
    /// Per-class random stroke templates under affine jitter.
    Glyphs,
    /// Seven-segment digits with heavy pixel noise.
    NoisyDigits,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Self::Shapes),
            "textures" => Ok(Self::Textures),
            "glyphs" => Ok(Self::Glyphs),
            "noisy-digits" => Ok(Self::NoisyDigits),
            other => Err(Error::config("domains.kind", format!("unknown generator kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: GeneratorKind,
    pub classes: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Scale of geometric jitter in `[0, 1]`.
    #[serde(default = "default_deformation")]
    pub deformation: f32,
    #[serde(default)]
    pub seed: u64,
    /// Random horizontal flips during training.
    #[serde(default = "yes")]
    pub mirror: bool,
    /// Random padded crops during training.
    #[serde(default = "yes")]
    pub crop: bool,
}

fn default_size() -> usize {
    32
}
fn default_noise() -> f32 {
    0.05
}
fn default_deformation() -> f32 {
    0.2
}
fn yes() -> bool {
    true
}

impl DomainSpec {
    pub fn new(kind: GeneratorKind, classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            kind,
            classes,
            image_size,
            train: 256,
            val: 0,
            test: 128,
            noise: default_noise(),
            deformation: default_deformation(),
            seed,
            mirror: true,
            crop: true,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |f: &str| format!("{path}.{f}");
        if self.classes < 2 {
            return Err(Error::config(at("classes"), "at least 2 classes are required"));
        }
        if self.image_size < 4 {
            return Err(Error::config(at("image_size"), "images must be at least 4x4"));
        }
        if self.train == 0 {
            return Err(Error::config(at("train"), "the training split must be nonempty"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(at("noise"), "must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.deformation) {
            return Err(Error::config(at("deformation"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Train and val merged.
    TrainVal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    /// `[C, H, W]` of one image.
    pub shape: [usize; 3],
    /// `len * C * H * W` values in `[0, 1]`.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Global sample index each image was rendered from.
    pub indices: Vec<u64>,
    /// Augmentations allowed for this domain during training.
    pub mirror: bool,
    pub crop: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the samples at `idx` into an `[n, C, H, W]` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Appends `other`'s samples; the result is tagged `split`.
    pub fn merged(&self, other: &Dataset, split: Split) -> Dataset {
        let mut out = self.clone();
        out.split = split;
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out.indices.extend_from_slice(&other.indices);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Threads used for data preparation: `MDLPRUNE_THREADS` if set to a positive
/// integer, otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Generator for one sample, independent of every other sample.
pub fn sample_rng(seed: u64, index: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}

pub fn generate_domain(spec: &DomainSpec) -> Result<DomainData> {
    spec.validate("domain")?;
    let (a, b) = (spec.train as u64, (spec.train + spec.val) as u64);
    let c = b + spec.test as u64;
    Ok(DomainData {
        train: generate_range(spec, Split::Train, 0..a),
        val: generate_range(spec, Split::Val, a..b),
        test: generate_range(spec, Split::Test, b..c),
    })
}

fn generate_range(spec: &DomainSpec, split: Split, range: std::ops::Range<u64>) -> Dataset {
    let s = spec.image_size;
    let per = CHANNELS * s * s;
    let n = (range.end - range.start) as usize;
    let mut images = vec![0.0f32; n * per];
    let mut labels = vec![0usize; n];
    let threads = worker_count().clamp(1, n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        for (ci, (imgs, labs)) in images.chunks_mut(chunk * per).zip(labels.chunks_mut(chunk)).enumerate() {
            let start = range.start + (ci * chunk) as u64;
            scope.spawn(move || {
                for (j, (img, lab)) in imgs.chunks_mut(per).zip(labs.iter_mut()).enumerate() {
                    *lab = render(spec, start + j as u64, img);
                }
            });
        }
    });
    Dataset { split, shape: [CHANNELS, s, s], images, labels, indices: range.collect(), mirror: spec.mirror, crop: spec.crop }
}

/// Renders sample `index` into `out` (`[3, s, s]`) and returns its label.
///
/// Labels cycle through the classes so every split of at least `classes`
/// samples contains each class.
pub fn render(spec: &DomainSpec, index: u64, out: &mut [f32]) -> usize {
    let label = (index % spec.classes as u64) as usize;
    let mut rng = sample_rng(spec.seed, index);
    let s = spec.image_size;
    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.35));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
    let coverage: Box<dyn Fn(f32, f32) -> f32> = match spec.kind {
        GeneratorKind::Shapes => shape_coverage(label, spec.deformation, &mut rng),
        GeneratorKind::Textures => texture_coverage(label, spec.classes, spec.deformation, &mut rng),
        GeneratorKind::Glyphs => {
            let template = glyph_template(spec.seed, label);
            strokes_coverage(template, spec.deformation, &mut rng)
        }
        GeneratorKind::NoisyDigits => strokes_coverage(seven_segment(label % 10), spec.deformation, &mut rng),
    };
    let noise_std = if spec.kind == GeneratorKind::NoisyDigits { spec.noise * 3.0 } else { spec.noise };
    let noise = Normal::new(0.0f32, noise_std.max(0.0)).expect("finite std");
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f32 + 0.5) / s as f32, (y as f32 + 0.5) / s as f32);
            let a = coverage(u, v).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                let px = bg[c] * (1.0 - a) + fg[c] * a + noise.sample(&mut rng);
                out[(c * s + y) * s + x] = px.clamp(0.0, 1.0);
            }
        }
    }
    label
}

fn shape_coverage(label: usize, deform: f32, rng: &mut Xoshiro256PlusPlus) -> Box<dyn Fn(f32, f32) -> f32> {
    let cx = 0.5 + rng.gen_range(-0.15..0.15) * (0.5 + deform);
    let cy = 0.5 + rng.gen_range(-0.15..0.15) * (0.5 + deform);
    let r = 0.28 * (1.0 + rng.gen_range(-0.5..0.5) * deform);
    let family = label % 8;
    Box::new(move |u, v| {
        let (dx, dy) = ((u - cx) / r, (v - cy) / r);
        let inside = match family {
            0 => dx * dx + dy * dy <= 1.0,
            1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            2 => dy <= 0.8 && dy >= -0.9 + 2.0 * dx.abs(),
            3 => (0.55..=1.0).contains(&(dx * dx + dy * dy).sqrt()),
            4 => (dx.abs() <= 0.25 && dy.abs() <= 1.0) || (dy.abs() <= 0.25 && dx.abs() <= 1.0),
            5 => dy.abs() <= 0.3 && dx.abs() <= 1.0,
            6 => dx.abs() <= 0.3 && dy.abs() <= 1.0,
            _ => dx.abs() + dy.abs() <= 1.0,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

fn texture_coverage(label: usize, classes: usize, deform: f32, rng: &mut Xoshiro256PlusPlus) -> Box<dyn Fn(f32, f32) -> f32> {
    let spacing = std::f32::consts::PI / classes as f32;
    let theta = label as f32 * spacing + rng.gen_range(-0.5..0.5) * spacing * deform;
    let freq = rng.gen_range(2.5..5.0) * std::f32::consts::TAU;
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    Box::new(move |u, v| 0.5 + 0.5 * ((u * c + v * s) * freq + phase).sin())
}

type Segment = [(f32, f32); 2];

/// Three random strokes per class, fixed by the domain seed.
fn glyph_template(seed: u64, label: usize) -> Vec<Segment> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(0xC0FF_EE00).wrapping_add(label as u64 * 7919));
    let mut p = || (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
    (0..3).map(|_| [p(), p()]).collect()
}

fn seven_segment(digit: usize) -> Vec<Segment> {
    // a b c d e f g, clockwise from the top, g in the middle
    const LIT: [&str; 10] = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"];
    let (l, r, t, m, b) = (0.3, 0.7, 0.15, 0.5, 0.85);
    LIT[digit]
        .chars()
        .map(|seg| match seg {
            'a' => [(l, t), (r, t)],
            'b' => [(r, t), (r, m)],
            'c' => [(r, m), (r, b)],
            'd' => [(l, b), (r, b)],
            'e' => [(l, m), (l, b)],
            'f' => [(l, t), (l, m)],
            _ => [(l, m), (r, m)],
        })
        .collect()
}

fn strokes_coverage(segments: Vec<Segment>, deform: f32, rng: &mut Xoshiro256PlusPlus) -> Box<dyn Fn(f32, f32) -> f32> {
    let angle = rng.gen_range(-0.3..0.3) * deform;
    let scale = 1.0 + rng.gen_range(-0.2..0.2) * deform;
    let (tx, ty) = (rng.gen_range(-0.15..0.15) * deform, rng.gen_range(-0.15..0.15) * deform);
    let width = rng.gen_range(0.06..0.09);
    let (c, s) = (angle.cos(), angle.sin());
    let map = move |(x, y): (f32, f32)| {
        let (x, y) = (x - 0.5, y - 0.5);
        (0.5 + scale * (c * x - s * y) + tx, 0.5 + scale * (s * x + c * y) + ty)
    };
    let segs: Vec<Segment> = segments.into_iter().map(|[a, b]| [map(a), map(b)]).collect();
    Box::new(move |u, v| {
        let d = segs.iter().map(|&[a, b]| point_segment_distance((u, v), a, b)).fold(f32::INFINITY, f32::min);
        if d <= width {
            1.0
        } else {
            0.0
        }
    })
}

fn point_segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Mirrors a `[C, H, W]` image left to right in place.
pub fn flip_horizontal(img: &mut [f32], shape: [usize; 3]) {
    let [_, _, w] = shape;
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Seeded augmentation of an `[N, C, H, W]` batch: horizontal flips with
/// probability 0.5 and random crops from a zero-padded image (padding of one
/// eighth of the width, at least 1).
pub fn augment(batch: &Tensor, mirror: bool, crop: bool, seed: u64) -> Tensor {
    if !mirror && !crop {
        return batch.clone();
    }
    let shape = batch.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let pad = (w / 8).max(1) as isize;
    let mut out = batch.clone();
    for (i, img) in out.data_mut().chunks_mut(per).enumerate() {
        let mut rng = sample_rng(seed, i as u64);
        let flip = rng.gen_bool(0.5);
        let (oy, ox) = (rng.gen_range(-pad..=pad), rng.gen_range(-pad..=pad));
        if mirror && flip {
            flip_horizontal(img, [c, h, w]);
        }
        if crop && (oy, ox) != (0, 0) {
            let src = img.to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = (y as isize + oy, x as isize + ox);
                        let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                        img[(ch * h + y) * w + x] = if inside { src[(ch * h + sy as usize) * w + sx as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind) -> DomainSpec {
        let mut s = DomainSpec::new(kind, 4, 16, 11);
        s.train = 12;
        s.val = 4;
        s.test = 8;
        s
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [GeneratorKind::Shapes, GeneratorKind::Textures, GeneratorKind::Glyphs, GeneratorKind::NoisyDigits] {
            assert_eq!(generate_domain(&spec(kind)).unwrap(), generate_domain(&spec(kind)).unwrap());
        }
    }

    #[test]
    fn two_classes_both_present() {
        let mut s = DomainSpec::new(GeneratorKind::Shapes, 2, 8, 0);
        s.train = 10;
        let d = generate_domain(&s).unwrap();
        assert!(d.train.labels.iter().all(|&l| l < 2));
        assert!(d.train.labels.contains(&0) && d.train.labels.contains(&1));
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = generate_domain(&spec(GeneratorKind::NoisyDigits)).unwrap();
        assert!(d.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("plaid".parse::<GeneratorKind>().is_err());
        assert_eq!("noisy-digits".parse::<GeneratorKind>().unwrap(), GeneratorKind::NoisyDigits);
    }

    #[test]
    fn augment_off_is_identity() {
        let d = generate_domain(&spec(GeneratorKind::Glyphs)).unwrap();
        let (b, _) = d.train.batch(&[0, 1, 2]);
        assert_eq!(augment(&b, false, false, 3), b);
    }

    #[test]
    fn mirroring_a_symmetric_image_changes_nothing() {
        let mut img = vec![0.0f32; 3 * 4 * 4];
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    let v = (c * 16 + y * 4 + x) as f32;
                    img[(c * 4 + y) * 4 + x] = v;
                    img[(c * 4 + y) * 4 + 3 - x] = v;
                }
            }
        }
        let t = Tensor::new(vec![1, 3, 4, 4], img).unwrap();
        for seed in 0..8 {
            assert_eq!(augment(&t, true, false, seed), t);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let d = generate_domain(&spec(GeneratorKind::Textures)).unwrap();
        let mut img = d.train.image(3).to_vec();
        flip_horizontal(&mut img, d.train.shape);
        assert_ne!(img, d.train.image(3));
        flip_horizontal(&mut img, d.train.shape);
        assert_eq!(img, d.train.image(3));
    }

    #[test]
    fn thread_count_does_not_change_output() {
        // Chunking is exercised directly since the env var is process-wide.
        let s = spec(GeneratorKind::Shapes);
        let d = generate_domain(&s).unwrap();
        let mut img = vec![0.0; 3 * 16 * 16];
        for (k, &idx) in d.test.indices.iter().enumerate() {
            let l = render(&s, idx, &mut img);
            assert_eq!(l, d.test.labels[k]);
            assert_eq!(img, d.test.image(k));
        }
    }
}
