//! Synthetic "distracted attention" benchmark.
//!
//! Every image is a grid of patches. A small block of object patches carries
//! a shared objectness pattern plus a class template; the remaining
//! background patches carry a style that matches the class with probability
//! `background_correlation`, a per-sample signature and pixel noise.
//! Augmentation resamples the background strongly for labeled samples and
//! weakly for unlabeled ones, so the background is a stable per-image cue
//! exactly where no labels correct it.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{AfError, Result};
use crate::tap::PruneOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_known: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub object_patch_count: usize,
    pub samples_per_class: usize,
    /// Fraction of each known class that is labeled.
    pub labeled_fraction: f64,
    pub background_correlation: f64,
    pub object_strength: f64,
    pub template_strength: f64,
    pub style_strength: f64,
    pub signature_strength: f64,
    pub pixel_noise: f64,
    pub labeled_bg_jitter: f64,
    pub unlabeled_bg_jitter: f64,
    pub object_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            num_known: 4,
            image_side: 32,
            patch_side: 8,
            object_patch_count: 4,
            samples_per_class: 100,
            labeled_fraction: 0.5,
            background_correlation: 0.9,
            object_strength: 1.0,
            template_strength: 0.5,
            style_strength: 1.0,
            signature_strength: 1.0,
            pixel_noise: 0.1,
            labeled_bg_jitter: 1.0,
            unlabeled_bg_jitter: 0.1,
            object_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn labeled_per_class(&self) -> usize {
        (self.labeled_fraction * self.samples_per_class as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AfError::Config(m));
        if self.num_known == 0 || self.num_known >= self.num_classes {
            return fail(format!("need 0 < num_known ({}) < num_classes ({})", self.num_known, self.num_classes));
        }
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return fail("image_side must be a multiple of patch_side".into());
        }
        if self.object_patch_count == 0 || self.object_patch_count >= self.num_patches() {
            return fail(format!(
                "object_patch_count {} must lie in [1, {})",
                self.object_patch_count,
                self.num_patches()
            ));
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        for (name, v) in [("labeled_fraction", self.labeled_fraction), ("background_correlation", self.background_correlation)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.unlabeled_bg_jitter < self.labeled_bg_jitter) {
            return fail("unlabeled_bg_jitter must be below labeled_bg_jitter".into());
        }
        if [self.unlabeled_bg_jitter, self.labeled_bg_jitter].iter().any(|j| !(0.0..=1.0).contains(j)) {
            return fail("background jitter strengths must lie in [0, 1]".into());
        }
        let amplitudes = [
            self.object_strength,
            self.template_strength,
            self.style_strength,
            self.signature_strength,
            self.pixel_noise,
            self.object_jitter,
        ];
        if amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return fail("signal and noise amplitudes must be finite and nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub label: usize,
    pub labeled: bool,
    pub is_old: bool,
    /// Sorted grid positions of the object.
    pub object_mask: Vec<usize>,
    /// Which class style the background was drawn from.
    pub background_style: usize,
}

/// Fixed random patterns shared by every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    pub objectness: Vec<f64>,
    pub templates: Vec<Vec<f64>>,
    pub styles: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub bank: PatternBank,
    pub samples: Vec<SynthSample>,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * normal(rng)).collect()
}

/// Unit-RMS random pattern.
fn pattern<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let v = gaussian(rng, len, 1.0);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    v.into_iter().map(|x| x / rms).collect()
}

impl PatternBank {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = stream(spec.seed, 0);
        let dim = spec.patch_dim();
        PatternBank {
            objectness: pattern(&mut rng, dim),
            templates: (0..spec.num_classes).map(|_| pattern(&mut rng, dim)).collect(),
            styles: (0..spec.num_classes).map(|_| pattern(&mut rng, dim)).collect(),
        }
    }
}

/// Grid positions of the object: a square block when the count is a perfect
/// square, otherwise distinct random positions.
fn object_positions<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<usize> {
    let grid = spec.grid_side();
    let side = (spec.object_patch_count as f64).sqrt().round() as usize;
    let mut mask = if side * side == spec.object_patch_count && side <= grid {
        let y0 = rng.random_range(0..=grid - side);
        let x0 = rng.random_range(0..=grid - side);
        (0..side).flat_map(|dy| (0..side).map(move |dx| (y0 + dy) * grid + x0 + dx)).collect()
    } else {
        rand::seq::index::sample(rng, spec.num_patches(), spec.object_patch_count).into_vec()
    };
    mask.sort_unstable();
    mask
}

fn background_patch<R: Rng + ?Sized>(spec: &SynthSpec, style: &[f64], signature: &[f64], rng: &mut R) -> Vec<f64> {
    style
        .iter()
        .zip(signature)
        .map(|(s, g)| spec.style_strength * s + g + spec.pixel_noise * normal(rng))
        .collect()
}

/// Background style: the sample's own class with probability `rho`, else uniform.
fn draw_style<R: Rng + ?Sized>(spec: &SynthSpec, label: usize, rng: &mut R) -> usize {
    let coin: f64 = rng.random();
    let random = rng.random_range(0..spec.num_classes);
    if coin < spec.background_correlation {
        label
    } else {
        random
    }
}

/// Builds the dataset; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let bank = PatternBank::new(spec);
    let dim = spec.patch_dim();
    let labeled_per_class = spec.labeled_per_class();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for label in 0..spec.num_classes {
        for j in 0..spec.samples_per_class {
            let index = (label * spec.samples_per_class + j) as u64;
            let mut rng = stream(spec.seed, index + 1);
            let is_old = label < spec.num_known;
            let object_mask = object_positions(spec, &mut rng);
            let background_style = draw_style(spec, label, &mut rng);
            let signature = gaussian(&mut rng, dim, spec.signature_strength);
            let mut image = Image::zeros(spec.image_side, 1);
            for p in 0..spec.num_patches() {
                let values: Vec<f64> = if object_mask.binary_search(&p).is_ok() {
                    (0..dim)
                        .map(|k| {
                            spec.object_strength * bank.objectness[k]
                                + spec.template_strength * bank.templates[label][k]
                                + spec.pixel_noise * normal(&mut rng)
                        })
                        .collect()
                } else {
                    background_patch(spec, &bank.styles[background_style], &signature, &mut rng)
                };
                image.set_patch(p, spec.patch_side, &values);
            }
            samples.push(SynthSample {
                image,
                label,
                labeled: is_old && j < labeled_per_class,
                is_old,
                object_mask,
                background_style,
            });
        }
    }
    Ok(SynthDataset { spec: spec.clone(), bank, samples })
}

impl SynthDataset {
    /// One augmented view of `sample`. Object patches get small noise; the
    /// background is blended toward a fresh background of a uniformly drawn
    /// style, with the labeled or unlabeled jitter strength.
    pub fn augment<R: Rng + ?Sized>(&self, sample: &SynthSample, rng: &mut R) -> Image {
        let spec = &self.spec;
        let jitter = if sample.labeled { spec.labeled_bg_jitter } else { spec.unlabeled_bg_jitter };
        let mut image = sample.image.clone();
        let dim = spec.patch_dim();
        let fresh_style = rng.random_range(0..spec.num_classes);
        let fresh_signature = gaussian(rng, dim, spec.signature_strength);
        for p in 0..spec.num_patches() {
            let mut values = image.patch(p, spec.patch_side);
            if sample.object_mask.binary_search(&p).is_ok() {
                for v in &mut values {
                    *v += spec.object_jitter * normal(rng);
                }
            } else {
                let fresh = background_patch(spec, &self.bank.styles[fresh_style], &fresh_signature, rng);
                for (v, f) in values.iter_mut().zip(fresh) {
                    *v = (1.0 - jitter) * *v + jitter * f;
                }
            }
            image.set_patch(p, spec.patch_side, &values);
        }
        image
    }

    pub fn old_classes(&self) -> Vec<usize> {
        (0..self.spec.num_known).collect()
    }

    /// Indices of the samples evaluated for clustering accuracy.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| !self.samples[i].labeled).collect()
    }

    /// Binary dump: magic, version, header, then per-sample records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let side = self.spec.image_side as u32;
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&side.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.extend_from_slice(&(s.background_style as u32).to_le_bytes());
            out.push(u8::from(s.labeled) | (u8::from(s.is_old) << 1));
            out.extend_from_slice(&(s.object_mask.len() as u32).to_le_bytes());
            for &m in &s.object_mask {
                out.extend_from_slice(&(m as u32).to_le_bytes());
            }
            for v in &s.image.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    /// Reads a dump; the pattern bank is rebuilt from the sidecar spec.
    pub fn load(path: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        spec.validate()?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(AfError::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(AfError::Format(format!("unsupported dataset version {version}")));
        }
        let count = r.u32()? as usize;
        let side = r.u32()? as usize;
        let channels = r.u32()? as usize;
        if side != spec.image_side || channels != 1 {
            return Err(AfError::Format("dataset geometry disagrees with its sidecar".into()));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let label = r.u32()? as usize;
            let background_style = r.u32()? as usize;
            let flags = r.take(1)?[0];
            let mask_len = r.u32()? as usize;
            let object_mask = (0..mask_len).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let data = (0..side * side).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            samples.push(SynthSample {
                image: Image { side, channels: 1, data },
                label,
                labeled: flags & 1 != 0,
                is_old: flags & 2 != 0,
                object_mask,
                background_style,
            });
        }
        if r.pos != bytes.len() {
            return Err(AfError::Format("trailing bytes after the last sample".into()));
        }
        Ok(SynthDataset { bank: PatternBank::new(&spec), spec, samples })
    }

    /// Rebuilds the dataset from a sidecar file alone.
    pub fn regenerate(sidecar: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        generate(&spec)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"AFDS";
const DATASET_VERSION: u32 = 1;

/// `data.bin` -> `data.bin.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AfError::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Fraction of pruned patches that are background; 1 when nothing was pruned.
pub fn pruning_precision(outcome: &PruneOutcome, object_mask: &[usize]) -> f64 {
    if outcome.pruned.is_empty() {
        return 1.0;
    }
    let background = outcome.pruned.iter().filter(|p| !object_mask.contains(p)).count();
    background as f64 / outcome.pruned.len() as f64
}
