//! Procedural part-structured images with ground-truth part masks.
//!
//! The image is divided into part slots: the four quadrants, plus an optional
//! center patch that overrides them. Each slot is filled with a slot-specific
//! hue whose shade encodes that slot's attribute code. Every relevant slot
//! carries a code congruent to the label modulo the class count, so each one
//! alone identifies the class; the remaining slots are drawn independently of
//! the label.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const DATASET_MAGIC: [u8; 4] = *b"CMDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;
pub const NOISE_STD: f64 = 0.05;
pub const MAX_PARTS: usize = 5;

/// Base RGB hue of each slot.
const SLOT_HUES: [[f64; 3]; MAX_PARTS] = [
    [0.95, 0.25, 0.20],
    [0.25, 0.85, 0.30],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub image_size: usize,
    /// 4 (quadrants) or 5 (quadrants plus center patch).
    pub num_parts: usize,
    pub attributes_per_part: usize,
    pub num_classes: usize,
    /// Slots whose attribute codes carry the label.
    pub relevant_parts: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image_size: usize,
    /// `[3,S,S]` channel-major, values in `[0,1]`.
    pub image: Vec<f32>,
    pub label: usize,
    /// Slot id per pixel, row-major `[S,S]`.
    pub part_mask: Vec<u8>,
    /// Attribute code per slot.
    pub attributes: Vec<u8>,
}

impl SynthSpec {
    /// Reference task: 8 classes shown redundantly in the top-left and
    /// bottom-right quadrants, eight shades per quadrant.
    pub fn reference(seed: u64) -> Self {
        Self {
            image_size: 32,
            num_parts: 4,
            attributes_per_part: 8,
            num_classes: 8,
            relevant_parts: vec![0, 3],
            seed,
        }
    }

    pub fn irrelevant_parts(&self) -> Vec<usize> {
        (0..self.num_parts)
            .filter(|p| !self.relevant_parts.contains(p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InfeasibleSpec(msg));
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return fail(format!(
                "image size {} must be a multiple of 4, at least 8",
                self.image_size
            ));
        }
        if !(4..=MAX_PARTS).contains(&self.num_parts) {
            return fail(format!("num_parts must be 4 or 5, got {}", self.num_parts));
        }
        if self.attributes_per_part < 1 || self.attributes_per_part > 255 {
            return fail(format!(
                "attributes_per_part {} outside 1..=255",
                self.attributes_per_part
            ));
        }
        if self.num_classes < 1 || self.num_classes > u16::MAX as usize {
            return fail(format!("num_classes {} outside 1..=65535", self.num_classes));
        }
        if self.relevant_parts.is_empty() {
            return fail("relevant_parts is empty".into());
        }
        for (i, &p) in self.relevant_parts.iter().enumerate() {
            if p >= self.num_parts || self.relevant_parts[..i].contains(&p) {
                return fail(format!("relevant slot {p} invalid or repeated"));
            }
        }
        if self.num_classes > self.attributes_per_part {
            return fail(format!(
                "{} classes exceed the {} codes of a relevant slot",
                self.num_classes, self.attributes_per_part
            ));
        }
        Ok(())
    }

    /// Label implied by a full attribute vector.
    pub fn label_of(&self, attributes: &[u8]) -> usize {
        attributes[self.relevant_parts[0]] as usize % self.num_classes
    }

    /// Ground-truth slot of pixel `(y, x)`.
    pub fn slot_at(&self, y: usize, x: usize) -> u8 {
        let s = self.image_size;
        if self.num_parts == 5 && (s / 4..3 * s / 4).contains(&y) && (s / 4..3 * s / 4).contains(&x) {
            return 4;
        }
        let row = usize::from(y >= s / 2);
        let col = usize::from(x >= s / 2);
        (row * 2 + col) as u8
    }

    /// Noise-free color of `slot` with attribute `code`.
    pub fn color(&self, slot: usize, code: u8) -> [f64; 3] {
        let levels = self.attributes_per_part;
        let shade = if levels == 1 {
            1.0
        } else {
            0.35 + 0.65 * code as f64 / (levels - 1) as f64
        };
        SLOT_HUES[slot].map(|c| c * shade)
    }

    fn sample(&self, index: usize) -> SynthSample {
        let mut rng = rng::rng_for(self.seed, rng::derive_seed(rng::stream::DATA, index as u64));
        let label = index % self.num_classes;
        // codes ≡ label (mod C): label, label + C, label + 2C, ...
        let choices = (self.attributes_per_part - label).div_ceil(self.num_classes);
        let mut attributes = vec![0u8; self.num_parts];
        for &p in &self.relevant_parts {
            attributes[p] = (label + self.num_classes * rng.random_range(0..choices)) as u8;
        }
        for p in self.irrelevant_parts() {
            attributes[p] = rng.random_range(0..self.attributes_per_part) as u8;
        }
        debug_assert_eq!(self.label_of(&attributes), label);

        let s = self.image_size;
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let mut part_mask = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                part_mask[y * s + x] = self.slot_at(y, x);
            }
        }
        let mut image = vec![0f32; CHANNELS * s * s];
        for ch in 0..CHANNELS {
            for (i, &slot) in part_mask.iter().enumerate() {
                let base = self.color(slot as usize, attributes[slot as usize])[ch];
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                image[ch * s * s + i] = v as f32;
            }
        }
        SynthSample {
            image_size: s,
            image,
            label,
            part_mask,
            attributes,
        }
    }
}

/// Deterministic, class-balanced samples: sample `i` has label `i mod C`.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok((0..n).map(|i| spec.sample(i)).collect())
}

/// Per-channel mean pixel value over a set of samples.
pub fn mean_color(samples: &[SynthSample]) -> [f32; 3] {
    let mut sums = [0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let area = s.image_size * s.image_size;
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += s.image[ch * area..(ch + 1) * area]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        count += area;
    }
    sums.map(|v| if count == 0 { 0.0 } else { (v / count as f64) as f32 })
}

/// Replaces every pixel of the given slots with `fill`.
pub fn occlude_parts(sample: &SynthSample, slots: &[usize], fill: [f32; 3]) -> Result<SynthSample> {
    let num_parts = sample.attributes.len();
    if let Some(&bad) = slots.iter().find(|&&s| s >= num_parts) {
        return Err(Error::InvalidArgument(format!(
            "unknown slot {bad} (sample has {num_parts})"
        )));
    }
    let mut out = sample.clone();
    let area = sample.image_size * sample.image_size;
    for (i, &slot) in sample.part_mask.iter().enumerate() {
        if slots.contains(&(slot as usize)) {
            for (ch, &f) in fill.iter().enumerate() {
                out.image[ch * area + i] = f;
            }
        }
    }
    Ok(out)
}

/// Stacks sample images into an `[N,3,S,S]` tensor.
pub fn images_tensor(samples: &[&SynthSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let s = first.image_size;
    let data = samples.iter().flat_map(|x| x.image.iter().map(|&v| v as f64)).collect();
    Tensor::new(vec![samples.len(), CHANNELS, s, s], data)
}

pub fn write_dataset(samples: &[SynthSample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (size, parts) = samples.first().map_or((0, 0), |s| (s.image_size, s.attributes.len()));
    for s in samples {
        if s.image_size != size || s.attributes.len() != parts {
            return Err(Error::InvalidArgument(
                "samples differ in image size or part count".into(),
            ));
        }
    }
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    w.write_all(&(size as u32).to_le_bytes())?;
    w.write_all(&(parts as u32).to_le_bytes())?;
    for s in samples {
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(s.label as u16).to_le_bytes())?;
        w.write_all(&s.part_mask)?;
        w.write_all(&s.attributes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SynthSample>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let mut nb = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut nb, "sample count")?;
    let n = u64::from_le_bytes(nb) as usize;
    let size = read_u32(&mut r, "image size")? as usize;
    let parts = read_u32(&mut r, "part count")? as usize;
    if n > 0 && (size == 0 || parts == 0 || size > 4096 || parts > 255) {
        return Err(Error::Corrupt(format!(
            "implausible header: size {size}, parts {parts}"
        )));
    }
    let area = size * size;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    let mut pixel_bytes = vec![0u8; CHANNELS * area * 4];
    for i in 0..n {
        let what = format!("sample {i}");
        read_exact_or_corrupt(&mut r, &mut pixel_bytes, &what)?;
        let image = pixel_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut lb = [0u8; 2];
        read_exact_or_corrupt(&mut r, &mut lb, &what)?;
        let mut part_mask = vec![0u8; area];
        read_exact_or_corrupt(&mut r, &mut part_mask, &what)?;
        let mut attributes = vec![0u8; parts];
        read_exact_or_corrupt(&mut r, &mut attributes, &what)?;
        if let Some(&bad) = part_mask.iter().find(|&&m| m as usize >= parts) {
            return Err(Error::Corrupt(format!("sample {i}: mask slot {bad} out of range")));
        }
        samples.push(SynthSample {
            image_size: size,
            image,
            label: u16::from_le_bytes(lb) as usize,
            part_mask,
            attributes,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last sample".into()));
    }
    Ok(samples)
}
