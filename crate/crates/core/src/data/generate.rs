//! Sample and dataset generation.
//!
//! Each image is 64x96 with three 32x32 cells in a horizontal row, one glyph
//! per cell. Glyph classes are 1-based indices into the alphabet; class 0 is
//! background. Domain 0 draws bright glyphs on a dark noisy background,
//! domain 1 is the exact grayscale inversion of the same draw.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::glyphs::{self, GlyphKind, DEFAULT_ALPHABET, MAX_HALF_EXTENT};
use crate::error::{Error, Result};
use crate::rng::{stream, SeedSplitter};
use crate::Tensor64;

pub const IMG_H: usize = 64;
pub const IMG_W: usize = 96;
pub const CELL: usize = 32;
pub const GLYPHS_PER_IMAGE: usize = 3;
const JITTER: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub alphabet: Vec<GlyphKind>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_size: 800,
            val_size: 200,
            test_size: 400,
            noise: 0.1,
            alphabet: DEFAULT_ALPHABET.to_vec(),
            seed: 1,
        }
    }
}

impl DataConfig {
    /// Number of segmentation classes including background.
    pub fn classes(&self) -> usize {
        self.alphabet.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, size) in [("train_size", self.train_size), ("val_size", self.val_size), ("test_size", self.test_size)] {
            if size == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            if size % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even (half per domain), got {size}")));
            }
        }
        if !(self.noise > 0.0 && self.noise <= 0.2) {
            return Err(Error::Config(format!("noise must lie in (0, 0.2], got {}", self.noise)));
        }
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet must contain at least one glyph".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: u8,
    pub image: Tensor64,
    pub mask: Vec<u8>,
}

impl Sample {
    /// Sorted distinct class ids present in the mask (background included).
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &m in &self.mask {
            seen[m as usize] = true;
        }
        (0..256).filter(|&c| seen[c]).collect()
    }

    pub fn has_class(&self, class: usize) -> bool {
        class < 256 && self.mask.iter().any(|&m| m as usize == class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> &[Sample] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// Train samples are stored in id order starting at 0.
    pub fn train_by_id(&self, id: u64) -> &Sample {
        let s = &self.train[id as usize];
        debug_assert_eq!(s.id, id);
        s
    }
}

/// One glyph placement: drawn as (jitter y, jitter x, scale) in that order.
fn glyph_geometry(rng: &mut ChaCha8Rng) -> (i32, i32, f64) {
    let jy = rng.gen_range(-JITTER..=JITTER);
    let jx = rng.gen_range(-JITTER..=JITTER);
    let scale = rng.gen_range(0.7..1.0);
    (jy, jx, scale)
}

/// Renders a clear-domain sample for the given glyph classes, then inverts
/// intensities if `domain` is 1. Classes are 1-based alphabet indices.
pub fn generate_sample_with_classes(
    rng: &mut ChaCha8Rng,
    id: u64,
    domain: u8,
    classes: [u8; GLYPHS_PER_IMAGE],
    cfg: &DataConfig,
) -> Sample {
    assert!(domain < 2, "domain must be 0 or 1");
    let geoms: Vec<(i32, i32, f64)> = (0..GLYPHS_PER_IMAGE).map(|_| glyph_geometry(rng)).collect();

    let mut image = vec![0.0f64; IMG_H * IMG_W];
    for v in image.iter_mut() {
        *v = rng.gen_range(0.0..cfg.noise);
    }
    let mut mask = vec![0u8; IMG_H * IMG_W];
    let fg_lo = 1.0 - 3.0 * cfg.noise;
    let row_center = IMG_H as f64 / 2.0;
    for (cell, (&class, &(jy, jx, scale))) in classes.iter().zip(&geoms).enumerate() {
        let kind = cfg.alphabet[class as usize - 1];
        let cy = row_center + jy as f64;
        let cx = (CELL * cell + CELL / 2) as f64 + jx as f64;
        debug_assert!(MAX_HALF_EXTENT * scale + JITTER as f64 <= (CELL / 2) as f64);
        for (y, x) in glyphs::rasterize(kind, cy, cx, scale, IMG_H, IMG_W) {
            image[y * IMG_W + x] = rng.gen_range(fg_lo..1.0);
            mask[y * IMG_W + x] = class;
        }
    }
    if domain == 1 {
        for v in image.iter_mut() {
            *v = 1.0 - *v;
        }
    }
    Sample { id, domain, image: Tensor64::from_vec(&[1, IMG_H, IMG_W], image), mask }
}

/// Standalone sample with uniformly drawn glyph classes.
pub fn generate_sample(rng: &mut ChaCha8Rng, id: u64, domain: u8, cfg: &DataConfig) -> Sample {
    let mut classes = [0u8; GLYPHS_PER_IMAGE];
    for c in classes.iter_mut() {
        *c = rng.gen_range(1..=cfg.alphabet.len()) as u8;
    }
    generate_sample_with_classes(rng, id, domain, classes, cfg)
}

/// Clear/inverted twins from one geometry and intensity draw: the domain-1
/// image is exactly one minus the domain-0 image, masks identical.
pub fn twin_pair(rng: &mut ChaCha8Rng, ids: (u64, u64), cfg: &DataConfig) -> (Sample, Sample) {
    let mut classes = [0u8; GLYPHS_PER_IMAGE];
    for c in classes.iter_mut() {
        *c = rng.gen_range(1..=cfg.alphabet.len()) as u8;
    }
    let mut twin_rng = rng.clone();
    let clear = generate_sample_with_classes(rng, ids.0, 0, classes, cfg);
    let inverted = generate_sample_with_classes(&mut twin_rng, ids.1, 1, classes, cfg);
    (clear, inverted)
}

/// Class pool for `slots` glyph slots: as equal as possible per class (exact
/// when divisible), shuffled by the given stream.
fn class_pool(rng: &mut ChaCha8Rng, slots: usize, classes: usize) -> Vec<u8> {
    let base = slots / classes;
    let extra = slots % classes;
    let mut pool = Vec::with_capacity(slots);
    for c in 0..classes {
        let count = base + usize::from(c < extra);
        pool.extend(std::iter::repeat((c + 1) as u8).take(count));
    }
    pool.shuffle(rng);
    pool
}

/// Generates all three splits. Sample ids are global: train starts at 0, val
/// follows, then test. Domains alternate by index, giving exact halves.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let splitter = SeedSplitter::new(cfg.seed);
    let sizes = [cfg.train_size, cfg.val_size, cfg.test_size];
    let mut base = 0u64;
    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for (si, &size) in sizes.iter().enumerate() {
        let mut pool_rng = splitter.substream(stream::POOL, si as u64);
        let pool = class_pool(&mut pool_rng, size * GLYPHS_PER_IMAGE, cfg.alphabet.len());
        let mut samples = Vec::with_capacity(size);
        for i in 0..size {
            let mut rng = splitter.substream2(stream::DATA, si as u64, i as u64);
            let classes = [pool[3 * i], pool[3 * i + 1], pool[3 * i + 2]];
            let domain = (i % 2) as u8;
            samples.push(generate_sample_with_classes(&mut rng, base + i as u64, domain, classes, cfg));
        }
        base += size as u64;
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { config: cfg.clone(), train, val, test })
}
