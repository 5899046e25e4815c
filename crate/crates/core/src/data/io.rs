//! Dataset export and import.
//!
//! A dataset directory holds `meta.json` (the generating config and split
//! sizes) and one binary blob per split. Blob layout per sample, all
//! little-endian: id (u64), domain (u8), image (h*w f64), mask (h*w u8).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::generate::{DataConfig, Dataset, Sample, IMG_H, IMG_W};
use crate::error::{Error, Result};
use crate::Tensor64;

const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: u32,
    config: DataConfig,
    train: usize,
    val: usize,
    test: usize,
}

fn write_split(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * (8 + 1 + IMG_H * IMG_W * 9));
    for s in samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.push(s.domain);
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.mask);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_split(path: &Path, expect: usize) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let npix = IMG_H * IMG_W;
    let stride = 8 + 1 + npix * 8 + npix;
    if bytes.len() != expect * stride {
        return Err(Error::Dataset(format!(
            "{}: expected {} samples ({} bytes), found {} bytes",
            path.display(),
            expect,
            expect * stride,
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(expect);
    for chunk in bytes.chunks_exact(stride) {
        let id = u64::from_le_bytes(chunk[0..8].try_into().expect("8 bytes"));
        let domain = chunk[8];
        let mut image = Vec::with_capacity(npix);
        for v in chunk[9..9 + npix * 8].chunks_exact(8) {
            image.push(f64::from_le_bytes(v.try_into().expect("8 bytes")));
        }
        let mask = chunk[9 + npix * 8..].to_vec();
        out.push(Sample { id, domain, image: Tensor64::from_vec(&[1, IMG_H, IMG_W], image), mask });
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        format: FORMAT,
        config: ds.config.clone(),
        train: ds.train.len(),
        val: ds.val.len(),
        test: ds.test.len(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_split(&dir.join("train.bin"), &ds.train)?;
    write_split(&dir.join("val.bin"), &ds.val)?;
    write_split(&dir.join("test.bin"), &ds.test)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.format != FORMAT {
        return Err(Error::Dataset(format!("unsupported dataset format {}", meta.format)));
    }
    Ok(Dataset {
        config: meta.config,
        train: read_split(&dir.join("train.bin"), meta.train)?,
        val: read_split(&dir.join("val.bin"), meta.val)?,
        test: read_split(&dir.join("test.bin"), meta.test)?,
    })
}

/// Content hash over every sample of every split, for run manifests.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for split in [&ds.train, &ds.val, &ds.test] {
        for s in split {
            h.update(s.id.to_le_bytes());
            h.update([s.domain]);
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
            h.update(&s.mask);
        }
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
