//! Architecture description, flat parameter storage and checkpoint IO.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalization flavor used after each hidden conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
}

/// One layer of the network IR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Norm { kind: NormKind, ch: usize },
    Relu,
    UpsampleNearest2,
    MeanPool2,
    GlobalMeanPool,
    Dense { inputs: usize, outputs: usize },
}

/// Segmentation network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub classes: usize,
    pub norm: NormKind,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { height: 64, width: 96, channels: [16, 32, 16], classes: 5, norm: NormKind::Instance }
    }
}

/// Shape of an activation as it flows through the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { ch: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl ActShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Map { ch, h, w } => vec![ch, h, w],
            ActShape::Flat { d } => vec![d],
        }
    }
}

/// Full architecture: input shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// Encoder-decoder segmentation net: two conv stages down to half
    /// resolution, nearest-neighbor upsampling back, and a pointwise head.
    pub fn seg_net(cfg: &SegNetConfig) -> Self {
        let [c1, c2, c3] = cfg.channels;
        ArchDescriptor {
            input: [1, cfg.height, cfg.width],
            layers: vec![
                LayerSpec::Conv { in_ch: 1, out_ch: c1, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Norm { kind: cfg.norm, ch: c1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_ch: c1, out_ch: c2, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Norm { kind: cfg.norm, ch: c2 },
                LayerSpec::Relu,
                LayerSpec::UpsampleNearest2,
                LayerSpec::Conv { in_ch: c2, out_ch: c3, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Norm { kind: cfg.norm, ch: c3 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_ch: c3, out_ch: cfg.classes, kernel: 1, stride: 1, pad: 0 },
            ],
        }
    }

    /// Small image classifier used to dispatch test samples to cluster models.
    pub fn domain_classifier(height: usize, width: usize, outputs: usize) -> Self {
        ArchDescriptor {
            input: [1, height, width],
            layers: vec![
                LayerSpec::Conv { in_ch: 1, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Norm { kind: NormKind::Instance, ch: 8 },
                LayerSpec::Relu,
                LayerSpec::MeanPool2,
                LayerSpec::Conv { in_ch: 8, out_ch: 16, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Norm { kind: NormKind::Instance, ch: 16 },
                LayerSpec::Relu,
                LayerSpec::MeanPool2,
                LayerSpec::GlobalMeanPool,
                LayerSpec::Dense { inputs: 16, outputs },
            ],
        }
    }

    /// Activation shapes between layers: entry `i` is the input of layer `i`,
    /// the last entry is the network output. Errors on inconsistent stacks.
    pub fn act_shapes(&self) -> Result<Vec<ActShape>> {
        let mut shapes = vec![ActShape::Map { ch: self.input[0], h: self.input[1], w: self.input[2] }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().expect("non-empty");
            let next = match (*layer, cur) {
                (LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad }, ActShape::Map { ch, h, w }) => {
                    if ch != in_ch {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects {in_ch} channels, input has {ch}"
                        )));
                    }
                    let oh = (h + 2 * pad).checked_sub(kernel).ok_or_else(|| {
                        Error::Shape(format!("layer {i}: kernel larger than padded input"))
                    })? / stride
                        + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    ActShape::Map { ch: out_ch, h: oh, w: ow }
                }
                (LayerSpec::Norm { ch: nch, .. }, ActShape::Map { ch, h, w }) => {
                    if ch != nch {
                        return Err(Error::Shape(format!("layer {i}: norm over {nch} channels, input has {ch}")));
                    }
                    ActShape::Map { ch, h, w }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::UpsampleNearest2, ActShape::Map { ch, h, w }) => ActShape::Map { ch, h: 2 * h, w: 2 * w },
                (LayerSpec::MeanPool2, ActShape::Map { ch, h, w }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Shape(format!("layer {i}: 2x2 mean pool needs even input, got {h}x{w}")));
                    }
                    ActShape::Map { ch, h: h / 2, w: w / 2 }
                }
                (LayerSpec::GlobalMeanPool, ActShape::Map { ch, .. }) => ActShape::Flat { d: ch },
                (LayerSpec::Dense { inputs, outputs }, ActShape::Flat { d }) => {
                    if d != inputs {
                        return Err(Error::Shape(format!("layer {i}: dense expects {inputs} inputs, got {d}")));
                    }
                    ActShape::Flat { d: outputs }
                }
                (spec, _) => {
                    return Err(Error::Shape(format!("layer {i}: {spec:?} cannot consume a flat input")));
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut conv_n = 0;
        let mut norm_n = 0;
        let mut dense_n = 0;
        let push = |entries: &mut Vec<LayoutEntry>, offset: &mut usize, layer: usize, name: String, len: usize| {
            entries.push(LayoutEntry { name, layer, offset: *offset, len });
            *offset += len;
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    conv_n += 1;
                    push(&mut entries, &mut offset, i, format!("conv{conv_n}.weight"), out_ch * in_ch * kernel * kernel);
                    push(&mut entries, &mut offset, i, format!("conv{conv_n}.bias"), out_ch);
                }
                LayerSpec::Norm { kind, ch } => {
                    norm_n += 1;
                    push(&mut entries, &mut offset, i, format!("norm{norm_n}.gamma"), ch);
                    push(&mut entries, &mut offset, i, format!("norm{norm_n}.beta"), ch);
                    if kind == NormKind::Batch {
                        push(&mut entries, &mut offset, i, format!("norm{norm_n}.running_mean"), ch);
                        push(&mut entries, &mut offset, i, format!("norm{norm_n}.running_var"), ch);
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    dense_n += 1;
                    push(&mut entries, &mut offset, i, format!("dense{dense_n}.weight"), outputs * inputs);
                    push(&mut entries, &mut offset, i, format!("dense{dense_n}.bias"), outputs);
                }
                _ => {}
            }
        }
        entries
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|e| e.len).sum()
    }

    /// Human-readable name of a layer, for error messages.
    pub fn layer_name(&self, index: usize) -> String {
        let mut conv_n = 0;
        let mut norm_n = 0;
        let mut dense_n = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let name = match layer {
                LayerSpec::Conv { .. } => {
                    conv_n += 1;
                    format!("conv{conv_n}")
                }
                LayerSpec::Norm { .. } => {
                    norm_n += 1;
                    format!("norm{norm_n}")
                }
                LayerSpec::Dense { .. } => {
                    dense_n += 1;
                    format!("dense{dense_n}")
                }
                LayerSpec::Relu => "relu".to_string(),
                LayerSpec::UpsampleNearest2 => "upsample".to_string(),
                LayerSpec::MeanPool2 => "meanpool".to_string(),
                LayerSpec::GlobalMeanPool => "globalpool".to_string(),
            };
            if i == index {
                return name;
            }
        }
        format!("layer{index}")
    }
}

/// One named block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// Model state: flat parameter vector plus its layout and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    arch: ArchDescriptor,
    layout: Vec<LayoutEntry>,
    data: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Kaiming-uniform (fan-in) init for conv and dense weights, zero biases,
    /// identity normalization (gamma 1, beta 0, running stats 0/1).
    pub fn init(arch: ArchDescriptor, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.act_shapes()?;
        let layout = arch.layout();
        let total: usize = layout.iter().map(|e| e.len).sum();
        let mut data = vec![F::zero(); total];
        for entry in &layout {
            let slice = &mut data[entry.offset..entry.offset + entry.len];
            if entry.name.ends_with(".weight") {
                let fan_in = match arch.layers[entry.layer] {
                    LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
                    LayerSpec::Dense { inputs, .. } => inputs,
                    _ => unreachable!("weights only on conv/dense"),
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in slice.iter_mut() {
                    *v = F::from_f64_lossy(rng.gen_range(-bound..bound));
                }
            } else if entry.name.ends_with(".gamma") || entry.name.ends_with(".running_var") {
                slice.fill(F::one());
            }
            // biases, betas and running means stay zero
        }
        Ok(ModelParams { arch, layout, data })
    }

    pub fn from_vec(arch: ArchDescriptor, data: Vec<F>) -> Result<Self> {
        let layout = arch.layout();
        let total: usize = layout.iter().map(|e| e.len).sum();
        if data.len() != total {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, architecture needs {total}",
                data.len()
            )));
        }
        Ok(ModelParams { arch, layout, data })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Block slice by name, e.g. `"conv1.weight"`.
    pub fn block(&self, name: &str) -> Option<&[F]> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.offset..e.offset + e.len])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let entry = self.layout.iter().find(|e| e.name == name)?.clone();
        Some(&mut self.data[entry.offset..entry.offset + entry.len])
    }

    /// Parameter blocks owned by a given layer index, as (entry, range) pairs.
    pub fn layer_blocks(&self, layer: usize) -> Vec<&LayoutEntry> {
        self.layout.iter().filter(|e| e.layer == layer).collect()
    }

    /// Serializes as magic, little-endian u32 JSON-header length, UTF-8 JSON
    /// header, then one little-endian f64 per parameter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.arch.clone(),
            params: self.data.len() as u64,
        })?;
        file.write_all(&(header.len() as u32).to_le_bytes())?;
        file.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            let x = v.to_f64().ok_or_else(|| Error::Checkpoint("non-finite parameter".into()))?;
            buf.extend_from_slice(&x.to_le_bytes());
        }
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint(format!("{} is too short for a checkpoint", path.display())))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?} in {}, expected {:?}",
                String::from_utf8_lossy(&magic),
                path.display(),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            )));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        let expected = header.arch.param_count() as u64;
        if header.params != expected {
            return Err(Error::Checkpoint(format!(
                "header claims {} parameters, architecture needs {expected}",
                header.params
            )));
        }
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != header.params as usize * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                raw.len(),
                header.params * 8
            )));
        }
        let data: Vec<F> = raw
            .chunks_exact(8)
            .map(|c| F::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        ModelParams::from_vec(header.arch, data)
    }

    /// Errors unless the stored architecture matches `expected`.
    pub fn expect_arch(&self, expected: &ArchDescriptor) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::Checkpoint(
                "checkpoint architecture does not match the configured model".into(),
            ));
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSDDI001";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    params: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, SeedSplitter};

    #[test]
    fn default_seg_net_has_expected_parameter_count() {
        let arch = ArchDescriptor::seg_net(&SegNetConfig::default());
        // conv stacks: 160 + 4640 + 4624 + 85, instance norms: 32 + 64 + 32
        assert_eq!(arch.param_count(), 9637);
    }

    #[test]
    fn batch_norm_adds_running_stats() {
        let cfg = SegNetConfig { norm: NormKind::Batch, ..SegNetConfig::default() };
        let arch = ArchDescriptor::seg_net(&cfg);
        assert_eq!(arch.param_count(), 9637 + 2 * (16 + 32 + 16));
        assert!(arch.layout().iter().any(|e| e.name == "norm2.running_var"));
    }

    #[test]
    fn act_shapes_round_trip_the_seg_net() {
        let arch = ArchDescriptor::seg_net(&SegNetConfig::default());
        let shapes = arch.act_shapes().unwrap();
        assert_eq!(shapes.first().unwrap().dims(), vec![1, 64, 96]);
        assert_eq!(shapes.last().unwrap().dims(), vec![5, 64, 96]);
        // the strided conv halves the resolution
        assert_eq!(shapes[4].dims(), vec![32, 32, 48]);
    }

    #[test]
    fn classifier_ends_flat() {
        let arch = ArchDescriptor::domain_classifier(64, 96, 2);
        let shapes = arch.act_shapes().unwrap();
        assert_eq!(shapes.last().unwrap().dims(), vec![2]);
    }

    #[test]
    fn layout_is_contiguous_and_ordered() {
        let arch = ArchDescriptor::seg_net(&SegNetConfig::default());
        let mut expect = 0;
        for e in arch.layout() {
            assert_eq!(e.offset, expect, "{} not contiguous", e.name);
            expect += e.len;
        }
        assert_eq!(expect, arch.param_count());
    }

    #[test]
    fn init_is_deterministic_and_in_bounds() {
        let arch = ArchDescriptor::seg_net(&SegNetConfig::default());
        let split = SeedSplitter::new(42);
        let a = ModelParams::<f64>::init(arch.clone(), &mut split.stream(stream::INIT)).unwrap();
        let b = ModelParams::<f64>::init(arch.clone(), &mut split.stream(stream::INIT)).unwrap();
        assert_eq!(a.data(), b.data());
        let w = a.block("conv1.weight").unwrap();
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(w.iter().all(|v| v.abs() < bound));
        assert!(a.block("norm1.gamma").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.block("conv1.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = ArchDescriptor::domain_classifier(16, 16, 3);
        let split = SeedSplitter::new(3);
        let params = ModelParams::<f64>::init(arch, &mut split.stream(stream::INIT)).unwrap();
        params.save(&path).unwrap();
        let loaded = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(loaded.arch(), params.arch());
        assert_eq!(loaded.data(), params.data());

        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn checkpoint_arch_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let split = SeedSplitter::new(3);
        let params = ModelParams::<f64>::init(ArchDescriptor::domain_classifier(16, 16, 3), &mut split.stream(stream::INIT))
            .unwrap();
        params.save(&path).unwrap();
        let loaded = ModelParams::<f64>::load(&path).unwrap();
        let other = ArchDescriptor::seg_net(&SegNetConfig::default());
        assert!(loaded.expect_arch(&other).is_err());
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"FSDDI001\x05\x00\x00\x00{}").unwrap();
        assert!(ModelParams::<f64>::load(&path).is_err());
    }
}
