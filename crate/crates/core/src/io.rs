//! On-disk model and dataset formats.
//!
//! A model directory holds `model.json` (the manifest) and `weights.bin`
//! (little-endian `f32`, concatenated in manifest order). Offsets and lengths
//! in the manifest count `f32` elements, not bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, BatchNormParams, ConvBlock, Layer, Linear, Network};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "udfc-1";
pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerRecord>,
}

/// Element range inside `weights.bin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRecord {
    pub eps: f32,
    pub gamma_offset: usize,
    pub beta_offset: usize,
    pub mean_offset: usize,
    pub var_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_bn: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wbits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_offsets: Option<BnRecord>,
}

impl LayerRecord {
    fn bare(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            out_channels: None,
            in_channels: None,
            kernel: None,
            stride: None,
            pad: None,
            has_bn: None,
            activation: None,
            wbits: None,
            weight_offset: None,
            weight_len: None,
            bias_offset: None,
            bn_offsets: None,
        }
    }
}

fn manifest_paths(path: &Path) -> (PathBuf, PathBuf) {
    let dir = if path.extension().is_some_and(|e| e == "json") {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    };
    let manifest = if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        dir.join(MANIFEST_FILE)
    };
    (manifest, dir.join(WEIGHTS_FILE))
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct Blob<'a> {
    data: &'a [f32],
    path: &'a Path,
}

impl Blob<'_> {
    fn take(&self, offset: usize, len: usize, what: &str, layer: usize) -> Result<Vec<f32>> {
        let end = offset.checked_add(len).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer}: {what} [{offset}, +{len}) exceeds {} values in {}",
                self.data.len(),
                self.path.display()
            )));
        };
        let out = self.data[offset..end].to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {layer} {what}")));
        }
        Ok(out)
    }
}

fn required<T: Copy>(v: Option<T>, field: &str, layer: usize) -> Result<T> {
    v.ok_or_else(|| Error::InvalidNetwork(format!("layer {layer}: missing field `{field}`")))
}

/// Loads and validates a model from a directory (or its `model.json`).
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let (manifest_path, weights_path) = manifest_paths(path.as_ref());
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!(
            "manifest version {:?}, expected {FORMAT_VERSION:?}",
            manifest.version
        )));
    }
    let data = read_f32_le(&weights_path)?;
    let blob = Blob {
        data: &data,
        path: &weights_path,
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (idx, rec) in manifest.layers.iter().enumerate() {
        let layer = match rec.kind.as_str() {
            "conv" => {
                let o = required(rec.out_channels, "out_channels", idx)?;
                let i = required(rec.in_channels, "in_channels", idx)?;
                let k = required(rec.kernel, "kernel", idx)?;
                let off = required(rec.weight_offset, "weight_offset", idx)?;
                let len = required(rec.weight_len, "weight_len", idx)?;
                if o * i * k * k != len {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {idx}: {o}x{i}x{k}x{k} weights declared over {len} values"
                    )));
                }
                let weight = Tensor::new(vec![o, i, k, k], blob.take(off, len, "weights", idx)?)?;
                let bias = rec
                    .bias_offset
                    .map(|b| blob.take(b, o, "bias", idx))
                    .transpose()?;
                let has_bn = rec.has_bn.unwrap_or(false);
                let bn = match (&rec.bn_offsets, has_bn) {
                    (Some(r), true) => Some(BatchNormParams {
                        gamma: blob.take(r.gamma_offset, o, "bn gamma", idx)?,
                        beta: blob.take(r.beta_offset, o, "bn beta", idx)?,
                        mean: blob.take(r.mean_offset, o, "bn mean", idx)?,
                        var: blob.take(r.var_offset, o, "bn var", idx)?,
                        eps: r.eps,
                    }),
                    (None, false) => None,
                    _ => {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {idx}: has_bn disagrees with bn_offsets"
                        )))
                    }
                };
                Layer::Conv(ConvBlock {
                    weight,
                    bias,
                    stride: rec.stride.unwrap_or(1),
                    pad: rec.pad.unwrap_or(0),
                    bn,
                    activation: rec.activation.unwrap_or(Activation::Identity),
                    wbits: rec.wbits.unwrap_or(32),
                })
            }
            "maxpool" => Layer::MaxPool,
            "gap" => Layer::GlobalAvgPool,
            "linear" => {
                let o = required(rec.out_channels, "out_channels", idx)?;
                let i = required(rec.in_channels, "in_channels", idx)?;
                let off = required(rec.weight_offset, "weight_offset", idx)?;
                let len = required(rec.weight_len, "weight_len", idx)?;
                if o * i != len {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {idx}: {o}x{i} weights declared over {len} values"
                    )));
                }
                let weight = Tensor::new(vec![o, i], blob.take(off, len, "weights", idx)?)?;
                let bias = rec
                    .bias_offset
                    .map(|b| blob.take(b, o, "bias", idx))
                    .transpose()?;
                Layer::Linear(Linear {
                    weight,
                    bias,
                    wbits: rec.wbits.unwrap_or(32),
                })
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "layer {idx}: unknown layer kind {other:?}"
                )))
            }
        };
        layers.push(layer);
    }

    let net = Network {
        input_shape: manifest.input_shape,
        layers,
    };
    net.validate()?;
    Ok(net)
}

/// Builds the manifest and weight blob for `net` without touching the filesystem.
pub fn encode_model(net: &Network) -> Result<(Manifest, Vec<f32>)> {
    net.validate()?;
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |values: &[f32]| {
        let off = blob.len();
        blob.extend_from_slice(values);
        off
    };
    let mut records = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let rec = match layer {
            Layer::Conv(c) => {
                let weight_offset = push(c.weight.data());
                let bias_offset = c.bias.as_ref().map(|b| push(b));
                let bn_offsets = c.bn.as_ref().map(|bn| BnRecord {
                    eps: bn.eps,
                    gamma_offset: push(&bn.gamma),
                    beta_offset: push(&bn.beta),
                    mean_offset: push(&bn.mean),
                    var_offset: push(&bn.var),
                });
                LayerRecord {
                    out_channels: Some(c.out_channels()),
                    in_channels: Some(c.in_channels()),
                    kernel: Some(c.kernel()),
                    stride: Some(c.stride),
                    pad: Some(c.pad),
                    has_bn: Some(c.bn.is_some()),
                    activation: Some(c.activation),
                    wbits: Some(c.wbits),
                    weight_offset: Some(weight_offset),
                    weight_len: Some(c.weight.len()),
                    bias_offset,
                    bn_offsets,
                    ..LayerRecord::bare("conv")
                }
            }
            Layer::MaxPool => LayerRecord::bare("maxpool"),
            Layer::GlobalAvgPool => LayerRecord::bare("gap"),
            Layer::Linear(l) => {
                let weight_offset = push(l.weight.data());
                let bias_offset = l.bias.as_ref().map(|b| push(b));
                LayerRecord {
                    out_channels: Some(l.out_features()),
                    in_channels: Some(l.in_features()),
                    wbits: Some(l.wbits),
                    weight_offset: Some(weight_offset),
                    weight_len: Some(l.weight.len()),
                    bias_offset,
                    ..LayerRecord::bare("linear")
                }
            }
        };
        records.push(rec);
    }
    Ok((
        Manifest {
            version: FORMAT_VERSION.to_string(),
            input_shape: net.input_shape,
            layers: records,
        },
        blob,
    ))
}

/// Writes `model.json` and `weights.bin` into directory `dir` (created if needed).
pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let (manifest, blob) = encode_model(net)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, f32_le_bytes(&blob)).map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}

/// Writes quantization codes, one byte per code, in weight order.
pub fn save_codes(codes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, codes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    /// Per-sample `[C, H, W]`; a leading batch dimension equal to `count` is accepted.
    pub shape: Vec<usize>,
    pub class_count: usize,
}

/// Labelled evaluation batch in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("data.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: meta_path.clone(),
        source,
    })?;
    let sample: Vec<usize> = match meta.shape.len() {
        3 => meta.shape.clone(),
        4 if meta.shape[0] == meta.count => meta.shape[1..].to_vec(),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "dataset shape {:?} is not [C,H,W] or [count,C,H,W]",
                meta.shape
            )))
        }
    };
    let data = read_f32_le(&dir.join("data.bin"))?;
    let per: usize = sample.iter().product();
    if data.len() != per * meta.count {
        return Err(Error::ShapeMismatch(format!(
            "data.bin holds {} values, expected {} x {per}",
            data.len(),
            meta.count
        )));
    }
    let lpath = dir.join("labels.bin");
    let lbytes = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
    if lbytes.len() != 4 * meta.count {
        return Err(Error::ShapeMismatch(format!(
            "labels.bin holds {} bytes, expected {}",
            lbytes.len(),
            4 * meta.count
        )));
    }
    let labels: Vec<u32> = lbytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= meta.class_count) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} outside 0..{}",
            meta.class_count
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("data.bin".into()));
    }
    let images = if meta.count == 0 {
        // Tensor dims must be positive; an empty batch keeps an empty buffer.
        Tensor::zeros(vec![1, sample[0], sample[1], sample[2]])
    } else {
        let mut shape = vec![meta.count];
        shape.extend(sample);
        Tensor::new(shape, data)?
    };
    Ok(Dataset {
        images,
        labels,
        class_count: meta.class_count,
    })
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        count: ds.len(),
        shape: ds.images.shape()[1..].to_vec(),
        class_count: ds.class_count,
    };
    let p = dir.join("data.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(&p, e))?;
    let p = dir.join("data.bin");
    let values: &[f32] = if ds.is_empty() { &[] } else { ds.images.data() };
    fs::write(&p, f32_le_bytes(values)).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("labels.bin");
    let bytes: Vec<u8> = ds.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
