//! Model and dataset files.
//!
//! A model directory holds `model.json` plus one raw tensor file per weight
//! and bias array. Tensor files are signed 8-byte little-endian integers with
//! no header; their shapes come from the manifest.
//!
//! ```json
//! {
//!   "version": 1,
//!   "prime": 2138816513,
//!   "input_shape": [1, 8, 8],
//!   "input_frac_bits": 8,
//!   "layers": [
//!     {"type": "conv2d", "out_channels": 4, "in_channels": 1, "kernel": [3, 3],
//!      "stride": 1, "pad": 1, "frac_bits": 8,
//!      "weights": "layer0_weights.bin", "bias": "layer0_bias.bin"},
//!     {"type": "relu"},
//!     {"type": "avgpool", "kernel": 2, "frac_bits": 8},
//!     {"type": "flatten"},
//!     {"type": "fc", "in_features": 64, "out_features": 10, "frac_bits": 8,
//!      "weights": "layer4_weights.bin", "bias": "layer4_bias.bin"}
//!   ]
//! }
//! ```
//!
//! A dataset directory holds `dataset.json` (shape, scale, labels) and
//! `inputs.bin` with all samples concatenated.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AvgPool, Conv2d, FullyConnected, Layer, Model, NnError};
use crate::field::FieldParams;

pub const MANIFEST_FILE: &str = "model.json";
const DATASET_FILE: &str = "dataset.json";
const DATASET_INPUTS: &str = "inputs.bin";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    prime: u64,
    input_shape: Vec<usize>,
    input_frac_bits: u32,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
        frac_bits: u32,
        weights: String,
        bias: String,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        frac_bits: u32,
        weights: String,
        bias: String,
    },
    Relu,
    Avgpool {
        kernel: usize,
        frac_bits: u32,
    },
    Flatten,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_tensor(path: &Path, values: &[i64]) -> Result<(), NnError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_tensor(path: &Path) -> Result<Vec<i64>, NnError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 8 != 0 {
        return Err(NnError::Manifest(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn load_sized(dir: &Path, name: &str, len: usize) -> Result<Vec<i64>, NnError> {
    let v = load_tensor(&dir.join(name))?;
    if v.len() != len {
        return Err(NnError::Manifest(format!(
            "{name}: expected {len} values, found {}",
            v.len()
        )));
    }
    Ok(v)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads from a model directory or directly from its manifest file.
pub fn load_model(path: &Path) -> Result<Model, NnError> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))?;
    if m.version != VERSION {
        return Err(NnError::Manifest(format!(
            "unsupported version {}",
            m.version
        )));
    }
    let params = FieldParams::new(m.prime)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for entry in m.layers {
        layers.push(match entry {
            LayerEntry::Conv2d {
                out_channels,
                in_channels,
                kernel,
                stride,
                pad,
                frac_bits,
                weights,
                bias,
            } => Layer::Conv2d(Conv2d {
                out_channels,
                in_channels,
                kernel,
                stride,
                pad,
                frac_bits,
                weights: load_sized(
                    &dir,
                    &weights,
                    out_channels * in_channels * kernel[0] * kernel[1],
                )?,
                bias: load_sized(&dir, &bias, out_channels)?,
            }),
            LayerEntry::Fc {
                in_features,
                out_features,
                frac_bits,
                weights,
                bias,
            } => Layer::FullyConnected(FullyConnected {
                in_features,
                out_features,
                frac_bits,
                weights: load_sized(&dir, &weights, in_features * out_features)?,
                bias: load_sized(&dir, &bias, out_features)?,
            }),
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::Avgpool { kernel, frac_bits } => {
                Layer::AvgPool(AvgPool { kernel, frac_bits })
            }
            LayerEntry::Flatten => Layer::Flatten,
        });
    }
    Model::new(params, m.input_shape, m.input_frac_bits, layers)
}

/// Writes `model.json` and the tensor files into `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: &Path) -> Result<(), NnError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let tensors = |w: &[i64], b: &[i64]| -> Result<(String, String), NnError> {
            let (wn, bn) = (
                format!("layer{i}_weights.bin"),
                format!("layer{i}_bias.bin"),
            );
            save_tensor(&dir.join(&wn), w)?;
            save_tensor(&dir.join(&bn), b)?;
            Ok((wn, bn))
        };
        entries.push(match layer {
            Layer::Conv2d(c) => {
                let (weights, bias) = tensors(&c.weights, &c.bias)?;
                LayerEntry::Conv2d {
                    out_channels: c.out_channels,
                    in_channels: c.in_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    pad: c.pad,
                    frac_bits: c.frac_bits,
                    weights,
                    bias,
                }
            }
            Layer::FullyConnected(f) => {
                let (weights, bias) = tensors(&f.weights, &f.bias)?;
                LayerEntry::Fc {
                    in_features: f.in_features,
                    out_features: f.out_features,
                    frac_bits: f.frac_bits,
                    weights,
                    bias,
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::AvgPool(a) => LayerEntry::Avgpool {
                kernel: a.kernel,
                frac_bits: a.frac_bits,
            },
            Layer::Flatten => LayerEntry::Flatten,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        prime: model.params.modulus(),
        input_shape: model.input_shape.clone(),
        input_frac_bits: model.input_frac_bits,
        layers: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Labelled quantized inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub frac_bits: u32,
    pub inputs: Vec<Vec<i64>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    input_shape: Vec<usize>,
    frac_bits: u32,
    labels: Vec<usize>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), NnError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let flat: Vec<i64> = ds.inputs.iter().flatten().copied().collect();
    save_tensor(&dir.join(DATASET_INPUTS), &flat)?;
    let m = DatasetManifest {
        version: VERSION,
        input_shape: ds.input_shape.clone(),
        frac_bits: ds.frac_bits,
        labels: ds.labels.clone(),
    };
    let path = dir.join(DATASET_FILE);
    let text = serde_json::to_string_pretty(&m).expect("dataset manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, NnError> {
    let path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))?;
    let per: usize = m.input_shape.iter().product();
    let flat = load_sized(dir, DATASET_INPUTS, per * m.labels.len())?;
    Ok(Dataset {
        inputs: if per == 0 {
            vec![]
        } else {
            flat.chunks(per).map(<[i64]>::to_vec).collect()
        },
        input_shape: m.input_shape,
        frac_bits: m.frac_bits,
        labels: m.labels,
    })
}
