//! Architecture strings and seeded random models.
//!
//! Grammar (comma separated):
//!
//! ```text
//! input:CxHxW | input:N
//! conv:OUTxK[:sSTRIDE][:pPAD]
//! fc:N
//! avgpool:K
//! relu
//! flatten
//! ```
//!
//! `input` must come first and appear once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AvgPool, Conv2d, Dataset, FullyConnected, Layer, Model, NnError, Tensor};
use crate::field::{FieldParams, QUANT_BITS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchLayer {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        out: usize,
    },
    AvgPool {
        kernel: usize,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<ArchLayer>,
}

fn num(s: &str, what: &str) -> Result<usize, NnError> {
    s.parse::<usize>()
        .ok()
        .filter(|&v| v > 0 || what == "padding")
        .ok_or_else(|| NnError::Arch(format!("bad {what} `{s}`")))
}

fn dims(s: &str) -> Result<Vec<usize>, NnError> {
    s.split('x').map(|d| num(d, "dimension")).collect()
}

/// Parses an architecture string and checks that the shapes line up.
pub fn parse_arch(text: &str) -> Result<ArchSpec, NnError> {
    let mut tokens = text.split(',').map(str::trim);
    let first = tokens.next().unwrap_or("");
    let input_shape = match first.split_once(':') {
        Some(("input", d)) => dims(d)?,
        _ => {
            return Err(NnError::Arch(format!(
                "expected `input:...` first, got `{first}`"
            )))
        }
    };
    if !matches!(input_shape.len(), 1 | 3) {
        return Err(NnError::Arch(format!(
            "input must be CxHxW or N, got {input_shape:?}"
        )));
    }
    let mut layers = Vec::new();
    for tok in tokens {
        let mut parts = tok.split(':');
        let head = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let layer = match (head, rest.as_slice()) {
            ("relu", []) => ArchLayer::Relu,
            ("flatten", []) => ArchLayer::Flatten,
            ("fc", [n]) => ArchLayer::Fc {
                out: num(n, "fc width")?,
            },
            ("avgpool", [k]) => ArchLayer::AvgPool {
                kernel: num(k, "pool size")?,
            },
            ("conv", [ok, opts @ ..]) => {
                let d = dims(ok)?;
                let [out, kernel] = d[..] else {
                    return Err(NnError::Arch(format!("conv needs OUTxK, got `{ok}`")));
                };
                let (mut stride, mut pad) = (1, 0);
                for o in opts {
                    match o.split_at(1.min(o.len())) {
                        ("s", v) => stride = num(v, "stride")?,
                        ("p", v) => pad = num(v, "padding")?,
                        _ => return Err(NnError::Arch(format!("unknown conv option `{o}`"))),
                    }
                }
                ArchLayer::Conv {
                    out,
                    kernel,
                    stride,
                    pad,
                }
            }
            ("input", _) => return Err(NnError::Arch("`input` may only appear first".into())),
            _ => return Err(NnError::Arch(format!("unrecognized layer `{tok}`"))),
        };
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(NnError::Arch("no layers after input".into()));
    }
    let spec = ArchSpec {
        input_shape,
        layers,
    };
    // Shape check with placeholder weights.
    skeleton(&spec, 8, FieldParams::default())?;
    Ok(spec)
}

/// Model with zero weights; used for shape validation.
fn skeleton(spec: &ArchSpec, frac_bits: u32, params: FieldParams) -> Result<Model, NnError> {
    let mut shape = spec.input_shape.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let layer = match *l {
            ArchLayer::Relu => Layer::Relu,
            ArchLayer::Flatten => Layer::Flatten,
            ArchLayer::AvgPool { kernel } => Layer::AvgPool(AvgPool { kernel, frac_bits }),
            ArchLayer::Fc { out } => {
                if shape.len() != 1 {
                    return Err(NnError::Arch(format!(
                        "layer {i}: fc needs a flat input, got {shape:?} (add `flatten`)"
                    )));
                }
                Layer::FullyConnected(FullyConnected {
                    in_features: shape[0],
                    out_features: out,
                    frac_bits,
                    weights: vec![0; out * shape[0]],
                    bias: vec![0; out],
                })
            }
            ArchLayer::Conv {
                out,
                kernel,
                stride,
                pad,
            } => {
                let ch = *shape.first().unwrap_or(&0);
                if shape.len() != 3 {
                    return Err(NnError::Arch(format!(
                        "layer {i}: conv needs CxHxW input, got {shape:?}"
                    )));
                }
                Layer::Conv2d(Conv2d {
                    out_channels: out,
                    in_channels: ch,
                    kernel: [kernel, kernel],
                    stride,
                    pad,
                    frac_bits,
                    weights: vec![0; out * ch * kernel * kernel],
                    bias: vec![0; out],
                })
            }
        };
        shape = layer
            .output_shape(&shape)
            .map_err(|e| NnError::Arch(format!("layer {i}: {e}")))?;
        layers.push(layer);
    }
    Model::new(params, spec.input_shape.clone(), frac_bits, layers)
        .map_err(|e| NnError::Arch(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelGenOptions {
    /// Fractional bits of activations and of every layer's weights.
    pub frac_bits: u32,
    /// If set, weights are uniform integers in `(-2^b, 2^b)` instead of
    /// He-uniform values quantized at `frac_bits`.
    pub weight_bits: Option<u32>,
}

impl Default for ModelGenOptions {
    fn default() -> Self {
        ModelGenOptions {
            frac_bits: 8,
            weight_bits: None,
        }
    }
}

/// Seeded random model for the given architecture.
pub fn random_model(
    spec: &ArchSpec,
    opts: &ModelGenOptions,
    params: FieldParams,
    seed: u64,
) -> Result<Model, NnError> {
    if let Some(b) = opts.weight_bits {
        if b == 0 || b > QUANT_BITS {
            return Err(NnError::Arch(format!(
                "weight bits must be in 1..=15, got {b}"
            )));
        }
    }
    let mut model = skeleton(spec, opts.frac_bits, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = opts.frac_bits;
    let cap = (1i64 << QUANT_BITS) - 1;
    let mut fill = |weights: &mut Vec<i64>, bias: &mut Vec<i64>, fan_in: usize| {
        let bound = match opts.weight_bits {
            Some(b) => (1i64 << b) - 1,
            None => {
                let he = (6.0 / fan_in as f64).sqrt() * (1u64 << f) as f64;
                (he.round() as i64).clamp(1, cap)
            }
        };
        for w in weights.iter_mut() {
            *w = rng.gen_range(-bound..=bound);
        }
        // Bias lives at accumulator scale 2^(2f); keep it near 1/8 in real terms.
        let bb = ((1i64 << (2 * f)) / 8).max(1);
        for b in bias.iter_mut() {
            *b = rng.gen_range(-bb..=bb);
        }
    };
    for layer in &mut model.layers {
        match layer {
            Layer::Conv2d(c) => {
                let fan_in = c.in_channels * c.kernel[0] * c.kernel[1];
                fill(&mut c.weights, &mut c.bias, fan_in);
            }
            Layer::FullyConnected(l) => {
                let fan_in = l.in_features;
                fill(&mut l.weights, &mut l.bias, fan_in);
            }
            _ => {}
        }
    }
    Model::new(
        model.params,
        model.input_shape,
        model.input_frac_bits,
        model.layers,
    )
}

/// Inputs uniform in `[-1, 1]` at the model's input scale, labelled by the
/// model's own plaintext argmax.
pub fn synthetic_dataset(model: &Model, n: usize, seed: u64) -> Result<Dataset, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1i64 << model.input_frac_bits;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<i64> = (0..model.input_len())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        let t = Tensor::from_signed(model.input_shape.clone(), &x, &model.params)?;
        let logits = super::infer_plain(model, &t)?.to_signed(&model.params);
        labels.push(super::argmax(&logits));
        inputs.push(x);
    }
    Ok(Dataset {
        input_shape: model.input_shape.clone(),
        frac_bits: model.input_frac_bits,
        inputs,
        labels,
    })
}
