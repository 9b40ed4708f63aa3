//! Quantized integer inference over the prime field.
//!
//! Tensors hold a single sample in CHW (or flat `[n]`) layout. Activations
//! stay at a fixed scale `2^input_frac_bits`: every multiplying layer
//! (convolution, fully connected, average pool) quantizes its weights at its
//! own `frac_bits` and shifts the accumulator right by that amount with
//! round-to-nearest. Biases are stored at accumulator scale.

mod arch;
mod io;
mod stochastic;

use thiserror::Error;

use crate::faultmodel::exact_relu;
use crate::field::{FieldElement, FieldError, FieldParams, QUANT_BITS};

pub use arch::{parse_arch, random_model, synthetic_dataset, ArchLayer, ArchSpec, ModelGenOptions};
pub use io::{
    load_dataset, load_model, load_tensor, save_dataset, save_model, save_tensor, Dataset,
    MANIFEST_FILE,
};
pub use stochastic::{
    infer_stochastic, infer_stochastic_with, stochastic_relu_sim, MaskSource, StochasticReluConfig,
    StochasticRun,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer}: weight {value} exceeds the 2^15 quantization cap")]
    WeightCap { layer: usize, value: i64 },
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("mask trace exhausted after {0} activations")]
    TraceExhausted(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<FieldElement>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<FieldElement>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_signed(
        shape: Vec<usize>,
        values: &[i64],
        params: &FieldParams,
    ) -> Result<Self, NnError> {
        let data = values
            .iter()
            .map(|&v| params.encode(v))
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data)
    }

    pub fn to_signed(&self, params: &FieldParams) -> Vec<i64> {
        self.data.iter().map(|&e| params.decode(e)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index of the largest signed value; the first one wins ties.
pub fn argmax(values: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub pad: usize,
    pub frac_bits: u32,
    /// `[out, in, kh, kw]`, row-major.
    pub weights: Vec<i64>,
    pub bias: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullyConnected {
    pub in_features: usize,
    pub out_features: usize,
    pub frac_bits: u32,
    /// `[out, in]`, row-major.
    pub weights: Vec<i64>,
    pub bias: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvgPool {
    pub kernel: usize,
    pub frac_bits: u32,
}

impl AvgPool {
    /// Fixed-point reciprocal of the window size.
    pub fn multiplier(&self) -> i64 {
        let n = (self.kernel * self.kernel) as f64;
        ((1u64 << self.frac_bits) as f64 / n).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d(Conv2d),
    FullyConnected(FullyConnected),
    Relu,
    AvgPool(AvgPool),
    Flatten,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::FullyConnected(_) => "fc",
            Layer::Relu => "relu",
            Layer::AvgPool(_) => "avgpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match self {
            Layer::Conv2d(c) => {
                let [ch, h, w] = chw(input, "conv2d")?;
                if ch != c.in_channels {
                    return Err(NnError::Shape(format!(
                        "conv2d expects {} input channels, got {ch}",
                        c.in_channels
                    )));
                }
                if c.stride == 0 {
                    return Err(NnError::Shape("conv2d stride must be positive".into()));
                }
                let oh = conv_out(h, c.kernel[0], c.stride, c.pad);
                let ow = conv_out(w, c.kernel[1], c.stride, c.pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![c.out_channels, oh, ow]),
                    _ => Err(NnError::Shape(format!(
                        "kernel {:?} does not fit input {h}x{w} with padding {}",
                        c.kernel, c.pad
                    ))),
                }
            }
            Layer::FullyConnected(f) => {
                if input != [f.in_features] {
                    return Err(NnError::Shape(format!(
                        "fc expects a flat input of {}, got {input:?}",
                        f.in_features
                    )));
                }
                Ok(vec![f.out_features])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool(a) => {
                let [ch, h, w] = chw(input, "avgpool")?;
                if a.kernel == 0 || a.kernel > h || a.kernel > w {
                    return Err(NnError::Shape(format!(
                        "avgpool window {} does not fit {h}x{w}",
                        a.kernel
                    )));
                }
                Ok(vec![ch, h / a.kernel, w / a.kernel])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Bits removed by the rescale that follows this layer.
    pub fn rescale_bits(&self) -> u32 {
        match self {
            Layer::Conv2d(c) => c.frac_bits,
            Layer::FullyConnected(f) => f.frac_bits,
            Layer::AvgPool(a) => a.frac_bits,
            Layer::Relu | Layer::Flatten => 0,
        }
    }

    /// The linear part of the layer, without bias. Works on shares.
    ///
    /// # Panics
    /// On `Relu`, or if `x` does not match `in_shape`.
    pub fn apply_linear(
        &self,
        x: &[FieldElement],
        in_shape: &[usize],
        params: &FieldParams,
    ) -> Vec<FieldElement> {
        let p = params.modulus() as u128;
        let enc = |v: i64| params.encode_wrapping(v as i128).value() as u128;
        match self {
            Layer::Conv2d(c) => {
                let [ch, h, w] = chw(in_shape, "conv2d").expect("validated shape");
                assert_eq!(x.len(), ch * h * w);
                let [kh, kw] = c.kernel;
                let wts: Vec<u128> = c.weights.iter().map(|&v| enc(v)).collect();
                let oh = conv_out(h, kh, c.stride, c.pad).expect("validated shape");
                let ow = conv_out(w, kw, c.stride, c.pad).expect("validated shape");
                let mut out = Vec::with_capacity(c.out_channels * oh * ow);
                for o in 0..c.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: u128 = 0;
                            for ci in 0..ch {
                                for ky in 0..kh {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let wv = wts[((o * ch + ci) * kh + ky) * kw + kx];
                                        let xv =
                                            x[(ci * h + iy as usize) * w + ix as usize].value();
                                        acc += wv * xv as u128;
                                    }
                                }
                            }
                            out.push(params.reduce((acc % p) as u64));
                        }
                    }
                }
                out
            }
            Layer::FullyConnected(f) => {
                assert_eq!(x.len(), f.in_features);
                f.weights
                    .chunks(f.in_features)
                    .map(|row| {
                        let acc: u128 = row
                            .iter()
                            .zip(x)
                            .map(|(&wv, xv)| enc(wv) * xv.value() as u128)
                            .sum();
                        params.reduce((acc % p) as u64)
                    })
                    .collect()
            }
            Layer::AvgPool(a) => {
                let [ch, h, w] = chw(in_shape, "avgpool").expect("validated shape");
                let (oh, ow, k) = (h / a.kernel, w / a.kernel, a.kernel);
                let mult = enc(a.multiplier());
                let mut out = Vec::with_capacity(ch * oh * ow);
                for c in 0..ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: u128 = 0;
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc +=
                                        x[(c * h + oy * k + dy) * w + ox * k + dx].value() as u128;
                                }
                            }
                            out.push(params.reduce((acc % p * mult % p) as u64));
                        }
                    }
                }
                out
            }
            Layer::Flatten => x.to_vec(),
            Layer::Relu => panic!("relu has no linear part"),
        }
    }

    /// Adds the bias (one party only when working on shares).
    pub fn add_bias(&self, y: &mut [FieldElement], out_shape: &[usize], params: &FieldParams) {
        let (bias, per) = match self {
            Layer::Conv2d(c) => (&c.bias, out_shape[1] * out_shape[2]),
            Layer::FullyConnected(f) => (&f.bias, 1),
            _ => return,
        };
        for (i, v) in y.iter_mut().enumerate() {
            *v = params.add(*v, params.encode_wrapping(bias[i / per] as i128));
        }
    }
}

fn chw(shape: &[usize], what: &str) -> Result<[usize; 3], NnError> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(NnError::Shape(format!(
            "{what} needs a CxHxW input, got {shape:?}"
        ))),
    }
}

/// Signed shift right by `f` with round-to-nearest (ties toward +inf).
pub fn rescale_plain(v: FieldElement, f: u32, params: &FieldParams) -> FieldElement {
    if f == 0 {
        return v;
    }
    let x = params.decode(v);
    params.encode_wrapping(((x + (1i64 << (f - 1))) >> f) as i128)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub params: FieldParams,
    pub input_shape: Vec<usize>,
    pub input_frac_bits: u32,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Validates shapes, weight caps and per-layer parameters.
    pub fn new(
        params: FieldParams,
        input_shape: Vec<usize>,
        input_frac_bits: u32,
        layers: Vec<Layer>,
    ) -> Result<Self, NnError> {
        let model = Model {
            params,
            input_shape,
            input_frac_bits,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NnError::Shape(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let cap = 1i64 << QUANT_BITS;
        let half = self.params.half() as i64;
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| NnError::Layer {
                layer: i,
                msg: e.to_string(),
            })?;
            let (weights, bias, want_w, want_b): (&[i64], &[i64], usize, usize) = match layer {
                Layer::Conv2d(c) => (
                    &c.weights,
                    &c.bias,
                    c.out_channels * c.in_channels * c.kernel[0] * c.kernel[1],
                    c.out_channels,
                ),
                Layer::FullyConnected(f) => (
                    &f.weights,
                    &f.bias,
                    f.out_features * f.in_features,
                    f.out_features,
                ),
                Layer::AvgPool(a) => {
                    if a.multiplier() == 0 {
                        return Err(NnError::Layer {
                            layer: i,
                            msg: format!(
                                "avgpool window {} needs frac_bits >= {}",
                                a.kernel,
                                (a.kernel * a.kernel).next_power_of_two().trailing_zeros()
                            ),
                        });
                    }
                    continue;
                }
                _ => continue,
            };
            if weights.len() != want_w || bias.len() != want_b {
                return Err(NnError::Layer {
                    layer: i,
                    msg: format!(
                        "expected {want_w} weights and {want_b} biases, got {} and {}",
                        weights.len(),
                        bias.len()
                    ),
                });
            }
            if let Some(&w) = weights.iter().find(|w| w.abs() >= cap) {
                return Err(NnError::WeightCap { layer: i, value: w });
            }
            if let Some(&b) = bias.iter().find(|b| b.abs() >= half) {
                return Err(NnError::Layer {
                    layer: i,
                    msg: format!("bias {b} outside the field range"),
                });
            }
        }
        Ok(())
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer
                .output_shape(out.last().unwrap())
                .expect("validated model");
            out.push(next);
        }
        out
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.shapes().last().unwrap().iter().product()
    }

    pub fn relu_count(&self) -> usize {
        let shapes = self.shapes();
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .map(|(i, _)| shapes[i].iter().product::<usize>())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        if input.shape != self.input_shape {
            return Err(NnError::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape, input.shape
            )));
        }
        Ok(())
    }

    /// Runs the model with `relu(activation_index, x)` at every ReLU unit.
    pub(crate) fn run<F>(&self, input: &Tensor, mut relu: F) -> Result<Tensor, NnError>
    where
        F: FnMut(usize, FieldElement) -> Result<FieldElement, NnError>,
    {
        self.check_input(input)?;
        let params = &self.params;
        let mut shape = input.shape.clone();
        let mut data = input.data.clone();
        let mut index = 0usize;
        for layer in &self.layers {
            let out_shape = layer.output_shape(&shape)?;
            data = match layer {
                Layer::Relu => data
                    .into_iter()
                    .map(|x| {
                        let y = relu(index, x);
                        index += 1;
                        y
                    })
                    .collect::<Result<_, _>>()?,
                _ => {
                    let mut y = layer.apply_linear(&data, &shape, params);
                    layer.add_bias(&mut y, &out_shape, params);
                    let f = layer.rescale_bits();
                    y.into_iter().map(|v| rescale_plain(v, f, params)).collect()
                }
            };
            shape = out_shape;
        }
        Tensor::new(shape, data)
    }
}

/// Exact integer inference.
pub fn infer_plain(model: &Model, input: &Tensor) -> Result<Tensor, NnError> {
    let params = model.params;
    model.run(input, |_, x| Ok(exact_relu(x, &params)))
}

/// Signed inputs of every ReLU unit under exact inference, in activation order.
pub fn relu_inputs(model: &Model, input: &Tensor) -> Result<Vec<i64>, NnError> {
    let params = model.params;
    let mut xs = Vec::with_capacity(model.relu_count());
    model.run(input, |_, x| {
        xs.push(params.decode(x));
        Ok(exact_relu(x, &params))
    })?;
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fc(rows: &[&[i64]], bias: &[i64], f: u32) -> Layer {
        Layer::FullyConnected(FullyConnected {
            in_features: rows[0].len(),
            out_features: rows.len(),
            frac_bits: f,
            weights: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            bias: bias.to_vec(),
        })
    }

    #[test]
    fn fc_example() {
        let params = FieldParams::new(257).unwrap();
        let model = Model::new(
            params,
            vec![2],
            0,
            vec![fc(&[&[1, 2], &[3, 4]], &[0, 0], 0)],
        )
        .unwrap();
        let x = Tensor::from_signed(vec![2], &[5, 6], &params).unwrap();
        assert_eq!(
            infer_plain(&model, &x).unwrap().to_signed(&params),
            vec![17, 39]
        );
    }

    #[test]
    fn relu_inputs_are_pre_activations() {
        let params = FieldParams::new(257).unwrap();
        let layers = vec![
            fc(&[&[1, -2], &[3, 4]], &[0, 0], 0),
            Layer::Relu,
            fc(&[&[1, 1]], &[-1], 0),
        ];
        let model = Model::new(params, vec![2], 0, layers).unwrap();
        let x = Tensor::from_signed(vec![2], &[5, 6], &params).unwrap();
        assert_eq!(relu_inputs(&model, &x).unwrap(), vec![-7, 39]);
        assert_eq!(
            infer_plain(&model, &x).unwrap().to_signed(&params),
            vec![38]
        );
    }

    #[test]
    fn identity_1x1_conv() {
        let params = FieldParams::default();
        let conv = Layer::Conv2d(Conv2d {
            out_channels: 2,
            in_channels: 2,
            kernel: [1, 1],
            stride: 1,
            pad: 0,
            frac_bits: 0,
            weights: vec![1, 0, 0, 1],
            bias: vec![0, 0],
        });
        let model = Model::new(params, vec![2, 3, 3], 0, vec![conv]).unwrap();
        let vals: Vec<i64> = (0..18).map(|i| i * 7 - 60).collect();
        let x = Tensor::from_signed(vec![2, 3, 3], &vals, &params).unwrap();
        assert_eq!(infer_plain(&model, &x).unwrap(), x);
    }

    /// Independent oracle: i128 arithmetic on nested vectors.
    fn oracle(model: &Model, input: &[i64]) -> Vec<i64> {
        let mut shape = model.input_shape.clone();
        let mut x: Vec<i128> = input.iter().map(|&v| v as i128).collect();
        let round_shift = |v: i128, f: u32| if f == 0 { v } else { (v + (1 << (f - 1))) >> f };
        for layer in &model.layers {
            let out_shape = layer.output_shape(&shape).unwrap();
            x = match layer {
                Layer::Relu => x.iter().map(|&v| v.max(0)).collect(),
                Layer::Flatten => x,
                Layer::FullyConnected(f) => (0..f.out_features)
                    .map(|o| {
                        let s: i128 = (0..f.in_features)
                            .map(|i| f.weights[o * f.in_features + i] as i128 * x[i])
                            .sum();
                        round_shift(s + f.bias[o] as i128, f.frac_bits)
                    })
                    .collect(),
                Layer::Conv2d(c) => {
                    let (h, w) = (shape[1] as i64, shape[2] as i64);
                    let mut out = vec![];
                    for o in 0..c.out_channels {
                        for oy in 0..out_shape[1] {
                            for ox in 0..out_shape[2] {
                                let mut s = c.bias[o] as i128;
                                for ci in 0..c.in_channels {
                                    for ky in 0..c.kernel[0] {
                                        for kx in 0..c.kernel[1] {
                                            let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                                            let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                                let wi = ((o * c.in_channels + ci) * c.kernel[0]
                                                    + ky)
                                                    * c.kernel[1]
                                                    + kx;
                                                s += c.weights[wi] as i128
                                                    * x[(ci * h as usize + iy as usize)
                                                        * w as usize
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                                out.push(round_shift(s, c.frac_bits));
                            }
                        }
                    }
                    out
                }
                Layer::AvgPool(a) => {
                    let (h, w, k) = (shape[1], shape[2], a.kernel);
                    let mut out = vec![];
                    for c in 0..shape[0] {
                        for oy in 0..h / k {
                            for ox in 0..w / k {
                                let mut s = 0i128;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        s += x[(c * h + oy * k + dy) * w + ox * k + dx];
                                    }
                                }
                                out.push(round_shift(s * a.multiplier() as i128, a.frac_bits));
                            }
                        }
                    }
                    out
                }
            };
            shape = out_shape;
        }
        x.into_iter().map(|v| v as i64).collect()
    }

    #[test]
    fn random_models_match_wide_integer_oracle() {
        let params = FieldParams::default();
        for (arch, f) in [
            ("input:2x6x6,conv:3x3:s1:p1,relu,avgpool:2,flatten,fc:4", 6),
            ("input:12,fc:8,relu,fc:6,relu,fc:3", 0),
            ("input:1x7x7,conv:2x3:s2:p0,relu,flatten,fc:5,relu,fc:2", 4),
        ] {
            let spec = parse_arch(arch).unwrap();
            let opts = ModelGenOptions {
                frac_bits: f,
                ..Default::default()
            };
            let model = random_model(&spec, &opts, params, 17).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..100 {
                let bound = 1i64 << (f + 2);
                let input: Vec<i64> = (0..model.input_len())
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                let x = Tensor::from_signed(model.input_shape.clone(), &input, &params).unwrap();
                assert_eq!(
                    infer_plain(&model, &x).unwrap().to_signed(&params),
                    oracle(&model, &input),
                    "{arch}"
                );
            }
        }
    }

    #[test]
    fn rescale_consistency_across_scales() {
        // Same real-valued model quantized at f and f' > f agrees after scaling.
        let params = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xin: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = |f: u32| {
                let q = |v: f64| (v * (1u64 << f) as f64).round() as i64;
                let layer = Layer::FullyConnected(FullyConnected {
                    in_features: 4,
                    out_features: 3,
                    frac_bits: f,
                    weights: w.iter().map(|&v| q(v)).collect(),
                    bias: vec![0; 3],
                });
                let model = Model::new(params, vec![4], f, vec![layer]).unwrap();
                let x = Tensor::from_signed(
                    vec![4],
                    &xin.iter().map(|&v| q(v)).collect::<Vec<_>>(),
                    &params,
                )
                .unwrap();
                infer_plain(&model, &x)
                    .unwrap()
                    .to_signed(&params)
                    .into_iter()
                    .map(|v| v as f64 / (1u64 << f) as f64)
                    .collect::<Vec<_>>()
            };
            let (f, f2) = (8u32, 12u32);
            let (a, b) = (run(f), run(f2));
            // Four products plus one rounding per element at scale f.
            let tol = 2f64.powi(-(f as i32) + 1) * 4.0;
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= tol, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn validation_errors() {
        let params = FieldParams::default();
        let big = fc(&[&[1 << 15, 0]], &[0], 0);
        assert!(matches!(
            Model::new(params, vec![2], 0, vec![big]),
            Err(NnError::WeightCap {
                layer: 0,
                value: 32768
            })
        ));
        let mismatch = fc(&[&[1, 2, 3]], &[0], 0);
        assert!(matches!(
            Model::new(params, vec![2], 0, vec![mismatch]),
            Err(NnError::Layer { .. })
        ));
        let pool = Layer::AvgPool(AvgPool {
            kernel: 2,
            frac_bits: 0,
        });
        assert!(Model::new(params, vec![1, 4, 4], 0, vec![pool]).is_err());
        let model = Model::new(params, vec![2], 0, vec![fc(&[&[1, 2]], &[0], 0)]).unwrap();
        let wrong = Tensor::from_signed(vec![3], &[1, 2, 3], &params).unwrap();
        assert!(matches!(
            infer_plain(&model, &wrong),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn relu_count_and_shapes() {
        let spec = parse_arch("input:1x8x8,conv:4x3:s1:p1,relu,avgpool:2,flatten,fc:10").unwrap();
        let model = random_model(
            &spec,
            &ModelGenOptions::default(),
            FieldParams::default(),
            1,
        )
        .unwrap();
        assert_eq!(model.relu_count(), 4 * 8 * 8);
        assert_eq!(model.shapes().last().unwrap(), &vec![10]);
    }

    #[test]
    fn rescale_rounds_to_nearest() {
        let params = FieldParams::default();
        let r = |v: i64, f| params.decode(rescale_plain(params.encode(v).unwrap(), f, &params));
        assert_eq!(r(6, 2), 2);
        assert_eq!(r(5, 2), 1);
        assert_eq!(r(-6, 2), -1);
        assert_eq!(r(-7, 2), -2);
        assert_eq!(r(-7, 0), -7);
    }
}
