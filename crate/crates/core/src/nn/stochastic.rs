//! Cleartext simulator of the stochastic ReLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, NnError, Tensor};
use crate::faultmodel::{exact_relu, stochastic_relu, FaultMode};
use crate::field::{FieldElement, FieldParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StochasticReluConfig {
    pub k: u32,
    pub mode: FaultMode,
    pub seed: u64,
}

/// Samples a mask `t`, splits `x` into `(x + t, -t)` and applies the
/// truncated share comparison. Returns `x * sign~(x)`.
pub fn stochastic_relu_sim<R: Rng + ?Sized>(
    x: FieldElement,
    cfg: &StochasticReluConfig,
    rng: &mut R,
    params: &FieldParams,
) -> FieldElement {
    let t = params.random(rng);
    stochastic_relu(x, t, cfg.k, cfg.mode, params)
}

/// Where the per-activation masks `t` come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Activation `i` draws from ChaCha8 seeded with the seed, stream `i`.
    Seeded(u64),
    /// Masks recorded elsewhere, e.g. by the two-party protocol.
    Trace(&'a [FieldElement]),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StochasticRun {
    pub output: Tensor,
    pub activations: usize,
    /// Activations whose output differs from the exact ReLU.
    pub faults: usize,
    pub masks: Vec<FieldElement>,
}

impl StochasticRun {
    pub fn fault_rate(&self) -> f64 {
        if self.activations == 0 {
            0.0
        } else {
            self.faults as f64 / self.activations as f64
        }
    }
}

fn seeded_mask(seed: u64, index: usize, params: &FieldParams) -> FieldElement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    params.random(&mut rng)
}

/// Inference with every ReLU replaced by the stochastic ReLU.
pub fn infer_stochastic_with(
    model: &Model,
    input: &Tensor,
    k: u32,
    mode: FaultMode,
    masks: MaskSource<'_>,
) -> Result<StochasticRun, NnError> {
    let params = model.params;
    if k >= params.bits() {
        return Err(NnError::Arch(format!(
            "truncation k = {k} must be below m = {}",
            params.bits()
        )));
    }
    let mut used = Vec::new();
    let mut faults = 0usize;
    let output = model.run(input, |i, x| {
        let t = match masks {
            MaskSource::Seeded(seed) => seeded_mask(seed, i, &params),
            MaskSource::Trace(trace) => *trace.get(i).ok_or(NnError::TraceExhausted(i))?,
        };
        used.push(t);
        let y = stochastic_relu(x, t, k, mode, &params);
        faults += (y != exact_relu(x, &params)) as usize;
        Ok(y)
    })?;
    Ok(StochasticRun {
        output,
        activations: used.len(),
        faults,
        masks: used,
    })
}

pub fn infer_stochastic(
    model: &Model,
    input: &Tensor,
    cfg: &StochasticReluConfig,
) -> Result<Tensor, NnError> {
    Ok(infer_stochastic_with(model, input, cfg.k, cfg.mode, MaskSource::Seeded(cfg.seed))?.output)
}
