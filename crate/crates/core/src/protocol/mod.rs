//! Two-party inference: an input-independent offline phase followed by an
//! online phase over one ordered channel.
//!
//! Share layout: at every layer boundary the client's share of the activation
//! vector is a value it already knows from the offline phase, and the server
//! holds the difference. Linear layers are computed by the server on its share
//! alone; the client's output share was precomputed by the dealer. Each ReLU
//! unit consumes one garbled circuit and, for the sign variants, one Beaver
//! triple.

mod dealer;
mod material;
mod online;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::circuit::{CircuitError, ReluVariant, SignCircuitSpec};
use crate::field::{FieldElement, FieldParams};
use crate::garble::GarbleError;
use crate::nn::{Layer, Model, NnError, StochasticReluConfig};
use crate::transport::TransportError;

pub use dealer::{Dealer, TrustedDealer};
pub use material::{
    load_dealer_file, offline_phase, save_dealer_file, ClientMaterial, ClientReluLayer, ClientSign,
    ServerMaterial, ServerReluLayer,
};
pub use online::{
    connect, handshake_client, handshake_server, recv_client_material, run_client, run_local,
    run_server, send_client_material, serve, ClientMaterialSummary, SessionReport,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("peer configuration hash does not match")]
    ConfigMismatch,
    #[error("layer {layer}: {msg}")]
    Desync { layer: usize, msg: String },
    #[error("layer {layer}, unit {unit}: {source}")]
    Garble {
        layer: usize,
        unit: usize,
        #[source]
        source: GarbleError,
    },
    #[error("offline material: {0}")]
    Material(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

impl ProtocolError {
    /// Errors that end a running session, as opposed to bad local setup.
    pub fn is_abort(&self) -> bool {
        matches!(
            self,
            ProtocolError::Transport(_)
                | ProtocolError::ConfigMismatch
                | ProtocolError::Desync { .. }
                | ProtocolError::Garble { .. }
                | ProtocolError::Material(_)
        )
    }
}

/// How the `2^f` scale growth of linear layers is removed on shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescalePolicy {
    /// Each party shifts its own share. Off by at most one, and wrong with
    /// probability about `|x| / p`.
    Local,
    /// No rescaling; models with nonzero fractional bits are rejected.
    Disabled,
}

impl RescalePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            RescalePolicy::Local => "local",
            RescalePolicy::Disabled => "disabled",
        }
    }
}

impl fmt::Display for RescalePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RescalePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(RescalePolicy::Local),
            "disabled" | "none" | "off" => Ok(RescalePolicy::Disabled),
            other => Err(format!("unknown rescale policy `{other}` (local|disabled)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub params: FieldParams,
    pub variant: ReluVariant,
    /// `k` and `mode` apply to `SignStoch` only; `seed` is unused here.
    pub relu: StochasticReluConfig,
    pub rescale: RescalePolicy,
    pub client_seed: u64,
    pub server_seed: u64,
    pub dealer_seed: u64,
}

impl SessionConfig {
    /// Config with all party seeds derived from `seed`.
    pub fn new(
        params: FieldParams,
        variant: ReluVariant,
        relu: StochasticReluConfig,
        seed: u64,
    ) -> Self {
        SessionConfig {
            params,
            variant,
            relu,
            rescale: RescalePolicy::Local,
            client_seed: seed.wrapping_mul(3).wrapping_add(1),
            server_seed: seed.wrapping_mul(3).wrapping_add(2),
            dealer_seed: seed.wrapping_mul(3).wrapping_add(3),
        }
    }

    /// Truncated bits actually used by the circuit.
    pub fn k(&self) -> u32 {
        if self.variant == ReluVariant::SignStoch {
            self.relu.k
        } else {
            0
        }
    }

    pub fn circuit_spec(&self) -> SignCircuitSpec {
        SignCircuitSpec {
            m: self.params.bits(),
            k: self.k(),
            mode: self.relu.mode,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.k() >= self.params.bits() {
            return Err(ProtocolError::Config(format!(
                "truncation k = {} must be below m = {}",
                self.k(),
                self.params.bits()
            )));
        }
        Ok(())
    }

    /// Checks that `model` can run under this config.
    pub fn check_model(&self, model: &Model) -> Result<(), ProtocolError> {
        self.validate()?;
        if model.params != self.params {
            return Err(ProtocolError::Config(format!(
                "model prime {} differs from session prime {}",
                model.params.modulus(),
                self.params.modulus()
            )));
        }
        if self.rescale == RescalePolicy::Disabled {
            if let Some(i) = model.layers.iter().position(|l| l.rescale_bits() > 0) {
                return Err(ProtocolError::Config(format!(
                    "layer {i} needs rescaling but the rescale policy is disabled"
                )));
            }
        }
        Ok(())
    }

    /// Digest of the parameters both parties must agree on.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"privinfer session v1\0");
        h.update(self.params.modulus().to_le_bytes());
        h.update(self.variant.as_str().as_bytes());
        h.update([0]);
        h.update(self.k().to_le_bytes());
        if self.variant == ReluVariant::SignStoch {
            h.update(self.relu.mode.as_str().as_bytes());
        }
        h.update([0]);
        h.update(self.rescale.as_str().as_bytes());
        h.finalize().into()
    }
}

/// Public shape information the client needs without seeing the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub input_len: usize,
    /// `(model layer index, units)` for every ReLU layer.
    pub relu_layers: Vec<(usize, usize)>,
    pub output_len: usize,
}

impl Plan {
    pub fn of(model: &Model) -> Plan {
        let shapes = model.shapes();
        Plan {
            input_len: model.input_len(),
            relu_layers: model
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, Layer::Relu))
                .map(|(i, _)| (i, shapes[i].iter().product()))
                .collect(),
            output_len: model.output_len(),
        }
    }

    pub fn relu_count(&self) -> usize {
        self.relu_layers.iter().map(|&(_, n)| n).sum()
    }
}

/// Client-side share rescale by `f` bits.
pub fn truncate_client(c: FieldElement, f: u32, params: &FieldParams) -> FieldElement {
    if f == 0 {
        return c;
    }
    params.reduce(c.value() >> f)
}

/// Server-side share rescale by `f` bits, rounding to nearest.
pub fn truncate_server(s: FieldElement, f: u32, params: &FieldParams) -> FieldElement {
    if f == 0 {
        return s;
    }
    let shifted = params.add(s, params.reduce(1 << (f - 1)));
    params.neg(params.reduce(params.neg(shifted).value() >> f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faultmodel::FaultMode;
    use crate::nn::rescale_plain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: ReluVariant, k: u32, mode: FaultMode) -> SessionConfig {
        SessionConfig::new(
            FieldParams::default(),
            variant,
            StochasticReluConfig { k, mode, seed: 0 },
            1,
        )
    }

    #[test]
    fn hash_covers_agreed_fields_only() {
        let a = cfg(ReluVariant::SignStoch, 12, FaultMode::PosZero);
        let mut b = a;
        b.client_seed = 99;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(
            a.hash(),
            cfg(ReluVariant::SignStoch, 11, FaultMode::PosZero).hash()
        );
        assert_ne!(
            a.hash(),
            cfg(ReluVariant::SignStoch, 12, FaultMode::NegPass).hash()
        );
        assert_ne!(
            a.hash(),
            cfg(ReluVariant::SignNaive, 0, FaultMode::PosZero).hash()
        );
        let mut c = a;
        c.rescale = RescalePolicy::Disabled;
        assert_ne!(a.hash(), c.hash());
        // k and mode are irrelevant without truncation.
        assert_eq!(
            cfg(ReluVariant::ReluFull, 5, FaultMode::NegPass).hash(),
            cfg(ReluVariant::ReluFull, 0, FaultMode::PosZero).hash()
        );
    }

    #[test]
    fn k_must_be_below_m() {
        assert!(cfg(ReluVariant::SignStoch, 31, FaultMode::PosZero)
            .validate()
            .is_err());
        assert!(cfg(ReluVariant::SignStoch, 30, FaultMode::PosZero)
            .validate()
            .is_ok());
    }

    #[test]
    fn local_truncation_is_within_one() {
        let params = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut off_by_one, mut wrong) = (0, 0);
        let n = 100_000;
        for _ in 0..n {
            let x = params.encode(rng.gen_range(-(1 << 20)..(1 << 20))).unwrap();
            let c = params.random(&mut rng);
            let s = params.sub(x, c);
            let f = 8;
            let got = params.add(
                truncate_client(c, f, &params),
                truncate_server(s, f, &params),
            );
            let want = rescale_plain(x, f, &params);
            let diff = params.decode(params.sub(got, want));
            match diff {
                0 => {}
                -1 | 1 => off_by_one += 1,
                _ => wrong += 1,
            }
        }
        assert!(off_by_one < n / 2);
        // Wrap errors occur with probability about |x| / p < 2^-10.
        assert!(wrong < n / 500, "{wrong}");
    }
}
