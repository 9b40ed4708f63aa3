//! Stand-in for the offline cryptography.
//!
//! A real deployment computes the linear precomputation with homomorphic
//! encryption and delivers garbled-circuit labels with oblivious transfer.
//! Both are functionalities with one output per party, so a trusted dealer
//! that computes them in the clear gives the same online algebra and costs.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::circuit::Bundle;
use crate::field::{FieldElement, FieldParams};
use crate::garble::{GarbleError, InputEncoder, Label};
use crate::nn::Layer;
use crate::sharing::{gen_triples, BeaverTriple};

pub trait Dealer {
    /// The client's output of the linear precomputation: `L(client_in) - server_mask`.
    fn linear(
        &mut self,
        layer: &Layer,
        in_shape: &[usize],
        client_in: &[FieldElement],
        server_mask: &[FieldElement],
        params: &FieldParams,
    ) -> Vec<FieldElement>;

    /// Labels for the evaluator's bits of one bundle; the garbler supplies the
    /// encoder and learns nothing about `bits`.
    fn transfer_labels(
        &mut self,
        encoder: &InputEncoder,
        bundle: &Bundle,
        bits: &[bool],
    ) -> Result<Vec<Label>, GarbleError>;

    fn triples(&mut self, n: usize, params: &FieldParams) -> Vec<BeaverTriple>;
}

/// Dealer that computes everything in the clear.
#[derive(Debug, Clone)]
pub struct TrustedDealer {
    rng: ChaCha20Rng,
}

impl TrustedDealer {
    pub fn new(seed: u64) -> Self {
        TrustedDealer {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }
}

impl Dealer for TrustedDealer {
    fn linear(
        &mut self,
        layer: &Layer,
        in_shape: &[usize],
        client_in: &[FieldElement],
        server_mask: &[FieldElement],
        params: &FieldParams,
    ) -> Vec<FieldElement> {
        let y = layer.apply_linear(client_in, in_shape, params);
        assert_eq!(y.len(), server_mask.len(), "mask length");
        y.iter()
            .zip(server_mask)
            .map(|(&a, &s)| params.sub(a, s))
            .collect()
    }

    fn transfer_labels(
        &mut self,
        encoder: &InputEncoder,
        bundle: &Bundle,
        bits: &[bool],
    ) -> Result<Vec<Label>, GarbleError> {
        encoder.encode_bundle(bundle, bits)
    }

    fn triples(&mut self, n: usize, params: &FieldParams) -> Vec<BeaverTriple> {
        gen_triples(n, &mut self.rng, params)
    }
}
