//! Half-gates garbling with free XOR and point-and-permute.
//!
//! Every wire carries a 128-bit zero label `W0`; the one label is `W0 ^ delta`,
//! and `delta` has its low (color) bit set so the two labels of a wire always
//! have opposite colors. XOR and NOT gates cost nothing. Each AND gate emits
//! two ciphertexts.
//!
//! The hash is `H(x, j) = AES_K(s) ^ s` with `s = double(x) ^ j`, where `K` is
//! a fixed public key, `double` is multiplication by 2 in GF(2^128) and `j`
//! is `2g` or `2g + 1` for AND gate number `g`. Changing the key or the
//! tweak layout breaks compatibility with serialized circuits.
//!
//! # Serialized layout
//!
//! All integers are 4-byte little-endian.
//!
//! ```text
//! circuit_id | n_inputs | n_outputs | and_count | has_decode | commitment[32]
//! tables: and_count x (TG[16] | TE[16])
//! decode map: ceil(n_outputs / 8) bytes, present iff has_decode = 1
//! ```

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::circuit::{decode_map_bytes, BooleanCircuit, Bundle, Gate};

pub const LABEL_BYTES: usize = 16;
pub const HEADER_BYTES: usize = 5 * 4 + 32;

const FIXED_KEY: [u8; 16] = *b"privinfer-gc-prf";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GarbleError {
    #[error("expected {expected} input labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("garbled circuit does not match the circuit (id {expected:#010x} vs {got:#010x})")]
    CircuitMismatch { expected: u32, got: u32 },
    #[error("output label {wire} matches neither valid label")]
    Integrity { wire: usize },
    #[error("bundle `{name}` expects {expected} bits, got {got}")]
    Width {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("no input bundle named `{0}`")]
    UnknownBundle(String),
    #[error("malformed garbled circuit bytes: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Label(pub u128);

impl Label {
    #[inline]
    pub fn color(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn to_bytes(self) -> [u8; LABEL_BYTES] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(b: [u8; LABEL_BYTES]) -> Self {
        Label(u128::from_le_bytes(b))
    }
}

impl std::ops::BitXor for Label {
    type Output = Label;

    #[inline]
    fn bitxor(self, rhs: Label) -> Label {
        Label(self.0 ^ rhs.0)
    }
}

#[inline]
fn select(bit: bool, l: Label) -> Label {
    if bit {
        l
    } else {
        Label(0)
    }
}

struct Prf(Aes128);

impl Prf {
    fn new() -> Self {
        Prf(Aes128::new(GenericArray::from_slice(&FIXED_KEY)))
    }

    #[inline]
    fn hash(&self, x: Label, tweak: u64) -> Label {
        let doubled = (x.0 << 1) ^ if x.0 >> 127 == 1 { 0x87 } else { 0 };
        let s = doubled ^ tweak as u128;
        let mut block = GenericArray::from(s.to_le_bytes());
        self.0.encrypt_block(&mut block);
        Label(u128::from_le_bytes(block.into()) ^ s)
    }
}

/// FNV-1a over the circuit structure, used to bind a garbling to its circuit.
pub fn circuit_id(c: &BooleanCircuit) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    let mut eat = |v: u32| {
        for b in v.to_le_bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
    };
    eat(c.n_inputs() as u32);
    for g in c.gates() {
        match *g {
            Gate::Xor { a, b, .. } => {
                eat(0);
                eat(a);
                eat(b);
            }
            Gate::And { a, b, .. } => {
                eat(1);
                eat(a);
                eat(b);
            }
            Gate::Not { a, .. } => {
                eat(2);
                eat(a);
            }
        }
    }
    for &o in c.outputs() {
        eat(o);
    }
    h
}

fn seed_commitment(seed: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"privinfer garbling seed");
    hasher.update(seed.to_le_bytes());
    hasher.finalize().into()
}

/// Color bits of the output zero labels, packed little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeMap {
    n: usize,
    bits: Vec<u8>,
}

impl DecodeMap {
    fn from_labels(zero: &[Label]) -> Self {
        let mut bits = vec![0u8; decode_map_bytes(zero.len())];
        for (i, l) in zero.iter().enumerate() {
            bits[i / 8] |= (l.color() as u8) << (i % 8);
        }
        DecodeMap {
            n: zero.len(),
            bits,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }

    /// Color-bit translation. Does not detect tampered labels.
    pub fn decode(&self, labels: &[Label]) -> Result<Vec<bool>, GarbleError> {
        if labels.len() != self.n {
            return Err(GarbleError::LabelCount {
                expected: self.n,
                got: labels.len(),
            });
        }
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.color() ^ (self.bits[i / 8] >> (i % 8) & 1 == 1))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GarbledCircuit {
    pub circuit_id: u32,
    pub n_inputs: u32,
    pub n_outputs: u32,
    pub commitment: [u8; 32],
    pub tables: Vec<[Label; 2]>,
    pub decode: Option<DecodeMap>,
}

impl GarbledCircuit {
    pub fn and_count(&self) -> usize {
        self.tables.len()
    }

    /// Copy without the decode map, for parties that must not learn outputs.
    pub fn strip_decode(&self) -> Self {
        GarbledCircuit {
            decode: None,
            ..self.clone()
        }
    }

    /// Table plus decode-map bytes, comparable to the circuit cost estimate.
    pub fn payload_bytes(&self) -> usize {
        self.tables.len() * 2 * LABEL_BYTES + self.decode.as_ref().map_or(0, |d| d.byte_len())
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + self.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        for v in [
            self.circuit_id,
            self.n_inputs,
            self.n_outputs,
            self.tables.len() as u32,
            self.decode.is_some() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.commitment);
        for [tg, te] in &self.tables {
            out.extend_from_slice(&tg.to_bytes());
            out.extend_from_slice(&te.to_bytes());
        }
        if let Some(d) = &self.decode {
            out.extend_from_slice(&d.bits);
        }
        out
    }

    /// Parses one garbled circuit; returns it and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), GarbleError> {
        if bytes.len() < HEADER_BYTES {
            return Err(GarbleError::Format(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (circuit_id, n_inputs, n_outputs, and_count, has_decode) =
            (word(0), word(1), word(2), word(3) as usize, word(4));
        if has_decode > 1 {
            return Err(GarbleError::Format(format!("decode flag {has_decode}")));
        }
        let commitment: [u8; 32] = bytes[20..52].try_into().unwrap();
        let map_len = if has_decode == 1 {
            decode_map_bytes(n_outputs as usize)
        } else {
            0
        };
        let total = and_count
            .checked_mul(2 * LABEL_BYTES)
            .and_then(|t| t.checked_add(HEADER_BYTES + map_len))
            .ok_or_else(|| GarbleError::Format("size overflow".into()))?;
        if bytes.len() < total {
            return Err(GarbleError::Format(format!(
                "need {total} bytes, have {}",
                bytes.len()
            )));
        }
        let label =
            |off: usize| Label::from_bytes(bytes[off..off + LABEL_BYTES].try_into().unwrap());
        let tables = (0..and_count)
            .map(|g| {
                let off = HEADER_BYTES + g * 2 * LABEL_BYTES;
                [label(off), label(off + LABEL_BYTES)]
            })
            .collect();
        let decode = (has_decode == 1).then(|| {
            let start = total - map_len;
            DecodeMap {
                n: n_outputs as usize,
                bits: bytes[start..total].to_vec(),
            }
        });
        Ok((
            GarbledCircuit {
                circuit_id,
                n_inputs,
                n_outputs,
                commitment,
                tables,
                decode,
            },
            total,
        ))
    }
}

/// Garbler-side input label source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputEncoder {
    zero: Vec<Label>,
    delta: Label,
}

impl InputEncoder {
    pub fn label(&self, wire: usize, bit: bool) -> Label {
        self.zero[wire] ^ select(bit, self.delta)
    }

    /// Labels for a full input assignment in wire order.
    pub fn encode(&self, bits: &[bool]) -> Result<Vec<Label>, GarbleError> {
        if bits.len() != self.zero.len() {
            return Err(GarbleError::LabelCount {
                expected: self.zero.len(),
                got: bits.len(),
            });
        }
        Ok(bits
            .iter()
            .enumerate()
            .map(|(w, &b)| self.label(w, b))
            .collect())
    }

    pub fn encode_bundle(&self, bundle: &Bundle, bits: &[bool]) -> Result<Vec<Label>, GarbleError> {
        if bits.len() != bundle.width() {
            return Err(GarbleError::Width {
                name: bundle.name.clone(),
                expected: bundle.width(),
                got: bits.len(),
            });
        }
        Ok(bundle
            .wires
            .iter()
            .zip(bits)
            .map(|(&w, &b)| self.label(w as usize, b))
            .collect())
    }

    pub fn encode_named(
        &self,
        circuit: &BooleanCircuit,
        name: &str,
        bits: &[bool],
    ) -> Result<Vec<Label>, GarbleError> {
        let bundle = circuit
            .bundle(name)
            .ok_or_else(|| GarbleError::UnknownBundle(name.to_string()))?;
        self.encode_bundle(bundle, bits)
    }
}

/// Garbler-side output decoder that rejects labels it did not produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputDecoder {
    zero: Vec<Label>,
    delta: Label,
}

impl OutputDecoder {
    pub fn decode(&self, labels: &[Label]) -> Result<Vec<bool>, GarbleError> {
        if labels.len() != self.zero.len() {
            return Err(GarbleError::LabelCount {
                expected: self.zero.len(),
                got: labels.len(),
            });
        }
        labels
            .iter()
            .zip(&self.zero)
            .enumerate()
            .map(|(wire, (&l, &z))| {
                if l == z {
                    Ok(false)
                } else if l == z ^ self.delta {
                    Ok(true)
                } else {
                    Err(GarbleError::Integrity { wire })
                }
            })
            .collect()
    }
}

/// Everything the garbler holds after garbling one circuit.
#[derive(Debug, Clone)]
pub struct Garbling {
    pub circuit: GarbledCircuit,
    pub encoder: InputEncoder,
    pub decoder: OutputDecoder,
}

/// Garbles `c`. All randomness comes from `seed`.
pub fn garble(c: &BooleanCircuit, seed: u64) -> Garbling {
    let prf = Prf::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let delta = Label(rng.gen::<u128>() | 1);
    let mut wires: Vec<Label> = Vec::with_capacity(c.n_wires());
    wires.extend((0..c.n_inputs()).map(|_| Label(rng.gen())));
    let mut tables = Vec::with_capacity(c.and_count());
    for gate in c.gates() {
        let w = match *gate {
            Gate::Xor { a, b, .. } => wires[a as usize] ^ wires[b as usize],
            Gate::Not { a, .. } => wires[a as usize] ^ delta,
            Gate::And { a, b, .. } => {
                let j = 2 * tables.len() as u64;
                let (a0, b0) = (wires[a as usize], wires[b as usize]);
                let (a1, b1) = (a0 ^ delta, b0 ^ delta);
                let (pa, pb) = (a0.color(), b0.color());
                let (ha0, ha1) = (prf.hash(a0, j), prf.hash(a1, j));
                let (hb0, hb1) = (prf.hash(b0, j + 1), prf.hash(b1, j + 1));
                let tg = ha0 ^ ha1 ^ select(pb, delta);
                let wg0 = ha0 ^ select(pa, tg);
                let te = hb0 ^ hb1 ^ a0;
                let we0 = hb0 ^ select(pb, te ^ a0);
                tables.push([tg, te]);
                wg0 ^ we0
            }
        };
        wires.push(w);
    }
    let out_zero: Vec<Label> = c.outputs().iter().map(|&o| wires[o as usize]).collect();
    wires.truncate(c.n_inputs());
    Garbling {
        circuit: GarbledCircuit {
            circuit_id: circuit_id(c),
            n_inputs: c.n_inputs() as u32,
            n_outputs: c.outputs().len() as u32,
            commitment: seed_commitment(seed),
            tables,
            decode: Some(DecodeMap::from_labels(&out_zero)),
        },
        encoder: InputEncoder { zero: wires, delta },
        decoder: OutputDecoder {
            zero: out_zero,
            delta,
        },
    }
}

/// Evaluates a garbled circuit on one label per input wire.
pub fn eval(
    gc: &GarbledCircuit,
    c: &BooleanCircuit,
    inputs: &[Label],
) -> Result<Vec<Label>, GarbleError> {
    let id = circuit_id(c);
    if id != gc.circuit_id {
        return Err(GarbleError::CircuitMismatch {
            expected: gc.circuit_id,
            got: id,
        });
    }
    if inputs.len() != c.n_inputs() {
        return Err(GarbleError::LabelCount {
            expected: c.n_inputs(),
            got: inputs.len(),
        });
    }
    if gc.tables.len() != c.and_count() {
        return Err(GarbleError::Format(format!(
            "{} tables for {} AND gates",
            gc.tables.len(),
            c.and_count()
        )));
    }
    let prf = Prf::new();
    let mut wires: Vec<Label> = Vec::with_capacity(c.n_wires());
    wires.extend_from_slice(inputs);
    let mut g = 0usize;
    for gate in c.gates() {
        let w = match *gate {
            Gate::Xor { a, b, .. } => wires[a as usize] ^ wires[b as usize],
            Gate::Not { a, .. } => wires[a as usize],
            Gate::And { a, b, .. } => {
                let [tg, te] = gc.tables[g];
                let j = 2 * g as u64;
                g += 1;
                let (la, lb) = (wires[a as usize], wires[b as usize]);
                let wg = prf.hash(la, j) ^ select(la.color(), tg);
                let we = prf.hash(lb, j + 1) ^ select(lb.color(), te ^ la);
                wg ^ we
            }
        };
        wires.push(w);
    }
    Ok(c.outputs().iter().map(|&o| wires[o as usize]).collect())
}
