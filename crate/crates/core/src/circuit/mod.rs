//! Boolean circuits over XOR/AND/NOT gates.
//!
//! Wires `0..n_inputs` are inputs, assigned bundle by bundle in declaration
//! order. Gate `i` drives wire `n_inputs + i`, so a well-formed gate list is
//! already in topological order. Bundles are little-endian: the first wire
//! carries the least significant bit.
//!
//! # Text dump format
//!
//! ```text
//! CIRCUIT <n_wires> <n_gates>
//! INPUT <name> <garbler|evaluator> <wire>...
//! OUTPUT <wire>...
//! GATE <out> XOR <in1> <in2>
//! GATE <out> AND <in1> <in2>
//! GATE <out> NOT <in1>
//! ```
//!
//! Header lines come first (one `INPUT` per bundle, in wire order, then one
//! `OUTPUT`), followed by one `GATE` line per gate. Blank lines and lines
//! starting with `#` are ignored.

mod builder;
mod synth;

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

pub use builder::{
    build_adder, build_comparator, build_mux, build_subtractor, Bit, CircuitBuilder,
};
pub use synth::{synth, ReluVariant, SignCircuitSpec};

pub type WireId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CircuitError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("malformed circuit: {0}")]
    Malformed(String),
    #[error("expected {expected} input bundles, got {got}")]
    MissingBundle { expected: usize, got: usize },
    #[error("bundle `{name}` has width {expected}, got {got} bits")]
    Width {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gate {
    Xor { a: WireId, b: WireId, out: WireId },
    And { a: WireId, b: WireId, out: WireId },
    Not { a: WireId, out: WireId },
}

impl Gate {
    pub fn out(&self) -> WireId {
        match *self {
            Gate::Xor { out, .. } | Gate::And { out, .. } | Gate::Not { out, .. } => out,
        }
    }

    fn inputs(&self) -> [WireId; 2] {
        match *self {
            Gate::Xor { a, b, .. } | Gate::And { a, b, .. } => [a, b],
            Gate::Not { a, .. } => [a, a],
        }
    }
}

/// Which garbling party supplies a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Garbler,
    Evaluator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub name: String,
    pub owner: Owner,
    pub wires: Vec<WireId>,
}

impl Bundle {
    pub fn width(&self) -> usize {
        self.wires.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BooleanCircuit {
    n_inputs: u32,
    inputs: Vec<Bundle>,
    gates: Vec<Gate>,
    outputs: Vec<WireId>,
}

/// Gate census and garbled-size estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitCost {
    pub and_count: usize,
    pub xor_count: usize,
    pub not_count: usize,
    pub estimated_garbled_bytes: usize,
}

/// Bytes of the color-bit decode map for `n_outputs` wires.
pub fn decode_map_bytes(n_outputs: usize) -> usize {
    n_outputs.div_ceil(8)
}

impl BooleanCircuit {
    pub fn new(
        inputs: Vec<Bundle>,
        gates: Vec<Gate>,
        outputs: Vec<WireId>,
    ) -> Result<Self, CircuitError> {
        let mut next: WireId = 0;
        for bundle in &inputs {
            for &w in &bundle.wires {
                if w != next {
                    return Err(CircuitError::Malformed(format!(
                        "bundle `{}` wire {w} out of order (expected {next})",
                        bundle.name
                    )));
                }
                next += 1;
            }
        }
        let n_inputs = next;
        for (i, gate) in gates.iter().enumerate() {
            let expect = n_inputs + i as WireId;
            if gate.out() != expect {
                return Err(CircuitError::Malformed(format!(
                    "gate {i} drives wire {} (expected {expect})",
                    gate.out()
                )));
            }
            if gate.inputs().iter().any(|&w| w >= expect) {
                return Err(CircuitError::Malformed(format!(
                    "gate {i} reads a wire not yet defined"
                )));
            }
        }
        let n_wires = n_inputs + gates.len() as WireId;
        if let Some(&w) = outputs.iter().find(|&&w| w >= n_wires) {
            return Err(CircuitError::Malformed(format!(
                "output wire {w} undefined"
            )));
        }
        Ok(BooleanCircuit {
            n_inputs,
            inputs,
            gates,
            outputs,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs as usize
    }

    pub fn n_wires(&self) -> usize {
        self.n_inputs as usize + self.gates.len()
    }

    pub fn inputs(&self) -> &[Bundle] {
        &self.inputs
    }

    pub fn bundle(&self, name: &str) -> Option<&Bundle> {
        self.inputs.iter().find(|b| b.name == name)
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn outputs(&self) -> &[WireId] {
        &self.outputs
    }

    /// Evaluates on per-bundle bit vectors given in declaration order.
    pub fn eval_plain(&self, inputs: &[Vec<bool>]) -> Result<Vec<bool>, CircuitError> {
        let flat = self.flatten_inputs(inputs)?;
        Ok(self.eval_wires(&flat))
    }

    /// Concatenates per-bundle bits into wire order after checking widths.
    pub fn flatten_inputs(&self, inputs: &[Vec<bool>]) -> Result<Vec<bool>, CircuitError> {
        if inputs.len() != self.inputs.len() {
            return Err(CircuitError::MissingBundle {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.n_inputs());
        for (bundle, bits) in self.inputs.iter().zip(inputs) {
            if bits.len() != bundle.width() {
                return Err(CircuitError::Width {
                    name: bundle.name.clone(),
                    expected: bundle.width(),
                    got: bits.len(),
                });
            }
            flat.extend_from_slice(bits);
        }
        Ok(flat)
    }

    /// Evaluates on a flat input assignment of length `n_inputs`.
    ///
    /// # Panics
    /// If `flat` has the wrong length.
    pub fn eval_wires(&self, flat: &[bool]) -> Vec<bool> {
        assert_eq!(flat.len(), self.n_inputs(), "input assignment length");
        let mut wires = Vec::with_capacity(self.n_wires());
        wires.extend_from_slice(flat);
        for gate in &self.gates {
            let v = match *gate {
                Gate::Xor { a, b, .. } => wires[a as usize] ^ wires[b as usize],
                Gate::And { a, b, .. } => wires[a as usize] & wires[b as usize],
                Gate::Not { a, .. } => !wires[a as usize],
            };
            wires.push(v);
        }
        self.outputs.iter().map(|&w| wires[w as usize]).collect()
    }

    pub fn cost(&self, label_bytes: usize) -> CircuitCost {
        let mut cost = CircuitCost {
            and_count: 0,
            xor_count: 0,
            not_count: 0,
            estimated_garbled_bytes: 0,
        };
        for gate in &self.gates {
            match gate {
                Gate::Xor { .. } => cost.xor_count += 1,
                Gate::And { .. } => cost.and_count += 1,
                Gate::Not { .. } => cost.not_count += 1,
            }
        }
        cost.estimated_garbled_bytes =
            cost.and_count * 2 * label_bytes + decode_map_bytes(self.outputs.len());
        cost
    }

    pub fn and_count(&self) -> usize {
        self.gates
            .iter()
            .filter(|g| matches!(g, Gate::And { .. }))
            .count()
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CIRCUIT {} {}", self.n_wires(), self.gates.len());
        for b in &self.inputs {
            let owner = match b.owner {
                Owner::Garbler => "garbler",
                Owner::Evaluator => "evaluator",
            };
            let _ = write!(s, "INPUT {} {}", b.name, owner);
            for w in &b.wires {
                let _ = write!(s, " {w}");
            }
            s.push('\n');
        }
        s.push_str("OUTPUT");
        for w in &self.outputs {
            let _ = write!(s, " {w}");
        }
        s.push('\n');
        for g in &self.gates {
            let _ = match *g {
                Gate::Xor { a, b, out } => writeln!(s, "GATE {out} XOR {a} {b}"),
                Gate::And { a, b, out } => writeln!(s, "GATE {out} AND {a} {b}"),
                Gate::Not { a, out } => writeln!(s, "GATE {out} NOT {a}"),
            };
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CircuitError> {
        let mut inputs = Vec::new();
        let mut outputs = None;
        let mut gates = Vec::new();
        let mut header = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: &str| CircuitError::Parse {
                line,
                msg: msg.to_string(),
            };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = raw.split_whitespace().collect();
            let num = |t: &str| {
                t.parse::<u32>()
                    .map_err(|_| err(&format!("bad number `{t}`")))
            };
            match toks[0] {
                "CIRCUIT" if toks.len() == 3 => {
                    header = Some((num(toks[1])?, num(toks[2])?));
                }
                "INPUT" if toks.len() >= 3 => {
                    let owner = match toks[2] {
                        "garbler" => Owner::Garbler,
                        "evaluator" => Owner::Evaluator,
                        other => return Err(err(&format!("unknown owner `{other}`"))),
                    };
                    let wires = toks[3..].iter().map(|t| num(t)).collect::<Result<_, _>>()?;
                    inputs.push(Bundle {
                        name: toks[1].to_string(),
                        owner,
                        wires,
                    });
                }
                "OUTPUT" => {
                    let wires: Vec<WireId> =
                        toks[1..].iter().map(|t| num(t)).collect::<Result<_, _>>()?;
                    outputs = Some(wires);
                }
                "GATE" if toks.len() >= 4 => {
                    let out = num(toks[1])?;
                    let gate = match (toks[2], toks.len()) {
                        ("XOR", 5) => Gate::Xor {
                            a: num(toks[3])?,
                            b: num(toks[4])?,
                            out,
                        },
                        ("AND", 5) => Gate::And {
                            a: num(toks[3])?,
                            b: num(toks[4])?,
                            out,
                        },
                        ("NOT", 4) => Gate::Not {
                            a: num(toks[3])?,
                            out,
                        },
                        _ => return Err(err("malformed gate")),
                    };
                    gates.push(gate);
                }
                _ => return Err(err("unrecognized line")),
            }
        }
        let (n_wires, n_gates) = header.ok_or(CircuitError::Parse {
            line: 0,
            msg: "missing CIRCUIT header".into(),
        })?;
        let circuit = BooleanCircuit::new(inputs, gates, outputs.unwrap_or_default())?;
        if circuit.n_wires() != n_wires as usize || circuit.gates.len() != n_gates as usize {
            return Err(CircuitError::Parse {
                line: 0,
                msg: "header counts disagree with body".into(),
            });
        }
        Ok(circuit)
    }
}

/// Little-endian bit decomposition of the low `width` bits of `v`.
pub fn to_bits(v: u64, width: usize) -> Vec<bool> {
    (0..width).map(|i| i < 64 && (v >> i) & 1 == 1).collect()
}

pub fn from_bits(bits: &[bool]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | ((b as u64) << i))
}

/// Random well-formed circuit, used to fuzz evaluators and garbling.
///
/// With `xor_only` the circuit is linear: only XOR gates are emitted.
pub fn random_circuit<R: Rng + ?Sized>(
    rng: &mut R,
    n_inputs: usize,
    n_gates: usize,
    n_outputs: usize,
    xor_only: bool,
) -> BooleanCircuit {
    assert!(n_inputs >= 1);
    let split = rng.gen_range(0..=n_inputs);
    let inputs = [
        ("g", Owner::Garbler, 0..split),
        ("e", Owner::Evaluator, split..n_inputs),
    ]
    .into_iter()
    .map(|(name, owner, range)| Bundle {
        name: name.into(),
        owner,
        wires: range.map(|w| w as WireId).collect(),
    })
    .collect();
    let mut gates = Vec::with_capacity(n_gates);
    for i in 0..n_gates {
        let live = (n_inputs + i) as WireId;
        let out = live;
        let a = rng.gen_range(0..live);
        let b = rng.gen_range(0..live);
        let gate = match if xor_only { 0 } else { rng.gen_range(0..3) } {
            0 => Gate::Xor { a, b, out },
            1 => Gate::And { a, b, out },
            _ => Gate::Not { a, out },
        };
        gates.push(gate);
    }
    let total = (n_inputs + n_gates) as WireId;
    let outputs = (0..n_outputs).map(|_| rng.gen_range(0..total)).collect();
    BooleanCircuit::new(inputs, gates, outputs).expect("generator builds valid circuits")
}
