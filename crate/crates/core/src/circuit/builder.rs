//! Gate-level construction with constant folding, plus the arithmetic
//! fragments (ripple-carry adder, subtractor, comparator, multiplexer).

use super::{BooleanCircuit, Bundle, CircuitError, Gate, Owner, WireId};

/// A builder-time bit: either a known constant or a circuit wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bit {
    Const(bool),
    Wire(WireId),
}

#[derive(Debug, Default)]
pub struct CircuitBuilder {
    inputs: Vec<Bundle>,
    gates: Vec<Gate>,
    next: WireId,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an input bundle. All inputs must precede the first gate.
    pub fn input(&mut self, name: &str, owner: Owner, width: usize) -> Vec<Bit> {
        assert!(
            self.gates.is_empty(),
            "inputs must be declared before gates"
        );
        let wires: Vec<WireId> = (self.next..self.next + width as WireId).collect();
        self.next += width as WireId;
        self.inputs.push(Bundle {
            name: name.to_string(),
            owner,
            wires: wires.clone(),
        });
        wires.into_iter().map(Bit::Wire).collect()
    }

    fn push(&mut self, make: impl FnOnce(WireId) -> Gate) -> Bit {
        let out = self.next;
        self.gates.push(make(out));
        self.next += 1;
        Bit::Wire(out)
    }

    pub fn xor(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(x), Bit::Const(y)) => Bit::Const(x ^ y),
            (Bit::Const(false), w) | (w, Bit::Const(false)) => w,
            (Bit::Const(true), w) | (w, Bit::Const(true)) => self.not(w),
            (Bit::Wire(x), Bit::Wire(y)) if x == y => Bit::Const(false),
            (Bit::Wire(a), Bit::Wire(b)) => self.push(|out| Gate::Xor { a, b, out }),
        }
    }

    pub fn and(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(x), Bit::Const(y)) => Bit::Const(x & y),
            (Bit::Const(false), _) | (_, Bit::Const(false)) => Bit::Const(false),
            (Bit::Const(true), w) | (w, Bit::Const(true)) => w,
            (Bit::Wire(x), Bit::Wire(y)) if x == y => a,
            (Bit::Wire(a), Bit::Wire(b)) => self.push(|out| Gate::And { a, b, out }),
        }
    }

    pub fn not(&mut self, a: Bit) -> Bit {
        match a {
            Bit::Const(x) => Bit::Const(!x),
            Bit::Wire(a) => self.push(|out| Gate::Not { a, out }),
        }
    }

    pub fn constant(&self, value: u64, width: usize) -> Vec<Bit> {
        super::to_bits(value, width)
            .into_iter()
            .map(Bit::Const)
            .collect()
    }

    /// Carry recurrence `c' = ((a ^ c) & (b ^ c)) ^ c`: one AND per bit.
    fn carry(&mut self, a: Bit, b: Bit, c: Bit) -> Bit {
        let ac = self.xor(a, c);
        let bc = self.xor(b, c);
        let t = self.and(ac, bc);
        self.xor(t, c)
    }

    /// `a + b + carry_in` over equal widths; returns the sum bits and carry-out.
    pub fn add_with_carry(&mut self, a: &[Bit], b: &[Bit], carry_in: Bit) -> (Vec<Bit>, Bit) {
        assert_eq!(a.len(), b.len(), "adder operand widths");
        let mut c = carry_in;
        let mut sum = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            let xy = self.xor(x, y);
            sum.push(self.xor(xy, c));
            c = self.carry(x, y, c);
        }
        (sum, c)
    }

    pub fn add(&mut self, a: &[Bit], b: &[Bit]) -> (Vec<Bit>, Bit) {
        self.add_with_carry(a, b, Bit::Const(false))
    }

    /// `a - b` modulo `2^width`, with borrow-out set when `a < b`.
    pub fn sub(&mut self, a: &[Bit], b: &[Bit]) -> (Vec<Bit>, Bit) {
        let nb: Vec<Bit> = b.iter().map(|&x| self.not(x)).collect();
        let (diff, carry) = self.add_with_carry(a, &nb, Bit::Const(true));
        let borrow = self.not(carry);
        (diff, borrow)
    }

    /// Carry-out of `a + !b + 1`, i.e. `[a >= b]`, without the sum bits.
    fn geq(&mut self, a: &[Bit], b: &[Bit]) -> Bit {
        assert_eq!(a.len(), b.len(), "comparator operand widths");
        let mut c = Bit::Const(true);
        for (&x, &y) in a.iter().zip(b) {
            let ny = self.not(y);
            c = self.carry(x, ny, c);
        }
        c
    }

    /// `[a <= b]` on unsigned operands.
    pub fn le(&mut self, a: &[Bit], b: &[Bit]) -> Bit {
        self.geq(b, a)
    }

    /// `[a < b]` on unsigned operands.
    pub fn lt(&mut self, a: &[Bit], b: &[Bit]) -> Bit {
        let ge = self.geq(a, b);
        self.not(ge)
    }

    /// `s ? a : b`, one AND per bit.
    pub fn mux(&mut self, s: Bit, a: &[Bit], b: &[Bit]) -> Vec<Bit> {
        assert_eq!(a.len(), b.len(), "mux operand widths");
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = self.xor(x, y);
                let t = self.and(s, d);
                self.xor(y, t)
            })
            .collect()
    }

    /// Finalizes with the given output bits. Constant outputs are materialized
    /// from wire 0 as `w ^ w` (and its negation), which garble for free.
    pub fn finish(mut self, outputs: &[Bit]) -> Result<BooleanCircuit, CircuitError> {
        let mut zero = None;
        let mut one = None;
        let mut wires = Vec::with_capacity(outputs.len());
        for &bit in outputs {
            let w = match bit {
                Bit::Wire(w) => w,
                Bit::Const(v) => {
                    if self.next == 0 {
                        return Err(CircuitError::Parameter(
                            "constant output in a circuit without wires".into(),
                        ));
                    }
                    let z = match zero {
                        Some(z) => z,
                        None => {
                            let z = self.push(|out| Gate::Xor { a: 0, b: 0, out });
                            zero = Some(z);
                            z
                        }
                    };
                    let b = if v {
                        match one {
                            Some(o) => o,
                            None => {
                                let Bit::Wire(zw) = z else { unreachable!() };
                                let o = self.push(|out| Gate::Not { a: zw, out });
                                one = Some(o);
                                o
                            }
                        }
                    } else {
                        z
                    };
                    let Bit::Wire(w) = b else { unreachable!() };
                    w
                }
            };
            wires.push(w);
        }
        BooleanCircuit::new(self.inputs, self.gates, wires)
    }
}

fn check_width(m: usize) -> Result<(), CircuitError> {
    if m == 0 {
        Err(CircuitError::Parameter(
            "bit width must be at least 1".into(),
        ))
    } else {
        Ok(())
    }
}

/// Inputs `a` (garbler), `b` (evaluator); outputs `m` sum bits then carry-out.
pub fn build_adder(m: usize) -> Result<BooleanCircuit, CircuitError> {
    check_width(m)?;
    let mut cb = CircuitBuilder::new();
    let a = cb.input("a", Owner::Garbler, m);
    let b = cb.input("b", Owner::Evaluator, m);
    let (mut sum, carry) = cb.add(&a, &b);
    sum.push(carry);
    cb.finish(&sum)
}

/// Outputs `m` bits of `a - b mod 2^m` then the borrow-out.
pub fn build_subtractor(m: usize) -> Result<BooleanCircuit, CircuitError> {
    check_width(m)?;
    let mut cb = CircuitBuilder::new();
    let a = cb.input("a", Owner::Garbler, m);
    let b = cb.input("b", Owner::Evaluator, m);
    let (mut diff, borrow) = cb.sub(&a, &b);
    diff.push(borrow);
    cb.finish(&diff)
}

/// Single output `[a < b]` when `strict`, else `[a <= b]`.
pub fn build_comparator(m: usize, strict: bool) -> Result<BooleanCircuit, CircuitError> {
    check_width(m)?;
    let mut cb = CircuitBuilder::new();
    let a = cb.input("a", Owner::Garbler, m);
    let b = cb.input("b", Owner::Evaluator, m);
    let out = if strict { cb.lt(&a, &b) } else { cb.le(&a, &b) };
    cb.finish(&[out])
}

/// Inputs `s` (1 bit), `a`, `b`; outputs `s ? a : b`.
pub fn build_mux(m: usize) -> Result<BooleanCircuit, CircuitError> {
    check_width(m)?;
    let mut cb = CircuitBuilder::new();
    let s = cb.input("s", Owner::Garbler, 1);
    let a = cb.input("a", Owner::Evaluator, m);
    let b = cb.input("b", Owner::Evaluator, m);
    let out = cb.mux(s[0], &a, &b);
    cb.finish(&out)
}
