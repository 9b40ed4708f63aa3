//! ReLU and sign circuits over additively shared field elements.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::builder::{Bit, CircuitBuilder};
use super::{BooleanCircuit, CircuitError, Owner};
use crate::faultmodel::FaultMode;
use crate::field::FieldParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReluVariant {
    /// Reconstructs `x`, computes `ReLU(x) - r` inside the circuit.
    ReluFull,
    /// Exact sign of the reconstructed `x`, output as a masked bit.
    SignNaive,
    /// Truncated stochastic sign from the two shares directly.
    SignStoch,
}

impl ReluVariant {
    pub const ALL: [ReluVariant; 3] = [
        ReluVariant::ReluFull,
        ReluVariant::SignNaive,
        ReluVariant::SignStoch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReluVariant::ReluFull => "relu-full",
            ReluVariant::SignNaive => "sign-naive",
            ReluVariant::SignStoch => "sign-stoch",
        }
    }

    /// Whether the circuit outputs a masked sign that still needs a multiplication.
    pub fn outputs_sign(self) -> bool {
        !matches!(self, ReluVariant::ReluFull)
    }
}

impl fmt::Display for ReluVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReluVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "relu-full" | "relufull" | "baseline" => Ok(ReluVariant::ReluFull),
            "sign-naive" | "signnaive" => Ok(ReluVariant::SignNaive),
            "sign-stoch" | "signstoch" | "stochastic" => Ok(ReluVariant::SignStoch),
            other => Err(format!(
                "unknown variant `{other}` (relu-full|sign-naive|sign-stoch)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignCircuitSpec {
    pub m: u32,
    pub k: u32,
    pub mode: FaultMode,
    pub variant: ReluVariant,
}

/// Builds the per-activation circuit.
///
/// Bundles by variant (garbler bundle first):
///
/// * `ReluFull`: `server_share_bits`, `client_share_bits`, `r_bits`; output
///   `ReLU(x) - r mod p`.
/// * `SignNaive`: `server_share_bits`, `client_share_bits`, `neg_r_bits`,
///   `one_minus_r_bits`; output `sign(x) - r mod p`.
/// * `SignStoch`: `server_share_bits` and `client_neg_share_bits` of width
///   `m - k` holding the shares shifted right by `k`, then `neg_r_bits`,
///   `one_minus_r_bits`; output `sign~(x) - r mod p`.
pub fn synth(spec: &SignCircuitSpec, params: &FieldParams) -> Result<BooleanCircuit, CircuitError> {
    let m = spec.m;
    if m != params.bits() {
        return Err(CircuitError::Parameter(format!(
            "width m = {m} does not match the field width {}",
            params.bits()
        )));
    }
    if spec.k != 0 && spec.variant != ReluVariant::SignStoch {
        return Err(CircuitError::Parameter(format!(
            "{} does not truncate, k must be 0 (got {})",
            spec.variant, spec.k
        )));
    }
    if spec.k >= m {
        return Err(CircuitError::Parameter(format!(
            "truncation k = {} must be below m = {m}",
            spec.k
        )));
    }
    let m = m as usize;
    let p = params.modulus();
    let mut b = CircuitBuilder::new();
    let out = match spec.variant {
        ReluVariant::ReluFull => {
            let xs = b.input("server_share_bits", Owner::Garbler, m);
            let xc = b.input("client_share_bits", Owner::Evaluator, m);
            let r = b.input("r_bits", Owner::Evaluator, m);
            let x = reconstruct(&mut b, &xs, &xc, p);
            let half = b.constant(params.half(), m);
            let nonneg = b.lt(&x, &half);
            let relu: Vec<Bit> = x.iter().map(|&xi| b.and(nonneg, xi)).collect();
            let (diff, borrow) = b.sub(&relu, &r);
            let pc = b.constant(p, m);
            let (corr, _) = b.add(&diff, &pc);
            b.mux(borrow, &corr, &diff)
        }
        ReluVariant::SignNaive => {
            let xs = b.input("server_share_bits", Owner::Garbler, m);
            let xc = b.input("client_share_bits", Owner::Evaluator, m);
            let neg_r = b.input("neg_r_bits", Owner::Evaluator, m);
            let one_minus_r = b.input("one_minus_r_bits", Owner::Evaluator, m);
            let x = reconstruct(&mut b, &xs, &xc, p);
            let half = b.constant(params.half(), m);
            let nonneg = b.lt(&x, &half);
            b.mux(nonneg, &one_minus_r, &neg_r)
        }
        ReluVariant::SignStoch => {
            let w = m - spec.k as usize;
            let a = b.input("server_share_bits", Owner::Garbler, w);
            let t = b.input("client_neg_share_bits", Owner::Evaluator, w);
            let neg_r = b.input("neg_r_bits", Owner::Evaluator, m);
            let one_minus_r = b.input("one_minus_r_bits", Owner::Evaluator, m);
            let neg = match spec.mode {
                FaultMode::PosZero => b.le(&a, &t),
                FaultMode::NegPass => b.lt(&a, &t),
            };
            b.mux(neg, &neg_r, &one_minus_r)
        }
    };
    b.finish(&out)
}

/// `(xs + xc) mod p` for inputs already below `p`.
fn reconstruct(b: &mut CircuitBuilder, xs: &[Bit], xc: &[Bit], p: u64) -> Vec<Bit> {
    let m = xs.len();
    let (mut z, carry) = b.add(xs, xc);
    z.push(carry);
    let pc = b.constant(p, m + 1);
    let (d, borrow) = b.sub(&z, &pc);
    b.mux(borrow, &z[..m], &d[..m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{from_bits, to_bits};
    use crate::faultmodel::{exact_relu, stochastic_sign};
    use crate::field::FieldElement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(
        params: &FieldParams,
        variant: ReluVariant,
        k: u32,
        mode: FaultMode,
    ) -> SignCircuitSpec {
        SignCircuitSpec {
            m: params.bits(),
            k,
            mode,
            variant,
        }
    }

    fn run(c: &BooleanCircuit, vals: &[(u64, usize)]) -> u64 {
        let ins: Vec<Vec<bool>> = vals.iter().map(|&(v, w)| to_bits(v, w)).collect();
        from_bits(&c.eval_plain(&ins).unwrap())
    }

    /// Checks every variant against field arithmetic for one `(x, t, r)`.
    fn check_point(
        params: &FieldParams,
        circuits: &[(SignCircuitSpec, BooleanCircuit)],
        x: FieldElement,
        t: FieldElement,
        r: FieldElement,
    ) {
        let m = params.bits() as usize;
        let xs = params.add(x, t);
        let xc = params.neg(t);
        let neg_r = params.neg(r);
        let one_minus_r = params.sub(params.reduce(1), r);
        for (s, c) in circuits {
            let got = match s.variant {
                ReluVariant::ReluFull => {
                    let want = params.sub(exact_relu(x, params), r);
                    assert_eq!(
                        run(c, &[(xs.value(), m), (xc.value(), m), (r.value(), m)]),
                        want.value()
                    );
                    continue;
                }
                ReluVariant::SignNaive => run(
                    c,
                    &[
                        (xs.value(), m),
                        (xc.value(), m),
                        (neg_r.value(), m),
                        (one_minus_r.value(), m),
                    ],
                ),
                ReluVariant::SignStoch => {
                    let w = m - s.k as usize;
                    run(
                        c,
                        &[
                            (xs.value() >> s.k, w),
                            (t.value() >> s.k, w),
                            (neg_r.value(), m),
                            (one_minus_r.value(), m),
                        ],
                    )
                }
            };
            let sign = match s.variant {
                ReluVariant::SignNaive => params.is_nonnegative(x),
                _ => stochastic_sign(xs.value(), t.value(), s.k, s.mode),
            };
            let want = params.sub(params.reduce(sign as u64), r);
            assert_eq!(got, want.value(), "{:?} x={x} t={t} r={r}", s);
        }
    }

    fn all_circuits(params: &FieldParams, ks: &[u32]) -> Vec<(SignCircuitSpec, BooleanCircuit)> {
        let mut v = Vec::new();
        for variant in [ReluVariant::ReluFull, ReluVariant::SignNaive] {
            let s = spec(params, variant, 0, FaultMode::PosZero);
            v.push((s, synth(&s, params).unwrap()));
        }
        for &k in ks {
            for mode in FaultMode::ALL {
                let s = spec(params, ReluVariant::SignStoch, k, mode);
                v.push((s, synth(&s, params).unwrap()));
            }
        }
        v
    }

    #[test]
    fn small_field_exhaustive_over_x_and_t() {
        let params = FieldParams::new(509).unwrap();
        let circuits = all_circuits(&params, &[0, 3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in 0..509 {
            for t in (0..509).step_by(7) {
                let r = params.random(&mut rng);
                check_point(&params, &circuits, params.reduce(x), params.reduce(t), r);
            }
        }
    }

    #[test]
    fn default_field_random_points() {
        let params = FieldParams::default();
        let circuits = all_circuits(&params, &[0, 12, 19]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..400 {
            let x = if i % 2 == 0 {
                params
                    .encode(rng.gen_range(-(1i64 << 20)..(1 << 20)))
                    .unwrap()
            } else {
                params.random(&mut rng)
            };
            let t = params.random(&mut rng);
            let r = params.random(&mut rng);
            check_point(&params, &circuits, x, t, r);
        }
        // Boundary values of the signed range.
        for xv in [0, 1, params.half() - 1, params.half(), params.modulus() - 1] {
            let t = params.random(&mut rng);
            let r = params.random(&mut rng);
            check_point(&params, &circuits, params.reduce(xv), t, r);
        }
    }

    #[test]
    fn and_counts_at_default_width() {
        let params = FieldParams::default();
        let count = |variant, k| {
            synth(&spec(&params, variant, k, FaultMode::PosZero), &params)
                .unwrap()
                .and_count()
        };
        // Comparator of m - k bits plus an m-bit mux.
        assert_eq!(count(ReluVariant::SignStoch, 0), 62);
        assert_eq!(count(ReluVariant::SignStoch, 19), 43);
        let full = count(ReluVariant::ReluFull, 0);
        let naive = count(ReluVariant::SignNaive, 0);
        assert!(full > naive && naive > 62, "full={full} naive={naive}");
        assert!(full >= 3 * 43);
    }

    #[test]
    fn and_count_decreases_with_k() {
        let params = FieldParams::default();
        let mut prev = usize::MAX;
        for k in 0..params.bits() {
            let n = synth(
                &spec(&params, ReluVariant::SignStoch, k, FaultMode::NegPass),
                &params,
            )
            .unwrap()
            .and_count();
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn parameter_errors() {
        let params = FieldParams::default();
        let mut s = spec(&params, ReluVariant::SignStoch, 31, FaultMode::PosZero);
        assert!(matches!(
            synth(&s, &params),
            Err(CircuitError::Parameter(_))
        ));
        s.k = 3;
        s.variant = ReluVariant::ReluFull;
        assert!(matches!(
            synth(&s, &params),
            Err(CircuitError::Parameter(_))
        ));
        s.k = 0;
        s.m = 30;
        assert!(matches!(
            synth(&s, &params),
            Err(CircuitError::Parameter(_))
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(
            "sign-stoch".parse::<ReluVariant>(),
            Ok(ReluVariant::SignStoch)
        );
        assert_eq!("ReluFull".parse::<ReluVariant>(), Ok(ReluVariant::ReluFull));
        assert_eq!(
            "sign_naive".parse::<ReluVariant>(),
            Ok(ReluVariant::SignNaive)
        );
        assert!("relu".parse::<ReluVariant>().is_err());
    }
}
