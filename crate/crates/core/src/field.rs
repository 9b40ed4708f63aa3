//! Arithmetic over the prime field `Z_p` with the signed encoding used by the
//! protocol: non-negative values live in `[0, (p-1)/2)`, negative values in
//! `[(p-1)/2, p)`.
//!
//! Every operation takes a [`FieldParams`] so that the same code runs at the
//! production prime and at tiny primes where exhaustive checks are feasible.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default 31-bit prime. Products of two 15-bit quantized values stay inside it.
pub const DEFAULT_PRIME: u64 = 2_138_816_513;

/// Magnitude cap on quantized integers.
pub const QUANT_BITS: u32 = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} does not fit below 2^63")]
    ModulusTooLarge(u64),
    #[error("value {value} outside the signed range [-{half}, {half})")]
    OutOfRange { value: i64, half: u64 },
    #[error("{0} is not a canonical field element")]
    NotAnElement(u64),
    #[error("quantized value {scaled} exceeds the 2^{QUANT_BITS} cap")]
    QuantizationOverflow { scaled: f64 },
}

/// Modulus together with the derived bit width and sign threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct FieldParams {
    p: u64,
    m: u32,
    half: u64,
}

/// Canonical representative in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FieldElement(u64);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams::new(DEFAULT_PRIME).expect("default prime is valid")
    }
}

impl TryFrom<u64> for FieldParams {
    type Error = FieldError;

    fn try_from(p: u64) -> Result<Self, Self::Error> {
        FieldParams::new(p)
    }
}

impl From<FieldParams> for u64 {
    fn from(params: FieldParams) -> u64 {
        params.p
    }
}

impl FieldParams {
    pub fn new(p: u64) -> Result<Self, FieldError> {
        if p >= 1 << 63 {
            return Err(FieldError::ModulusTooLarge(p));
        }
        if !is_prime(p) {
            return Err(FieldError::NotPrime(p));
        }
        let m = 64 - (p - 1).leading_zeros();
        Ok(FieldParams {
            p,
            m,
            half: (p - 1) / 2,
        })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.p
    }

    /// Bit width `ceil(log2 p)`.
    #[inline]
    pub fn bits(&self) -> u32 {
        self.m
    }

    /// Sign threshold `(p-1)/2`.
    #[inline]
    pub fn half(&self) -> u64 {
        self.half
    }

    /// Wraps an arbitrary integer into the field.
    #[inline]
    pub fn reduce(&self, v: u64) -> FieldElement {
        FieldElement(v % self.p)
    }

    /// Accepts only canonical representatives.
    pub fn element(&self, v: u64) -> Result<FieldElement, FieldError> {
        if v < self.p {
            Ok(FieldElement(v))
        } else {
            Err(FieldError::NotAnElement(v))
        }
    }

    pub fn encode(&self, v: i64) -> Result<FieldElement, FieldError> {
        let half = self.half as i64;
        if v < -half || v >= half {
            return Err(FieldError::OutOfRange {
                value: v,
                half: self.half,
            });
        }
        Ok(self.encode_wrapping(v as i128))
    }

    /// Reduces any signed integer mod p without a range check.
    #[inline]
    pub fn encode_wrapping(&self, v: i128) -> FieldElement {
        FieldElement(v.rem_euclid(self.p as i128) as u64)
    }

    #[inline]
    pub fn decode(&self, e: FieldElement) -> i64 {
        if e.0 < self.half {
            e.0 as i64
        } else {
            e.0 as i64 - self.p as i64
        }
    }

    /// `decode(e) >= 0`.
    #[inline]
    pub fn is_nonnegative(&self, e: FieldElement) -> bool {
        e.0 < self.half
    }

    #[inline]
    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        let s = a.0 + b.0;
        FieldElement(if s >= self.p { s - self.p } else { s })
    }

    #[inline]
    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        FieldElement(if a.0 >= b.0 {
            a.0 - b.0
        } else {
            a.0 + self.p - b.0
        })
    }

    #[inline]
    pub fn neg(&self, a: FieldElement) -> FieldElement {
        if a.0 == 0 {
            a
        } else {
            FieldElement(self.p - a.0)
        }
    }

    #[inline]
    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        FieldElement(((a.0 as u128 * b.0 as u128) % self.p as u128) as u64)
    }

    /// Inner product accumulated in a wide integer and reduced once per chunk.
    pub fn dot<I>(&self, pairs: I) -> FieldElement
    where
        I: IntoIterator<Item = (FieldElement, FieldElement)>,
    {
        // Each product is below 2^126, so two of them always fit in a u128.
        let p = self.p as u128;
        let acc = pairs
            .into_iter()
            .fold(0u128, |acc, (a, b)| (acc + a.0 as u128 * b.0 as u128) % p);
        FieldElement(acc as u64)
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement(rng.gen_range(0..self.p))
    }

    /// Fixed-point encoding `round(v * 2^f)`, ties away from zero.
    pub fn quantize(&self, v: f64, scale: FixedPointScale) -> Result<FieldElement, FieldError> {
        let scaled = (v * (1u64 << scale.frac_bits) as f64).round();
        if !scaled.is_finite() || scaled.abs() >= scale.bound() as f64 {
            return Err(FieldError::QuantizationOverflow { scaled });
        }
        self.encode(scaled as i64)
    }

    pub fn dequantize(&self, e: FieldElement, frac_bits: u32) -> f64 {
        self.decode(e) as f64 / (1u64 << frac_bits) as f64
    }
}

/// Number of fractional bits of a fixed-point encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointScale {
    pub frac_bits: u32,
}

impl FixedPointScale {
    pub fn new(frac_bits: u32) -> Self {
        FixedPointScale { frac_bits }
    }

    /// Exclusive magnitude bound on quantized integers.
    pub fn bound(&self) -> u64 {
        1 << QUANT_BITS
    }

    /// Whether the product of two capped values decodes without wrapping.
    pub fn products_fit(&self, params: &FieldParams) -> bool {
        let max = (self.bound() - 1) as u128;
        max * max < params.half() as u128
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin; the witness set is exact for all 64-bit inputs.
pub fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &w in &WITNESSES {
        if n.is_multiple_of(w) {
            return n == w;
        }
    }
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest prime strictly below `2^bits`.
pub fn largest_prime_below_pow2(bits: u32) -> Option<u64> {
    if !(2..=63).contains(&bits) {
        return None;
    }
    let mut n = (1u64 << bits) - 1;
    while n >= 2 {
        if is_prime(n) {
            return Some(n);
        }
        n -= 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fp(p: u64) -> FieldParams {
        FieldParams::new(p).unwrap()
    }

    #[test]
    fn derived_parameters() {
        let f = FieldParams::default();
        assert_eq!(f.modulus(), 2_138_816_513);
        assert_eq!(f.bits(), 31);
        assert_eq!(f.half(), 1_069_408_256);
        assert_eq!(fp(509).bits(), 9);
        assert_eq!(fp(257).bits(), 9);
        assert_eq!(fp(257).half(), 128);
    }

    #[test]
    fn rejects_composite_and_huge() {
        assert_eq!(FieldParams::new(511), Err(FieldError::NotPrime(511)));
        assert!(matches!(
            FieldParams::new(u64::MAX),
            Err(FieldError::ModulusTooLarge(_))
        ));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(fp(257).encode(5).unwrap().value(), 5);
        assert_eq!(fp(257).encode(-1).unwrap().value(), 256);
        assert_eq!(
            FieldParams::default().encode(-100).unwrap().value(),
            2_138_816_413
        );
        assert!(matches!(
            fp(257).encode(128),
            Err(FieldError::OutOfRange { .. })
        ));
        assert!(fp(257).encode(-128).is_ok());
        assert!(fp(257).encode(-129).is_err());
    }

    #[test]
    fn decode_examples() {
        let f = fp(257);
        assert_eq!(f.decode(f.element(256).unwrap()), -1);
        assert_eq!(f.decode(f.element(128).unwrap()), -129);
    }

    #[test]
    fn decode_encode_exhaustive() {
        let f = fp(509);
        let half = f.half() as i64;
        for v in -half..half {
            let e = f.encode(v).unwrap();
            assert_eq!(f.decode(e), v);
            assert_eq!(f.is_nonnegative(e), v >= 0);
        }
        for raw in 0..509 {
            let e = f.element(raw).unwrap();
            assert_eq!(f.decode(e) >= 0, raw < f.half());
        }
    }

    #[test]
    fn small_arithmetic() {
        let f = fp(257);
        let a = f.element(200).unwrap();
        let b = f.element(100).unwrap();
        assert_eq!(f.add(a, b).value(), 43);
        assert_eq!(f.sub(b, a).value(), 157);
        assert_eq!(f.neg(FieldElement::ZERO), FieldElement::ZERO);
        for x in 0..257 {
            assert_eq!(
                f.mul(FieldElement::ZERO, f.element(x).unwrap()),
                FieldElement::ZERO
            );
        }
    }

    #[test]
    fn arithmetic_matches_wide_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in [509u64, 65521, DEFAULT_PRIME, (1u64 << 61) - 1] {
            let f = fp(p);
            for _ in 0..100_000 / 4 {
                let a = f.random(&mut rng);
                let b = f.random(&mut rng);
                let (wa, wb, wp) = (a.value() as i128, b.value() as i128, p as i128);
                assert_eq!(f.add(a, b).value() as i128, (wa + wb) % wp);
                assert_eq!(f.sub(a, b).value() as i128, (wa - wb).rem_euclid(wp));
                assert_eq!(f.mul(a, b).value() as i128, (wa * wb) % wp);
                assert_eq!(f.neg(a).value() as i128, (-wa).rem_euclid(wp));
            }
        }
    }

    #[test]
    fn dot_matches_sequential() {
        let f = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..1000)
            .map(|_| (f.random(&mut rng), f.random(&mut rng)))
            .collect();
        let seq = pairs
            .iter()
            .fold(FieldElement::ZERO, |acc, &(a, b)| f.add(acc, f.mul(a, b)));
        assert_eq!(f.dot(pairs), seq);
    }

    #[test]
    fn quantize_examples() {
        let scale = FixedPointScale::new(8);
        let f = FieldParams::default();
        assert_eq!(f.quantize(0.5, scale).unwrap().value(), 128);
        assert_eq!(f.quantize(-1.0, scale).unwrap().value(), 2_138_816_257);
        // Ties go away from zero.
        assert_eq!(f.decode(f.quantize(0.5 / 256.0, scale).unwrap()), 1);
        assert_eq!(f.decode(f.quantize(-0.5 / 256.0, scale).unwrap()), -1);
        assert!(matches!(
            f.quantize(128.0, scale),
            Err(FieldError::QuantizationOverflow { .. })
        ));
        assert!(f.quantize(127.99, scale).is_ok());
    }

    #[test]
    fn quantized_products_track_real_products() {
        let f = FieldParams::default();
        let scale = FixedPointScale::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tol = 2f64.powi(-(scale.frac_bits as i32) + 1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            let prod = f.mul(f.quantize(x, scale).unwrap(), f.quantize(y, scale).unwrap());
            let approx = f.dequantize(prod, 2 * scale.frac_bits);
            assert!((approx - x * y).abs() <= tol, "{x} * {y}: {approx}");
        }
    }

    #[test]
    fn primality() {
        assert!(is_prime(2) && is_prime(509) && is_prime(65521) && is_prime(DEFAULT_PRIME));
        assert!(!is_prime(1) && !is_prime(561) && !is_prime(65535));
        assert_eq!(largest_prime_below_pow2(9), Some(509));
        assert_eq!(largest_prime_below_pow2(16), Some(65521));
    }

    proptest! {
        #[test]
        fn encode_is_inverse_of_decode(v in -1_069_408_256i64..1_069_408_256) {
            let f = FieldParams::default();
            prop_assert_eq!(f.decode(f.encode(v).unwrap()), v);
        }

        #[test]
        fn sub_inverts_add(a in 0u64..DEFAULT_PRIME, b in 0u64..DEFAULT_PRIME) {
            let f = FieldParams::default();
            let (a, b) = (f.element(a).unwrap(), f.element(b).unwrap());
            prop_assert_eq!(f.sub(f.add(a, b), b), a);
            prop_assert_eq!(f.add(a, f.neg(a)), FieldElement::ZERO);
        }
    }
}
