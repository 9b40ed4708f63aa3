//! Fault behaviour of the truncated stochastic sign.
//!
//! With `t` uniform over the field, the parties hold `<x>_s = x + t` and
//! `<x>_c = -t`. The stochastic sign compares `<x>_s` against `t = -<x>_c`
//! after dropping `k` low bits from both:
//!
//! * `PosZero`: negative iff `floor(<x>_s / 2^k) <= floor(t / 2^k)`
//! * `NegPass`: negative iff `floor(<x>_s / 2^k) <  floor(t / 2^k)`
//!
//! A fault is a mask `t` for which `x * sign~(x)` differs from `ReLU(x)`. At
//! `x = 0` the output is zero whatever the sign, so zero never faults.
//!
//! Two sources contribute. The overflow fault (`x + t` wraps past `p`) hits
//! exactly `|x|` of the `p` masks. Truncation then adds faults only for
//! `0 < |x| < 2^k` on the mode's side, with conditional rate `(2^k - |x|)/2^k`
//! over the non-overflowing masks. That rate is exact over whole blocks of
//! `2^k` consecutive masks; [`conditioned_trunc_faults`] gives the exact count
//! including the partial block at the end of the range.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldElement, FieldParams};

/// Largest modulus accepted by the exhaustive enumerator.
pub const EXHAUSTIVE_LIMIT: u64 = 1 << 20;

const MC_SHARD: u64 = 1 << 16;
const WILSON_Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FaultError {
    #[error("p = {0} is too large to enumerate (limit 2^20)")]
    TooLarge(u64),
    #[error("truncation k = {k} must be below the field width {m}")]
    Truncation { k: u32, m: u32 },
    #[error("x = {0} is outside the signed field range")]
    Range(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultMode {
    /// Small positive inputs may be zeroed.
    PosZero,
    /// Small negative inputs may pass through.
    NegPass,
}

impl FaultMode {
    pub const ALL: [FaultMode; 2] = [FaultMode::PosZero, FaultMode::NegPass];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultMode::PosZero => "poszero",
            FaultMode::NegPass => "negpass",
        }
    }

    /// Whether truncation faults affect inputs of this sign.
    fn affects(self, x: i64) -> bool {
        match self {
            FaultMode::PosZero => x > 0,
            FaultMode::NegPass => x < 0,
        }
    }
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poszero" | "pos-zero" => Ok(FaultMode::PosZero),
            "negpass" | "neg-pass" => Ok(FaultMode::NegPass),
            other => Err(format!("unknown fault mode `{other}` (poszero|negpass)")),
        }
    }
}

/// Truncated stochastic sign on raw share values: `true` means non-negative.
#[inline]
pub fn stochastic_sign(server_share: u64, neg_client_share: u64, k: u32, mode: FaultMode) -> bool {
    let a = server_share >> k;
    let b = neg_client_share >> k;
    let negative = match mode {
        FaultMode::PosZero => a <= b,
        FaultMode::NegPass => a < b,
    };
    !negative
}

/// `x * sign~(x)` where the server share is `x + t` and the client share `-t`.
#[inline]
pub fn stochastic_relu(
    x: FieldElement,
    t: FieldElement,
    k: u32,
    mode: FaultMode,
    params: &FieldParams,
) -> FieldElement {
    let server = params.add(x, t);
    if stochastic_sign(server.value(), t.value(), k, mode) {
        x
    } else {
        FieldElement::ZERO
    }
}

#[inline]
pub fn exact_relu(x: FieldElement, params: &FieldParams) -> FieldElement {
    if params.is_nonnegative(x) {
        x
    } else {
        FieldElement::ZERO
    }
}

#[inline]
pub fn is_fault(
    x: FieldElement,
    t: FieldElement,
    k: u32,
    mode: FaultMode,
    params: &FieldParams,
) -> bool {
    stochastic_relu(x, t, k, mode, params) != exact_relu(x, params)
}

fn check(x: i64, k: u32, params: &FieldParams) -> Result<FieldElement, FaultError> {
    if k >= params.bits() {
        return Err(FaultError::Truncation {
            k,
            m: params.bits(),
        });
    }
    params.encode(x).map_err(|_| FaultError::Range(x))
}

/// Probability of an overflow (sign) fault: `|x| / p`.
pub fn p_sign_fault(x: i64, params: &FieldParams) -> f64 {
    x.unsigned_abs() as f64 / params.modulus() as f64
}

pub fn p_sign_fault_exact(x: i64, params: &FieldParams) -> Ratio<u128> {
    Ratio::new(x.unsigned_abs() as u128, params.modulus() as u128)
}

fn in_trunc_range(x: i64, k: u32, mode: FaultMode) -> bool {
    mode.affects(x) && x.unsigned_abs() < 1u64 << k
}

/// Additional truncation fault probability given no overflow fault:
/// `(2^k - |x|) / 2^k` inside the mode's range, zero otherwise.
pub fn p_trunc_fault(x: i64, k: u32, mode: FaultMode) -> f64 {
    if !in_trunc_range(x, k, mode) {
        return 0.0;
    }
    let span = (1u64 << k) as f64;
    (span - x.unsigned_abs() as f64) / span
}

/// Exact number of non-overflowing masks that truncation turns into faults.
///
/// The `p - |x|` conditioned masks, shifted to start at zero, fault exactly
/// when their low `k` bits are below `2^k - |x|`. Valid while
/// `2^k <= (p + 1) / 2`, which keeps the overflow branch unaffected.
pub fn conditioned_trunc_faults(x: i64, k: u32, mode: FaultMode, params: &FieldParams) -> u64 {
    if !in_trunc_range(x, k, mode) {
        return 0;
    }
    let ax = x.unsigned_abs();
    let span = 1u64 << k;
    let n = params.modulus() - ax;
    let per_block = span - ax;
    (n / span) * per_block + (n % span).min(per_block)
}

pub fn p_trunc_fault_exact(x: i64, k: u32, mode: FaultMode, params: &FieldParams) -> Ratio<u128> {
    let n = (params.modulus() - x.unsigned_abs()) as u128;
    Ratio::new(conditioned_trunc_faults(x, k, mode, params) as u128, n)
}

/// Combined fault probability `p_sign + (1 - p_sign) * p_trunc`.
pub fn p_total_fault(x: i64, k: u32, mode: FaultMode, params: &FieldParams) -> f64 {
    let ps = p_sign_fault(x, params);
    ps + (1.0 - ps) * p_trunc_fault(x, k, mode)
}

pub fn p_total_fault_exact(x: i64, k: u32, mode: FaultMode, params: &FieldParams) -> Ratio<u128> {
    let count = x.unsigned_abs() + conditioned_trunc_faults(x, k, mode, params);
    Ratio::new(count as u128, params.modulus() as u128)
}

/// Analytic fault probabilities at one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultProfile {
    pub p_sign: f64,
    pub p_trunc: f64,
    pub p_total: f64,
}

pub fn profile(x: i64, k: u32, mode: FaultMode, params: &FieldParams) -> FaultProfile {
    FaultProfile {
        p_sign: p_sign_fault(x, params),
        p_trunc: p_trunc_fault(x, k, mode),
        p_total: p_total_fault(x, k, mode, params),
    }
}

/// Counts faulting masks by enumerating every `t` in the field.
pub fn exhaustive_fault_count(
    x: i64,
    k: u32,
    mode: FaultMode,
    params: &FieldParams,
) -> Result<u64, FaultError> {
    Ok(exhaustive_breakdown(x, k, mode, params)?.total)
}

/// Per-mask classification relative to the untruncated stochastic sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultBreakdown {
    /// Masks where the untruncated comparison already faults.
    pub sign_faults: u64,
    /// Masks correct without truncation but faulty with it.
    pub additional: u64,
    /// Masks faulty without truncation but corrected by it.
    pub corrected: u64,
    /// Masks faulty with truncation.
    pub total: u64,
}

pub fn exhaustive_breakdown(
    x: i64,
    k: u32,
    mode: FaultMode,
    params: &FieldParams,
) -> Result<FaultBreakdown, FaultError> {
    if params.modulus() > EXHAUSTIVE_LIMIT {
        return Err(FaultError::TooLarge(params.modulus()));
    }
    let xe = check(x, k, params)?;
    let mut out = FaultBreakdown::default();
    for t in 0..params.modulus() {
        let t = params.reduce(t);
        let base = is_fault(xe, t, 0, mode, params);
        let trunc = is_fault(xe, t, k, mode, params);
        out.sign_faults += base as u64;
        out.additional += (!base && trunc) as u64;
        out.corrected += (base && !trunc) as u64;
        out.total += trunc as u64;
    }
    Ok(out)
}

/// Empirical fault rate with a Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub faults: u64,
    pub samples: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateEstimate {
    pub fn from_counts(faults: u64, samples: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(faults, samples, WILSON_Z95);
        RateEstimate {
            faults,
            samples,
            rate: if samples == 0 {
                0.0
            } else {
                faults as f64 / samples as f64
            },
            ci_low,
            ci_high,
        }
    }

    /// Standard error of the estimate at probability `p`.
    pub fn sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.samples as f64).sqrt()
    }
}

pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Samples masks uniformly. Work is split into fixed shards, each seeded from
/// `(seed, shard)`, so results do not depend on the thread count.
pub fn monte_carlo_fault_rate(
    x: i64,
    k: u32,
    mode: FaultMode,
    params: &FieldParams,
    samples: u64,
    seed: u64,
) -> Result<RateEstimate, FaultError> {
    let xe = check(x, k, params)?;
    let shards = samples.div_ceil(MC_SHARD);
    let faults: u64 = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let n = MC_SHARD.min(samples - shard * MC_SHARD);
            (0..n)
                .filter(|_| {
                    let t = params.reduce(rng.gen_range(0..params.modulus()));
                    is_fault(xe, t, k, mode, params)
                })
                .count() as u64
        })
        .sum();
    Ok(RateEstimate::from_counts(faults, samples))
}
