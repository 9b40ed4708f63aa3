//! CSV-producing commands: `bench-gc`, `validate-faults`, `sweep`.

use std::io::Write;

use privinfer::circuit::{synth, ReluVariant, SignCircuitSpec};
use privinfer::faultmodel::{
    exhaustive_fault_count, monte_carlo_fault_rate, p_total_fault, FaultError, FaultMode,
    EXHAUSTIVE_LIMIT,
};
use privinfer::field::{largest_prime_below_pow2, FieldParams};
use privinfer::garble::{garble, LABEL_BYTES};
use privinfer::nn::{
    argmax, infer_plain, infer_stochastic_with, load_dataset, load_model, Dataset, MaskSource,
    Model, Tensor,
};
use rayon::prelude::*;

use crate::{output, parse_range, BenchGcArgs, CliError, SweepArgs, ValidateFaultsArgs};

pub const BENCH_GC_HEADER: [&str; 7] = [
    "variant",
    "m",
    "k",
    "and_count",
    "xor_count",
    "est_bytes",
    "measured_garbled_bytes",
];
pub const FAULTS_HEADER: [&str; 8] = [
    "x",
    "k",
    "mode",
    "analytic_p",
    "empirical_p",
    "ci_low",
    "ci_high",
    "samples",
];
pub const SWEEP_HEADER: [&str; 4] = ["k", "mode", "fault_rate", "accuracy"];

fn fault_err(e: FaultError) -> CliError {
    CliError::Usage(e.to_string())
}

/// The field used for an `m`-bit benchmark: the default prime at its own
/// width, otherwise the largest prime below `2^m`.
pub fn field_for_width(m: u32) -> Result<FieldParams, CliError> {
    let default = FieldParams::default();
    if m == default.bits() {
        return Ok(default);
    }
    let p = largest_prime_below_pow2(m)
        .ok_or_else(|| CliError::Usage(format!("unsupported width m = {m}")))?;
    Ok(FieldParams::new(p)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcRow {
    pub variant: ReluVariant,
    pub m: u32,
    pub k: u32,
    pub and_count: usize,
    pub xor_count: usize,
    pub est_bytes: usize,
    pub measured_garbled_bytes: usize,
}

/// One row per variant; `SignStoch` once per `k`.
pub fn gc_rows(
    m: u32,
    ks: impl IntoIterator<Item = u32>,
    mode: FaultMode,
) -> Result<Vec<GcRow>, CliError> {
    let params = field_for_width(m)?;
    let mut specs = vec![(ReluVariant::ReluFull, 0), (ReluVariant::SignNaive, 0)];
    specs.extend(ks.into_iter().map(|k| (ReluVariant::SignStoch, k)));
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (variant, k))| {
            let spec = SignCircuitSpec {
                m,
                k,
                mode,
                variant,
            };
            let c = synth(&spec, &params).map_err(|e| CliError::Usage(e.to_string()))?;
            let cost = c.cost(LABEL_BYTES);
            let g = garble(&c, i as u64);
            Ok(GcRow {
                variant,
                m,
                k,
                and_count: cost.and_count,
                xor_count: cost.xor_count,
                est_bytes: cost.estimated_garbled_bytes,
                measured_garbled_bytes: g.circuit.payload_bytes(),
            })
        })
        .collect()
}

pub fn bench_gc(a: &BenchGcArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ks = parse_range(&a.k)?;
    if *ks.end() >= a.m {
        return Err(CliError::Usage(format!("k must be below m = {}", a.m)));
    }
    let rows = gc_rows(a.m, ks, a.mode)?;
    let mut w = csv::Writer::from_writer(output(&a.out, stdout)?);
    w.write_record(BENCH_GC_HEADER)?;
    for r in rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.m.to_string(),
            r.k.to_string(),
            r.and_count.to_string(),
            r.xor_count.to_string(),
            r.est_bytes.to_string(),
            r.measured_garbled_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evenly spaced x values covering twice the truncation range.
pub fn default_grid(k: u32, points: usize, params: &FieldParams) -> Vec<i64> {
    let span = (1i64 << (k + 1)).max(16).min(params.half() as i64 - 1);
    let points = points.max(2);
    let mut xs: Vec<i64> = (0..points)
        .map(|i| -span + (2 * span * i as i64) / (points as i64 - 1))
        .collect();
    xs.dedup();
    xs
}

pub fn validate_faults(a: &ValidateFaultsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let params = FieldParams::new(a.p)?;
    if a.exhaustive && a.p > EXHAUSTIVE_LIMIT {
        return Err(CliError::Usage(format!(
            "--exhaustive enumerates every mask; p = {} exceeds the limit {EXHAUSTIVE_LIMIT}",
            a.p
        )));
    }
    if a.k >= params.bits() {
        return Err(CliError::Usage(format!(
            "k = {} must be below m = {}",
            a.k,
            params.bits()
        )));
    }
    if !a.exhaustive && a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let xs = if a.x.is_empty() {
        default_grid(a.k, a.points, &params)
    } else {
        a.x.clone()
    };
    let mut w = csv::Writer::from_writer(output(&a.out, stdout)?);
    w.write_record(FAULTS_HEADER)?;
    for mode in a.mode.modes() {
        for (i, &x) in xs.iter().enumerate() {
            let (rate, lo, hi, n) = if a.exhaustive {
                let count = exhaustive_fault_count(x, a.k, mode, &params).map_err(fault_err)?;
                let r = count as f64 / a.p as f64;
                (r, r, r, a.p)
            } else {
                let seed = a
                    .seed
                    .wrapping_add(i as u64)
                    .wrapping_add((mode as u64) << 32);
                let est = monte_carlo_fault_rate(x, a.k, mode, &params, a.samples, seed)
                    .map_err(fault_err)?;
                (est.rate, est.ci_low, est.ci_high, est.samples)
            };
            w.write_record([
                x.to_string(),
                a.k.to_string(),
                mode.as_str().to_string(),
                p_total_fault(x, a.k, mode, &params).to_string(),
                rate.to_string(),
                lo.to_string(),
                hi.to_string(),
                n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: u32,
    pub mode: FaultMode,
    pub fault_rate: f64,
    pub accuracy: f64,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
}

fn tensors(model: &Model, ds: &Dataset) -> Result<Vec<Tensor>, CliError> {
    if ds.input_shape != model.input_shape {
        return Err(CliError::Usage(format!(
            "dataset shape {:?} does not match model input {:?}",
            ds.input_shape, model.input_shape
        )));
    }
    Ok(ds
        .inputs
        .iter()
        .map(|x| Tensor::from_signed(model.input_shape.clone(), x, &model.params))
        .collect::<Result<_, _>>()?)
}

pub fn plain_accuracy(model: &Model, ds: &Dataset) -> Result<f64, CliError> {
    let xs = tensors(model, ds)?;
    let correct = xs
        .par_iter()
        .zip(&ds.labels)
        .map(|(x, &y)| Ok((argmax(&infer_plain(model, x)?.to_signed(&model.params)) == y) as usize))
        .collect::<Result<Vec<_>, CliError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / ds.labels.len().max(1) as f64)
}

/// Simulated fault rate and accuracy for every `(k, mode)`. Sample `i` uses
/// the same masks at every `k`.
pub fn sweep_rows(
    model: &Model,
    ds: &Dataset,
    ks: impl IntoIterator<Item = u32>,
    modes: &[FaultMode],
    seed: u64,
) -> Result<Vec<SweepRow>, CliError> {
    let xs = tensors(model, ds)?;
    let mut rows = Vec::new();
    for k in ks {
        if k >= model.params.bits() {
            return Err(CliError::Usage(format!(
                "k = {k} must be below m = {}",
                model.params.bits()
            )));
        }
        for &mode in modes {
            let per: Vec<(usize, usize, bool)> = xs
                .par_iter()
                .zip(&ds.labels)
                .enumerate()
                .map(|(i, (x, &y))| {
                    let run = infer_stochastic_with(
                        model,
                        x,
                        k,
                        mode,
                        MaskSource::Seeded(sample_seed(seed, i)),
                    )?;
                    let correct = argmax(&run.output.to_signed(&model.params)) == y;
                    Ok((run.faults, run.activations, correct))
                })
                .collect::<Result<_, CliError>>()?;
            let faults: usize = per.iter().map(|r| r.0).sum();
            let acts: usize = per.iter().map(|r| r.1).sum();
            let correct = per.iter().filter(|r| r.2).count();
            rows.push(SweepRow {
                k,
                mode,
                fault_rate: if acts == 0 {
                    0.0
                } else {
                    faults as f64 / acts as f64
                },
                accuracy: correct as f64 / per.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn sweep(
    a: &SweepArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.dataset)?;
    let ks = parse_range(&a.k_range)?;
    writeln!(
        stderr,
        "sweep: results come from the cleartext simulator of the stochastic ReLU, not the two-party protocol"
    )?;
    writeln!(
        stderr,
        "sweep: plaintext accuracy {:.4} on {} samples",
        plain_accuracy(&model, &ds)?,
        ds.labels.len()
    )?;
    let rows = sweep_rows(&model, &ds, ks, &a.mode.modes(), a.seed)?;
    let mut w = csv::Writer::from_writer(output(&a.out, stdout)?);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.mode.as_str().to_string(),
            r.fault_rate.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gc_rows_are_consistent_and_ordered() {
        let rows = gc_rows(31, 0..=24, FaultMode::PosZero).unwrap();
        assert!(rows.iter().all(|r| r.est_bytes == r.measured_garbled_bytes));
        assert!(rows[0].est_bytes > rows[1].est_bytes);
        assert!(rows[1].est_bytes > rows[2].est_bytes);
        assert!(rows[2..]
            .windows(2)
            .all(|w| w[0].est_bytes > w[1].est_bytes));
        assert_eq!(rows[2].and_count, 62);
    }

    #[test]
    fn small_widths_use_the_largest_prime() {
        assert_eq!(field_for_width(9).unwrap().modulus(), 509);
        assert_eq!(field_for_width(31).unwrap(), FieldParams::default());
        assert!(field_for_width(1).is_err());
    }

    #[test]
    fn grid_is_symmetric() {
        let g = default_grid(4, 41, &FieldParams::default());
        assert_eq!(g.first(), Some(&-32));
        assert_eq!(g.last(), Some(&32));
        assert!(g.contains(&0));
        let tiny = default_grid(20, 11, &FieldParams::new(509).unwrap());
        assert!(tiny.iter().all(|x| x.abs() < 254));
    }
}
