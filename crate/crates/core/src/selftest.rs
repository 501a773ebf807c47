//! Built-in verification: tape encoders against the loop oracles and
//! analytic gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{aggregate, AggregatorParams};
use crate::encoder::{encode_sequence, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::gradcheck::{
    aggregator_check, encoder_check, model_check, op_suite, random_tensor, tiny_model_check, REL_TOLERANCE,
};
use crate::reference::{self, Matrix};
use crate::tensor::{Tape, Tensor};

/// Tolerance of the encoder oracle sweep.
pub const ENCODER_TOLERANCE: f64 = 1e-10;
/// Tolerance of the aggregator oracle sweep.
pub const AGGREGATOR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random padded batches (t ≤ 8, d ≤ 6, d_k ≤ 8, H ∈ {1, 2}) encoded on the
/// tape and sequence by sequence with the loop oracle. Returns the largest
/// absolute deviation.
pub fn encoder_sweep(cases: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        let heads = r.gen_range(1..=2);
        let cfg = EncoderConfig {
            input_dim: r.gen_range(1..=6),
            hidden_dim: heads * r.gen_range(1..=8 / heads),
            kernel_width: [1, 3, 5][r.gen_range(0..3)],
            heads,
            clip: r.gen_range(1..=4),
        };
        let p = EncoderParams::<Tensor<f64>>::init(&cfg, &mut r).map(|_, t| random_tensor(t.shape(), &mut r));
        let (b, t) = (r.gen_range(1..=3), r.gen_range(1..=8));
        let mut mask = Vec::with_capacity(b * t);
        let mut xs = Vec::with_capacity(b);
        for _ in 0..b {
            let real = r.gen_range(1..=t);
            mask.extend((0..t).map(|i| i < real));
            xs.push(matrix(&mut r, t, cfg.input_dim));
        }
        let tape = Tape::new();
        let flat: Vec<f64> = xs.iter().flatten().flatten().copied().collect();
        let x = tape.constant(Tensor::new(vec![b, t, cfg.input_dim], flat)?);
        let leaves = p.map(|_, v| tape.constant(v.clone()));
        let z = encode_sequence(&tape, x, &mask, &leaves, &cfg, 0.0, false, &mut r)?;
        let got = tape.value(z);
        let row = t * cfg.hidden_dim;
        for (bi, x) in xs.iter().enumerate() {
            let want: Vec<f64> = reference::encode_sequence(x, &mask[bi * t..(bi + 1) * t], &p, &cfg)
                .into_iter()
                .flatten()
                .collect();
            worst = worst.max(max_diff(&got.data()[bi * row..(bi + 1) * row], &want));
        }
    }
    Ok(worst)
}

/// Random padded inputs pooled on the tape and with the direct loop.
pub fn aggregator_sweep(cases: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        let (t, dk) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let p = AggregatorParams::<Tensor<f64>>::init(dk, &mut r).map(|_, v| random_tensor(v.shape(), &mut r));
        let real = r.gen_range(1..=t);
        let mask: Vec<bool> = (0..t).map(|i| i < real).collect();
        let z = matrix(&mut r, t, dk);
        let tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![t, dk], z.iter().flatten().copied().collect())?);
        let leaves = p.map(|_, v| tape.constant(v.clone()));
        let (l, w) = aggregate(&tape, zv, &mask, &leaves)?;
        let (l0, w0) = reference::aggregate(&z, &mask, &p);
        worst = worst.max(max_diff(tape.value(l).data(), &l0));
        worst = worst.max(max_diff(tape.value(w).data(), &w0));
    }
    Ok(worst)
}

/// Oracle sweeps (`cases` each) and the full gradient suite.
pub fn run(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let enc = encoder_sweep(cases, seed)?;
    checks.push(Check {
        name: format!("encoder oracle ({cases} cases)"),
        passed: enc < ENCODER_TOLERANCE,
        detail: format!("max deviation {enc:.3e} (tolerance {ENCODER_TOLERANCE:e})"),
    });
    let agg = aggregator_sweep(cases, seed)?;
    checks.push(Check {
        name: format!("aggregator oracle ({cases} cases)"),
        passed: agg < AGGREGATOR_TOLERANCE,
        detail: format!("max deviation {agg:.3e} (tolerance {AGGREGATOR_TOLERANCE:e})"),
    });
    let mut grads: Vec<(String, crate::gradcheck::GradReport)> = op_suite(seed)?
        .into_iter()
        .map(|(name, rep)| (format!("gradient {name}"), rep))
        .collect();
    grads.push(("gradient encoder".into(), encoder_check(seed)?));
    grads.push(("gradient aggregator".into(), aggregator_check(seed)?));
    grads.push(("gradient full model".into(), model_check(seed)?));
    grads.push(("gradient tiny model (sampled)".into(), tiny_model_check(seed, 16)?));
    for (name, rep) in grads {
        checks.push(Check {
            name,
            passed: rep.passed(),
            detail: format!(
                "{} entries, max relative error {:.3e} (tolerance {REL_TOLERANCE:e}); worst {}",
                rep.checked, rep.max_rel_error, rep.worst
            ),
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_passes() {
        let checks = run(5, 1).unwrap();
        assert!(checks.len() > 20);
        for c in &checks {
            assert!(c.passed, "{c}");
        }
    }
}
