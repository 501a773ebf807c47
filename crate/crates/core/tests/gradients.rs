use hsacn_core::gradcheck::{aggregator_check, check_fn, encoder_check, model_check, op_suite, random_tensor, tiny_model_check};
use hsacn_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_operation_matches_finite_differences() {
    for seed in 0..3 {
        for (name, report) in op_suite(seed).unwrap() {
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn relu_gradient_away_from_zero() {
    let report = check_fn(&[Tensor::vector(vec![-1.0, 2.0])], |t, v| Ok(t.relu(v[0]))).unwrap();
    assert!(report.passed());
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
    let y = tape.relu(x);
    let loss = tape.sum(y);
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn matmul_gradient_example_matches_differences() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
    let report = check_fn(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encoder_parameters() {
    let report = encoder_check(1).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn aggregator_parameters() {
    let report = aggregator_check(2).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn full_model_toy_batch() {
    let report = model_check(3).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 500);
}

fn softmax_rows(scores: &[f64], mask: &[bool], row: usize) -> Vec<f64> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![scores.len() / row, row], scores.to_vec()).unwrap());
    let y = tape.masked_softmax(x, mask).unwrap();
    let out = tape.value(y).data().to_vec();
    out
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        rows in 1usize..5,
        row in 1usize..9,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..rows * row).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut mask: Vec<bool> = (0..rows * row).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * row + rng.gen_range(0..row)] = true;
        }
        let y = softmax_rows(&scores, &mask, row);
        for r in 0..rows {
            let sum: f64 = y[r * row..(r + 1) * row].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
        for (v, &m) in y.iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let z = softmax_rows(&shifted, &mask, row);
        for (a, b) in y.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn random_matmul_gradients(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k, n], &mut rng);
        let report = check_fn(&[a, b], |t, v| t.matmul(v[0], v[1])).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}

#[test]
fn tiny_config_model_sampled() {
    let r = tiny_model_check(3, 16).unwrap();
    assert!(r.passed(), "{} {:.3e} {}", r.checked, r.max_rel_error, r.worst);
}
