mod common;

use common::*;
use hsacn_core::aggregator::{aggregate, projection_dim, AggregatorParams};
use hsacn_core::reference::{self, Matrix};
use hsacn_core::{HsacnError, Tape, Tensor};
use proptest::prelude::*;

fn pool(z: &Matrix, mask: &[bool], p: &AggregatorParams<Tensor<f64>>) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let zv = tape.constant(to_tensor(z));
    let leaves = p.map(|_, t| tape.constant(t.clone()));
    let (l, w) = aggregate(&tape, zv, mask, &leaves).unwrap();
    let out = (tape.value(l).data().to_vec(), tape.value(w).data().to_vec());
    out
}

#[test]
fn projection_width_rounds_up() {
    assert_eq!(projection_dim(6), 3);
    assert_eq!(projection_dim(5), 3);
    assert_eq!(projection_dim(1), 1);
    let p: AggregatorParams<Tensor<f64>> = AggregatorParams::init(150, &mut rng(0));
    assert_eq!(p.w_p.shape(), &[75, 150]);
}

#[test]
fn single_element() {
    let mut r = rng(1);
    let p = aggregator_params(4, &mut r);
    let z = matrix(&mut r, 1, 4);
    let (l, w) = pool(&z, &[true], &p);
    assert_eq!(w, vec![1.0]);
    assert_eq!(l, z[0]);
}

#[test]
fn identical_rows_get_uniform_weights() {
    let mut r = rng(2);
    let p = aggregator_params(4, &mut r);
    let row = matrix(&mut r, 1, 4).remove(0);
    let z = vec![row.clone(); 5];
    let (l, w) = pool(&z, &[true; 5], &p);
    assert!(w.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    assert!(l.iter().zip(&row).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn matches_direct_loops() {
    let mut r = rng(3);
    let p = aggregator_params(6, &mut r);
    let z = matrix(&mut r, 5, 6);
    let mask = [true; 5];
    let (l, w) = pool(&z, &mask, &p);
    let (l0, w0) = reference::aggregate(&z, &mask, &p);
    assert!(max_diff(&vec![l], &vec![l0]) < 1e-12);
    assert!(max_diff(&vec![w], &vec![w0]) < 1e-12);
}

#[test]
fn randomized_sweep_matches_oracle() {
    let worst = hsacn_core::selftest::aggregator_sweep(250, 77).unwrap();
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn fully_masked_is_rejected() {
    let mut r = rng(4);
    let p = aggregator_params(3, &mut r);
    let tape = Tape::new();
    let z = tape.constant(to_tensor(&matrix(&mut r, 2, 3)));
    let leaves = p.map(|_, t| tape.constant(t.clone()));
    let err = aggregate(&tape, z, &[false, false], &leaves).unwrap_err();
    assert!(matches!(err, HsacnError::InvalidMask(_)));
}

proptest! {
    #[test]
    fn weights_form_a_distribution(seed in any::<u64>(), t in 1usize..=8, real in 1usize..=8) {
        let real = real.min(t);
        let mut r = rng(seed);
        let p = aggregator_params(5, &mut r);
        let z = matrix(&mut r, t, 5);
        let mask: Vec<bool> = (0..t).map(|i| i < real).collect();
        let (_, w) = pool(&z, &mask, &p);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, &m) in w.iter().zip(&mask) {
            prop_assert!(*a >= 0.0);
            if !m {
                prop_assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), t in 2usize..=8, shift in 1usize..8) {
        let mut r = rng(seed);
        let p = aggregator_params(4, &mut r);
        let z = matrix(&mut r, t, 4);
        let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
        let zp: Matrix = perm.iter().map(|&i| z[i].clone()).collect();
        let (l, w) = pool(&z, &vec![true; t], &p);
        let (lp, wp) = pool(&zp, &vec![true; t], &p);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((wp[k] - w[i]).abs() < 1e-9);
        }
        prop_assert!(l.iter().zip(&lp).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn padding_invariance(seed in any::<u64>(), t in 1usize..=6, pads in 1usize..=5) {
        let mut r = rng(seed);
        let p = aggregator_params(4, &mut r);
        let z = matrix(&mut r, t, 4);
        let (l, w) = pool(&z, &vec![true; t], &p);
        let mut zp = z.clone();
        zp.extend(matrix(&mut r, pads, 4));
        let mask: Vec<bool> = (0..t + pads).map(|i| i < t).collect();
        let (lp, wp) = pool(&zp, &mask, &p);
        prop_assert!(l.iter().zip(&lp).all(|(a, b)| (a - b).abs() < 1e-9));
        prop_assert!(w.iter().zip(&wp).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
