#![allow(dead_code)]

use hsacn_core::aggregator::AggregatorParams;
use hsacn_core::encoder::{encode_sequence_with_attention, EncoderConfig, EncoderParams};
use hsacn_core::gradcheck::random_tensor;
use hsacn_core::reference::Matrix;
use hsacn_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Encoder parameters with every entry (biases included) uniform in [-1, 1].
pub fn encoder_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> EncoderParams<Tensor<f64>> {
    let shapes = EncoderParams::<Tensor<f64>>::init(cfg, rng);
    shapes.map(|_, t| random_tensor(t.shape(), rng))
}

pub fn aggregator_params(dk: usize, rng: &mut ChaCha8Rng) -> AggregatorParams<Tensor<f64>> {
    let shapes = AggregatorParams::<Tensor<f64>>::init(dk, rng);
    shapes.map(|_, t| random_tensor(t.shape(), rng))
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &Matrix) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], m.iter().flatten().copied().collect()).unwrap()
}

pub fn rows(t: &[f64], cols: usize) -> Matrix {
    t.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Tape encoder on one sequence, dropout off. Returns rows and the
/// attention weights `[H][T][T]` flattened.
pub fn tape_encode(x: &Matrix, mask: &[bool], p: &EncoderParams<Tensor<f64>>, cfg: &EncoderConfig) -> (Matrix, Vec<f64>) {
    let tape = Tape::new();
    let xv = tape.constant(to_tensor(x));
    let leaves = p.map(|_, t| tape.constant(t.clone()));
    let out = encode_sequence_with_attention(&tape, xv, mask, &leaves, cfg, 0.5, false, &mut rng(0)).unwrap();
    let z = rows(tape.value(out.output).data(), cfg.hidden_dim);
    let w = tape.value(out.weights).data().to_vec();
    (z, w)
}

/// Tiny model with every parameter drawn uniformly from `[-0.5, 0.5]`.
pub fn model_params(
    cfg: &hsacn_core::model::ModelConfig,
    dims: hsacn_core::model::Dimensions,
    seed: u64,
) -> hsacn_core::model::HsacnParams<Tensor<f64>> {
    let mut r = rng(seed);
    let p = hsacn_core::model::HsacnParams::<Tensor<f64>>::init(cfg, dims, 3.0, &mut r).unwrap();
    p.map(|_, t| {
        let u = random_tensor(t.shape(), &mut r);
        Tensor::new(t.shape().to_vec(), u.data().iter().map(|v| 0.5 * v).collect()).unwrap()
    })
}
