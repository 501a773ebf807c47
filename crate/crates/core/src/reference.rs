//! Direct loop implementations of the encoder, aggregator and rating
//! formulas. They never touch the tape and serve as independent oracles for
//! the tape-based implementations (tests and `hsacn selftest`).

use crate::aggregator::AggregatorParams;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::model::{Example, HsacnParams, ModelConfig, TowerParams};
use crate::tensor::Tensor;

pub type Matrix = Vec<Vec<f64>>;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn affine(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| (0..cols).map(|c| w.at(r, c) * x[c]).sum::<f64>() + b.data()[r])
        .collect()
}

/// Window concatenation around position `i` with zero vectors for
/// out-of-range or padded neighbours.
pub fn window(x: &Matrix, mask: &[bool], i: usize, width: usize) -> Vec<f64> {
    let d = x[0].len();
    let half = (width - 1) / 2;
    let mut c = Vec::with_capacity(width * d);
    for w in 0..width {
        let j = i as isize + w as isize - half as isize;
        if j >= 0 && (j as usize) < x.len() && mask[j as usize] {
            c.extend_from_slice(&x[j as usize]);
        } else {
            c.extend(std::iter::repeat(0.0).take(d));
        }
    }
    c
}

/// `(q, k, v)` by explicitly building every window.
pub fn conv_qkv(x: &Matrix, mask: &[bool], p: &EncoderParams<Tensor<f64>>, cfg: &EncoderConfig) -> (Matrix, Matrix, Matrix) {
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for i in 0..x.len() {
        let c = window(x, mask, i, cfg.kernel_width);
        q.push(affine(&p.w_q, &p.b_q, &c).into_iter().map(relu).collect());
        k.push(affine(&p.w_k, &p.b_k, &c).into_iter().map(relu).collect());
        v.push(affine(&p.w_v, &p.b_v, &c).into_iter().map(relu).collect());
    }
    (q, k, v)
}

/// Triple loop over heads, queries and keys. Returns the concatenated head
/// outputs (zero rows at padded queries) and `a[h][i][j]`.
pub fn relative_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &[bool],
    p: &EncoderParams<Tensor<f64>>,
    cfg: &EncoderConfig,
) -> (Matrix, Vec<Matrix>) {
    let t = q.len();
    let dh = cfg.head_dim();
    let mut out = vec![vec![0.0; cfg.hidden_dim]; t];
    let mut attn = vec![vec![vec![0.0; t]; t]; cfg.heads];
    for h in 0..cfg.heads {
        let off = h * dh;
        for i in 0..t {
            let mut e = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                if !mask[j] {
                    continue;
                }
                let r = cfg.bucket(i, j);
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][off + c] * (k[j][off + c] + p.p_k.at(r, c));
                }
                e[j] = s / (dh as f64).sqrt();
            }
            let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = e.iter().map(|&x| if x.is_finite() { (x - max).exp() } else { 0.0 }).sum();
            for j in 0..t {
                attn[h][i][j] = if mask[j] { (e[j] - max).exp() / denom } else { 0.0 };
            }
            if !mask[i] {
                continue;
            }
            for j in 0..t {
                let r = cfg.bucket(i, j);
                for c in 0..dh {
                    out[i][off + c] += attn[h][i][j] * (v[j][off + c] + p.p_v.at(r, c));
                }
            }
        }
    }
    (out, attn)
}

/// Full encoder with dropout disabled.
pub fn encode_sequence(x: &Matrix, mask: &[bool], p: &EncoderParams<Tensor<f64>>, cfg: &EncoderConfig) -> Matrix {
    let (q, k, v) = conv_qkv(x, mask, p, cfg);
    let (z, _) = relative_attention(&q, &k, &v, mask, p, cfg);
    z.iter()
        .zip(mask)
        .map(|(zi, &m)| {
            if m {
                affine(&p.w_f, &p.b_f, zi).into_iter().map(relu).collect()
            } else {
                vec![0.0; cfg.hidden_dim]
            }
        })
        .collect()
}

/// Attention pooling evaluated with two explicit loops.
pub fn aggregate(z: &Matrix, mask: &[bool], p: &AggregatorParams<Tensor<f64>>) -> (Vec<f64>, Vec<f64>) {
    let dk = z[0].len();
    let scores: Vec<f64> = z
        .iter()
        .map(|zi| {
            let hidden = affine(&p.w_p, &p.b_p, zi);
            hidden.iter().zip(p.h_query.data()).map(|(&a, &h)| relu(a) * h).sum()
        })
        .collect();
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| (s - max).exp()).sum();
    let weights: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() / denom } else { 0.0 })
        .collect();
    let mut l = vec![0.0; dk];
    for (zi, &w) in z.iter().zip(&weights) {
        for c in 0..dk {
            l[c] += w * zi[c];
        }
    }
    (l, weights)
}

/// Projection `Relu(W x + b)`.
pub fn project(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    affine(w, b, x).into_iter().map(relu).collect()
}

pub fn mse(predictions: &[f64], truths: &[f64]) -> f64 {
    let n = predictions.len() as f64;
    predictions.iter().zip(truths).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / n
}

pub fn rmse_clamped(predictions: &[f64], truths: &[f64]) -> f64 {
    let clamped: Vec<f64> = predictions.iter().map(|p| p.clamp(1.0, 5.0)).collect();
    mse(&clamped, truths).sqrt()
}

/// Nearest-rank percentile by definition: the smallest observed value `v`
/// such that at least `percent`% of the values are `<= v`.
pub fn nearest_rank(values: &[usize], percent: usize) -> usize {
    let n = values.len();
    let mut candidates = values.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    candidates
        .into_iter()
        .find(|&v| 100 * values.iter().filter(|&&x| x <= v).count() >= percent * n)
        .expect("non-empty input")
}

/// Sentence vector and word weights, one sentence at a time without padding.
pub fn encode_sentence(p: &HsacnParams<Tensor<f64>>, cfg: &ModelConfig, words: &[u32]) -> (Vec<f64>, Vec<f64>) {
    let x: Matrix = words.iter().map(|&w| p.embedding.row(w as usize).to_vec()).collect();
    let mask = vec![true; x.len()];
    let z = encode_sequence(&x, &mask, &p.word_encoder, &cfg.word_encoder());
    aggregate(&z, &mask, &p.word_aggregator)
}

/// Review vector, sentence weights and per-sentence word weights.
pub fn encode_review(
    p: &HsacnParams<Tensor<f64>>,
    cfg: &ModelConfig,
    review: &[Vec<u32>],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let (sentences, word_weights): (Matrix, Matrix) = review.iter().map(|s| encode_sentence(p, cfg, s)).unzip();
    let mask = vec![true; sentences.len()];
    let z = encode_sequence(&sentences, &mask, &p.sentence_encoder, &cfg.sentence_encoder());
    let (r, sw) = aggregate(&z, &mask, &p.sentence_aggregator);
    (r, sw, word_weights)
}

/// Pooled history and review weights for one tower.
pub fn encode_history(
    p: &HsacnParams<Tensor<f64>>,
    tower: &TowerParams<Tensor<f64>>,
    cfg: &ModelConfig,
    reviews: &[&[Vec<u32>]],
) -> (Vec<f64>, Vec<f64>) {
    let encoded: Matrix = reviews.iter().map(|r| encode_review(p, cfg, r).0).collect();
    aggregate(&encoded, &vec![true; encoded.len()], &tower.aggregator)
}

/// Rating `w_fᵀ((ū_d + ū_r) ⊙ (ī_d + ī_r)) + b_u + b_v + b_g` with dropout
/// off; an empty history contributes a zero `ū_r`.
pub fn predict(
    p: &HsacnParams<Tensor<f64>>,
    cfg: &ModelConfig,
    reviews: &[crate::ingest::TokenizedReview],
    e: &Example,
) -> f64 {
    let side = |tower: &TowerParams<Tensor<f64>>, entity: usize, hist: &[usize]| -> Vec<f64> {
        let mut v = tower.embedding.row(entity).to_vec();
        if !hist.is_empty() {
            let texts: Vec<&[Vec<u32>]> = hist.iter().map(|&r| reviews[r].sentences.as_slice()).collect();
            let (pooled, _) = encode_history(p, tower, cfg, &texts);
            for (a, b) in v.iter_mut().zip(project(&tower.projection, &tower.projection_bias, &pooled)) {
                *a += b;
            }
        }
        v
    };
    let u = side(&p.user, e.user, &e.user_reviews);
    let i = side(&p.item, e.item, &e.item_reviews);
    let dot: f64 = (0..cfg.latent).map(|k| p.w_f.data()[k] * u[k] * i[k]).sum();
    dot + p.user.bias.data()[e.user] + p.item.bias.data()[e.item] + p.global_bias.data()[0]
}
