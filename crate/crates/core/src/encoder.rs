//! Sequence encoding module: convolutional Q/K/V extraction followed by
//! multi-head self-attention with clipped relative position embeddings and a
//! position-wise feed-forward layer.
//!
//! All functions operate on a padded batch `x[B, T, d]` with a row mask of
//! length `B·T` (`true` = real element). A 2-D input `x[T, d]` is treated as a
//! batch of one and the output keeps the 2-D shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsacnError, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Convolution width `n`; must be odd.
    pub kernel_width: usize,
    pub heads: usize,
    /// Relative distances are clipped to `[-clip, clip]`.
    pub clip: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HsacnError::Parameter(m));
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.kernel_width % 2 == 0 {
            return bad(format!("kernel width {} must be odd", self.kernel_width));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.clip == 0 {
            return bad("clipping distance must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Rows of each relative-position table.
    pub fn positions(&self) -> usize {
        2 * self.clip + 1
    }

    /// Table row for the signed distance `j - i`.
    pub fn bucket(&self, i: usize, j: usize) -> usize {
        let c = self.clip as isize;
        ((j as isize - i as isize).clamp(-c, c) + c) as usize
    }
}

/// Learnable arrays of one encoder. Generic over the leaf type so the same
/// layout serves stored tensors and tape variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub b_q: P,
    pub b_k: P,
    pub b_v: P,
    /// Key-side relative position table, shared by all heads.
    pub p_k: P,
    /// Value-side relative position table, shared by all heads.
    pub p_v: P,
    pub w_f: P,
    pub b_f: P,
}

impl<P> EncoderParams<P> {
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            w_q: f("w_q", &self.w_q),
            w_k: f("w_k", &self.w_k),
            w_v: f("w_v", &self.w_v),
            b_q: f("b_q", &self.b_q),
            b_k: f("b_k", &self.b_k),
            b_v: f("b_v", &self.b_v),
            p_k: f("p_k", &self.p_k),
            p_v: f("p_v", &self.p_v),
            w_f: f("w_f", &self.w_f),
            b_f: f("b_f", &self.b_f),
        }
    }

    /// Fields in declaration order.
    pub fn into_vec(self) -> Vec<P> {
        vec![
            self.w_q,
            self.w_k,
            self.w_v,
            self.b_q,
            self.b_k,
            self.b_v,
            self.p_k,
            self.p_v,
            self.w_f,
            self.b_f,
        ]
    }

    /// Mutable fields in declaration order.
    pub fn fields_mut(&mut self) -> Vec<&mut P> {
        let EncoderParams { w_q, w_k, w_v, b_q, b_k, b_v, p_k, p_v, w_f, b_f } = self;
        vec![w_q, w_k, w_v, b_q, b_k, b_v, p_k, p_v, w_f, b_f]
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("b_q", &mut self.b_q);
        f("b_k", &mut self.b_k);
        f("b_v", &mut self.b_v);
        f("p_k", &mut self.p_k);
        f("p_v", &mut self.p_v);
        f("w_f", &mut self.w_f);
        f("b_f", &mut self.b_f);
    }
}

pub(crate) fn glorot<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(&[rows, cols], limit, rng)
}

pub(crate) fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Real> EncoderParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, dk, n, dh) = (cfg.input_dim, cfg.hidden_dim, cfg.kernel_width, cfg.head_dim());
        EncoderParams {
            w_q: glorot(dk, n * d, rng),
            w_k: glorot(dk, n * d, rng),
            w_v: glorot(dk, n * d, rng),
            b_q: Tensor::zeros(&[dk]),
            b_k: Tensor::zeros(&[dk]),
            b_v: Tensor::zeros(&[dk]),
            p_k: uniform(&[cfg.positions(), dh], 0.1, rng),
            p_v: uniform(&[cfg.positions(), dh], 0.1, rng),
            w_f: glorot(dk, dk, rng),
            b_f: Tensor::zeros(&[dk]),
        }
    }

    pub fn leaves(&self, tape: &Tape<T>) -> EncoderParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let (d, dk, n, dh) = (cfg.input_dim, cfg.hidden_dim, cfg.kernel_width, cfg.head_dim());
        let expect = |name: &str| -> Vec<usize> {
            match name {
                "w_q" | "w_k" | "w_v" => vec![dk, n * d],
                "b_q" | "b_k" | "b_v" | "b_f" => vec![dk],
                "p_k" | "p_v" => vec![cfg.positions(), dh],
                _ => vec![dk, dk],
            }
        };
        let mut err = None;
        self.map(|name, t| {
            let want = expect(name);
            if t.shape() != want.as_slice() && err.is_none() {
                err = Some(HsacnError::Dimension {
                    op: "encoder params",
                    lhs: t.shape().to_vec(),
                    rhs: want,
                });
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Batch geometry derived from an encoder input.
struct Geometry {
    batch: usize,
    len: usize,
    flat: bool,
}

fn geometry<T: Real>(tape: &Tape<T>, x: Var, mask: &[bool], width: usize) -> Result<Geometry> {
    let s = tape.shape(x);
    let (batch, len, dim, flat) = match s.as_slice() {
        [t, d] => (1, *t, *d, true),
        [b, t, d] => (*b, *t, *d, false),
        _ => return Err(HsacnError::Shape(format!("expected [T, d] or [B, T, d], got {s:?}"))),
    };
    if dim != width {
        return Err(HsacnError::Dimension {
            op: "encoder input",
            lhs: s,
            rhs: vec![width],
        });
    }
    if mask.len() != batch * len {
        return Err(HsacnError::InvalidMask(format!(
            "mask has {} entries for {batch}x{len} positions",
            mask.len()
        )));
    }
    for (b, row) in mask.chunks(len).enumerate() {
        if !row.iter().any(|&m| m) {
            return Err(HsacnError::InvalidMask(format!("sequence {b} has no unmasked position")));
        }
    }
    Ok(Geometry { batch, len, flat })
}

/// Per-element factor that zeroes padded rows of a `[B·T, width]` layout.
pub(crate) fn row_mask<T: Real>(mask: &[bool], width: usize) -> Vec<T> {
    mask.iter()
        .flat_map(|&m| std::iter::repeat(if m { T::one() } else { T::zero() }).take(width))
        .collect()
}

/// Convolutional n-gram features `q_i, k_i, v_i = Relu(W c_i + b)` where
/// `c_i` concatenates the width-`n` window around `i` (zero vectors outside
/// the real sequence).
pub fn conv_qkv<T: Real>(
    tape: &Tape<T>,
    x: Var,
    mask: &[bool],
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
) -> Result<(Var, Var, Var)> {
    let g = geometry(tape, x, mask, cfg.input_dim)?;
    let (b, t, d, dk) = (g.batch, g.len, cfg.input_dim, cfg.hidden_dim);
    // Padded positions act as zero vectors for their neighbours.
    let x = tape.reshape(x, &[b, t, d])?;
    let x = tape.mul_const(x, row_mask(mask, d))?;
    let windows = tape.unfold(x, cfg.kernel_width)?;
    let windows = tape.reshape(windows, &[b * t, cfg.kernel_width * d])?;
    let project = |w: Var, bias: Var| -> Result<Var> {
        let y = tape.matmul_t(windows, w, false, true)?;
        let y = tape.add_bias(y, bias)?;
        let y = tape.relu(y);
        if g.flat {
            tape.reshape(y, &[t, dk])
        } else {
            tape.reshape(y, &[b, t, dk])
        }
    };
    Ok((project(p.w_q, p.b_q)?, project(p.w_k, p.b_k)?, project(p.w_v, p.b_v)?))
}

/// Output of [`relative_attention`].
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// Concatenated head outputs, `[B, T, d_k]` (or `[T, d_k]`).
    pub output: Var,
    /// Attention coefficients `[B, H, T, T]`; rows of padded queries are
    /// still valid distributions but their outputs are zeroed.
    pub weights: Var,
}

/// Multi-head self-attention with relative position embeddings:
/// `e_ij = <q_i, k_j + pK[j-i]> / √d_h`, `a = softmax_j(e)` over real `j`,
/// `z_i = Σ_j a_ij (v_j + pV[j-i])`.
pub fn relative_attention<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
) -> Result<Attention> {
    let g = geometry(tape, q, mask, cfg.hidden_dim)?;
    for other in [k, v] {
        if tape.shape(other) != tape.shape(q) {
            return Err(HsacnError::Dimension {
                op: "relative_attention",
                lhs: tape.shape(q),
                rhs: tape.shape(other),
            });
        }
    }
    let (b, t, h, dh, dk) = (g.batch, g.len, cfg.heads, cfg.head_dim(), cfg.hidden_dim);
    let positions = cfg.positions();
    let buckets: Vec<usize> = (0..t * t).map(|ij| cfg.bucket(ij / t, ij % t)).collect();

    let split = |x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, t, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, t, dh])
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);

    let content = tape.bmm(qh, kh, true)?;
    let q_flat = tape.reshape(qh, &[b * h * t, dh])?;
    let pos = tape.matmul_t(q_flat, p.p_k, false, true)?;
    let pos = tape.reshape(pos, &[b * h, t, positions])?;
    let pos = tape.bucket_gather(pos, &buckets, t)?;
    let scores = tape.add(content, pos)?;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));

    let mut key_mask = Vec::with_capacity(b * h * t * t);
    for bi in 0..b {
        let row = &mask[bi * t..(bi + 1) * t];
        for _ in 0..h * t {
            key_mask.extend_from_slice(row);
        }
    }
    let weights = tape.masked_softmax(scores, &key_mask)?;

    let mixed = tape.bmm(weights, vh, false)?;
    let spread = tape.bucket_scatter(weights, &buckets, positions)?;
    let spread = tape.reshape(spread, &[b * h * t, positions])?;
    let rel = tape.matmul(spread, p.p_v)?;
    let rel = tape.reshape(rel, &[b * h, t, dh])?;
    let z = tape.add(mixed, rel)?;

    let z = tape.reshape(z, &[b, h, t, dh])?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    let z = tape.reshape(z, &[b, t, dk])?;
    let z = tape.mul_const(z, row_mask(mask, dk))?;
    let output = if g.flat { tape.reshape(z, &[t, dk])? } else { z };
    let weights = tape.reshape(weights, &[b, h, t, t])?;
    Ok(Attention { output, weights })
}

/// Full encoding module: `conv_qkv → relative_attention → Relu(W_f z + b_f) →
/// dropout`. Padded output rows are zero.
#[allow(clippy::too_many_arguments)]
pub fn encode_sequence<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    x: Var,
    mask: &[bool],
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    Ok(encode_sequence_with_attention(tape, x, mask, p, cfg, dropout, training, rng)?.output)
}

/// As [`encode_sequence`], also exposing the self-attention coefficients.
#[allow(clippy::too_many_arguments)]
pub fn encode_sequence_with_attention<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    x: Var,
    mask: &[bool],
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Attention> {
    let (q, k, v) = conv_qkv(tape, x, mask, p, cfg)?;
    let att = relative_attention(tape, q, k, v, mask, p, cfg)?;
    let shape = tape.shape(att.output);
    let rows = mask.len();
    let dk = cfg.hidden_dim;
    let z = tape.reshape(att.output, &[rows, dk])?;
    let z = tape.matmul_t(z, p.w_f, false, true)?;
    let z = tape.add_bias(z, p.b_f)?;
    let z = tape.relu(z);
    let z = tape.dropout(z, dropout, training, rng)?;
    let z = tape.mul_const(z, row_mask(mask, dk))?;
    let output = tape.reshape(z, &shape)?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}
