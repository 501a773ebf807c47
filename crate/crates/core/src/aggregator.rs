//! Attention pooling of a contextual sequence into a single vector:
//! `score_i = hᵀ Relu(W_p z_i + b_p)`, `w = softmax(score)` over real
//! positions, `l = Σ w_i z_i`.

use rand::Rng;

use crate::encoder::{glorot, uniform};
use crate::error::{HsacnError, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<P> {
    pub w_p: P,
    pub b_p: P,
    /// Query vector `h`.
    pub h_query: P,
}

/// Width of the scoring projection for an input of width `hidden`.
pub fn projection_dim(hidden: usize) -> usize {
    hidden.div_ceil(2)
}

impl<P> AggregatorParams<P> {
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> AggregatorParams<Q> {
        AggregatorParams {
            w_p: f("w_p", &self.w_p),
            b_p: f("b_p", &self.b_p),
            h_query: f("h_query", &self.h_query),
        }
    }

    /// Fields in declaration order.
    pub fn into_vec(self) -> Vec<P> {
        vec![
            self.w_p,
            self.b_p,
            self.h_query,
        ]
    }

    /// Mutable fields in declaration order.
    pub fn fields_mut(&mut self) -> Vec<&mut P> {
        let AggregatorParams { w_p, b_p, h_query } = self;
        vec![w_p, b_p, h_query]
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        f("w_p", &mut self.w_p);
        f("b_p", &mut self.b_p);
        f("h_query", &mut self.h_query);
    }
}

impl<T: Real> AggregatorParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let dp = projection_dim(hidden);
        AggregatorParams {
            w_p: glorot(dp, hidden, rng),
            b_p: Tensor::zeros(&[dp]),
            h_query: uniform(&[dp], 0.1, rng),
        }
    }

    pub fn leaves(&self, tape: &Tape<T>) -> AggregatorParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }

    pub fn hidden(&self) -> usize {
        self.w_p.shape()[1]
    }
}

/// Pools `z[B, T, d_k]` (or `z[T, d_k]`) into `l[B, d_k]` (or `l[d_k]`) and
/// returns the pooling weights `[B, T]` (or `[T]`).
pub fn aggregate<T: Real>(tape: &Tape<T>, z: Var, mask: &[bool], p: &AggregatorParams<Var>) -> Result<(Var, Var)> {
    let s = tape.shape(z);
    let (b, t, dk, flat) = match s.as_slice() {
        [t, d] => (1, *t, *d, true),
        [b, t, d] => (*b, *t, *d, false),
        _ => return Err(HsacnError::Shape(format!("expected [T, d] or [B, T, d], got {s:?}"))),
    };
    if mask.len() != b * t {
        return Err(HsacnError::InvalidMask(format!(
            "mask has {} entries for {b}x{t} positions",
            mask.len()
        )));
    }
    let dp = tape.shape(p.b_p)[0];
    let flat_z = tape.reshape(z, &[b * t, dk])?;
    let hidden = tape.matmul_t(flat_z, p.w_p, false, true)?;
    let hidden = tape.add_bias(hidden, p.b_p)?;
    let hidden = tape.relu(hidden);
    let query = tape.reshape(p.h_query, &[dp, 1])?;
    let scores = tape.matmul(hidden, query)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let weights = tape.masked_softmax(scores, mask)?;
    let w3 = tape.reshape(weights, &[b, 1, t])?;
    let z3 = tape.reshape(z, &[b, t, dk])?;
    let pooled = tape.bmm(w3, z3, false)?;
    if flat {
        Ok((tape.reshape(pooled, &[dk])?, tape.reshape(weights, &[t])?))
    } else {
        Ok((tape.reshape(pooled, &[b, dk])?, weights))
    }
}
