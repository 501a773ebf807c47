use std::cell::{Ref, RefCell};

use rand::Rng;

use super::kernels::{gemm, permute_data};
use super::Tensor;
use crate::error::{HsacnError, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddBias { x: usize, bias: usize },
    MulConst { x: usize, factor: Vec<T> },
    Relu { x: usize },
    MaskedSoftmax { x: usize, row: usize },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Slice { x: usize, outer: usize, in_chunk: usize, start: usize, chunk: usize },
    GatherRows { src: usize, idx: Vec<Option<usize>>, cols: usize },
    Unfold { x: usize, batch: usize, t: usize, d: usize, width: usize },
    BucketGather { x: usize, idx: Vec<usize>, lead: usize, t: usize, p: usize },
    BucketScatter { x: usize, idx: Vec<usize>, lead: usize, t: usize, p: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic record of differentiable operations, rebuilt per forward pass.
///
/// A tape is confined to one thread; independent tapes may run in parallel.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> HsacnError {
    HsacnError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// 2-D matrix product `a · b`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (out, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 {
                return Err(dim_err("matmul", sa, sb));
            }
            let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if k != k2 {
                return Err(dim_err("matmul", sa, sb));
            }
            let mut out = vec![T::zero(); m * n];
            gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb, m, k, n }, rg))
    }

    /// Batched product over leading axes: `a[.., m, k] · b[.., k, n]`
    /// (`b[.., n, k]` transposed when `tb`).
    pub fn bmm(&self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (out, batch, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            let ra = sa.len();
            if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
                return Err(dim_err("bmm", sa, sb));
            }
            let (m, k) = (sa[ra - 2], sa[ra - 1]);
            let (k2, n) = if tb { (sb[ra - 1], sb[ra - 2]) } else { (sb[ra - 2], sb[ra - 1]) };
            if k != k2 {
                return Err(dim_err("bmm", sa, sb));
            }
            let batch: usize = sa[..ra - 2].iter().product();
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv.data()[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            let mut shape = sa[..ra - 2].to_vec();
            shape.extend([m, n]);
            (Tensor::new(shape, out)?, batch, m, k, n)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::BatchMatMul { a: a.0, b: b.0, tb, batch, m, k, n }, rg))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(dim_err(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn map_one(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.map_one(x, |v| v * c);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale { x: x.0, c }, rg)
    }

    /// Adds `bias` (length = last axis of `x`) to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let cols = *xv.shape().last().unwrap_or(&0);
            if bv.len() != cols {
                return Err(dim_err("add_bias", xv.shape(), bv.shape()));
            }
            let data = xv
                .data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bv.data()).map(|(&a, &b)| a + b))
                .collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    /// Multiplies by a constant array of the same size (masks, dropout).
    pub fn mul_const(&self, x: Var, factor: Vec<T>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if factor.len() != xv.len() {
                return Err(dim_err("mul_const", xv.shape(), &[factor.len()]));
            }
            Tensor {
                shape: xv.shape().to_vec(),
                data: xv.data().iter().zip(&factor).map(|(&a, &b)| a * b).collect(),
            }
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MulConst { x: x.0, factor }, rg))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.map_one(x, |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    /// Softmax over the last axis with masked positions forced to exactly 0.
    /// `mask[i] == true` marks a position that takes part in the softmax.
    pub fn masked_softmax(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let (out, row) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if mask.len() != xv.len() {
                return Err(dim_err("masked_softmax", xv.shape(), &[mask.len()]));
            }
            let row = *xv.shape().last().expect("non-scalar");
            let mut out = vec![T::zero(); xv.len()];
            for (r, (xs, ms)) in xv.data().chunks(row).zip(mask.chunks(row)).enumerate() {
                let max = xs
                    .iter()
                    .zip(ms)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                    .ok_or_else(|| HsacnError::InvalidMask(format!("row {r} is fully masked")))?;
                let ys = &mut out[r * row..(r + 1) * row];
                let mut total = T::zero();
                for ((y, &v), &m) in ys.iter_mut().zip(xs).zip(ms) {
                    if m {
                        *y = (v - max).exp();
                        total = total + *y;
                    }
                }
                for y in ys.iter_mut() {
                    *y = *y / total;
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, row)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MaskedSoftmax { x: x.0, row }, rg))
    }

    /// Inverted dropout: identity unless `training`; otherwise each element is
    /// zeroed with probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(HsacnError::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes.borrow()[x.0].value.len();
        let keep = T::of(1.0 / (1.0 - rate));
        let factor = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data().iter().copied().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            (d.iter().copied().sum::<T>(), d.len())
        };
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean { x: x.0 }, rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape { x: x.0 }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut sorted = perm.to_vec();
            sorted.sort_unstable();
            if perm.len() != xv.shape().len() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(dim_err("permute", xv.shape(), perm));
            }
            let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Permute { x: x.0, perm: perm.to_vec() }, rg))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (out, outer, chunks) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts.first().ok_or_else(|| HsacnError::Shape("concat of nothing".into()))?.0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(dim_err("concat", &first, &[axis]));
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut total_axis = 0;
            let mut chunks = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                    return Err(dim_err("concat", &first, s));
                }
                total_axis += s[axis];
                chunks.push(s[axis] * inner);
            }
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for (p, &c) in parts.iter().zip(&chunks) {
                    data.extend_from_slice(&nodes[p.0].value.data()[o * c..(o + 1) * c]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total_axis;
            (Tensor::new(shape, data)?, outer, chunks)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat { parts: ids, outer, chunks }, rg))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (out, outer, in_chunk, off, chunk) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(dim_err("slice", s, &[axis, start, len]));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let (in_chunk, off, chunk) = (s[axis] * inner, start * inner, len * inner);
            let mut data = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                data.extend_from_slice(&xv.data()[o * in_chunk + off..o * in_chunk + off + chunk]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            (Tensor::new(shape, data)?, outer, in_chunk, off, chunk)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Slice { x: x.0, outer, in_chunk, start: off, chunk }, rg))
    }

    /// Row gather from a 2-D table; `None` yields a zero row. The backward
    /// pass scatter-adds into the gathered rows.
    pub fn gather_rows(&self, src: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[src.0].value;
            let s = sv.shape();
            if s.len() != 2 || idx.is_empty() {
                return Err(dim_err("gather_rows", s, &[idx.len()]));
            }
            let cols = s[1];
            let mut data = Vec::with_capacity(idx.len() * cols);
            for i in idx {
                match *i {
                    Some(r) if r < s[0] => data.extend_from_slice(sv.row(r)),
                    Some(r) => return Err(dim_err("gather_rows", s, &[r])),
                    None => data.extend(std::iter::repeat(T::zero()).take(cols)),
                }
            }
            (Tensor::new(vec![idx.len(), cols], data)?, cols)
        };
        let rg = self.rg(&[src.0]);
        Ok(self.push(out, Op::GatherRows { src: src.0, idx: idx.to_vec(), cols }, rg))
    }

    /// Sliding-window concatenation with zero padding at both ends:
    /// `x[b, t, d] -> [b, t, width·d]`, position `i` holding
    /// `x[i-h] ‖ … ‖ x[i+h]` where `h = (width-1)/2`.
    pub fn unfold(&self, x: Var, width: usize) -> Result<Var> {
        let (out, batch, t, d) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() != 3 || width % 2 == 0 {
                return Err(dim_err("unfold", s, &[width]));
            }
            let (batch, t, d) = (s[0], s[1], s[2]);
            let half = (width - 1) / 2;
            let mut data = vec![T::zero(); batch * t * width * d];
            for b in 0..batch {
                for i in 0..t {
                    for w in 0..width {
                        let j = i as isize + w as isize - half as isize;
                        if j < 0 || j >= t as isize {
                            continue;
                        }
                        let src = (b * t + j as usize) * d;
                        let dst = ((b * t + i) * width + w) * d;
                        data[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
                    }
                }
            }
            (Tensor::new(vec![batch, t, width * d], data)?, batch, t, d)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Unfold { x: x.0, batch, t, d, width }, rg))
    }

    /// `x[.., t, p] -> y[.., t, t]` with `y[.., i, j] = x[.., i, idx[i·t+j]]`.
    pub fn bucket_gather(&self, x: Var, idx: &[usize], t: usize) -> Result<Var> {
        let (out, lead, p) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            let r = s.len();
            if r < 2 || s[r - 2] != t || idx.len() != t * t {
                return Err(dim_err("bucket_gather", s, &[t, idx.len()]));
            }
            let p = s[r - 1];
            if idx.iter().any(|&k| k >= p) {
                return Err(dim_err("bucket_gather", s, &[p]));
            }
            let lead: usize = s[..r - 2].iter().product();
            let mut data = Vec::with_capacity(lead * t * t);
            for l in 0..lead {
                for i in 0..t {
                    let row = &xv.data()[(l * t + i) * p..(l * t + i + 1) * p];
                    data.extend(idx[i * t..(i + 1) * t].iter().map(|&k| row[k]));
                }
            }
            let mut shape = s[..r - 1].to_vec();
            shape.push(t);
            (Tensor::new(shape, data)?, lead, p)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::BucketGather { x: x.0, idx: idx.to_vec(), lead, t, p }, rg))
    }

    /// Adjoint of [`Tape::bucket_gather`]: `x[.., t, t] -> y[.., t, p]` with
    /// `y[.., i, k] = Σ_{j : idx[i·t+j] = k} x[.., i, j]`.
    pub fn bucket_scatter(&self, x: Var, idx: &[usize], p: usize) -> Result<Var> {
        let (out, lead, t) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            let r = s.len();
            if r < 2 || s[r - 1] != s[r - 2] || idx.len() != s[r - 1] * s[r - 1] || idx.iter().any(|&k| k >= p) {
                return Err(dim_err("bucket_scatter", s, &[p, idx.len()]));
            }
            let t = s[r - 1];
            let lead: usize = s[..r - 2].iter().product();
            let mut data = vec![T::zero(); lead * t * p];
            for l in 0..lead {
                for i in 0..t {
                    let src = &xv.data()[(l * t + i) * t..(l * t + i + 1) * t];
                    let dst = &mut data[(l * t + i) * p..(l * t + i + 1) * p];
                    for (j, &v) in src.iter().enumerate() {
                        dst[idx[i * t + j]] = dst[idx[i * t + j]] + v;
                    }
                }
            }
            let mut shape = s[..r - 1].to_vec();
            shape.push(p);
            (Tensor::new(shape, data)?, lead, t)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::BucketScatter { x: x.0, idx: idx.to_vec(), lead, t, p }, rg))
    }

    /// Reverse sweep from a one-element `loss`. Nodes are visited in exact
    /// reverse order of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(HsacnError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, m, k, n } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |ga| {
                if ta {
                    // stored k×m: dA = op(B) · dCᵀ
                    gemm(k, n, m, bv, tb, g, true, ga, true);
                } else {
                    gemm(m, n, k, g, false, bv, !tb, ga, true);
                }
            });
            accumulate(nodes, grads, b, |gb| {
                if tb {
                    // stored n×k: dB = dCᵀ · op(A)
                    gemm(n, m, k, g, true, av, ta, gb, true);
                } else {
                    gemm(k, m, n, av, !ta, g, false, gb, true);
                }
            });
        }
        Op::BatchMatMul { a, b, tb, batch, m, k, n } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |ga| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    gemm(m, n, k, gi, false, bi, !tb, &mut ga[i * m * k..(i + 1) * m * k], true);
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(n, m, k, gi, true, ai, false, dst, true);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dst, true);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, b, |gb| add_into(gb, g));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, b, |gb| {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d = *d - s;
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d = *d + s * y;
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d = *d + s * x;
                }
            });
        }
        Op::Scale { x, c } => accumulate(nodes, grads, x, |gx| {
            for (d, &s) in gx.iter_mut().zip(g) {
                *d = *d + s * c;
            }
        }),
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, x, |gx| add_into(gx, g));
            accumulate(nodes, grads, bias, |gb| {
                for row in g.chunks(gb.len()) {
                    add_into(gb, row);
                }
            });
        }
        Op::MulConst { x, ref factor } => accumulate(nodes, grads, x, |gx| {
            for ((d, &s), &f) in gx.iter_mut().zip(g).zip(factor) {
                *d = *d + s * f;
            }
        }),
        Op::Relu { x } => {
            let xv = nodes[x].value.data();
            accumulate(nodes, grads, x, |gx| {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d = *d + s;
                    }
                }
            })
        }
        Op::MaskedSoftmax { x, row } => {
            let y = out.data();
            accumulate(nodes, grads, x, |gx| {
                for ((gxr, gr), yr) in gx.chunks_mut(row).zip(g.chunks(row)).zip(y.chunks(row)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &s), &yy) in gxr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + yy * (s - dot);
                    }
                }
            })
        }
        Op::Sum { x } => accumulate(nodes, grads, x, |gx| {
            for d in gx.iter_mut() {
                *d = *d + g[0];
            }
        }),
        Op::Mean { x } => accumulate(nodes, grads, x, |gx| {
            let s = g[0] / T::of(gx.len() as f64);
            for d in gx.iter_mut() {
                *d = *d + s;
            }
        }),
        Op::Reshape { x } => accumulate(nodes, grads, x, |gx| add_into(gx, g)),
        Op::Permute { x, ref perm } => accumulate(nodes, grads, x, |gx| {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (back, _) = permute_data(g, out.shape(), &inverse);
            add_into(gx, &back);
        }),
        Op::Concat { ref parts, outer, ref chunks } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(chunks) {
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        add_into(&mut gp[o * c..(o + 1) * c], &g[o * total + offset..o * total + offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::Slice { x, outer, in_chunk, start, chunk } => accumulate(nodes, grads, x, |gx| {
            for o in 0..outer {
                add_into(&mut gx[o * in_chunk + start..o * in_chunk + start + chunk], &g[o * chunk..(o + 1) * chunk]);
            }
        }),
        Op::GatherRows { src, ref idx, cols } => accumulate(nodes, grads, src, |gs| {
            for (r, i) in idx.iter().enumerate() {
                if let Some(row) = *i {
                    add_into(&mut gs[row * cols..(row + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }),
        Op::Unfold { x, batch, t, d, width } => accumulate(nodes, grads, x, |gx| {
            let half = (width - 1) / 2;
            for b in 0..batch {
                for i in 0..t {
                    for w in 0..width {
                        let j = i as isize + w as isize - half as isize;
                        if j < 0 || j >= t as isize {
                            continue;
                        }
                        let dst = (b * t + j as usize) * d;
                        let src = ((b * t + i) * width + w) * d;
                        add_into(&mut gx[dst..dst + d], &g[src..src + d]);
                    }
                }
            }
        }),
        Op::BucketGather { x, ref idx, lead, t, p } => accumulate(nodes, grads, x, |gx| {
            for l in 0..lead {
                for i in 0..t {
                    let row = &mut gx[(l * t + i) * p..(l * t + i + 1) * p];
                    for j in 0..t {
                        let k = idx[i * t + j];
                        row[k] = row[k] + g[(l * t + i) * t + j];
                    }
                }
            }
        }),
        Op::BucketScatter { x, ref idx, lead, t, p } => accumulate(nodes, grads, x, |gx| {
            for l in 0..lead {
                for i in 0..t {
                    for j in 0..t {
                        let k = idx[i * t + j];
                        let d = &mut gx[(l * t + i) * t + j];
                        *d = *d + g[(l * t + i) * p + k];
                    }
                }
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);

        let a = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        // central differences at h = 1e-6 give [[5, 6], [5, 6]]
        assert_eq!(g.get(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        // subgradient at exactly 0 is 0
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let neg = tape.constant(Tensor::vector(vec![-3.0, -0.5]));
        assert!(tape.value(tape.relu(neg)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::vector(vec![1.0, 1.0, 1.0]));
        let y = tape.masked_softmax(x, &[true; 3]).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.masked_softmax(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let x = tape.constant(Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.masked_softmax(x, &[true; 3]).unwrap();
        // exp(k) / (e + e² + e³) evaluated directly
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-5);
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.masked_softmax(x, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, HsacnError::InvalidMask(_)));
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(HsacnError::Parameter(_))));
        assert!(tape.dropout(x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let loss = tape.sum(x);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[2.0, 4.0, 6.0]);

        let err = tape.backward(sq).unwrap_err();
        assert!(matches!(err, HsacnError::Shape(_)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let loss = tape.mul(a, c).unwrap();
        let loss = tape.sum(loss);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
        assert!(tape.slice(c, 1, 2, 2).is_err());
    }

    #[test]
    fn gather_rows_pads_with_zero_rows() {
        let tape = Tape::new();
        let table = tape.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(table, &[Some(2), None, Some(2), Some(0)]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 0.0, 0.0, 5.0, 6.0, 1.0, 2.0]);
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[Some(3)]).is_err());
    }

    #[test]
    fn unfold_zero_pads_boundaries() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2], vec![7.0, 8.0]).unwrap());
        let u = tape.unfold(x, 3).unwrap();
        assert_eq!(tape.shape(u), vec![1, 1, 6]);
        assert_eq!(tape.value(u).data(), &[0.0, 0.0, 7.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_runs_build_identical_tapes() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let tape = Tape::new();
            let x = tape.param(Tensor::new(vec![4, 4], (0..16).map(|v| v as f64 * 0.1).collect()).unwrap());
            let y = tape.matmul(x, x).unwrap();
            let y = tape.dropout(y, 0.3, true, &mut rng).unwrap();
            let loss = tape.mean(y);
            let g = tape.backward(loss).unwrap();
            let out = (tape.len(), tape.value(y).data().to_vec(), g.get(x).unwrap().to_vec());
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
