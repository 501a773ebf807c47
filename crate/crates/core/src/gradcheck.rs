//! Central finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely
/// (`|a - n| / 1e-6`), since central differences at `h = 1e-5` carry about
/// 1e-11 of round-off noise and near-zero gradients would otherwise blow up.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < REL_TOLERANCE
    }

    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Builds `f` on a fresh tape; non-scalar outputs are contracted with fixed
/// random weights so every output component contributes.
fn scalar_loss<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let loss = if n == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = tape.constant(Tensor::new(shape, w)?);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };
    Ok((tape, vars, loss))
}

/// Compares analytic gradients of `f` with respect to every element of every
/// input against central differences.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    check_entries(inputs, f, |which| (0..inputs[which].len()).collect())
}

/// Like [`check_fn`] but checks at most `per_input` entries of each input,
/// drawn without replacement with `seed`.
pub fn check_fn_sampled<F>(inputs: &[Tensor<f64>], per_input: usize, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_entries(inputs, f, |which| {
        let n = inputs[which].len();
        rand::seq::index::sample(&mut rng, n, per_input.min(n)).into_vec()
    })
}

fn check_entries<F, S>(inputs: &[Tensor<f64>], f: F, mut select: S) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    S: FnMut(usize) -> Vec<usize>,
{
    let (tape, vars, loss) = scalar_loss(inputs, &f)?;
    let grads = tape.backward(loss)?;
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        for e in select(which) {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work, &f)?;
            work[which].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work, &f)?;
            work[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(|| format!("input {which}[{e}]"), analytic[e], numeric);
        }
    }
    Ok(report)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = scalar_loss(inputs, f)?;
    let v = tape.value(loss).data()[0];
    Ok(v)
}

/// Uniform `[-1, 1]` tensor for gradient checks.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("consistent shape")
}

fn dims(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=8)).collect()
}

/// Row mask with at least one `true` per row of length `row`.
fn random_mask(rng: &mut impl Rng, rows: usize, row: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..rows * row).map(|_| rng.gen_bool(0.7)).collect();
    for r in 0..rows {
        let keep = rng.gen_range(0..row);
        mask[r * row + keep] = true;
    }
    mask
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>);

/// Every differentiable tape operation on random inputs in `[-1, 1]` with
/// at most 8 entries per axis, checked against central differences.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let [m, k, n] = [r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8)];
        let a = random_tensor(&if ta { [k, m] } else { [m, k] }, r);
        let b = random_tensor(&if tb { [n, k] } else { [k, n] }, r);
        cases.push(("matmul", vec![a, b], Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb))));
    }
    for tb in [false, true] {
        let d = dims(r, 4);
        let a = random_tensor(&[d[0], d[1], d[2]], r);
        let b = random_tensor(&if tb { [d[0], d[3], d[2]] } else { [d[0], d[2], d[3]] }, r);
        cases.push(("bmm", vec![a, b], Box::new(move |t, v| t.bmm(v[0], v[1], tb))));
    }
    let s = dims(r, 2);
    let (a, b) = (random_tensor(&s, r), random_tensor(&s, r));
    cases.push(("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))));
    cases.push(("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))));
    cases.push(("mul", vec![a.clone(), b], Box::new(|t, v| t.mul(v[0], v[1]))));
    cases.push(("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))));
    let bias = random_tensor(&[s[1]], r);
    cases.push(("add_bias", vec![a.clone(), bias], Box::new(|t, v| t.add_bias(v[0], v[1]))));
    let factor: Vec<f64> = (0..a.len()).map(|_| r.gen_range(-2.0..2.0)).collect();
    cases.push(("mul_const", vec![a.clone()], Box::new(move |t, v| t.mul_const(v[0], factor.clone()))));
    cases.push(("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))));
    let mask = random_mask(r, s[0], s[1]);
    cases.push(("masked_softmax", vec![a.clone()], Box::new(move |t, v| t.masked_softmax(v[0], &mask))));
    cases.push((
        "dropout",
        vec![a.clone()],
        Box::new(|t, v| t.dropout(v[0], 0.4, true, &mut ChaCha8Rng::seed_from_u64(99))),
    ));
    cases.push(("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))));
    cases.push(("mean", vec![a.clone()], Box::new(|t, v| Ok(t.mean(v[0])))));
    let flat = [s[0] * s[1]];
    cases.push(("reshape", vec![a.clone()], Box::new(move |t, v| t.reshape(v[0], &flat))));

    let d3 = dims(r, 3);
    let x3 = random_tensor(&d3, r);
    cases.push(("permute", vec![x3.clone()], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))));
    let other = random_tensor(&[d3[0], r.gen_range(1..=8), d3[2]], r);
    cases.push(("concat", vec![x3.clone(), other], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))));
    let start = r.gen_range(0..d3[1]);
    let len = r.gen_range(1..=d3[1] - start);
    cases.push(("slice", vec![x3.clone()], Box::new(move |t, v| t.slice(v[0], 1, start, len))));

    let table = random_tensor(&dims(r, 2), r);
    let rows = table.shape()[0];
    let idx: Vec<Option<usize>> = (0..r.gen_range(1..=8))
        .map(|_| r.gen_bool(0.8).then(|| r.gen_range(0..rows)))
        .collect();
    cases.push(("gather_rows", vec![table], Box::new(move |t, v| t.gather_rows(v[0], &idx))));
    for width in [1, 3, 5] {
        let x = random_tensor(&dims(r, 3), r);
        cases.push(("unfold", vec![x], Box::new(move |t, v| t.unfold(v[0], width))));
    }
    let (b, tl, p) = (r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8));
    let idx: Vec<usize> = (0..tl * tl).map(|_| r.gen_range(0..p)).collect();
    let idx2 = idx.clone();
    cases.push((
        "bucket_gather",
        vec![random_tensor(&[b, tl, p], r)],
        Box::new(move |t, v| t.bucket_gather(v[0], &idx, tl)),
    ));
    cases.push((
        "bucket_scatter",
        vec![random_tensor(&[b, tl, tl], r)],
        Box::new(move |t, v| t.bucket_scatter(v[0], &idx2, p)),
    ));

    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_fn(&inputs, f)?)))
        .collect()
}

/// Gradient check of every encoder parameter (and the input) on a padded
/// batch, with dropout active under a fixed mask.
pub fn encoder_check(seed: u64) -> Result<GradReport> {
    use crate::encoder::{encode_sequence, EncoderConfig, EncoderParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        input_dim: 3,
        hidden_dim: 4,
        kernel_width: 3,
        heads: 2,
        clip: 2,
    };
    let (b, t) = (2, 5);
    let mask = random_mask(&mut rng, b, t);
    let params: EncoderParams<Tensor<f64>> = EncoderParams::init(&cfg, &mut rng);
    let mut inputs = vec![random_tensor(&[b, t, cfg.input_dim], &mut rng)];
    // Random biases so that no ReLU sits exactly at its kink.
    inputs.extend(params.map(|_, p| random_tensor(p.shape(), &mut rng)).into_vec());
    check_fn(&inputs, move |tape, v| {
        let p = EncoderParams {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            b_q: v[4],
            b_k: v[5],
            b_v: v[6],
            p_k: v[7],
            p_v: v[8],
            w_f: v[9],
            b_f: v[10],
        };
        let mut drop = ChaCha8Rng::seed_from_u64(5);
        encode_sequence(tape, v[0], &mask, &p, &cfg, 0.3, true, &mut drop)
    })
}

/// Gradient check of the aggregator parameters and its input.
pub fn aggregator_check(seed: u64) -> Result<GradReport> {
    use crate::aggregator::{aggregate, AggregatorParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, dk) = (3, 6, 5);
    let mask = random_mask(&mut rng, b, t);
    let dp = crate::aggregator::projection_dim(dk);
    let inputs = vec![
        random_tensor(&[b, t, dk], &mut rng),
        random_tensor(&[dp, dk], &mut rng),
        random_tensor(&[dp], &mut rng),
        random_tensor(&[dp], &mut rng),
    ];
    check_fn(&inputs, move |tape, v| {
        let p = AggregatorParams {
            w_p: v[1],
            b_p: v[2],
            h_query: v[3],
        };
        Ok(aggregate(tape, v[0], &mask, &p)?.0)
    })
}

/// End-to-end check of every model parameter on a toy batch
/// (V=12, d=4, d_w=4, d_s=4, d_l=3, 2 users, 2 items), dropout active with
/// fixed masks.
pub fn model_check(seed: u64) -> Result<GradReport> {
    let cfg = crate::model::ModelConfig {
        embed_dim: 4,
        word_hidden: 4,
        sentence_hidden: 4,
        latent: 3,
        clip: 2,
        ..crate::model::ModelConfig::default()
    };
    model_gradient(&cfg, seed, 1.0, None)
}

/// The same toy batch through the tiny configuration (d=32, d_w=d_s=32,
/// d_l=8), parameters uniform in `[-0.1, 0.1]` (the global bias offset by
/// its mean-rating init). Every parameter tensor is checked at up to
/// `per_tensor` sampled entries.
pub fn tiny_model_check(seed: u64, per_tensor: usize) -> Result<GradReport> {
    model_gradient(&crate::model::ModelConfig::tiny(), seed, 0.1, Some(per_tensor))
}

fn model_gradient(
    cfg: &crate::model::ModelConfig,
    seed: u64,
    scale: f64,
    per_tensor: Option<usize>,
) -> Result<GradReport> {
    use crate::ingest::TokenizedReview;
    use crate::model::{forward_batch, mse_loss, Binding, Dimensions, Example, HsacnParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = *cfg;
    let dims = Dimensions {
        vocab: 12,
        users: 2,
        items: 2,
    };
    let review = |user: usize, item: usize, rng: &mut ChaCha8Rng| TokenizedReview {
        user,
        item,
        sentences: (0..rng.gen_range(1..=3))
            .map(|_| (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(2..12)).collect())
            .collect(),
    };
    let reviews = vec![
        review(0, 0, &mut rng),
        review(0, 1, &mut rng),
        review(1, 0, &mut rng),
        review(1, 1, &mut rng),
        review(0, 1, &mut rng),
    ];
    let examples = vec![
        Example {
            user: 0,
            item: 0,
            user_reviews: vec![1, 4],
            item_reviews: vec![2],
        },
        Example {
            user: 1,
            item: 1,
            user_reviews: vec![2],
            item_reviews: vec![1, 4],
        },
        Example {
            user: 1,
            item: 0,
            user_reviews: vec![3],
            item_reviews: vec![0],
        },
    ];
    let truths = [4.0, 2.0, 3.5];
    let template: HsacnParams<Tensor<f64>> = HsacnParams::init(&cfg, dims, 3.0, &mut rng)?;
    let inputs: Vec<Tensor<f64>> = template
        .map(|name, p| {
            let mut t = random_tensor(p.shape(), &mut rng);
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
            // The global bias stays near its mean-rating init, which keeps
            // the loss (and its round-off) at a realistic scale.
            if name == "global_bias" {
                t.data_mut()[0] += p.data()[0];
            }
            t
        })
        .into_vec();
    let loss = move |tape: &Tape<f64>, v: &[Var]| {
        let mut it = v.iter().copied();
        let leaves = template.map(|_, _| it.next().expect("one variable per parameter"));
        let b = Binding::full(leaves, dims.vocab, dims.users, dims.items);
        let mut drop = ChaCha8Rng::seed_from_u64(17);
        let fwd = forward_batch(tape, &b, &cfg, &reviews, &examples, true, false, &mut drop)?;
        mse_loss(tape, &fwd.predictions, &truths)
    };
    match per_tensor {
        None => check_fn(&inputs, loss),
        Some(k) => check_fn_sampled(&inputs, k, seed ^ 0x9e37, loss),
    }
}
