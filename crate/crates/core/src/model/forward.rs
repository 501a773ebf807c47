//! Forward pass of the full hierarchy on a gradient tape.
//!
//! Only the rows of the lookup tables that an example touches (word
//! embeddings, free user/item embeddings and biases) are copied onto the
//! tape, so per-example gradients for those tables stay sparse.

use std::collections::HashMap;

use rand::Rng;

use super::config::ModelConfig;
use super::params::{HsacnParams, TowerParams};
use crate::aggregator::{aggregate, AggregatorParams};
use crate::encoder::encode_sequence;
use crate::error::{HsacnError, Result};
use crate::ingest::{Corpus, TokenizedReview, PAD};
use crate::real::Real;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// One prediction target with the review histories used to encode it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    /// Indices into the review list passed to the forward pass.
    pub user_reviews: Vec<usize>,
    pub item_reviews: Vec<usize>,
}

impl Example {
    /// Histories from the corpus with the target pair's own review removed.
    pub fn from_corpus(corpus: &Corpus, user: usize, item: usize) -> Result<Example> {
        if user >= corpus.users.len() {
            return Err(HsacnError::Lookup {
                kind: "user",
                id: user.to_string(),
            });
        }
        if item >= corpus.items.len() {
            return Err(HsacnError::Lookup {
                kind: "item",
                id: item.to_string(),
            });
        }
        Ok(Example {
            user,
            item,
            user_reviews: corpus.user_history(user, item),
            item_reviews: corpus.item_history(item, user),
        })
    }
}

/// Which table rows live on the tape, and their tape variables.
pub struct Binding {
    pub leaves: HsacnParams<Var>,
    word_rows: Vec<usize>,
    word_local: HashMap<u32, usize>,
    user_rows: Vec<usize>,
    item_rows: Vec<usize>,
}

fn sub_table<T: Real>(table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let cols = table.len() / table.shape()[0];
    let data = rows
        .iter()
        .flat_map(|&r| table.data()[r * cols..(r + 1) * cols].iter().copied())
        .collect();
    if table.shape().len() == 1 {
        Tensor::new(vec![rows.len()], data).expect("row count")
    } else {
        Tensor::new(vec![rows.len(), cols], data).expect("row count")
    }
}

fn dedup(ids: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = ids.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v
}

impl Binding {
    /// Puts the dense parameters and the requested table rows on `tape`.
    pub fn new<T: Real>(
        tape: &Tape<T>,
        params: &HsacnParams<Tensor<T>>,
        words: impl IntoIterator<Item = u32>,
        users: impl IntoIterator<Item = usize>,
        items: impl IntoIterator<Item = usize>,
    ) -> Result<Binding> {
        let dims = params.dimensions();
        let word_rows = dedup(words.into_iter().filter(|&w| w != PAD).map(|w| w as usize));
        let user_rows = dedup(users);
        let item_rows = dedup(items);
        if let Some(&w) = word_rows.last().filter(|&&w| w >= dims.vocab) {
            return Err(HsacnError::Lookup {
                kind: "word",
                id: w.to_string(),
            });
        }
        if let Some(&u) = user_rows.last().filter(|&&u| u >= dims.users) {
            return Err(HsacnError::Lookup {
                kind: "user",
                id: u.to_string(),
            });
        }
        if let Some(&i) = item_rows.last().filter(|&&i| i >= dims.items) {
            return Err(HsacnError::Lookup {
                kind: "item",
                id: i.to_string(),
            });
        }
        // Always keep at least one row so every table leaf is a valid tensor.
        let word_rows = if word_rows.is_empty() { vec![PAD as usize] } else { word_rows };
        let user_rows = if user_rows.is_empty() { vec![0] } else { user_rows };
        let item_rows = if item_rows.is_empty() { vec![0] } else { item_rows };
        let leaves = params.map(|name, t| match name {
            "embedding" => tape.param(sub_table(t, &word_rows)),
            "user.embedding" | "user.bias" => tape.param(sub_table(t, &user_rows)),
            "item.embedding" | "item.bias" => tape.param(sub_table(t, &item_rows)),
            _ => tape.param(t.clone()),
        });
        Ok(Self::with_rows(leaves, word_rows, user_rows, item_rows))
    }

    /// Binds existing variables holding the complete tables.
    pub fn full(leaves: HsacnParams<Var>, vocab: usize, users: usize, items: usize) -> Binding {
        Self::with_rows(leaves, (0..vocab).collect(), (0..users).collect(), (0..items).collect())
    }

    fn with_rows(leaves: HsacnParams<Var>, word_rows: Vec<usize>, user_rows: Vec<usize>, item_rows: Vec<usize>) -> Binding {
        let word_local = word_rows.iter().enumerate().map(|(k, &w)| (w as u32, k)).collect();
        Binding {
            leaves,
            word_rows,
            word_local,
            user_rows,
            item_rows,
        }
    }

    /// Binding for a batch of examples over `reviews`.
    pub fn for_examples<T: Real>(
        tape: &Tape<T>,
        params: &HsacnParams<Tensor<T>>,
        reviews: &[TokenizedReview],
        examples: &[Example],
    ) -> Result<Binding> {
        let words = examples
            .iter()
            .flat_map(|e| e.user_reviews.iter().chain(&e.item_reviews))
            .flat_map(|&r| reviews[r].sentences.iter().flatten().copied());
        Binding::new(
            tape,
            params,
            words,
            examples.iter().map(|e| e.user),
            examples.iter().map(|e| e.item),
        )
    }

    fn word(&self, id: u32) -> Result<Option<usize>> {
        if id == PAD {
            return Ok(None);
        }
        self.word_local.get(&id).map(|&k| Some(k)).ok_or_else(|| HsacnError::Lookup {
            kind: "word",
            id: id.to_string(),
        })
    }

    fn local(rows: &[usize], kind: &'static str, id: usize) -> Result<usize> {
        rows.binary_search(&id).map_err(|_| HsacnError::Lookup {
            kind,
            id: id.to_string(),
        })
    }

    /// Splits tape gradients into dense arrays and touched table rows.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> HsacnParams<Grad<T>> {
        self.leaves.map(|name, &v| {
            let rows = match name {
                "embedding" => Some(&self.word_rows),
                "user.embedding" | "user.bias" => Some(&self.user_rows),
                "item.embedding" | "item.bias" => Some(&self.item_rows),
                _ => None,
            };
            match (grads.take(v), rows) {
                (None, _) => Grad::Zero,
                (Some(g), None) => Grad::Dense(g),
                (Some(g), Some(rows)) => Grad::Rows(rows.clone(), g),
            }
        })
    }
}

/// Gradient of one parameter: absent, dense, or restricted to table rows
/// (row indices plus their concatenated values).
#[derive(Debug, Clone, PartialEq)]
pub enum Grad<T> {
    Zero,
    Dense(Vec<T>),
    Rows(Vec<usize>, Vec<T>),
}

impl<T: Real> Grad<T> {
    /// Adds this gradient into a dense buffer of the parameter's shape.
    pub fn add_into(&self, target: &mut Tensor<T>) {
        match self {
            Grad::Zero => {}
            Grad::Dense(g) => {
                for (t, &v) in target.data_mut().iter_mut().zip(g) {
                    *t = *t + v;
                }
            }
            Grad::Rows(rows, g) => {
                let width = g.len() / rows.len();
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut target.data_mut()[r * width..(r + 1) * width];
                    for (t, &v) in dst.iter_mut().zip(&g[k * width..(k + 1) * width]) {
                        *t = *t + v;
                    }
                }
            }
        }
    }

    pub fn has_nan(&self) -> bool {
        match self {
            Grad::Zero => false,
            Grad::Dense(g) | Grad::Rows(_, g) => g.iter().any(|v| !v.is_finite()),
        }
    }
}

/// Adds every gradient into `buffer` (same layout as the parameters).
pub fn accumulate<T: Real>(buffer: &mut HsacnParams<Tensor<T>>, grads: &HsacnParams<Grad<T>>) {
    let sources = grads.map(|_, g| g).into_vec();
    for (dst, g) in buffer.fields_mut().into_iter().zip(sources) {
        g.add_into(dst);
    }
}

/// Encoded reviews with the attention weights of both lower levels.
pub struct EncodedReviews {
    /// `[R, d_s]`, one row per review.
    pub reviews: Var,
    /// `[R, S]`; row `r` holds the weights of review `r`'s sentences.
    pub sentence_weights: Var,
    /// `[N, T]` over all sentences in review order.
    pub word_weights: Var,
    /// Per review, the number of real words in each of its sentences.
    pub layout: Vec<Vec<usize>>,
    pub max_sentences: usize,
    pub max_words: usize,
}

impl EncodedReviews {
    /// Row of `word_weights` holding sentence `s` of review `r`.
    pub fn sentence_row(&self, r: usize, s: usize) -> usize {
        self.layout[..r].iter().map(Vec::len).sum::<usize>() + s
    }
}

/// Word-level encoding of padded sentences: `[N, T]` ids to sentence
/// vectors `[N, d_w]` and word weights `[N, T]`.
pub fn encode_sentences<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    b: &Binding,
    cfg: &ModelConfig,
    sentences: &[&[u32]],
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let max_words = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_words == 0 {
        return Err(HsacnError::InvalidInput("no words to encode".into()));
    }
    let mut idx = Vec::with_capacity(sentences.len() * max_words);
    let mut mask = Vec::with_capacity(sentences.len() * max_words);
    for s in sentences {
        for t in 0..max_words {
            let slot = match s.get(t) {
                Some(&w) => b.word(w)?,
                None => None,
            };
            mask.push(slot.is_some());
            idx.push(slot);
        }
    }
    let word_cfg = cfg.word_encoder();
    let x = tape.gather_rows(b.leaves.embedding, &idx)?;
    let x = tape.reshape(x, &[sentences.len(), max_words, cfg.embed_dim])?;
    let x = tape.dropout(x, cfg.dropout_embed, training, rng)?;
    let z = encode_sequence(tape, x, &mask, &b.leaves.word_encoder, &word_cfg, cfg.dropout_ffn, training, rng)?;
    aggregate(tape, z, &mask, &b.leaves.word_aggregator)
}

/// Word-level and sentence-level encoding of a batch of reviews. The
/// sentences of every review are encoded as one padded batch, then the
/// reviews as a second padded batch.
pub fn encode_reviews<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    b: &Binding,
    cfg: &ModelConfig,
    reviews: &[&[Vec<u32>]],
    training: bool,
    rng: &mut R,
) -> Result<EncodedReviews> {
    if reviews.is_empty() {
        return Err(HsacnError::InvalidInput("no reviews to encode".into()));
    }
    let mut layout = Vec::with_capacity(reviews.len());
    for (k, review) in reviews.iter().enumerate() {
        if review.is_empty() {
            return Err(HsacnError::InvalidInput(format!("review {k} has no sentences")));
        }
        let mut lens = Vec::with_capacity(review.len());
        for sentence in review.iter() {
            if sentence.iter().all(|&w| w == PAD) {
                return Err(HsacnError::InvalidInput(format!("review {k} has a sentence without words")));
            }
            lens.push(sentence.len());
        }
        layout.push(lens);
    }
    let sentences: Vec<&[u32]> = reviews.iter().flat_map(|r| r.iter().map(Vec::as_slice)).collect();
    let max_words = sentences.iter().map(|s| s.len()).max().unwrap_or(1);
    let max_sentences = reviews.iter().map(|r| r.len()).max().unwrap_or(1);
    let (s_vecs, word_weights) = encode_sentences(tape, b, cfg, &sentences, training, rng)?;

    // Sentence level: [R, S, d_w] -> [R, S, d_s] -> [R, d_s].
    let mut idx = Vec::with_capacity(reviews.len() * max_sentences);
    let mut mask = Vec::with_capacity(reviews.len() * max_sentences);
    let mut next = 0;
    for review in reviews {
        for s in 0..max_sentences {
            if s < review.len() {
                idx.push(Some(next));
                mask.push(true);
                next += 1;
            } else {
                idx.push(None);
                mask.push(false);
            }
        }
    }
    let sent_cfg = cfg.sentence_encoder();
    let x = tape.gather_rows(s_vecs, &idx)?;
    let x = tape.reshape(x, &[reviews.len(), max_sentences, cfg.word_hidden])?;
    let z = encode_sequence(tape, x, &mask, &b.leaves.sentence_encoder, &sent_cfg, cfg.dropout_ffn, training, rng)?;
    let (r_vecs, sentence_weights) = aggregate(tape, z, &mask, &b.leaves.sentence_aggregator)?;

    Ok(EncodedReviews {
        reviews: r_vecs,
        sentence_weights,
        word_weights,
        layout,
        max_sentences,
        max_words,
    })
}

/// Review-level result of one tower.
#[derive(Debug, Clone, Copy)]
pub struct TowerOut {
    /// Pooled history `u^r`, `[d_s]`.
    pub pooled: Var,
    /// Projected history `Relu(W u^r + b)`, `[d_l]`.
    pub projected: Var,
    /// Review weights `[m]`.
    pub weights: Var,
}

/// Pools the given rows of `encoded` with the tower's aggregator and
/// projects the result.
pub fn tower<T: Real>(tape: &Tape<T>, tower: &TowerParams<Var>, encoded: Var, rows: &[usize]) -> Result<TowerOut> {
    if rows.is_empty() {
        return Err(HsacnError::ColdEntity("history is empty".into()));
    }
    let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    let z = tape.gather_rows(encoded, &idx)?;
    let (pooled, weights) = pool(tape, &tower.aggregator, z)?;
    let ds = tape.shape(pooled)[0];
    let x = tape.reshape(pooled, &[1, ds])?;
    let y = tape.matmul_t(x, tower.projection, false, true)?;
    let y = tape.add_bias(y, tower.projection_bias)?;
    let y = tape.relu(y);
    let dl = tape.shape(tower.projection)[0];
    let projected = tape.reshape(y, &[dl])?;
    Ok(TowerOut {
        pooled,
        projected,
        weights,
    })
}

fn pool<T: Real>(tape: &Tape<T>, agg: &AggregatorParams<Var>, z: Var) -> Result<(Var, Var)> {
    let m = tape.shape(z)[0];
    aggregate(tape, z, &vec![true; m], agg)
}

/// Forward pass over a batch of examples sharing one tape.
pub struct BatchForward {
    /// Scalar predictions `[1]`, one per example.
    pub predictions: Vec<Var>,
    /// Per example, the user and item tower results (`None` when cold).
    pub towers: Vec<(Option<TowerOut>, Option<TowerOut>)>,
    pub encoded: Option<EncodedReviews>,
    /// Review index to row of the encoded batch.
    pub review_rows: HashMap<usize, usize>,
}

/// Runs the hierarchy for `examples`. With `bias_only` the towers are
/// skipped and each prediction is `b_u + b_v + b_g`.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    b: &Binding,
    cfg: &ModelConfig,
    reviews: &[TokenizedReview],
    examples: &[Example],
    training: bool,
    bias_only: bool,
    rng: &mut R,
) -> Result<BatchForward> {
    let mut review_rows = HashMap::new();
    let mut order = Vec::new();
    if !bias_only {
        for &r in examples.iter().flat_map(|e| e.user_reviews.iter().chain(&e.item_reviews)) {
            if r >= reviews.len() {
                return Err(HsacnError::Lookup {
                    kind: "review",
                    id: r.to_string(),
                });
            }
            if let std::collections::hash_map::Entry::Vacant(slot) = review_rows.entry(r) {
                slot.insert(order.len());
                order.push(r);
            }
        }
    }
    let encoded = if order.is_empty() {
        None
    } else {
        let texts: Vec<&[Vec<u32>]> = order.iter().map(|&r| reviews[r].sentences.as_slice()).collect();
        Some(encode_reviews(tape, b, cfg, &texts, training, rng)?)
    };

    let user_bias = tape.reshape(b.leaves.user.bias, &[b.user_rows.len(), 1])?;
    let item_bias = tape.reshape(b.leaves.item.bias, &[b.item_rows.len(), 1])?;
    let dl = cfg.latent;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut towers = Vec::with_capacity(examples.len());
    for e in examples {
        let u = Binding::local(&b.user_rows, "user", e.user)?;
        let i = Binding::local(&b.item_rows, "item", e.item)?;
        let bu = tape.gather_rows(user_bias, &[Some(u)])?;
        let bi = tape.gather_rows(item_bias, &[Some(i)])?;
        let bu = tape.reshape(bu, &[1])?;
        let bi = tape.reshape(bi, &[1])?;
        let biases = tape.add(bu, bi)?;
        let biases = tape.add(biases, b.leaves.global_bias)?;
        if bias_only {
            predictions.push(biases);
            towers.push((None, None));
            continue;
        }
        let run = |side: &TowerParams<Var>, hist: &[usize]| -> Result<Option<TowerOut>> {
            match &encoded {
                Some(enc) if !hist.is_empty() => {
                    let rows: Vec<usize> = hist.iter().map(|r| review_rows[r]).collect();
                    Ok(Some(tower(tape, side, enc.reviews, &rows)?))
                }
                _ => Ok(None),
            }
        };
        let ut = run(&b.leaves.user, &e.user_reviews)?;
        let it = run(&b.leaves.item, &e.item_reviews)?;
        let free = |table: Var, k: usize, out: Option<TowerOut>| -> Result<Var> {
            let row = tape.gather_rows(table, &[Some(k)])?;
            let row = tape.reshape(row, &[dl])?;
            match out {
                Some(t) => tape.add(row, t.projected),
                None => Ok(row),
            }
        };
        let uvec = free(b.leaves.user.embedding, u, ut)?;
        let ivec = free(b.leaves.item.embedding, i, it)?;
        let h = tape.mul(uvec, ivec)?;
        let h = tape.dropout(h, cfg.dropout_predict, training, rng)?;
        let score = tape.mul(h, b.leaves.w_f)?;
        let score = tape.sum(score);
        predictions.push(tape.add(score, biases)?);
        towers.push((ut, it));
    }
    Ok(BatchForward {
        predictions,
        towers,
        encoded,
        review_rows,
    })
}

/// Mean squared error `(1/N) Σ (R − R̂)²` over scalar predictions.
pub fn mse_loss<T: Real>(tape: &Tape<T>, predictions: &[Var], truths: &[f64]) -> Result<Var> {
    if predictions.is_empty() {
        return Err(HsacnError::Parameter("loss over an empty batch".into()));
    }
    if predictions.len() != truths.len() {
        return Err(HsacnError::Parameter(format!(
            "{} predictions for {} ratings",
            predictions.len(),
            truths.len()
        )));
    }
    let p = tape.concat(predictions, 0)?;
    let y = tape.constant(Tensor::vector(truths.iter().map(|&t| T::of(t)).collect()));
    let diff = tape.sub(p, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}
