//! The review hierarchy: word → sentence → review → user/item, followed by
//! the interaction-based prediction layer.

mod checkpoint;
mod config;
mod forward;
mod params;
mod pretrained;
mod report;

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Dimensions, ModelConfig};
pub use forward::{
    accumulate, encode_reviews, encode_sentences, forward_batch, mse_loss, tower, BatchForward, Binding, EncodedReviews, Example, Grad,
    TowerOut,
};
pub use params::{is_bias, HsacnParams, TowerParams};
pub use pretrained::load_embeddings;
pub use report::{AttentionReport, ReviewReport, SentenceReport, TowerReport, Towers, WordWeight};

use crate::error::{HsacnError, Result};
use crate::ingest::{Corpus, TokenizedReview};
use crate::real::Real;
use crate::tensor::{Tape, Tensor};

/// A review encoding with its sentence and word weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewEncoding<T> {
    pub vector: Vec<T>,
    pub sentence_weights: Vec<T>,
    pub word_weights: Vec<Vec<T>>,
}

/// A pooled history (`u^r` or `i^r`) with the full weight hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEncoding<T> {
    pub vector: Vec<T>,
    pub review_weights: Vec<T>,
    pub reviews: Vec<ReviewEncoding<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    User,
    Item,
}

/// Parameters paired with their configuration.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a, T> {
    pub params: &'a HsacnParams<Tensor<T>>,
    pub config: &'a ModelConfig,
}

fn values<T: Real>(tape: &Tape<T>, v: crate::tensor::Var) -> Vec<T> {
    tape.value(v).data().to_vec()
}

impl<'a, T: Real> Model<'a, T> {
    pub fn new(params: &'a HsacnParams<Tensor<T>>, config: &'a ModelConfig) -> Result<Self> {
        params.check(config)?;
        Ok(Model { params, config })
    }

    /// Sentence vector `s` (`[d_w]`) and its word weights.
    pub fn encode_sentence<R: Rng + ?Sized>(&self, words: &[u32], training: bool, rng: &mut R) -> Result<(Vec<T>, Vec<T>)> {
        if words.iter().all(|&w| w == crate::ingest::PAD) {
            return Err(HsacnError::InvalidInput("sentence has no words".into()));
        }
        let tape = Tape::new();
        let b = Binding::new(&tape, self.params, words.iter().copied(), [], [])?;
        let (s, weights) = encode_sentences(&tape, &b, self.config, &[words], training, rng)?;
        Ok((values(&tape, s), values(&tape, weights)))
    }

    /// Review vector `r` (`[d_s]`) with sentence and word weights.
    pub fn encode_review<R: Rng + ?Sized>(&self, review: &[Vec<u32>], training: bool, rng: &mut R) -> Result<ReviewEncoding<T>> {
        let tape = Tape::new();
        let b = Binding::new(&tape, self.params, review.iter().flatten().copied(), [], [])?;
        let enc = encode_reviews(&tape, &b, self.config, &[review], training, rng)?;
        Ok(review_encoding(&tape, &enc, 0, &values(&tape, enc.reviews)))
    }

    pub fn encode_user<R: Rng + ?Sized>(&self, reviews: &[&[Vec<u32>]], training: bool, rng: &mut R) -> Result<HistoryEncoding<T>> {
        self.encode_history(Side::User, reviews, training, rng)
    }

    pub fn encode_item<R: Rng + ?Sized>(&self, reviews: &[&[Vec<u32>]], training: bool, rng: &mut R) -> Result<HistoryEncoding<T>> {
        self.encode_history(Side::Item, reviews, training, rng)
    }

    fn encode_history<R: Rng + ?Sized>(
        &self,
        side: Side,
        reviews: &[&[Vec<u32>]],
        training: bool,
        rng: &mut R,
    ) -> Result<HistoryEncoding<T>> {
        if reviews.is_empty() {
            return Err(HsacnError::ColdEntity("no reviews in history".into()));
        }
        let tape = Tape::new();
        let b = Binding::new(&tape, self.params, reviews.iter().flat_map(|r| r.iter().flatten()).copied(), [], [])?;
        let enc = encode_reviews(&tape, &b, self.config, reviews, training, rng)?;
        let params = match side {
            Side::User => &b.leaves.user,
            Side::Item => &b.leaves.item,
        };
        let rows: Vec<usize> = (0..reviews.len()).collect();
        let out = tower(&tape, params, enc.reviews, &rows)?;
        let all = values(&tape, enc.reviews);
        Ok(HistoryEncoding {
            vector: values(&tape, out.pooled),
            review_weights: values(&tape, out.weights),
            reviews: rows.iter().map(|&r| review_encoding(&tape, &enc, r, &all)).collect(),
        })
    }

    /// Predicted rating for a corpus pair (target review excluded from both
    /// histories) and the attention weights behind it.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        corpus: &Corpus,
        user: usize,
        item: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, AttentionReport)> {
        let example = Example::from_corpus(corpus, user, item)?;
        let tape = Tape::new();
        let b = Binding::for_examples(&tape, self.params, &corpus.reviews, std::slice::from_ref(&example))?;
        let fwd = forward_batch(&tape, &b, self.config, &corpus.reviews, std::slice::from_ref(&example), training, false, rng)?;
        let prediction = tape.value(fwd.predictions[0]).data()[0].f64();
        let report = build_report(&tape, &fwd, &example, corpus, prediction);
        Ok((prediction, report))
    }

    /// Inference-mode prediction for one example.
    pub fn predict_example(&self, reviews: &[TokenizedReview], example: &Example, bias_only: bool) -> Result<f64> {
        let tape = Tape::new();
        let b = Binding::for_examples(&tape, self.params, reviews, std::slice::from_ref(example))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fwd = forward_batch(&tape, &b, self.config, reviews, std::slice::from_ref(example), false, bias_only, &mut rng)?;
        let p = tape.value(fwd.predictions[0]).data()[0];
        Ok(p.f64())
    }

    /// Prediction and gradient of `scale · (R̂ − rating)²` for one example.
    pub fn example_gradient<R: Rng + ?Sized>(
        &self,
        reviews: &[TokenizedReview],
        example: &Example,
        rating: f64,
        scale: f64,
        bias_only: bool,
        rng: &mut R,
    ) -> Result<(f64, HsacnParams<Grad<T>>)> {
        let tape = Tape::new();
        let b = Binding::for_examples(&tape, self.params, reviews, std::slice::from_ref(example))?;
        let fwd = forward_batch(&tape, &b, self.config, reviews, std::slice::from_ref(example), true, bias_only, rng)?;
        let prediction = tape.value(fwd.predictions[0]).data()[0].f64();
        let loss = mse_loss(&tape, &fwd.predictions, &[rating])?;
        let loss = tape.scale(loss, T::of(scale));
        let mut grads = tape.backward(loss)?;
        Ok((prediction, b.gradients(&mut grads)))
    }
}

fn review_encoding<T: Real>(tape: &Tape<T>, enc: &EncodedReviews, r: usize, all: &[T]) -> ReviewEncoding<T> {
    let ds = all.len() / enc.layout.len();
    let sw = tape.value(enc.sentence_weights);
    let ww = tape.value(enc.word_weights);
    let lens = &enc.layout[r];
    ReviewEncoding {
        vector: all[r * ds..(r + 1) * ds].to_vec(),
        sentence_weights: sw.data()[r * enc.max_sentences..r * enc.max_sentences + lens.len()].to_vec(),
        word_weights: lens
            .iter()
            .enumerate()
            .map(|(s, &n)| {
                let row = enc.sentence_row(r, s) * enc.max_words;
                ww.data()[row..row + n].to_vec()
            })
            .collect(),
    }
}

fn build_report<T: Real>(tape: &Tape<T>, fwd: &BatchForward, example: &Example, corpus: &Corpus, prediction: f64) -> AttentionReport {
    let tower_report = |out: Option<TowerOut>, hist: &[usize]| -> TowerReport {
        let (Some(out), Some(enc)) = (out, fwd.encoded.as_ref()) else {
            return TowerReport::default();
        };
        let weights = values(tape, out.weights);
        let reviews = hist
            .iter()
            .zip(weights)
            .map(|(&rid, w)| {
                let row = fwd.review_rows[&rid];
                let review = &corpus.reviews[rid];
                let e = review_encoding(tape, enc, row, &[]);
                ReviewReport {
                    weight: w.f64(),
                    source_user: corpus.users[review.user].clone(),
                    source_item: corpus.items[review.item].clone(),
                    sentences: review
                        .sentences
                        .iter()
                        .zip(e.sentence_weights)
                        .zip(e.word_weights)
                        .map(|((words, sw), ww)| SentenceReport {
                            weight: sw.f64(),
                            words: words
                                .iter()
                                .zip(ww)
                                .map(|(&id, w)| WordWeight {
                                    token: corpus.vocab.word(id).to_string(),
                                    weight: w.f64(),
                                })
                                .collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        TowerReport { reviews }
    };
    let (ut, it) = fwd.towers[0];
    AttentionReport {
        user: corpus.users[example.user].clone(),
        item: corpus.items[example.item].clone(),
        prediction,
        towers: Towers {
            user: tower_report(ut, &example.user_reviews),
            item: tower_report(it, &example.item_reviews),
        },
    }
}
