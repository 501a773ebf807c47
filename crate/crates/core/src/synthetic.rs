//! Planted-signal review corpus.
//!
//! Each item has a quality in `{-2, …, 2}` for each of two aspects and each
//! user cares about one aspect. A review contains filler sentences and one
//! planted sentence holding the clause `"<aspect> is <tokens>"` among a few
//! filler words, where the tokens are `|q|` positive or negative sentiment
//! words (or `okay` when `q = 0`). The rating is `3 + q` plus small Gaussian
//! noise, clipped to `[1, 5]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ingest::{Corpus, RawReview, Split};
use crate::model::Model;
use crate::real::Real;

pub const ASPECTS: [&str; 2] = ["battery", "screen"];
pub const POSITIVE: [&str; 3] = ["great", "excellent", "superb"];
pub const NEGATIVE: [&str; 3] = ["awful", "poor", "terrible"];
const FILLER: [&str; 24] = [
    "i", "bought", "this", "for", "my", "office", "last", "week", "and", "it", "arrived", "in", "a", "box", "with",
    "the", "manual", "we", "use", "daily", "at", "home", "then", "again",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    pub reviews_per_user: usize,
    pub noise: f64,
    /// Largest number of filler words mixed into a planted sentence around
    /// the clause; each sentence draws its count uniformly from `0..=max`.
    pub context_words: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            users: 200,
            items: 100,
            reviews_per_user: 12,
            noise: 0.05,
            context_words: 6,
            seed: 7,
        }
    }
}

/// Ground truth behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    pub reviews: Vec<RawReview>,
    /// Aspect index each user cares about.
    pub user_aspect: Vec<usize>,
    /// `quality[item][aspect]`.
    pub quality: Vec<[i32; 2]>,
}

pub fn is_sentiment(token: &str) -> bool {
    POSITIVE.contains(&token) || NEGATIVE.contains(&token)
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(6..=9);
    let words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    format!("{} .", words.join(" "))
}

fn planted_sentence(aspect: &str, q: i32, context: usize, rng: &mut ChaCha8Rng) -> String {
    let pool: &[&str] = if q > 0 { &POSITIVE } else { &NEGATIVE };
    let tokens: Vec<&str> = if q == 0 {
        vec!["okay"]
    } else {
        (0..q.unsigned_abs()).map(|_| *pool.choose(rng).expect("non-empty")).collect()
    };
    let context = rng.gen_range(0..=context);
    // At most two words precede the clause so it survives word truncation.
    let before = rng.gen_range(0..=context.min(2));
    let mut words: Vec<&str> = (0..before).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    words.extend([aspect, "is"]);
    words.extend(tokens);
    words.extend((before..context).map(|_| *FILLER.choose(rng).expect("non-empty")));
    format!("{} .", words.join(" "))
}

pub fn planted_corpus(cfg: &PlantedConfig) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise scale");
    let user_aspect: Vec<usize> = (0..cfg.users).map(|_| rng.gen_range(0..ASPECTS.len())).collect();
    let quality: Vec<[i32; 2]> = (0..cfg.items).map(|_| [rng.gen_range(-2..=2), rng.gen_range(-2..=2)]).collect();
    let per_user = cfg.reviews_per_user.min(cfg.items);
    let mut reviews = Vec::with_capacity(cfg.users * per_user);
    for (u, &aspect) in user_aspect.iter().enumerate() {
        let items: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.items, per_user).into_vec();
        for i in items {
            let q = quality[i][aspect];
            let mut sentences = vec![filler_sentence(&mut rng), filler_sentence(&mut rng)];
            let at = rng.gen_range(0..=sentences.len());
            sentences.insert(at, planted_sentence(ASPECTS[aspect], q, cfg.context_words, &mut rng));
            let rating = (3.0 + q as f64 + noise.sample(&mut rng)).clamp(1.0, 5.0);
            reviews.push(RawReview {
                user_id: format!("U{u:03}"),
                item_id: format!("I{i:03}"),
                rating,
                text: sentences.join(" "),
            });
        }
    }
    // Interleave users so input order is not grouped by author.
    reviews.shuffle(&mut rng);
    Planted {
        reviews,
        user_aspect,
        quality,
    }
}

/// Outcome of [`attention_sanity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSanity {
    /// Sentences where every sentiment token's word weight exceeds `1/t`.
    pub hits: usize,
    /// Sentences of the split containing at least one sentiment token.
    pub sentences: usize,
    /// Mean over those sentences of the average sentiment-token weight
    /// times `t`; 1 means uniform attention.
    pub relative_weight: f64,
}

impl AttentionSanity {
    pub fn rate(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.hits as f64 / self.sentences as f64
        }
    }
}

/// Encodes every sentence of `split` that contains planted sentiment tokens
/// and checks that those tokens receive above-uniform word attention.
pub fn attention_sanity<T: Real>(model: &Model<'_, T>, corpus: &Corpus, split: Split) -> Result<AttentionSanity> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut out = AttentionSanity {
        hits: 0,
        sentences: 0,
        relative_weight: 0.0,
    };
    for it in corpus.split(split) {
        for sentence in &corpus.reviews[it.review].sentences {
            let planted: Vec<usize> = (0..sentence.len())
                .filter(|&k| is_sentiment(corpus.vocab.word(sentence[k])))
                .collect();
            if planted.is_empty() {
                continue;
            }
            let (_, weights) = model.encode_sentence(sentence, false, &mut rng)?;
            let uniform = 1.0 / sentence.len() as f64;
            out.sentences += 1;
            if planted.iter().all(|&k| weights[k].f64() > uniform) {
                out.hits += 1;
            }
            let mean: f64 = planted.iter().map(|&k| weights[k].f64()).sum::<f64>() / planted.len() as f64;
            out.relative_weight += mean / uniform;
        }
    }
    if out.sentences > 0 {
        out.relative_weight /= out.sentences as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tokenize;

    #[test]
    fn shape_and_ratings() {
        let p = planted_corpus(&PlantedConfig::default());
        assert_eq!(p.reviews.len(), 2400);
        for r in &p.reviews {
            assert!((1.0..=5.0).contains(&r.rating));
            let sentences = tokenize(&r.text);
            assert_eq!(sentences.len(), 3);
            let planted: Vec<&Vec<String>> = sentences
                .iter()
                .filter(|s| s.iter().any(|w| ASPECTS.contains(&w.as_str())))
                .collect();
            assert_eq!(planted.len(), 1);
            let at = planted[0].iter().position(|w| ASPECTS.contains(&w.as_str())).unwrap();
            assert!(at <= 2 && planted[0][at + 1] == "is");
            assert!(planted[0].len() <= 3 + 2 + 6 + 1);
            let pos = planted[0].iter().filter(|w| POSITIVE.contains(&w.as_str())).count() as f64;
            let neg = planted[0].iter().filter(|w| NEGATIVE.contains(&w.as_str())).count() as f64;
            assert!((r.rating - (3.0 + pos - neg)).abs() < 0.3, "{r:?}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = PlantedConfig::default();
        assert_eq!(planted_corpus(&cfg), planted_corpus(&cfg));
    }
}
