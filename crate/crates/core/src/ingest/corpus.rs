use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::parse::RawReview;
use super::tokenize::tokenize;
use super::truncation::{compute_truncation, Caps};
use crate::error::{HsacnError, Result};
use crate::parallel::{map_ordered, Parallelism};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const SPECIALS: [&str; 2] = ["<pad>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from a word list in id order; the first two entries must be the
    /// PAD and UNK markers.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != SPECIALS[0] || words[1] != SPECIALS[1] {
            return Err(HsacnError::Format("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate().skip(2) {
            if index.insert(w.clone(), i as u32).is_some() || SPECIALS.contains(&w.as_str()) {
                return Err(HsacnError::Format(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// Frequency-ordered vocabulary (ties broken lexicographically).
    fn from_counts(counts: HashMap<&str, usize>) -> Self {
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Vocabulary::from_words(words).expect("distinct corpus words")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = HsacnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(HsacnError::Parameter(format!("unknown split `{other}`"))),
        }
    }
}

/// A review after tokenization, id mapping and truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedReview {
    pub user: usize,
    pub item: usize,
    pub sentences: Vec<Vec<u32>>,
}

/// One rated (user, item) pair; `review` indexes [`Corpus::reviews`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub split: Split,
    pub review: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// Indexed like `interactions`; review `k` belongs to interaction `k`.
    pub reviews: Vec<TokenizedReview>,
    pub interactions: Vec<Interaction>,
    /// Training reviews per user, most recent `caps.reviews`, input order.
    pub user_reviews: Vec<Vec<usize>>,
    pub item_reviews: Vec<Vec<usize>>,
    pub caps: Caps,
    pub train_mean: f64,
    pub seed: u64,
}

impl Corpus {
    /// Assembles histories and the training mean from already split,
    /// tokenized data. Shared by [`build_corpus`] and the cache reader.
    pub(crate) fn assemble(
        vocab: Vocabulary,
        users: Vec<String>,
        items: Vec<String>,
        reviews: Vec<TokenizedReview>,
        interactions: Vec<Interaction>,
        caps: Caps,
        seed: u64,
    ) -> Result<Corpus> {
        let mut user_reviews = vec![Vec::new(); users.len()];
        let mut item_reviews = vec![Vec::new(); items.len()];
        let mut total = 0.0;
        let mut n_train = 0usize;
        for it in &interactions {
            if it.split != Split::Train {
                continue;
            }
            total += it.rating;
            n_train += 1;
            if !reviews[it.review].sentences.is_empty() {
                user_reviews[it.user].push(it.review);
                item_reviews[it.item].push(it.review);
            }
        }
        if n_train == 0 {
            return Err(HsacnError::InvalidInput("training split is empty".into()));
        }
        for list in user_reviews.iter_mut().chain(item_reviews.iter_mut()) {
            if list.len() > caps.reviews {
                list.drain(..list.len() - caps.reviews);
            }
        }
        Ok(Corpus {
            vocab,
            users,
            items,
            reviews,
            interactions,
            user_reviews,
            item_reviews,
            caps,
            train_mean: total / n_train as f64,
            seed,
        })
    }

    pub fn split(&self, split: Split) -> Vec<Interaction> {
        self.interactions.iter().filter(|i| i.split == split).copied().collect()
    }

    pub fn user_index(&self, id: &str) -> Result<usize> {
        self.users.iter().position(|u| u == id).ok_or_else(|| HsacnError::Lookup {
            kind: "user",
            id: id.to_string(),
        })
    }

    pub fn item_index(&self, id: &str) -> Result<usize> {
        self.items.iter().position(|u| u == id).ok_or_else(|| HsacnError::Lookup {
            kind: "item",
            id: id.to_string(),
        })
    }

    /// The user's history with every review about `target_item` removed.
    pub fn user_history(&self, user: usize, target_item: usize) -> Vec<usize> {
        self.user_reviews[user]
            .iter()
            .copied()
            .filter(|&r| self.reviews[r].item != target_item)
            .collect()
    }

    /// The item's history with every review by `target_user` removed.
    pub fn item_history(&self, item: usize, target_user: usize) -> Vec<usize> {
        self.item_reviews[item]
            .iter()
            .copied()
            .filter(|&r| self.reviews[r].user != target_user)
            .collect()
    }

    pub fn words_of(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.vocab.word(i)).collect()
    }
}

/// Optional caps replacing the computed percentiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CapOverrides {
    pub reviews: Option<usize>,
    pub sentences: Option<usize>,
    pub words: Option<usize>,
}

fn index_of(map: &mut HashMap<String, usize>, names: &mut Vec<String>, key: &str) -> usize {
    if let Some(&i) = map.get(key) {
        return i;
    }
    names.push(key.to_string());
    map.insert(key.to_string(), names.len() - 1);
    names.len() - 1
}

/// Tokenizes, truncates, splits 80/10/10 after a seeded shuffle, and builds
/// the training-only vocabulary.
pub fn build_corpus(raw: &[RawReview], seed: u64, overrides: CapOverrides) -> Result<Corpus> {
    if raw.len() < 10 {
        return Err(HsacnError::CorpusTooSmall(raw.len()));
    }
    let mut users = Vec::new();
    let mut items = Vec::new();
    let (mut user_map, mut item_map) = (HashMap::new(), HashMap::new());
    let owners: Vec<(usize, usize)> = raw
        .iter()
        .map(|r| {
            (
                index_of(&mut user_map, &mut users, &r.user_id),
                index_of(&mut item_map, &mut items, &r.item_id),
            )
        })
        .collect();

    let texts = map_ordered(raw, Parallelism::Auto, |_, r| tokenize(&r.text));

    let mut user_counts = vec![0usize; users.len()];
    let mut item_counts = vec![0usize; items.len()];
    for &(u, i) in &owners {
        user_counts[u] += 1;
        item_counts[i] += 1;
    }
    let sentence_counts: Vec<usize> = texts.iter().map(Vec::len).filter(|&n| n > 0).collect();
    let word_counts: Vec<usize> = texts.iter().flatten().map(Vec::len).collect();
    if word_counts.is_empty() {
        return Err(HsacnError::InvalidInput("no review contains any token".into()));
    }
    let computed = compute_truncation(&user_counts, &item_counts, &sentence_counts, &word_counts);
    let caps = Caps {
        reviews: overrides.reviews.unwrap_or(computed.reviews),
        sentences: overrides.sentences.unwrap_or(computed.sentences),
        words: overrides.words.unwrap_or(computed.words),
    };
    if caps.reviews == 0 || caps.sentences == 0 || caps.words == 0 {
        return Err(HsacnError::Parameter(format!("caps must be positive, got {caps:?}")));
    }

    let n = raw.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = 8 * n / 10;
    let n_val = n / 10;
    let mut splits = vec![Split::Test; n];
    for (rank, &k) in order.iter().enumerate() {
        splits[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }

    let truncated: Vec<Vec<&[String]>> = texts
        .iter()
        .map(|sents| sents.iter().take(caps.sentences).map(|s| &s[..s.len().min(caps.words)]).collect())
        .collect();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (k, sents) in truncated.iter().enumerate() {
        if splits[k] == Split::Train {
            for w in sents.iter().flat_map(|s| s.iter()) {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    let vocab = Vocabulary::from_counts(counts);

    let reviews: Vec<TokenizedReview> = truncated
        .iter()
        .zip(&owners)
        .map(|(sents, &(user, item))| TokenizedReview {
            user,
            item,
            sentences: sents.iter().map(|s| s.iter().map(|w| vocab.id(w)).collect()).collect(),
        })
        .collect();
    let interactions = owners
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(k, (&(user, item), r))| Interaction {
            user,
            item,
            rating: r.rating,
            split: splits[k],
            review: k,
        })
        .collect();
    Corpus::assemble(vocab, users, items, reviews, interactions, caps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(user: &str, item: &str, rating: f64, text: &str) -> RawReview {
        RawReview {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            text: text.into(),
        }
    }

    fn sample(n: usize) -> Vec<RawReview> {
        (0..n)
            .map(|k| {
                raw(
                    &format!("u{}", k % 7),
                    &format!("i{}", k % 5),
                    1.0 + (k % 5) as f64,
                    &format!("Word{k} is here. Another sentence with w{} tokens!", k % 3),
                )
            })
            .collect()
    }

    #[test]
    fn split_is_80_10_10_and_deterministic() {
        let data = sample(100);
        let a = build_corpus(&data, 42, CapOverrides::default()).unwrap();
        let b = build_corpus(&data, 42, CapOverrides::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Train).len(), 80);
        assert_eq!(a.split(Split::Validation).len(), 10);
        assert_eq!(a.split(Split::Test).len(), 10);
        let c = build_corpus(&data, 43, CapOverrides::default()).unwrap();
        assert_ne!(
            a.interactions.iter().map(|i| i.split).collect::<Vec<_>>(),
            c.interactions.iter().map(|i| i.split).collect::<Vec<_>>()
        );
    }

    #[test]
    fn vocabulary_is_train_only() {
        let data = sample(100);
        let corpus = build_corpus(&data, 1, CapOverrides::default()).unwrap();
        let held_out = corpus.interactions.iter().find(|i| i.split == Split::Test).unwrap();
        let unique = format!("word{}", held_out.review);
        assert_eq!(corpus.vocab.id(&unique), UNK);
        assert_eq!(corpus.reviews[held_out.review].sentences[0][0], UNK);
        let train = corpus.interactions.iter().find(|i| i.split == Split::Train).unwrap();
        assert_ne!(corpus.reviews[train.review].sentences[0][0], UNK);
    }

    #[test]
    fn ids_stay_in_range_and_pad_never_appears() {
        let corpus = build_corpus(&sample(60), 9, CapOverrides::default()).unwrap();
        for r in &corpus.reviews {
            for s in &r.sentences {
                assert!(!s.is_empty() && s.len() <= corpus.caps.words);
                assert!(s.iter().all(|&id| (id as usize) < corpus.vocab.len() && id != PAD));
            }
            assert!(r.sentences.len() <= corpus.caps.sentences);
        }
    }

    #[test]
    fn overrides_truncate_texts_and_histories() {
        let overrides = CapOverrides {
            reviews: Some(2),
            sentences: Some(1),
            words: Some(2),
        };
        let corpus = build_corpus(&sample(50), 3, overrides).unwrap();
        assert!(corpus.reviews.iter().all(|r| r.sentences.len() == 1 && r.sentences[0].len() == 2));
        assert!(corpus.user_reviews.iter().all(|h| h.len() <= 2));
        // most recent = last in input order
        let u0: Vec<usize> = corpus
            .interactions
            .iter()
            .filter(|i| i.user == 0 && i.split == Split::Train)
            .map(|i| i.review)
            .collect();
        assert_eq!(corpus.user_reviews[0], u0[u0.len() - 2..].to_vec());
    }

    #[test]
    fn target_review_is_excluded() {
        let corpus = build_corpus(&sample(100), 5, CapOverrides::default()).unwrap();
        for it in corpus.split(Split::Train) {
            let hist = corpus.user_history(it.user, it.item);
            assert!(hist.iter().all(|&r| corpus.reviews[r].item != it.item));
            let hist = corpus.item_history(it.item, it.user);
            assert!(hist.iter().all(|&r| corpus.reviews[r].user != it.user));
        }
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            build_corpus(&sample(9), 0, CapOverrides::default()),
            Err(HsacnError::CorpusTooSmall(9))
        ));
    }
}
