//! Corpus cache: the line `HSACN-CORPUS v1` followed by one compact JSON
//! document
//!
//! ```text
//! {"seed":u64,"caps":{"reviews":R,"sentences":S,"words":T},
//!  "vocab":[word by id, starting "<pad>","<unk>"],
//!  "users":[id...],"items":[id...],
//!  "reviews":[{"user":u,"item":i,"rating":r,"split":"train|validation|test",
//!              "sentences":[[word ids]...]}...]}
//! ```
//!
//! Histories and the training mean are rebuilt on load. Writing the same
//! corpus always produces identical bytes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{Corpus, Interaction, Split, TokenizedReview, Vocabulary};
use super::truncation::Caps;
use crate::error::{HsacnError, Result};

pub const CORPUS_MAGIC: &str = "HSACN-CORPUS v1";

#[derive(Serialize, Deserialize)]
struct CachedReview {
    user: usize,
    item: usize,
    rating: f64,
    split: Split,
    sentences: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct CacheBody {
    seed: u64,
    caps: Caps,
    vocab: Vec<String>,
    users: Vec<String>,
    items: Vec<String>,
    reviews: Vec<CachedReview>,
}

fn to_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let body = CacheBody {
        seed: corpus.seed,
        caps: corpus.caps,
        vocab: corpus.vocab.words().to_vec(),
        users: corpus.users.clone(),
        items: corpus.items.clone(),
        reviews: corpus
            .interactions
            .iter()
            .map(|it| CachedReview {
                user: it.user,
                item: it.item,
                rating: it.rating,
                split: it.split,
                sentences: corpus.reviews[it.review].sentences.clone(),
            })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC.as_bytes());
    out.push(b'\n');
    serde_json::to_writer(&mut out, &body)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    w.write_all(&to_bytes(corpus)?)?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(mut r: R) -> Result<Corpus> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    if header.trim_end() != CORPUS_MAGIC {
        return Err(HsacnError::Format(format!(
            "expected `{CORPUS_MAGIC}` header, found `{}`",
            header.trim_end()
        )));
    }
    let body: CacheBody = serde_json::from_reader(r)?;
    let vocab = Vocabulary::from_words(body.vocab)?;
    let mut reviews = Vec::with_capacity(body.reviews.len());
    let mut interactions = Vec::with_capacity(body.reviews.len());
    for (k, c) in body.reviews.into_iter().enumerate() {
        if c.user >= body.users.len() || c.item >= body.items.len() {
            return Err(HsacnError::Format(format!("review {k} references an unknown user or item")));
        }
        if c.sentences.iter().flatten().any(|&id| id as usize >= vocab.len()) {
            return Err(HsacnError::Format(format!("review {k} has an out-of-vocabulary id")));
        }
        interactions.push(Interaction {
            user: c.user,
            item: c.item,
            rating: c.rating,
            split: c.split,
            review: k,
        });
        reviews.push(TokenizedReview {
            user: c.user,
            item: c.item,
            sentences: c.sentences,
        });
    }
    Corpus::assemble(vocab, body.users, body.items, reviews, interactions, body.caps, body.seed)
}

/// SHA-256 (hex) of the cache serialization; ties checkpoints to corpora.
pub fn corpus_hash(corpus: &Corpus) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(corpus)?)))
}
