//! Review ingestion: line-delimited JSON parsing, rule-based tokenization,
//! percentile truncation caps, corpus assembly with seeded splits, and the
//! versioned corpus cache file.

mod cache;
mod corpus;
mod parse;
mod tokenize;
mod truncation;

pub use cache::{corpus_hash, read_corpus, write_corpus, CORPUS_MAGIC};
pub use corpus::{build_corpus, CapOverrides, Corpus, Interaction, Split, TokenizedReview, Vocabulary, PAD, UNK};
pub use parse::{parse_reviews, ParseReport, RawReview};
pub use tokenize::tokenize;
pub use truncation::{compute_truncation, nearest_rank, Caps};
