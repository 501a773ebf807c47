use serde::{Deserialize, Serialize};

/// Length caps applied to review histories and texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    /// Reviews kept per user / item history.
    pub reviews: usize,
    /// Sentences kept per review.
    pub sentences: usize,
    /// Words kept per sentence.
    pub words: usize,
}

/// `⌈percent·n/100⌉`-th smallest value.
pub fn nearest_rank(values: &[usize], percent: usize) -> usize {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (percent * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Caps covering 90% of users and items by review count, and 70% of reviews
/// by sentence count and of sentences by word count.
pub fn compute_truncation(
    user_counts: &[usize],
    item_counts: &[usize],
    sentences_per_review: &[usize],
    words_per_sentence: &[usize],
) -> Caps {
    Caps {
        reviews: nearest_rank(user_counts, 90).max(nearest_rank(item_counts, 90)),
        sentences: nearest_rank(sentences_per_review, 70),
        words: nearest_rank(words_per_sentence, 70),
    }
}
