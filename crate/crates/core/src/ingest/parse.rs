use std::io::BufRead;

use serde::Deserialize;

use crate::error::Result;

/// One review as it appears in the input dump.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub text: String,
}

#[derive(Deserialize)]
struct Line {
    #[serde(rename = "reviewerID")]
    reviewer_id: Option<String>,
    asin: Option<String>,
    overall: Option<f64>,
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
}

/// Outcome of [`parse_reviews`]: kept reviews plus what was skipped.
#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub reviews: Vec<RawReview>,
    /// Lines whose review text was missing or blank.
    pub dropped_empty: usize,
    /// `(1-based line number, message)` for malformed lines.
    pub errors: Vec<(usize, String)>,
}

/// Parses one JSON review object per line. Blank lines are ignored;
/// malformed lines are reported and parsing continues.
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                report.errors.push((lineno, e.to_string()));
                continue;
            }
        };
        let text = match parsed.review_text {
            Some(t) if !t.trim().is_empty() => t,
            _ => {
                report.dropped_empty += 1;
                continue;
            }
        };
        let (Some(user_id), Some(item_id), Some(rating)) = (parsed.reviewer_id, parsed.asin, parsed.overall) else {
            report.errors.push((lineno, "missing reviewerID, asin or overall".into()));
            continue;
        };
        if user_id.is_empty() || item_id.is_empty() {
            report.errors.push((lineno, "empty reviewerID or asin".into()));
            continue;
        }
        if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
            report.errors.push((lineno, format!("rating {rating} outside [1, 5]")));
            continue;
        }
        report.reviews.push(RawReview {
            user_id,
            item_id,
            rating,
            text,
        });
    }
    Ok(report)
}
