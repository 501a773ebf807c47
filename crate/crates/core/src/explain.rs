//! Export of attention reports as JSON and as a static HTML heatmap.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{AttentionReport, TowerReport};

/// `x` rounded to 12 significant decimal digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Copy of `report` with every weight and the prediction rounded by
/// [`round12`]. No renormalization takes place.
pub fn rounded(report: &AttentionReport) -> AttentionReport {
    let mut out = report.clone();
    out.prediction = round12(out.prediction);
    for tower in [&mut out.towers.user, &mut out.towers.item] {
        for review in &mut tower.reviews {
            review.weight = round12(review.weight);
            for s in &mut review.sentences {
                s.weight = round12(s.weight);
                for w in &mut s.words {
                    w.weight = round12(w.weight);
                }
            }
        }
    }
    out
}

pub fn report_json(report: &AttentionReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&rounded(report))?)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Weights scaled so the largest entry of the vector maps to 1.
fn intensities(weights: &[f64]) -> Vec<f64> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    weights.iter().map(|&w| if max > 0.0 { w / max } else { 0.0 }).collect()
}

fn tower_html(out: &mut String, title: &str, tower: &TowerReport) {
    let _ = writeln!(out, "<h2>{}</h2>", escape(title));
    if tower.reviews.is_empty() {
        out.push_str("<p><em>No reviews in history.</em></p>\n");
        return;
    }
    let review_weights: Vec<f64> = tower.reviews.iter().map(|r| r.weight).collect();
    let best = review_weights
        .iter()
        .enumerate()
        .fold(0, |b, (i, &w)| if w > review_weights[b] { i } else { b });
    for (k, review) in tower.reviews.iter().enumerate() {
        let border = if k == best { "3px solid #333" } else { "1px solid #bbb" };
        let _ = writeln!(
            out,
            "<div style=\"border:{border};margin:8px 0;padding:6px\">\
             <div style=\"font-size:12px;color:#555\">review by {} on {} &middot; weight {:.4}</div>",
            escape(&review.source_user),
            escape(&review.source_item),
            review.weight
        );
        let sentence_alpha = intensities(&review.sentences.iter().map(|s| s.weight).collect::<Vec<_>>());
        for (s, alpha) in review.sentences.iter().zip(sentence_alpha) {
            let _ = write!(
                out,
                "<div style=\"display:flex;align-items:center;margin:2px 0\">\
                 <span title=\"{:.6}\" style=\"display:inline-block;min-width:56px;margin-right:8px;\
                 text-align:center;font-size:11px;background:rgba(255,140,0,{alpha:.3})\">{:.3}</span><span>",
                s.weight, s.weight
            );
            let word_alpha = intensities(&s.words.iter().map(|w| w.weight).collect::<Vec<_>>());
            for (w, a) in s.words.iter().zip(word_alpha) {
                let _ = write!(
                    out,
                    "<span title=\"{:.6}\" style=\"background:rgba(30,100,255,{a:.3});padding:1px 2px;margin:0 1px\">{}</span>",
                    w.weight,
                    escape(&w.token)
                );
            }
            out.push_str("</span></div>\n");
        }
        out.push_str("</div>\n");
    }
}

/// Self-contained page: orange boxes carry sentence weights, blue word
/// backgrounds carry word weights, darker meaning higher within the vector.
/// The most heavily weighted review of each tower has a bold border.
pub fn render_html(report: &AttentionReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Attention for {} / {}</title></head>\n\
         <body style=\"font-family:sans-serif;max-width:960px;margin:auto\">\n\
         <h1>User {} &middot; item {}</h1>\n<p>Predicted rating: <b>{:.4}</b></p>",
        escape(&report.user),
        escape(&report.item),
        escape(&report.user),
        escape(&report.item),
        report.prediction
    );
    tower_html(&mut out, "User reviews", &report.towers.user);
    tower_html(&mut out, "Item reviews", &report.towers.item);
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReviewReport, SentenceReport, Towers, WordWeight};

    fn report() -> AttentionReport {
        let words = |ws: &[(&str, f64)]| {
            ws.iter()
                .map(|&(t, w)| WordWeight {
                    token: t.into(),
                    weight: w,
                })
                .collect()
        };
        AttentionReport {
            user: "U<1>".into(),
            item: "I&2".into(),
            prediction: 4.123456789012345,
            towers: Towers {
                user: TowerReport {
                    reviews: vec![ReviewReport {
                        weight: 1.0,
                        source_user: "U<1>".into(),
                        source_item: "I9".into(),
                        sentences: vec![SentenceReport {
                            weight: 1.0,
                            words: words(&[("great", 2.0 / 3.0), ("toy", 1.0 / 3.0)]),
                        }],
                    }],
                },
                item: TowerReport::default(),
            },
        }
    }

    #[test]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round12(2.0 / 3.0), 0.666666666667);
        assert_eq!(round12(1.0), 1.0);
        assert_eq!(round12(0.0), 0.0);
        assert_eq!(round12(1.234567890123456e-7), 1.23456789012e-7);
    }

    #[test]
    fn json_holds_rounded_weights() {
        let json = report_json(&report()).unwrap();
        let back: AttentionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rounded(&report()));
        assert_eq!(back.towers.user.reviews[0].sentences[0].words[0].weight, 0.666666666667);
    }

    #[test]
    fn html_is_escaped_and_static() {
        let html = render_html(&report());
        assert!(html.contains("U&lt;1&gt;") && html.contains("I&amp;2"));
        assert!(!html.contains("<script") && !html.contains("http"));
        assert!(html.contains("rgba(30,100,255,1.000)"));
        assert!(html.contains("rgba(30,100,255,0.500)"));
        assert!(html.contains("No reviews in history"));
    }
}
