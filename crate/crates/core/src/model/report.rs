use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceReport {
    pub weight: f64,
    pub words: Vec<WordWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub weight: f64,
    pub source_user: String,
    pub source_item: String,
    pub sentences: Vec<SentenceReport>,
}

/// Review-level weights of one tower; empty for an entity without history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TowerReport {
    pub reviews: Vec<ReviewReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Towers {
    pub user: TowerReport,
    pub item: TowerReport,
}

/// Nested attention weights behind one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub user: String,
    pub item: String,
    pub prediction: f64,
    pub towers: Towers,
}

impl AttentionReport {
    /// Every weight vector in the report (review, sentence and word level).
    pub fn weight_vectors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for tower in [&self.towers.user, &self.towers.item] {
            if !tower.reviews.is_empty() {
                out.push(tower.reviews.iter().map(|r| r.weight).collect());
            }
            for review in &tower.reviews {
                out.push(review.sentences.iter().map(|s| s.weight).collect());
                for s in &review.sentences {
                    out.push(s.words.iter().map(|w| w.weight).collect());
                }
            }
        }
        out
    }
}
