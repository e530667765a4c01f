//! Impression-grouped ranking metrics and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Impression;
use crate::error::Result;
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImpression {
    pub id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredImpression {
    pub fn new(id: impl Into<String>, scores: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(scores.len(), labels.len(), "scores and labels must align");
        ScoredImpression {
            id: id.into(),
            scores,
            labels,
        }
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| **l > 0).count();
        (pos, self.labels.len() - pos)
    }

    /// Candidate indices by descending score; ties keep candidate order.
    fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. `None` for single-class impressions.
pub fn auc(s: &ScoredImpression) -> Option<f64> {
    let (p, n) = s.counts();
    if p == 0 || n == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if s.labels[k] > 0 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Reciprocal rank of the best-ranked positive. `None` without positives.
pub fn mrr(s: &ScoredImpression) -> Option<f64> {
    s.ranking()
        .iter()
        .position(|&i| s.labels[i] > 0)
        .map(|r| 1.0 / (r + 1) as f64)
}

/// nDCG@k with gain `2^label - 1` and `log2(rank + 1)` discount.
pub fn ndcg_at_k(s: &ScoredImpression, k: usize) -> Option<f64> {
    if k == 0 || s.counts().0 == 0 {
        return None;
    }
    let gain = |l: u8| 2f64.powi(l as i32) - 1.0;
    let dcg = |labels: &mut dyn Iterator<Item = u8>| -> f64 {
        labels
            .take(k)
            .enumerate()
            .map(|(i, l)| gain(l) / ((i + 2) as f64).log2())
            .sum()
    };
    let actual = dcg(&mut s.ranking().into_iter().map(|i| s.labels[i]));
    let mut ideal_labels = s.labels.clone();
    ideal_labels.sort_unstable_by(|a, b| b.cmp(a));
    let ideal = dcg(&mut ideal_labels.into_iter());
    Some(actual / ideal)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Metric name to mean over applicable impressions.
    pub metrics: BTreeMap<String, f64>,
    pub impressions: usize,
    /// Impressions left out of AUC (single class).
    pub auc_excluded: usize,
    /// Impressions left out of MRR and nDCG (no positive).
    pub rank_excluded: usize,
}

impl MetricReport {
    pub fn from_scored(scored: &[ScoredImpression], ks: &[usize]) -> Self {
        let mut aucs = Vec::new();
        let mut mrrs = Vec::new();
        let mut ndcgs: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
        for s in scored {
            if let Some(a) = auc(s) {
                aucs.push(a);
            }
            if let Some(m) = mrr(s) {
                mrrs.push(m);
                for (j, &k) in ks.iter().enumerate() {
                    ndcgs[j].push(ndcg_at_k(s, k).expect("has a positive"));
                }
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("auc".to_string(), mean(&aucs));
        metrics.insert("mrr".to_string(), mean(&mrrs));
        for (j, k) in ks.iter().enumerate() {
            metrics.insert(format!("ndcg@{k}"), mean(&ndcgs[j]));
        }
        MetricReport {
            metrics,
            impressions: scored.len(),
            auc_excluded: scored.len() - aucs.len(),
            rank_excluded: scored.len() - mrrs.len(),
        }
    }

    pub fn get(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn auc(&self) -> f64 {
        self.get("auc")
    }

    /// `name: value` lines with four decimals, then the exclusion counts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metrics {
            writeln!(out, "{k}: {v:.4}").unwrap();
        }
        writeln!(out, "impressions: {}", self.impressions).unwrap();
        writeln!(out, "auc_excluded: {}", self.auc_excluded).unwrap();
        writeln!(out, "rank_excluded: {}", self.rank_excluded).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Anything that scores an impression's candidates, in candidate order.
pub trait Scorer: Sync {
    fn score(&self, impression: &Impression) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&Impression) -> Result<Vec<f64>> + Sync,
{
    fn score(&self, impression: &Impression) -> Result<Vec<f64>> {
        self(impression)
    }
}

/// Scores every impression (in parallel when enabled) and aggregates.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    impressions: &[Impression],
    ks: &[usize],
    parallel: bool,
) -> Result<MetricReport> {
    let scored = score_all(scorer, impressions, parallel)?;
    Ok(MetricReport::from_scored(&scored, ks))
}

pub fn score_all<S: Scorer + ?Sized>(
    scorer: &S,
    impressions: &[Impression],
    parallel: bool,
) -> Result<Vec<ScoredImpression>> {
    let results = parallel::map(impressions, parallel, |imp| {
        scorer.score(imp).map(|scores| {
            ScoredImpression::new(
                imp.id.clone(),
                scores,
                imp.candidates.iter().map(|(_, l)| *l).collect(),
            )
        })
    });
    results.into_iter().collect()
}
