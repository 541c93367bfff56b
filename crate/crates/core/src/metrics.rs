//! Detection metrics: ROC AUC, average precision and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Consecutive runs of equal score in a descending ranking, as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let idx = ranked(scores);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut pos, mut neg) = (0, 0);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        groups.push((pos, neg));
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut neg_below = n_neg as f64;
    let mut wins = 0.0;
    for (pos, neg) in tie_groups(scores, labels) {
        neg_below -= neg as f64;
        wins += pos as f64 * (neg_below + 0.5 * neg as f64);
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// `Σ_k (R_k - R_{k-1}) P_k` over descending distinct-score thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric("average precision needs a positive".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for (pos, neg) in tie_groups(scores, labels) {
        tp += pos;
        seen += pos + neg;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of samples whose `score >= threshold` decision matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == (l == 1)).count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ap: f64,
    pub auc: f64,
    pub n: usize,
    pub positives: usize,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(MetricsReport {
            acc: accuracy(scores, labels, 0.5)?,
            ap: average_precision(scores, labels)?,
            auc: auc(scores, labels)?,
            n: scores.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "acc={:.6}\nap={:.6}\nauc={:.6}\nn={}\npositives={}\n",
            self.acc, self.ap, self.auc, self.n, self.positives
        )
    }
}
