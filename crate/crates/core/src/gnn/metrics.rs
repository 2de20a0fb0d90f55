use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingScores {
    pub ap: f64,
    pub auc: f64,
}

impl RankingScores {
    pub fn monitor(&self) -> f64 {
        (self.ap + self.auc) / 2.0
    }
}

/// Average precision and ROC AUC of `(score, is_positive)` pairs.
///
/// AUC is the Mann-Whitney statistic with tied scores given average
/// ranks. AP is the step-interpolated area under the precision-recall
/// curve, with tied scores forming a single threshold.
pub fn ap_auc(scores: &[(f64, bool)]) -> Result<RankingScores> {
    let positives = scores.iter().filter(|s| s.1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(format!(
            "need both classes, got {positives} positive and {negatives} negative"
        )));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::MetricUndefined("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    // descending order: walk tie groups
    let total = sorted.len();
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < total {
        let mut j = i;
        let mut group_pos = 0usize;
        while j < total && sorted[j].0 == sorted[i].0 {
            group_pos += usize::from(sorted[j].1);
            j += 1;
        }
        tp += group_pos;
        fp += (j - i) - group_pos;
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;

        // ascending ranks: positions total-j+1 ..= total-i
        let avg_rank = ((total - j + 1) + (total - i)) as f64 / 2.0;
        pos_rank_sum += avg_rank * group_pos as f64;
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    let auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
    Ok(RankingScores { ap, auc })
}
