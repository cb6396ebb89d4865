//! Evaluation metrics. All functions are pure in their arguments.

use std::collections::BTreeMap;

use super::TaskError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    /// `NaN` when the targets are constant.
    pub r2: f64,
    pub degenerate_targets: bool,
}

/// MAE and `R^2 = 1 - SS_res / SS_tot`. Constant targets leave `R^2`
/// undefined: it is reported as `NaN` with `degenerate_targets` set.
pub fn eval_regression(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics, TaskError> {
    if preds.len() != targets.len() || preds.len() < 2 {
        return Err(TaskError::Metrics(format!("need two or more paired values, got {} preds and {} targets", preds.len(), targets.len())));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    let degenerate = targets.iter().all(|&t| t == targets[0]);
    let r2 = if degenerate { f64::NAN } else { 1.0 - ss_res / ss_tot };
    Ok(RegressionMetrics { mae, r2, degenerate_targets: degenerate })
}

/// One retrieval query with its positive and distractor candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalItem {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub distractors: Vec<Vec<f64>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// 1-based rank of the positive among all candidates by cosine to the
/// query. Ties are resolved against the positive.
pub fn positive_rank(item: &RetrievalItem) -> usize {
    let s = cosine(&item.query, &item.positive);
    1 + item.distractors.iter().filter(|d| cosine(&item.query, d) >= s).count()
}

/// Recall@k for each `k`: the fraction of queries whose positive ranks at
/// or above `k`.
pub fn eval_retrieval(items: &[RetrievalItem], ks: &[usize]) -> BTreeMap<usize, f64> {
    let ranks: Vec<usize> = items.iter().map(positive_rank).collect();
    let n = ranks.len().max(1) as f64;
    ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n)).collect()
}
