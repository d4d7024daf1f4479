use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("AUROC is undefined: only one class present")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("no task has both classes present")]
    NoEvaluableTask,
}

/// Mann–Whitney AUROC with midranks for ties.
///
/// Everything is kept in integer half-ranks so the result equals the
/// pair-count definition `(#{s+ > s-} + ½·#{s+ = s-}) / (n+ · n-)` exactly.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i+j+2)/2
        let twice_mid = (i + j + 2) as u64;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_block;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskAuroc {
    pub mean: f64,
    /// `None` for tasks missing a class among present labels.
    pub per_task: Vec<Option<f64>>,
}

/// Unweighted mean AUROC over tasks with both classes present. `scores`,
/// `labels`, `present` are row-major `[n, tasks]`.
pub fn multitask_auroc(
    scores: &[f64],
    labels: &[f64],
    present: &[bool],
    tasks: usize,
) -> Result<MultiTaskAuroc, MetricError> {
    if scores.len() != labels.len() || scores.len() != present.len() {
        return Err(MetricError::Length(
            scores.len(),
            labels.len().min(present.len()),
        ));
    }
    if tasks == 0 || scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut per_task = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for i in (t..scores.len()).step_by(tasks) {
            if present[i] {
                s.push(scores[i]);
                l.push(labels[i] > 0.5);
            }
        }
        match auroc(&s, &l) {
            Ok(v) => per_task.push(Some(v)),
            Err(MetricError::SingleClass) => {
                log::info!("task {t} excluded from AUROC: single class");
                per_task.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let used: Vec<f64> = per_task.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(MetricError::NoEvaluableTask);
    }
    Ok(MultiTaskAuroc {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        per_task,
    })
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    if preds.len() != targets.len() {
        return Err(MetricError::Length(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let sse: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / preds.len() as f64).sqrt())
}
