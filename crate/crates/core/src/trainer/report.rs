use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::datagen::{Dataset, HEAD_FRACTION};
use crate::error::{Error, Result};
use crate::eval::{episodes_from_records, recall_report, Constraint, PredictionRecord, RecallReport, SEMI_THRESHOLD};
use crate::models::{classifier_forward, ClassifierConfig};
use crate::numerics::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub constraint: Constraint,
    pub k: usize,
    pub mean_recall: f64,
    /// Mean recall over the head classes that occur in the test set.
    pub head_recall: Option<f64>,
    /// Mean recall over the remaining classes that occur in the test set.
    pub tail_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub seed: u64,
    /// Weight-net architecture label, for meta strategies.
    pub weightnet: Option<String>,
    /// The most frequent classes in the training split.
    pub head_classes: Vec<usize>,
    pub summary: Vec<SummaryRow>,
    pub reports: Vec<RecallReport>,
}

impl MetricsReport {
    pub fn row(&self, constraint: Constraint, k: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.constraint == constraint && r.k == k)
    }

    pub fn report(&self, constraint: Constraint) -> Option<&RecallReport> {
        self.reports.iter().find(|r| r.constraint == constraint)
    }
}

/// The top `round(HEAD_FRACTION * C)` classes by count (at least one), ties
/// by class id, returned in ascending id order.
pub fn head_classes(counts: &[usize]) -> Vec<usize> {
    let n_head = ((HEAD_FRACTION * counts.len() as f64).round() as usize).clamp(1, counts.len().max(1));
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut head: Vec<usize> = order.into_iter().take(n_head).collect();
    head.sort_unstable();
    head
}

/// Class probabilities for the given instances, one record per instance;
/// each scene is an episode and each instance a pair.
pub fn predict(
    dataset: &Dataset,
    indices: &[usize],
    classifier: &ClassifierConfig,
    theta: &ParamSet,
) -> Result<Vec<PredictionRecord>> {
    let x = dataset.features.select_rows(indices);
    let probs = classifier_forward(classifier, theta, &x)?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(r, &i)| PredictionRecord {
            scene_id: dataset.scene_of[i],
            pair_id: i,
            scores: probs.row(r).to_vec(),
            gt: dataset.label_set(i),
        })
        .collect())
}

/// Recall reports of the given predictions for every constraint, with head
/// and tail summaries.
pub fn metrics_from_predictions(
    records: &[PredictionRecord],
    k_values: &[usize],
    constraints: &[Constraint],
    head: &[usize],
) -> Result<(Vec<SummaryRow>, Vec<RecallReport>)> {
    if constraints.is_empty() {
        return Err(Error::Argument("at least one constraint is required".into()));
    }
    let episodes = episodes_from_records(records);
    let mut summary = Vec::new();
    let mut reports = Vec::new();
    for &constraint in constraints {
        let r = recall_report(&episodes, k_values, constraint, SEMI_THRESHOLD)?;
        let tail: Vec<usize> = (0..r.num_classes()).filter(|c| !head.contains(c)).collect();
        for (ki, &k) in k_values.iter().enumerate() {
            summary.push(SummaryRow {
                constraint,
                k,
                mean_recall: r.mean_recall[ki],
                head_recall: r.mean_over(head, k),
                tail_recall: r.mean_over(&tail, k),
            });
        }
        reports.push(r);
    }
    Ok((summary, reports))
}
