//! Scene-graph style evaluation: per-class Recall@K pooled per episode,
//! mean Recall@K and the three prediction-constraint strategies.

mod dump;
mod report;

pub use dump::{read_predictions, write_predictions, PredictionRecord};
pub use report::{bar_chart_svg, per_class_table, render_bar_chart, Table};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold of the semi-constrained strategy.
pub const SEMI_THRESHOLD: f64 = 0.9;

/// How many predicates a subject-object pair may contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// At most one predicate per pair: the argmax.
    WithConstraint,
    /// Every predicate scoring above the threshold.
    SemiConstraint,
    /// Every predicate.
    NoConstraint,
}

impl Constraint {
    pub const ALL: [Constraint; 3] = [
        Constraint::WithConstraint,
        Constraint::SemiConstraint,
        Constraint::NoConstraint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::WithConstraint => "with_constraint",
            Constraint::SemiConstraint => "semi_constraint",
            Constraint::NoConstraint => "no_constraint",
        }
    }

    /// Short column tag: `with`, `semi`, `no`.
    pub fn short(self) -> &'static str {
        match self {
            Constraint::WithConstraint => "with",
            Constraint::SemiConstraint => "semi",
            Constraint::NoConstraint => "no",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Constraint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_constraint" | "with" => Ok(Constraint::WithConstraint),
            "semi_constraint" | "semi" => Ok(Constraint::SemiConstraint),
            "no_constraint" | "no" => Ok(Constraint::NoConstraint),
            other => Err(Error::Argument(format!("unknown constraint strategy {other:?}"))),
        }
    }
}

/// Scores and ground truth of one subject-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub pair_id: usize,
    pub scores: Vec<f64>,
    pub gt_labels: BTreeSet<usize>,
}

/// All pairs of one scene; the unit over which predictions are ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScores {
    pub scene_id: usize,
    pub pairs: Vec<PairScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class_id: usize,
    /// Ground-truth pairs carrying this class, over all episodes.
    pub count: usize,
    /// Episodes with at least one ground-truth pair of this class.
    pub episodes: usize,
    /// One entry per K; `None` when the class never occurs.
    pub recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub constraint: Constraint,
    pub k_values: Vec<usize>,
    pub num_pairs: usize,
    pub per_class: Vec<ClassRecall>,
    /// Mean over classes that occur at least once, one entry per K.
    pub mean_recall: Vec<f64>,
}

impl RecallReport {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn mean_recall_at(&self, k: usize) -> Option<f64> {
        self.k_values
            .iter()
            .position(|&x| x == k)
            .map(|i| self.mean_recall[i])
    }

    /// Unweighted mean of `R@K_c` over the given classes, skipping absent ones.
    pub fn mean_over(&self, classes: &[usize], k: usize) -> Option<f64> {
        let ki = self.k_values.iter().position(|&x| x == k)?;
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|&c| self.per_class.get(c).and_then(|r| r.recall[ki]))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Candidate `(class, score)` pairs allowed by `constraint`, by class id.
///
/// Argmax ties resolve to the lowest class id.
pub fn apply_constraint(scores: &[f64], constraint: Constraint, threshold: f64) -> Vec<(usize, f64)> {
    match constraint {
        Constraint::WithConstraint => {
            let mut best: Option<(usize, f64)> = None;
            for (c, &s) in scores.iter().enumerate() {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            best.into_iter().collect()
        }
        Constraint::SemiConstraint => scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > threshold)
            .map(|(c, &s)| (c, s))
            .collect(),
        Constraint::NoConstraint => scores.iter().copied().enumerate().collect(),
    }
}

fn check_episodes(episodes: &[EpisodeScores]) -> Result<usize> {
    let c = episodes
        .iter()
        .flat_map(|e| e.pairs.first())
        .map(|p| p.scores.len())
        .next()
        .ok_or_else(|| Error::Argument("no episodes with pairs".into()))?;
    for e in episodes {
        for p in &e.pairs {
            if p.scores.len() != c {
                return Err(Error::shape(
                    "recall_at_k",
                    format!("pair {} has {} scores, expected {c}", p.pair_id, p.scores.len()),
                ));
            }
            if p.scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite { op: "recall_at_k" });
            }
            if let Some(&g) = p.gt_labels.iter().next_back() {
                if g >= c {
                    return Err(Error::Argument(format!(
                        "pair {} has ground-truth class {g} >= {c}",
                        p.pair_id
                    )));
                }
            }
        }
    }
    Ok(c)
}

/// Per-class Recall@K for several K under one constraint.
///
/// Within each episode, candidates surviving the constraint are pooled and
/// ranked by score (descending; ties by pair id, then class id). For each
/// class, the hit fraction of its ground-truth pairs among the top K is
/// averaged over the episodes in which it occurs.
pub fn recall_report(
    episodes: &[EpisodeScores],
    k_values: &[usize],
    constraint: Constraint,
    threshold: f64,
) -> Result<RecallReport> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::Argument("K values must be >= 1".into()));
    }
    let c = check_episodes(episodes)?;
    let nk = k_values.len();
    let mut sums = vec![vec![0.0; nk]; c];
    let mut episodes_with = vec![0usize; c];
    let mut counts = vec![0usize; c];
    let mut num_pairs = 0;

    for ep in episodes {
        num_pairs += ep.pairs.len();
        let mut gt_per_class = vec![0usize; c];
        for p in &ep.pairs {
            for &g in &p.gt_labels {
                gt_per_class[g] += 1;
            }
        }
        let mut cands: Vec<(f64, usize, usize, bool)> = Vec::new();
        for p in &ep.pairs {
            for (cls, s) in apply_constraint(&p.scores, constraint, threshold) {
                cands.push((s, p.pair_id, cls, p.gt_labels.contains(&cls)));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        for (ki, &k) in k_values.iter().enumerate() {
            let mut hits = vec![0usize; c];
            for cand in cands.iter().take(k) {
                if cand.3 {
                    hits[cand.2] += 1;
                }
            }
            for cls in 0..c {
                if gt_per_class[cls] > 0 {
                    sums[cls][ki] += hits[cls] as f64 / gt_per_class[cls] as f64;
                }
            }
        }
        for cls in 0..c {
            if gt_per_class[cls] > 0 {
                episodes_with[cls] += 1;
                counts[cls] += gt_per_class[cls];
            }
        }
    }

    let per_class: Vec<ClassRecall> = (0..c)
        .map(|cls| ClassRecall {
            class_id: cls,
            count: counts[cls],
            episodes: episodes_with[cls],
            recall: (0..nk)
                .map(|ki| (episodes_with[cls] > 0).then(|| sums[cls][ki] / episodes_with[cls] as f64))
                .collect(),
        })
        .collect();

    let present: Vec<&ClassRecall> = per_class.iter().filter(|r| r.episodes > 0).collect();
    let mean_recall = (0..nk)
        .map(|ki| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|r| r.recall[ki].expect("present")).sum::<f64>() / present.len() as f64
            }
        })
        .collect();

    Ok(RecallReport {
        constraint,
        k_values: k_values.to_vec(),
        num_pairs,
        per_class,
        mean_recall,
    })
}

/// Single-K form of [`recall_report`].
pub fn recall_at_k(episodes: &[EpisodeScores], k: usize, constraint: Constraint) -> Result<RecallReport> {
    recall_report(episodes, &[k], constraint, SEMI_THRESHOLD)
}

/// Groups flat prediction records into episodes sorted by scene id; pairs
/// keep their file order.
pub fn episodes_from_records(records: &[PredictionRecord]) -> Vec<EpisodeScores> {
    let mut map: std::collections::BTreeMap<usize, Vec<PairScores>> = Default::default();
    for r in records {
        map.entry(r.scene_id).or_default().push(PairScores {
            pair_id: r.pair_id,
            scores: r.scores.clone(),
            gt_labels: r.gt.iter().copied().collect(),
        });
    }
    map.into_iter()
        .map(|(scene_id, pairs)| EpisodeScores { scene_id, pairs })
        .collect()
}
