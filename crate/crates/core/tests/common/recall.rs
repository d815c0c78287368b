//! Recall@K oracle that counts outranking candidates instead of sorting.

use std::collections::BTreeSet;

use metabalance::eval::{Constraint, EpisodeScores, PairScores, SEMI_THRESHOLD};

use super::Stream;

/// Candidate classes of one pair, written out from the rule statements.
pub fn allowed(scores: &[f64], constraint: Constraint) -> Vec<usize> {
    match constraint {
        Constraint::NoConstraint => (0..scores.len()).collect(),
        Constraint::SemiConstraint => (0..scores.len()).filter(|&c| scores[c] > SEMI_THRESHOLD).collect(),
        Constraint::WithConstraint => {
            let mut best = 0;
            for c in 1..scores.len() {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            vec![best]
        }
    }
}

/// Recall per class computed by counting, for every candidate, how many
/// candidates outrank it; no sorting involved.
pub fn brute_force(episodes: &[EpisodeScores], k: usize, constraint: Constraint, c: usize) -> (Vec<Option<f64>>, f64) {
    let mut sums = vec![0.0; c];
    let mut vids = vec![0usize; c];
    for ep in episodes {
        let cands: Vec<(f64, usize, usize)> = ep
            .pairs
            .iter()
            .flat_map(|p| allowed(&p.scores, constraint).into_iter().map(move |cls| (p.scores[cls], p.pair_id, cls)))
            .collect();
        let outranks = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
        };
        for cls in 0..c {
            let gt: Vec<usize> = ep.pairs.iter().filter(|p| p.gt_labels.contains(&cls)).map(|p| p.pair_id).collect();
            if gt.is_empty() {
                continue;
            }
            let mut hits = 0;
            for cand in &cands {
                if cand.2 != cls || !gt.contains(&cand.1) {
                    continue;
                }
                let rank = cands.iter().filter(|o| outranks(o, cand)).count();
                if rank < k {
                    hits += 1;
                }
            }
            sums[cls] += hits as f64 / gt.len() as f64;
            vids[cls] += 1;
        }
    }
    let per: Vec<Option<f64>> = (0..c).map(|i| (vids[i] > 0).then(|| sums[i] / vids[i] as f64)).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

pub fn random_episodes(s: &mut Stream, c: usize) -> Vec<EpisodeScores> {
    let n_eps = 1 + s.below(3);
    let mut pair_id = 0;
    (0..n_eps)
        .map(|scene_id| {
            let n_pairs = 1 + s.below(4);
            let pairs = (0..n_pairs)
                .map(|_| {
                    // coarse grid so score ties actually happen
                    let scores: Vec<f64> = (0..c).map(|_| [0.2, 0.5, 0.91, 0.95][s.below(4)]).collect();
                    let mut gt = BTreeSet::new();
                    gt.insert(s.below(c));
                    if s.unit() < 0.4 {
                        gt.insert(s.below(c));
                    }
                    pair_id += 1;
                    PairScores {
                        pair_id: 100 - pair_id,
                        scores,
                        gt_labels: gt,
                    }
                })
                .collect();
            EpisodeScores { scene_id, pairs }
        })
        .collect()
}
