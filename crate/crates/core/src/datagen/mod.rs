//! Synthetic long-tailed multi-label datasets.
//!
//! Class `c` (0-based rank) has base probability proportional to
//! `(c + 1)^-s`. Each instance gets one primary label; instances whose
//! primary label lies outside the head region (top 20% of classes) pick up
//! an extra head label with probability `cooccur_p`. Features are the mean
//! of the active class prototypes plus isotropic Gaussian noise.

mod io;

pub use io::{load, save, DatasetManifest, FORMAT_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::class_stats;
use crate::numerics::Matrix;

/// Share of classes (by rank) treated as the head region.
pub const HEAD_FRACTION: f64 = 0.2;
/// Accepted relative deviation of the achieved imbalance ratio.
pub const IR_TOLERANCE: f64 = 0.10;

fn default_noise() -> f64 {
    0.3
}

fn default_scene_size() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub num_instances: usize,
    #[serde(default)]
    pub zipf_s: f64,
    /// When set, `zipf_s` is solved for so that the expected imbalance ratio
    /// hits this value.
    #[serde(default)]
    pub target_ir: Option<f64>,
    #[serde(default)]
    pub cooccur_p: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_scene_size")]
    pub scene_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.dim < 1 {
            return bad("dim must be >= 1");
        }
        if self.num_instances < 2 * self.num_classes {
            return bad("num_instances must be at least 2 * num_classes");
        }
        if !self.zipf_s.is_finite() || self.zipf_s < 0.0 {
            return bad("zipf_s must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.cooccur_p) {
            return bad("cooccur_p must lie in [0, 1]");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be finite and >= 0");
        }
        if self.scene_size < 1 {
            return bad("scene_size must be >= 1");
        }
        if let Some(ir) = self.target_ir {
            if !ir.is_finite() || ir < 1.0 {
                return bad("target_ir must be finite and >= 1");
            }
        }
        Ok(())
    }

    pub fn head_classes(&self) -> usize {
        head_count(self.num_classes)
    }
}

fn head_count(c: usize) -> usize {
    ((HEAD_FRACTION * c as f64).round() as usize).clamp(1, c - 1)
}

/// Features, binary labels and scene grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Matrix,
    /// Scene id of every instance.
    pub scene_of: Vec<usize>,
    /// Unit-norm class prototypes used to synthesise the features.
    pub class_prototypes: Option<Matrix>,
    pub seed: u64,
    pub scene_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    /// Positive classes of instance `i`, ascending.
    pub fn label_set(&self, i: usize) -> Vec<usize> {
        self.labels
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.5)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        counts_of(&self.labels)
    }

    /// `(scene_id, instance indices)` pairs sorted by scene id; instances in
    /// ascending order.
    pub fn scenes(&self) -> Vec<(usize, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &s) in self.scene_of.iter().enumerate() {
            map.entry(s).or_default().push(i);
        }
        map.into_iter().collect()
    }

    /// Rows `indices`, in order, keeping their scene ids.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select_rows(indices),
            scene_of: indices.iter().map(|&i| self.scene_of[i]).collect(),
            class_prototypes: self.class_prototypes.clone(),
            seed: self.seed,
            scene_size: self.scene_size,
        }
    }
}

fn counts_of(labels: &Matrix) -> Vec<usize> {
    let mut counts = vec![0; labels.cols()];
    for r in 0..labels.rows() {
        for (c, v) in labels.row(r).iter().enumerate() {
            if *v > 0.5 {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Largest class count over smallest class count in a label matrix.
pub fn imbalance_ratio(labels: &Matrix) -> Result<f64> {
    imbalance_ratio_of_counts(&counts_of(labels))
}

pub fn imbalance_ratio_of_counts(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Argument("no classes".into()));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    let max = *counts.iter().max().expect("non-empty");
    let min = *counts.iter().min().expect("non-empty");
    Ok(max as f64 / min as f64)
}

fn rank_probs(c: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|r| ((r + 1) as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

/// Expected head/tail ratio for exponent `s`, including co-occurring head
/// labels added to non-head instances.
pub fn expected_ir(c: usize, s: f64, cooccur_p: f64) -> f64 {
    let p = rank_probs(c, s);
    let h = head_count(c);
    let head_mass: f64 = p[..h].iter().sum();
    let tail_mass = 1.0 - head_mass;
    let top = p[0] * (1.0 + cooccur_p * tail_mass / head_mass);
    top / p[c - 1]
}

/// Bisection for the exponent whose expected imbalance ratio is `target`.
pub fn solve_zipf_exponent(c: usize, target: f64, cooccur_p: f64) -> Result<f64> {
    const S_MAX: f64 = 12.0;
    let lo_ir = expected_ir(c, 0.0, cooccur_p);
    let hi_ir = expected_ir(c, S_MAX, cooccur_p);
    if target < lo_ir || target > hi_ir {
        return Err(Error::Generation(format!(
            "target_ir {target} outside reachable range [{lo_ir:.3}, {hi_ir:.3e}] for {c} classes"
        )));
    }
    let (mut lo, mut hi) = (0.0, S_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_ir(c, mid, cooccur_p) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Largest-remainder allocation of `n` items by `probs`, at least `floor`
/// per class (taken from the largest classes).
fn allocate(n: usize, probs: &[f64], floor: usize) -> Vec<usize> {
    let exact: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: ties in remainder go to the lower rank
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    for c in 0..counts.len() {
        while counts[c] < floor {
            let donor = (0..counts.len())
                .max_by_key(|&k| (counts[k], std::cmp::Reverse(k)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[c] += 1;
        }
    }
    counts
}

/// Generates a dataset; see the module documentation for the process.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c, d, n) = (cfg.num_classes, cfg.dim, cfg.num_instances);
    let s = match cfg.target_ir {
        Some(t) => solve_zipf_exponent(c, t, cfg.cooccur_p)?,
        None => cfg.zipf_s,
    };
    let probs = rank_probs(c, s);
    if let Some(target) = cfg.target_ir {
        let tail_expected = probs[c - 1] * n as f64;
        if tail_expected < 2.0 {
            return Err(Error::Generation(format!(
                "target_ir {target} leaves the rarest class with {tail_expected:.2} expected instances (< 2) for N = {n}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prototypes = Matrix::zeros(c, d);
    for k in 0..c {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (j, x) in v.iter().enumerate() {
            prototypes.set(k, j, x / norm);
        }
    }

    let counts = allocate(n, &probs, 2);
    let mut primary: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    primary.shuffle(&mut rng);

    let h = head_count(c);
    let head_mass: f64 = probs[..h].iter().sum();
    let mut labels = Matrix::zeros(n, c);
    let mut features = Matrix::zeros(n, d);
    for (i, &k) in primary.iter().enumerate() {
        labels.set(i, k, 1.0);
        if k >= h && rng.random::<f64>() < cfg.cooccur_p {
            let mut u = rng.random::<f64>() * head_mass;
            let mut extra = h - 1;
            for (j, p) in probs[..h].iter().enumerate() {
                if u < *p {
                    extra = j;
                    break;
                }
                u -= p;
            }
            labels.set(i, extra, 1.0);
        }
        let active: Vec<usize> = (0..c).filter(|&j| labels.get(i, j) > 0.5).collect();
        for j in 0..d {
            let mean = active.iter().map(|&a| prototypes.get(a, j)).sum::<f64>() / active.len() as f64;
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.set(i, j, mean + cfg.noise_sigma * noise);
        }
    }

    let scene_of = (0..n).map(|i| i / cfg.scene_size).collect();
    let ds = Dataset {
        features,
        labels,
        scene_of,
        class_prototypes: Some(prototypes),
        seed: cfg.seed,
        scene_size: cfg.scene_size,
    };

    if let Some(target) = cfg.target_ir {
        let achieved = imbalance_ratio(&ds.labels)?;
        if (achieved - target).abs() > IR_TOLERANCE * target {
            return Err(Error::Generation(format!(
                "achieved imbalance ratio {achieved:.2} is outside ±10% of {target}"
            )));
        }
    }
    // every class realisable and splittable
    class_stats(&ds.labels)?;
    Ok(ds)
}
