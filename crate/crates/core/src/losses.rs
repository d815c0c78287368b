//! Per-class binary cross-entropy, the weighted training objective, class
//! frequency statistics and the inverse-frequency meta-validation loss.
//!
//! Each loss has a plain evaluation over [`Matrix`] values and a tape
//! counterpart (`*_var`) used when gradients are needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var, PROB_EPS};

/// `n x C` matrix of per-instance, per-class losses. Entries are finite and
/// non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix(Matrix);

impl LossMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument(
                "loss entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// `n x C` matrix of per-entry loss weights.
///
/// Learned weights lie in `(0, 1)`; fixed baselines may use any finite
/// non-negative value.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(Matrix);

impl WeightMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Per-class positive counts over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Number of instances.
    pub total: usize,
    pub counts: Vec<usize>,
    pub freqs: Vec<f64>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `l = -[y ln p + (1 - y) ln(1 - p)]` entrywise, with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_per_class(y: &Matrix, y_hat: &Matrix) -> Result<LossMatrix> {
    let l = y.zip_map(y_hat, "bce_per_class", |t, p| {
        let p = clamp_prob(p);
        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
    })?;
    // -0.0 and tiny negative rounding collapse to 0
    LossMatrix::new(l.map(|v| v.max(0.0)))
}

/// Mean of `w * l` over all `n * C` entries.
pub fn weighted_train_loss(weights: &WeightMatrix, losses: &LossMatrix) -> Result<f64> {
    let (w, l) = (weights.matrix(), losses.matrix());
    if w.shape() != l.shape() {
        return Err(Error::shape(
            "weighted_train_loss",
            format!("weights {:?} vs losses {:?}", w.shape(), l.shape()),
        ));
    }
    if l.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = w.data().iter().zip(l.data()).map(|(a, b)| a * b).sum();
    Ok(total / l.len() as f64)
}

/// Counts positives per class. Every class must appear at least once.
pub fn class_stats(labels: &Matrix) -> Result<ClassStats> {
    let total = labels.rows();
    if total == 0 {
        return Err(Error::Argument("class_stats needs at least one row".into()));
    }
    let mut counts = vec![0usize; labels.cols()];
    for r in 0..total {
        for (c, &v) in labels.row(r).iter().enumerate() {
            if v > 0.5 {
                counts[c] += 1;
            }
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    let freqs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ClassStats {
        total,
        counts,
        freqs,
    })
}

/// Sum over classes of `l / freq`, averaged over the `M` rows, where `freq`
/// is the fraction of rows that carry the class.
pub fn inv_freq_meta_loss(losses: &LossMatrix, stats: &ClassStats) -> Result<f64> {
    let l = losses.matrix();
    check_stats(l.cols(), stats)?;
    if l.rows() == 0 {
        return Err(Error::Argument("meta loss needs at least one row".into()));
    }
    let mut total = 0.0;
    for r in 0..l.rows() {
        for (v, f) in l.row(r).iter().zip(&stats.freqs) {
            total += v / f;
        }
    }
    Ok(total / l.rows() as f64)
}

fn check_stats(cols: usize, stats: &ClassStats) -> Result<()> {
    if stats.freqs.len() != cols {
        return Err(Error::shape(
            "inv_freq_meta_loss",
            format!("{} frequencies for {cols} classes", stats.freqs.len()),
        ));
    }
    if let Some(class) = stats.freqs.iter().position(|&f| f <= 0.0 || !f.is_finite()) {
        return Err(Error::MissingClass { class });
    }
    Ok(())
}

/// Tape version of [`bce_per_class`]; `y` is a constant.
pub fn bce_var(tape: &Tape, y: &Matrix, y_hat: Var) -> Result<Var> {
    if tape.shape(y_hat) != y.shape() {
        return Err(Error::shape(
            "bce_var",
            format!("labels {:?} vs predictions {:?}", y.shape(), tape.shape(y_hat)),
        ));
    }
    let p = tape.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let q = tape.one_minus(p)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(tape.constant(y.clone()), log_p)?;
    let neg = tape.mul(tape.constant(y.map(|t| 1.0 - t)), log_q)?;
    let both = tape.add(pos, neg)?;
    tape.scale(both, -1.0)
}

/// Tape version of [`weighted_train_loss`].
pub fn weighted_loss_var(tape: &Tape, weights: Var, losses: Var) -> Result<Var> {
    let (n, c) = tape.shape(losses);
    let prod = tape.mul(weights, losses)?;
    let total = tape.sum(prod)?;
    if n * c == 0 {
        return Ok(total);
    }
    tape.scale(total, 1.0 / (n * c) as f64)
}

/// Tape version of [`inv_freq_meta_loss`].
pub fn inv_freq_loss_var(tape: &Tape, losses: Var, stats: &ClassStats) -> Result<Var> {
    let (m, c) = tape.shape(losses);
    check_stats(c, stats)?;
    if m == 0 {
        return Err(Error::Argument("meta loss needs at least one row".into()));
    }
    let inv = Matrix::new(1, c, stats.freqs.iter().map(|f| 1.0 / f).collect())?;
    let inv = tape.broadcast_rows(tape.constant(inv), m)?;
    let weighted = tape.mul(losses, inv)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / m as f64)
}
