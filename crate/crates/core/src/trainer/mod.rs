//! Bilevel training of the classifier and the weight net.
//!
//! Each batch runs three steps:
//!
//! 1. a pseudo update `stepped = theta - alpha * grad`, where `grad` is the
//!    gradient of the weighted training loss and the weights the weight net
//!    assigns to the losses are held constant w.r.t. `theta`;
//! 2. a weight-net update from the gradient of the inverse-frequency meta
//!    loss at `stepped(phi)` with respect to `phi`;
//! 3. the real classifier update, using weights from the updated `phi`.
//!
//! The pseudo parameters are discarded after step 2.

mod checkpoint;
mod optim;
mod report;
mod split;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_history_csv, CheckpointState};
pub use optim::SgdMomentum;
pub use report::{head_classes, metrics_from_predictions, predict, MetricsReport, SummaryRow};
pub use split::{sample_meta_batch, split_meta_validation, split_test_scenes, Split, META_RESAMPLE_ATTEMPTS};

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses::{bce_var, class_stats, inv_freq_loss_var, weighted_loss_var, ClassStats};
use crate::models::{mlp_forward, ClassifierConfig, WeightNetConfig};
use crate::numerics::{self, Matrix, ParamSet, Tape, Var};

/// Which weighting scheme drives the classifier update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per-entry weights from the loss-to-weight net, meta-learned.
    MlMwn,
    /// One meta-learned weight per instance from its mean loss.
    MwnetScalar,
    /// Fixed per-class inverse training frequency, normalised to mean 1.
    StaticInvfreq,
    /// Every weight is 1.
    Unweighted,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MlMwn,
        Strategy::MwnetScalar,
        Strategy::StaticInvfreq,
        Strategy::Unweighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MlMwn => "ml_mwn",
            Strategy::MwnetScalar => "mwnet_scalar",
            Strategy::StaticInvfreq => "static_invfreq",
            Strategy::Unweighted => "unweighted",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Strategy::MlMwn | Strategy::MwnetScalar)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy {s:?}")))
    }
}

fn d_alpha() -> f64 {
    1e-3
}
fn d_beta() -> f64 {
    0.01
}
fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    10
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay() -> f64 {
    0.01
}
fn d_meta_fraction() -> f64 {
    0.1
}
fn d_strategy() -> Strategy {
    Strategy::MlMwn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// Classifier step size, used by both the pseudo and the real update.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Weight-net step size.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_momentum")]
    pub weightnet_momentum: f64,
    #[serde(default = "d_decay")]
    pub weightnet_weight_decay: f64,
    #[serde(default)]
    pub classifier_momentum: f64,
    #[serde(default)]
    pub classifier_weight_decay: f64,
    #[serde(default = "d_meta_fraction")]
    pub meta_fraction: f64,
    #[serde(default = "d_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    /// Compare the hypergradient against central differences every this
    /// many steps (0 disables).
    #[serde(default)]
    pub hypergrad_check_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: d_alpha(),
            beta: d_beta(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            weightnet_momentum: d_momentum(),
            weightnet_weight_decay: d_decay(),
            classifier_momentum: 0.0,
            classifier_weight_decay: 0.0,
            meta_fraction: d_meta_fraction(),
            strategy: d_strategy(),
            seed: 0,
            hypergrad_check_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Argument("alpha must be > 0".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Argument("beta must be > 0".into()));
        }
        if !(self.meta_fraction > 0.0 && self.meta_fraction < 1.0) {
            return Err(Error::Argument("meta_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Features and labels of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Self {
        Self {
            x: ds.features.select_rows(indices),
            y: ds.labels.select_rows(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the per-entry loss weights are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Uniform,
    /// One fixed weight per class.
    PerClass(Vec<f64>),
    /// `g_phi` applied to the detached loss matrix (row-jointly, or entrywise
    /// in scalar mode).
    Learned(WeightNetConfig),
    /// `g_phi` applied to each instance's mean loss; the resulting weight is
    /// shared by all classes of that instance. The net must be scalar mode.
    LearnedPerInstance(WeightNetConfig),
}

impl Weighting {
    pub fn weightnet(&self) -> Option<&WeightNetConfig> {
        match self {
            Weighting::Learned(n) | Weighting::LearnedPerInstance(n) => Some(n),
            _ => None,
        }
    }

    /// Weights for a detached `n x C` loss node.
    pub fn weights_var(&self, tape: &Tape, phi: &[Var], losses: Var) -> Result<Var> {
        let (n, c) = tape.shape(losses);
        match self {
            Weighting::Uniform => Ok(tape.constant(Matrix::filled(n, c, 1.0))),
            Weighting::PerClass(w) => {
                if w.len() != c {
                    return Err(Error::shape("weights", format!("{} class weights for {c} classes", w.len())));
                }
                let row = tape.constant(Matrix::new(1, c, w.clone())?);
                tape.broadcast_rows(row, n)
            }
            Weighting::Learned(net) => net.forward_var(tape, phi, losses),
            Weighting::LearnedPerInstance(net) => {
                if !net.scalar_mode {
                    return Err(Error::Argument("per-instance weighting needs a scalar-mode net".into()));
                }
                let sums = tape.sum_cols(losses)?;
                let mean = tape.scale(sums, 1.0 / c as f64)?;
                let w = mlp_forward(tape, phi, mean)?;
                tape.broadcast_cols(w, c)
            }
        }
    }
}

/// The classifier architecture together with its weighting scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub classifier: ClassifierConfig,
    pub weighting: Weighting,
}

impl Problem {
    /// Builds `(L_train, l)` on the tape for a batch: per-entry BCE at
    /// `theta` and its weighted mean, weights computed from the detached
    /// losses so that they are constant w.r.t. `theta`.
    pub fn weighted_objective(&self, tape: &Tape, theta: &[Var], phi: &[Var], batch: &Batch) -> Result<(Var, Var)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let x = tape.constant(batch.x.clone());
        let p = self.classifier.forward_var(tape, theta, x)?;
        let l = bce_var(tape, &batch.y, p)?;
        let detached = tape.detach(l);
        let w = self.weighting.weights_var(tape, phi, detached)?;
        Ok((weighted_loss_var(tape, w, l)?, l))
    }

    /// One plain SGD step on the tape; differentiable in everything the
    /// objective depends on.
    pub fn sgd_step_var(&self, tape: &Tape, theta: &[Var], objective: Var, alpha: f64) -> Result<Vec<Var>> {
        let grads = tape.grad(objective, theta)?;
        theta
            .iter()
            .zip(grads)
            .map(|(&t, g)| {
                let step = tape.scale(g, -alpha)?;
                tape.add(t, step)
            })
            .collect()
    }

    /// Inverse-frequency meta loss of the classifier `theta` on a batch.
    pub fn meta_loss_var(&self, tape: &Tape, theta: &[Var], meta: &Batch, stats: &ClassStats) -> Result<Var> {
        let x = tape.constant(meta.x.clone());
        let p = self.classifier.forward_var(tape, theta, x)?;
        let l = bce_var(tape, &meta.y, p)?;
        inv_freq_loss_var(tape, l, stats)
    }

    fn phi_or_empty(&self, phi: Option<&ParamSet>) -> Result<ParamSet> {
        match (self.weighting.weightnet(), phi) {
            (Some(net), Some(p)) => {
                if p.manifest() != &net.manifest() {
                    return Err(Error::shape("weight net", "phi does not match the weight-net architecture"));
                }
                Ok(p.clone())
            }
            (Some(_), None) => Err(Error::Argument("learned weighting requires phi".into())),
            (None, _) => Ok(ParamSet::from_matrices(Vec::new())),
        }
    }

    /// Gradient of the weighted training loss w.r.t. `theta`, plus the
    /// unweighted per-entry losses.
    pub fn weighted_grad(&self, theta: &ParamSet, phi: Option<&ParamSet>, batch: &Batch) -> Result<(ParamSet, Matrix)> {
        if theta.manifest() != &self.classifier.manifest() {
            return Err(Error::shape("classifier", "theta does not match the classifier architecture"));
        }
        let phi = self.phi_or_empty(phi)?;
        let tape = Tape::new();
        let th = numerics::leaves(&tape, theta);
        let ph = numerics::constants(&tape, &phi);
        let (obj, l) = self.weighted_objective(&tape, &th, &ph, batch)?;
        let grads = tape.grad(obj, &th)?;
        let g = numerics::collect(&tape, &grads, theta.manifest())?;
        Ok((g, (*tape.value(l)).clone()))
    }

    /// Pseudo classifier `stepped = theta - alpha * grad`, plain SGD.
    pub fn pseudo_update(&self, theta: &ParamSet, phi: Option<&ParamSet>, batch: &Batch, alpha: f64) -> Result<ParamSet> {
        let (g, _) = self.weighted_grad(theta, phi, batch)?;
        theta.add_scaled(&g, -alpha)
    }

    /// Gradient of the meta loss at `stepped(phi)` with respect to `phi`,
    /// differentiating through the pseudo update. Returns `(meta_loss, grad)`.
    pub fn hypergradient(
        &self,
        theta: &ParamSet,
        phi: &ParamSet,
        batch: &Batch,
        meta: &Batch,
        stats: &ClassStats,
        alpha: f64,
    ) -> Result<(f64, ParamSet)> {
        let phi = self.phi_or_empty(Some(phi))?;
        if theta.manifest() != &self.classifier.manifest() {
            return Err(Error::shape("classifier", "theta does not match the classifier architecture"));
        }
        numerics::grad_through_step(
            |tape, stepped| self.meta_loss_var(tape, stepped, meta, stats),
            |tape, phi_vars| {
                let th = numerics::leaves(tape, theta);
                let (obj, _) = self.weighted_objective(tape, &th, phi_vars, batch)?;
                self.sgd_step_var(tape, &th, obj, alpha)
            },
            &phi,
        )
    }

    /// Meta loss as a plain function of `phi`, for finite-difference checks.
    pub fn meta_loss_through_step(
        &self,
        theta: &ParamSet,
        phi: &ParamSet,
        batch: &Batch,
        meta: &Batch,
        stats: &ClassStats,
        alpha: f64,
    ) -> Result<f64> {
        let stepped = self.pseudo_update(theta, Some(phi), batch, alpha)?;
        let tape = Tape::new();
        let th = numerics::constants(&tape, &stepped);
        let out = self.meta_loss_var(&tape, &th, meta, stats)?;
        tape.scalar(out)
    }

    /// Weight-net update from the hypergradient. The meta batch must contain
    /// every class.
    #[allow(clippy::too_many_arguments)]
    pub fn meta_update_phi(
        &self,
        theta: &ParamSet,
        phi: &ParamSet,
        batch: &Batch,
        meta: &Batch,
        alpha: f64,
        optimizer: &mut SgdMomentum,
    ) -> Result<MetaUpdate> {
        let stats = class_stats(&meta.y)?;
        let (meta_loss, hypergrad) = self.hypergradient(theta, phi, batch, meta, &stats, alpha)?;
        let phi = optimizer.step(phi, &hypergrad)?;
        Ok(MetaUpdate {
            phi,
            meta_loss,
            hypergrad,
        })
    }

    /// Real classifier update with weights from the (updated) `phi`.
    pub fn final_update_theta(
        &self,
        theta: &ParamSet,
        phi: Option<&ParamSet>,
        batch: &Batch,
        optimizer: &mut SgdMomentum,
    ) -> Result<(ParamSet, Matrix)> {
        let (g, losses) = self.weighted_grad(theta, phi, batch)?;
        Ok((optimizer.step(theta, &g)?, losses))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaUpdate {
    pub phi: ParamSet,
    pub meta_loss: f64,
    pub hypergrad: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// Unweighted mean BCE of the batch at the pre-update classifier.
    pub train_loss: f64,
    /// Inverse-frequency meta loss at the pseudo classifier (meta strategies).
    pub meta_loss: Option<f64>,
}

/// Seed and stream position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    pub phi: Option<ParamSet>,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    pub history: Vec<HistoryEntry>,
}

/// The state a run finished with, plus how the data was split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub split: Split,
    /// Per-class positive counts over the training split.
    pub train_counts: Vec<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    /// A loss or update became non-finite; `last_good` is the state before
    /// the failing step.
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<TrainState> },
    #[error("hypergradient check failed at step {step}: relative error {rel_error:.3e}")]
    HypergradCheck { step: usize, rel_error: f64 },
    #[error(transparent)]
    Failed(#[from] Error),
}

impl TrainError {
    pub fn last_good(&self) -> Option<&TrainState> {
        match self {
            TrainError::Diverged { last_good, .. } => Some(last_good),
            _ => None,
        }
    }
}

/// Builds the weighting for a strategy; `static_invfreq` needs the training
/// class counts.
pub fn weighting_for(strategy: Strategy, weightnet: &WeightNetConfig, train_counts: &[usize]) -> Result<Weighting> {
    Ok(match strategy {
        Strategy::Unweighted => Weighting::Uniform,
        Strategy::StaticInvfreq => {
            if let Some(class) = train_counts.iter().position(|&c| c == 0) {
                return Err(Error::MissingClass { class });
            }
            let inv: Vec<f64> = train_counts.iter().map(|&c| 1.0 / c as f64).collect();
            let mean = inv.iter().sum::<f64>() / inv.len() as f64;
            Weighting::PerClass(inv.into_iter().map(|w| w / mean).collect())
        }
        Strategy::MlMwn => Weighting::Learned(weightnet.clone()),
        Strategy::MwnetScalar => Weighting::LearnedPerInstance(WeightNetConfig {
            scalar_mode: true,
            ..weightnet.clone()
        }),
    })
}

fn rng_state(rng: &ChaCha8Rng, seed: u64) -> RngState {
    RngState {
        seed,
        word_pos: rng.get_word_pos(),
    }
}

fn diverged(step: usize, state: &TrainState) -> TrainError {
    TrainError::Diverged {
        step,
        last_good: Box::new(state.clone()),
    }
}

/// Relative-error floor for hypergradient spot checks.
const CHECK_FLOOR: f64 = 1e-8;
const CHECK_TOL: f64 = 1e-4;
const CHECK_H: f64 = 1e-4;
const CHECK_COORDS: usize = 8;

/// Runs the training loop for `cfg.epochs` epochs over the dataset.
///
/// The dataset is split into training and meta-validation parts (the meta
/// part is also held out for the non-meta strategies, so every strategy
/// trains on the same instances).
pub fn train(
    dataset: &Dataset,
    classifier: &ClassifierConfig,
    weightnet: &WeightNetConfig,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    classifier.validate()?;
    weightnet.validate()?;
    if classifier.input_dim != dataset.dim() || classifier.num_classes != dataset.num_classes() {
        return Err(Error::shape("train", "classifier does not match the dataset dimensions").into());
    }
    if weightnet.num_classes != dataset.num_classes() {
        return Err(Error::shape("train", "weight net does not match the dataset classes").into());
    }

    let split = split_meta_validation(dataset, cfg.meta_fraction, cfg.seed)?;
    let train_counts = dataset.subset(&split.train).class_counts();
    let weighting = weighting_for(cfg.strategy, weightnet, &train_counts)?;
    let problem = Problem {
        classifier: classifier.clone(),
        weighting,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState {
        theta: classifier.init_params(),
        phi: problem.weighting.weightnet().map(|n| n.init_params()),
        epoch: 0,
        step: 0,
        rng: rng_state(&rng, cfg.seed),
        history: Vec::new(),
    };
    let mut theta_opt = SgdMomentum::new(cfg.alpha, cfg.classifier_momentum, cfg.classifier_weight_decay);
    let mut phi_opt = SgdMomentum::new(cfg.beta, cfg.weightnet_momentum, cfg.weightnet_weight_decay);
    let mut phi_version = 0usize;

    let mut order = split.train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.step + 1;
            let batch = Batch::gather(dataset, chunk);

            let mut meta_loss = None;
            let mut phi_next = state.phi.clone();
            if let Some(phi) = &state.phi {
                let meta_idx = sample_meta_batch(dataset, &split.meta, cfg.batch_size, &mut rng);
                let meta = Batch::gather(dataset, &meta_idx);
                let update = match problem.meta_update_phi(&state.theta, phi, &batch, &meta, cfg.alpha, &mut phi_opt) {
                    Ok(u) => u,
                    Err(e) if e.is_numeric() => return Err(diverged(step, &state)),
                    Err(e) => return Err(e.into()),
                };
                if !update.meta_loss.is_finite() || !update.phi.is_finite() {
                    return Err(diverged(step, &state));
                }
                if cfg.hypergrad_check_every > 0 && step.is_multiple_of(cfg.hypergrad_check_every) {
                    check_hypergradient(&problem, &state.theta, phi, &batch, &meta, cfg.alpha, &update.hypergrad, &mut rng, step)?;
                }
                meta_loss = Some(update.meta_loss);
                phi_next = Some(update.phi);
                phi_version = step;
            }

            // the real update must see the weight net produced in this step
            debug_assert!(phi_next.is_none() || phi_version == step);
            let (theta_next, losses) =
                match problem.final_update_theta(&state.theta, phi_next.as_ref(), &batch, &mut theta_opt) {
                    Ok(r) => r,
                    Err(e) if e.is_numeric() => return Err(diverged(step, &state)),
                    Err(e) => return Err(e.into()),
                };
            let train_loss = losses.mean();
            if !train_loss.is_finite() || !theta_next.is_finite() {
                return Err(diverged(step, &state));
            }

            state.theta = theta_next;
            state.phi = phi_next;
            state.step = step;
            state.history.push(HistoryEntry {
                step,
                train_loss,
                meta_loss,
            });
        }
        state.epoch = epoch + 1;
        state.rng = rng_state(&rng, cfg.seed);
    }
    state.rng = rng_state(&rng, cfg.seed);

    Ok(TrainOutcome {
        state,
        split,
        train_counts,
    })
}

/// What to measure after training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub k_values: Vec<usize>,
    pub constraints: Vec<crate::eval::Constraint>,
}

/// Scores the trained classifier on the `test` instances of `dataset`. Only
/// the classifier is used; the weight net plays no part in inference.
pub fn evaluate(
    dataset: &Dataset,
    test: &[usize],
    classifier: &ClassifierConfig,
    weightnet: &WeightNetConfig,
    cfg: &TrainerConfig,
    outcome: &TrainOutcome,
    spec: &EvalSpec,
) -> Result<(MetricsReport, Vec<crate::eval::PredictionRecord>)> {
    let records = predict(dataset, test, classifier, &outcome.state.theta)?;
    let head = head_classes(&outcome.train_counts);
    let (summary, reports) = metrics_from_predictions(&records, &spec.k_values, &spec.constraints, &head)?;
    let weightnet = match cfg.strategy {
        Strategy::MlMwn => Some(weightnet.label()),
        Strategy::MwnetScalar => Some(
            WeightNetConfig {
                scalar_mode: true,
                ..weightnet.clone()
            }
            .label(),
        ),
        _ => None,
    };
    let report = MetricsReport {
        strategy: cfg.strategy,
        seed: cfg.seed,
        weightnet,
        head_classes: head,
        summary,
        reports,
    };
    Ok((report, records))
}

/// Trains on the `pool` instances and evaluates on the `test` instances.
pub fn run(
    dataset: &Dataset,
    pool: &[usize],
    test: &[usize],
    classifier: &ClassifierConfig,
    weightnet: &WeightNetConfig,
    cfg: &TrainerConfig,
    spec: &EvalSpec,
) -> Result<(TrainOutcome, MetricsReport, Vec<crate::eval::PredictionRecord>), TrainError> {
    let train_set = dataset.subset(pool);
    let mut outcome = train(&train_set, classifier, weightnet, cfg)?;
    // report split indices in terms of the full dataset
    outcome.split.train = outcome.split.train.iter().map(|&i| pool[i]).collect();
    outcome.split.meta = outcome.split.meta.iter().map(|&i| pool[i]).collect();
    let (report, records) = evaluate(dataset, test, classifier, weightnet, cfg, &outcome, spec)?;
    Ok((outcome, report, records))
}

#[allow(clippy::too_many_arguments)]
fn check_hypergradient(
    problem: &Problem,
    theta: &ParamSet,
    phi: &ParamSet,
    batch: &Batch,
    meta: &Batch,
    alpha: f64,
    analytic: &ParamSet,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(), TrainError> {
    let stats = class_stats(&meta.y)?;
    let all: Vec<usize> = (0..phi.len()).collect();
    let coords: Vec<usize> = all.choose_multiple(rng, CHECK_COORDS.min(phi.len())).copied().collect();
    let fd = numerics::central_difference(
        |p| problem.meta_loss_through_step(theta, p, batch, meta, &stats, alpha),
        phi,
        &coords,
        CHECK_H,
    )?;
    let scale = analytic.max_abs().max(CHECK_FLOOR);
    let worst = coords
        .iter()
        .zip(&fd)
        .map(|(&i, &f)| (analytic.values()[i] - f).abs() / analytic.values()[i].abs().max(f.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max);
    if worst > CHECK_TOL {
        return Err(TrainError::HypergradCheck { step, rel_error: worst });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
