//! The multi-label classifier and the loss-to-weight network, both
//! multilayer perceptrons with ReLU hidden layers and a sigmoid output.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossMatrix, WeightMatrix};
use crate::numerics::{self, Manifest, Matrix, ParamSet, Segment, Tape, Var};

/// Default hidden layer for synthetic experiments.
pub const DEFAULT_CLASSIFIER_HIDDEN: usize = 64;
/// Default weight-net hidden width.
pub const DEFAULT_WEIGHTNET_HIDDEN: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightNetConfig {
    pub num_classes: usize,
    pub hidden_sizes: Vec<usize>,
    /// Maps each loss entry to its weight independently (`1-h-1`) instead of
    /// mapping a whole loss row jointly (`C-h-C`).
    pub scalar_mode: bool,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_sizes: vec![DEFAULT_CLASSIFIER_HIDDEN],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::Argument("classifier input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Argument("classifier needs at least 2 classes".into()));
        }
        check_hidden(&self.hidden_sizes)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(self.num_classes);
        sizes
    }

    pub fn manifest(&self) -> Manifest {
        mlp_manifest(&self.layer_sizes())
    }

    pub fn init_params(&self) -> ParamSet {
        init_mlp(&self.layer_sizes(), self.seed)
    }
}

impl WeightNetConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self {
            num_classes,
            hidden_sizes: vec![DEFAULT_WEIGHTNET_HIDDEN],
            scalar_mode: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Argument("weight net needs at least 2 classes".into()));
        }
        check_hidden(&self.hidden_sizes)
    }

    /// Input and output width: 1 in scalar mode, `C` otherwise.
    pub fn width(&self) -> usize {
        if self.scalar_mode {
            1
        } else {
            self.num_classes
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.width()];
        sizes.extend(&self.hidden_sizes);
        sizes.push(self.width());
        sizes
    }

    pub fn manifest(&self) -> Manifest {
        mlp_manifest(&self.layer_sizes())
    }

    pub fn init_params(&self) -> ParamSet {
        init_mlp(&self.layer_sizes(), self.seed)
    }

    /// Architecture label such as `C-100-C` or `1-100-1`.
    pub fn label(&self) -> String {
        let end = if self.scalar_mode { "1".to_string() } else { "C".to_string() };
        let mut parts = vec![end.clone()];
        parts.extend(self.hidden_sizes.iter().map(|h| h.to_string()));
        parts.push(end);
        parts.join("-")
    }
}

fn check_hidden(hidden: &[usize]) -> Result<()> {
    if hidden.contains(&0) {
        return Err(Error::Argument("hidden layer sizes must be positive".into()));
    }
    Ok(())
}

fn mlp_manifest(sizes: &[usize]) -> Manifest {
    let mut segments = Vec::with_capacity(2 * (sizes.len() - 1));
    for (l, pair) in sizes.windows(2).enumerate() {
        segments.push(Segment::new(format!("layer{l}.weight"), pair[0], pair[1]));
        segments.push(Segment::new(format!("layer{l}.bias"), 1, pair[1]));
    }
    Manifest::new(segments)
}

/// Glorot-uniform weights, zero biases.
fn init_mlp(sizes: &[usize], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest = mlp_manifest(sizes);
    let mut values = Vec::with_capacity(manifest.total_len);
    for pair in sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamSet::new(manifest, values).expect("manifest and values built together")
}

/// Forward pass of an MLP given as alternating weight/bias nodes.
pub fn mlp_forward(tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
    if params.is_empty() || !params.len().is_multiple_of(2) {
        return Err(Error::shape("mlp_forward", "expected weight/bias pairs"));
    }
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, params[2 * l])?;
        let z = tape.add_row(z, params[2 * l + 1])?;
        h = if l + 1 == layers {
            tape.sigmoid(z)?
        } else {
            tape.relu(z)?
        };
    }
    Ok(h)
}

fn check_manifest(expected: &Manifest, got: &ParamSet, what: &str) -> Result<()> {
    if expected != got.manifest() {
        return Err(Error::shape(
            "forward",
            format!("{what} parameters do not match the configured architecture"),
        ));
    }
    Ok(())
}

impl ClassifierConfig {
    /// Class probabilities on the tape.
    pub fn forward_var(&self, tape: &Tape, theta: &[Var], x: Var) -> Result<Var> {
        if tape.shape(x).1 != self.input_dim {
            return Err(Error::shape(
                "classifier_forward",
                format!("input has {} columns, expected {}", tape.shape(x).1, self.input_dim),
            ));
        }
        mlp_forward(tape, theta, x)
    }
}

impl WeightNetConfig {
    /// Weights for a `n x C` loss node on the tape.
    pub fn forward_var(&self, tape: &Tape, phi: &[Var], losses: Var) -> Result<Var> {
        let (n, c) = tape.shape(losses);
        if c != self.num_classes {
            return Err(Error::shape(
                "weightnet_forward",
                format!("{c} loss columns, expected {}", self.num_classes),
            ));
        }
        if self.scalar_mode {
            let flat = tape.reshape(losses, n * c, 1)?;
            let w = mlp_forward(tape, phi, flat)?;
            tape.reshape(w, n, c)
        } else {
            mlp_forward(tape, phi, losses)
        }
    }
}

/// Per-class probabilities `f_theta(x)` for an `n x d` batch.
pub fn classifier_forward(cfg: &ClassifierConfig, theta: &ParamSet, x: &Matrix) -> Result<Matrix> {
    check_manifest(&cfg.manifest(), theta, "classifier")?;
    let tape = Tape::new();
    let vars = numerics::constants(&tape, theta);
    let xv = tape.constant(x.clone());
    let out = cfg.forward_var(&tape, &vars, xv)?;
    Ok((*tape.value(out)).clone())
}

/// Weights `g_phi(l)` for an `n x C` loss matrix.
pub fn weightnet_forward(cfg: &WeightNetConfig, phi: &ParamSet, losses: &LossMatrix) -> Result<WeightMatrix> {
    check_manifest(&cfg.manifest(), phi, "weight net")?;
    let tape = Tape::new();
    let vars = numerics::constants(&tape, phi);
    let l = tape.constant(losses.matrix().clone());
    let out = cfg.forward_var(&tape, &vars, l)?;
    WeightMatrix::new((*tape.value(out)).clone())
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64).
pub fn save_params(p: &ParamSet, dir: &Path, stem: &str) -> Result<()> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let manifest = serde_json::to_string_pretty(p.manifest())?;
    fs::write(&json_path, manifest).map_err(|e| Error::io(&json_path, e))?;
    let bytes: Vec<u8> = p.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_params(dir: &Path, stem: &str) -> Result<ParamSet> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest
        .validate()
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != manifest.total_len * 8 {
        return Err(Error::format(
            &bin_path,
            format!("{} bytes, expected {}", bytes.len(), manifest.total_len * 8),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ParamSet::new(manifest, values)
}
