//! Checkpoint directory: `state.json` (epoch, step, rng), `theta.{json,bin}`,
//! optional `phi.{json,bin}`, and `history.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HistoryEntry, RngState, TrainState};
use crate::error::{Error, Result};
use crate::models::{load_params, save_params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    pub has_phi: bool,
}

pub fn write_history_csv(history: &[HistoryEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "meta_loss"])?;
    for h in history {
        w.write_record([
            h.step.to_string(),
            h.train_loss.to_string(),
            h.meta_loss.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_history_csv(path: &Path) -> Result<Vec<HistoryEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |detail: String| Error::format(path, detail);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let step = rec[0].parse().map_err(|e| bad(format!("step: {e}")))?;
        let train_loss = rec[1].parse().map_err(|e| bad(format!("train_loss: {e}")))?;
        let meta_loss = if rec[2].is_empty() {
            None
        } else {
            Some(rec[2].parse().map_err(|e| bad(format!("meta_loss: {e}")))?)
        };
        out.push(HistoryEntry {
            step,
            train_loss,
            meta_loss,
        });
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointState {
        epoch: state.epoch,
        step: state.step,
        rng: state.rng,
        has_phi: state.phi.is_some(),
    };
    let path = dir.join("state.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    save_params(&state.theta, dir, "theta")?;
    if let Some(phi) = &state.phi {
        save_params(phi, dir, "phi")?;
    }
    write_history_csv(&state.history, &dir.join("history.csv"))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointState = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let theta = load_params(dir, "theta")?;
    let phi = if meta.has_phi { Some(load_params(dir, "phi")?) } else { None };
    let history = read_history_csv(&dir.join("history.csv"))?;
    if history.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::format(dir.join("history.csv"), "steps are not strictly increasing"));
    }
    Ok(TrainState {
        theta,
        phi,
        epoch: meta.epoch,
        step: meta.step,
        rng: meta.rng,
        history,
    })
}
