//! Report documents written by the training and evaluation commands.
//! Every field is deterministic for a given config (no wall-clock data),
//! so reruns reproduce reports byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Deterministic provenance block shared by all reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool_version: String,
    pub seed: u64,
}

impl RunInfo {
    pub fn new(seed: u64) -> RunInfo {
        RunInfo {
            tool_version: TOOL_VERSION.to_string(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderReport {
    pub run: RunInfo,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub train_examples: usize,
    /// Mean per-sample loss per epoch.
    pub epoch_loss: Vec<f32>,
    /// Validation top-1 accuracy per epoch.
    pub epoch_val_accuracy: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeReport {
    pub run: RunInfo,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub train_examples: usize,
    /// Mean per-sample negative ELBO per epoch.
    pub epoch_neg_elbo: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run: RunInfo,
    pub sessions_per_category: usize,
    pub decodes_per_session: usize,
    pub k: String,
    pub mode: String,
    pub overall_accuracy: f64,
    pub per_category_accuracy: BTreeMap<String, f64>,
    /// confusion[true][predicted]; rows sum to sessions_per_category.
    pub confusion: Vec<Vec<u32>>,
    pub row_sums: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub run: RunInfo,
    pub trials: usize,
    pub collages_per_trial: usize,
    pub k: String,
    /// Trials where only the local decode matched the target.
    pub local_wins: u32,
    /// Trials where only the global decode matched.
    pub global_wins: u32,
    /// Both or neither matched; half a point to each side.
    pub ties: u32,
    pub local_points: f64,
    pub global_points: f64,
    pub local_win_rate: f64,
    pub chi_square: f64,
    pub p_value: f64,
    pub significant_at_005: bool,
    /// Session-posterior argmax recovery rates (no decoding involved).
    pub local_top1_recovery: f64,
    pub global_top1_recovery: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
