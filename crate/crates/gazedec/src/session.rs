//! Fixation logs on disk: JSON Lines, one object per fixation, with the
//! collage canvas stored as a TNSR file referenced relative to the log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gazedec_core::gaze::{Fixation, FixationLog};
use gazedec_core::stimuli::Category;
use gazedec_core::Tensor;

use crate::error::{CliError, CliResult};
use crate::tnsr;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixationRow {
    pub participant: String,
    /// Collage TNSR path, relative to the JSONL file.
    pub collage: String,
    pub target: String,
    pub x: f32,
    pub y: f32,
    /// Duration in ms.
    pub t: f32,
    /// Index within the collage's log, chronological.
    pub idx: usize,
}

/// Serialize a session (one or more per-collage logs) as JSON Lines.
pub fn encode_session_jsonl(logs: &[FixationLog]) -> CliResult<String> {
    let mut out = String::new();
    for log in logs {
        for (idx, f) in log.fixations.iter().enumerate() {
            let row = FixationRow {
                participant: log.participant.clone(),
                collage: log.collage_ref.clone(),
                target: log.target.name().to_string(),
                x: f.x,
                y: f.y,
                t: f.t_ms,
                idx,
            };
            out.push_str(
                &serde_json::to_string(&row)
                    .map_err(|e| CliError::data(format!("serialize fixation: {e}")))?,
            );
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_session_jsonl(path: &Path, logs: &[FixationLog]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_session_jsonl(logs)?)?;
    Ok(())
}

/// Parse a session JSONL back into per-collage logs, grouped by collage
/// reference in first-appearance order, each sorted by fixation index.
pub fn decode_session_jsonl(text: &str) -> CliResult<Vec<FixationLog>> {
    let mut logs: Vec<(String, FixationLog, Vec<usize>)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: FixationRow = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("session line {}: {e}", line_no + 1)))?;
        let target = Category::from_name(&row.target).ok_or_else(|| {
            CliError::data(format!("session line {}: unknown target {:?}", line_no + 1, row.target))
        })?;
        let entry = match logs.iter_mut().find(|(key, _, _)| *key == row.collage) {
            Some(e) => e,
            None => {
                logs.push((
                    row.collage.clone(),
                    FixationLog {
                        participant: row.participant.clone(),
                        collage_ref: row.collage.clone(),
                        target,
                        fixations: Vec::new(),
                    },
                    Vec::new(),
                ));
                logs.last_mut().unwrap()
            }
        };
        if entry.1.target != target {
            return Err(CliError::data(format!(
                "session line {}: target {:?} disagrees with earlier rows",
                line_no + 1,
                row.target
            )));
        }
        entry.1.fixations.push(Fixation {
            x: row.x,
            y: row.y,
            t_ms: row.t,
        });
        entry.2.push(row.idx);
    }
    if logs.is_empty() {
        return Err(CliError::data("session: no fixations"));
    }
    let mut out = Vec::with_capacity(logs.len());
    for (_, mut log, idxs) in logs {
        let mut order: Vec<usize> = (0..idxs.len()).collect();
        order.sort_by_key(|&i| idxs[i]);
        log.fixations = order.iter().map(|&i| log.fixations[i]).collect();
        out.push(log);
    }
    Ok(out)
}

/// Load a session and its collage canvases. Collage paths resolve
/// relative to the JSONL's directory.
pub fn read_session(path: &Path) -> CliResult<Vec<(Tensor, FixationLog)>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let logs = decode_session_jsonl(&text)?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let mut out = Vec::with_capacity(logs.len());
    for log in logs {
        let canvas = tnsr::read_tensor(&base.join(&log.collage_ref))?;
        out.push((canvas, log));
    }
    Ok(out)
}
