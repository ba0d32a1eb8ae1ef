//! Verdict CSV and history JSON writers. Both embed the resolved config;
//! the CSV carries it as a leading `#` comment line.

use super::{DetectionReport, FilterConfig, FilterError};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

fn io_err(path: &Path, e: impl std::fmt::Display) -> FilterError {
    FilterError::Validation(format!("cannot write {}: {e}", path.display()))
}

/// Write `id,original_label,verdict,flagged_iteration[,ground_truth]`.
/// The ground-truth column is present only when `truth` is given.
pub fn write_verdicts_csv(
    report: &DetectionReport,
    config: &FilterConfig,
    truth: Option<&HashMap<u64, bool>>,
    path: &Path,
) -> Result<(), FilterError> {
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let config_json = serde_json::to_string(config).map_err(|e| io_err(path, e))?;
    writeln!(file, "# config: {config_json}").map_err(|e| io_err(path, e))?;

    let mut w = csv::Writer::from_writer(file);
    let header: Vec<&str> = if truth.is_some() {
        vec!["id", "original_label", "verdict", "flagged_iteration", "ground_truth"]
    } else {
        vec!["id", "original_label", "verdict", "flagged_iteration"]
    };
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for v in &report.verdicts {
        let flagged = v
            .flagged_iteration
            .map(|i| i.to_string())
            .unwrap_or_default();
        let mut record = vec![
            v.id.to_string(),
            v.original_label.to_string(),
            v.verdict.to_string(),
            flagged,
        ];
        if let Some(truth) = truth {
            let t = truth
                .get(&v.id)
                .map(|&p| if p { "poisoned" } else { "clean" })
                .unwrap_or("");
            record.push(t.to_string());
        }
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write one JSON document with the config echo, terminal reason, and all
/// per-iteration records.
pub fn write_history_json(
    report: &DetectionReport,
    config: &FilterConfig,
    path: &Path,
) -> Result<(), FilterError> {
    let doc = serde_json::json!({
        "config": config,
        "terminal_reason": report.terminal_reason,
        "iterations": report.history,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
