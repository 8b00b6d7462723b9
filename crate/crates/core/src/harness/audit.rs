//! Recompute every metric and table of a finished run from its score files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::{read_records, read_scores, scored_samples, CellStatus};
use super::{tables, ExperimentSpec};
use crate::error::Result;
use crate::metrics::evaluate;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: usize,
    pub cells_checked: usize,
    pub mismatches: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Audit the run in `run_dir`; score files are resolved against the spec's
/// output directory, which is two levels above the run directory.
pub fn audit_run(run_dir: &Path) -> Result<AuditReport> {
    let spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(run_dir.join("spec.json"))?)?;
    let output_dir = run_dir.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let records = read_records(&run_dir.join("records.jsonl"))?;
    let mut report = AuditReport { records: records.len(), ..Default::default() };
    for r in &records {
        let id = format!("{} {} {}", r.pair, r.model_family, r.indicator);
        match (r.status, &r.score_file, &r.metrics) {
            (CellStatus::Ok, Some(file), Some(stored)) => {
                let rows = read_scores(&output_dir.join(file))?;
                if rows.iter().any(|s| s.pair != r.pair || s.indicator != r.indicator.as_str() || s.model_family != r.model_family.as_str()) {
                    report.mismatches.push(format!("{id}: score file rows belong to another cell"));
                }
                let recomputed = evaluate(&scored_samples(&rows)?)?;
                if &recomputed != stored {
                    report.mismatches.push(format!("{id}: stored {stored:?} but scores give {recomputed:?}"));
                }
                if recomputed.n_in != spec.n_test || recomputed.n_out != spec.n_test {
                    report.mismatches.push(format!("{id}: {} in / {} out scores, expected {}", recomputed.n_in, recomputed.n_out, spec.n_test));
                }
                report.cells_checked += 1;
            }
            (CellStatus::Ok, _, _) => report.mismatches.push(format!("{id}: ok record without scores or metrics")),
            (_, _, Some(_)) => report.mismatches.push(format!("{id}: {:?} record carries metrics", r.status)),
            _ => {}
        }
    }
    let (practical, oracle) = tables(&records, &spec.indicators, &spec.families);
    for (name, table) in [("table_practical.csv", practical), ("table_oracle.csv", oracle)] {
        let stored = std::fs::read_to_string(run_dir.join(name))?;
        if stored != table.to_csv() {
            report.mismatches.push(format!("{name} differs from the table recomputed from records"));
        }
    }
    Ok(report)
}
