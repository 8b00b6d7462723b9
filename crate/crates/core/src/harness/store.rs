//! On-disk formats: per-sample score CSVs, fine-tune detail CSVs, run records
//! as JSON lines, and aggregate tables as CSV and text.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::Indicator;
use crate::error::{Error, Result};
use crate::genmodels::Family;
use crate::metrics::{Label, MetricResult, ScoredSample};

/// One line of a per-sample score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pair: String,
    pub indicator: String,
    pub model_family: String,
    pub sample_id: String,
    pub label: String,
    pub score: f64,
    pub seed: u64,
}

impl ScoreRow {
    pub fn is_in(&self) -> Result<bool> {
        match self.label.as_str() {
            "in" => Ok(true),
            "out" => Ok(false),
            other => Err(Error::CorruptData { path: "score file".into(), reason: format!("label `{other}`") }),
        }
    }
}

/// Per-sample log-densities behind a fine-tune score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub sample_id: String,
    pub label: String,
    pub logp_theta: f64,
    pub logp_gamma: f64,
    pub seconds: f64,
    pub failed: bool,
}

pub fn label_str(is_in: bool) -> &'static str {
    if is_in {
        "in"
    } else {
        "out"
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingData { path: path.to_path_buf() });
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    read_csv(path)
}

pub fn write_details(path: &Path, rows: &[DetailRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_details(path: &Path) -> Result<Vec<DetailRow>> {
    read_csv(path)
}

/// Labelled samples in file order, ready for the metrics module.
pub fn scored_samples(rows: &[ScoreRow]) -> Result<Vec<ScoredSample>> {
    rows.iter()
        .map(|r| Ok(ScoredSample::new(r.score, if r.is_in()? { Label::In } else { Label::Out })))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
    /// The indicator is not defined for this model family.
    Unsupported,
}

/// Outcome of one (pair, family, indicator) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell_id: String,
    pub pair: String,
    pub in_dataset: String,
    pub out_dataset: String,
    pub model_family: Family,
    pub indicator: Indicator,
    /// Needs out-distribution training data; excluded from practical tables.
    pub oracle: bool,
    pub status: CellStatus,
    pub error: Option<String>,
    pub metrics: Option<MetricResult>,
    /// Relative to the output directory.
    pub score_file: Option<String>,
    pub details_file: Option<String>,
    pub config: serde_json::Value,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Err(Error::MissingData { path: path.to_path_buf() });
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Rows are indicators, columns are model families, cells are the
/// uniform-over-pairs mean AUROC (`None` when no pair succeeded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub families: Vec<Family>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub indicator: Indicator,
    pub mean_auroc: Vec<Option<f64>>,
    pub n_pairs: Vec<usize>,
}

impl AggregateTable {
    /// Mean AUROC per (indicator, family) over successful records, summed in
    /// pair order so the result is independent of record order.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a RunRecord>,
        indicators: &[Indicator],
        families: &[Family],
    ) -> Self {
        let mut by_cell: BTreeMap<(Indicator, Family), BTreeMap<String, f64>> = BTreeMap::new();
        for r in records {
            if let (CellStatus::Ok, Some(m)) = (r.status, &r.metrics) {
                by_cell.entry((r.indicator, r.model_family)).or_default().insert(r.pair.clone(), m.auroc);
            }
        }
        let rows = indicators
            .iter()
            .map(|&ind| {
                let cells: Vec<(Option<f64>, usize)> = families
                    .iter()
                    .map(|&f| match by_cell.get(&(ind, f)) {
                        Some(v) if !v.is_empty() => (Some(v.values().sum::<f64>() / v.len() as f64), v.len()),
                        _ => (None, 0),
                    })
                    .collect();
                TableRow { indicator: ind, mean_auroc: cells.iter().map(|c| c.0).collect(), n_pairs: cells.iter().map(|c| c.1).collect() }
            })
            .collect();
        Self { families: families.to_vec(), rows }
    }

    pub fn get(&self, indicator: Indicator, family: Family) -> Option<f64> {
        let col = self.families.iter().position(|&f| f == family)?;
        self.rows.iter().find(|r| r.indicator == indicator)?.mean_auroc[col]
    }

    /// Mean over families of the per-family means, ignoring NA cells.
    pub fn row_mean(&self, indicator: Indicator) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.indicator == indicator)?;
        let vals: Vec<f64> = row.mean_auroc.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// CSV with full-precision values and `NA` for empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("indicator");
        for f in &self.families {
            s.push_str(&format!(",{f}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r.indicator.as_str());
            for v in &r.mean_auroc {
                match v {
                    Some(v) => s.push_str(&format!(",{v}")),
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text with AUROC in percent.
    pub fn to_text(&self, title: &str) -> String {
        let mut s = format!("{title}\n{:<22}", "indicator");
        for f in &self.families {
            s.push_str(&format!("{:>14}", f.as_str()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<22}", r.indicator.as_str()));
            for (v, n) in r.mean_auroc.iter().zip(&r.n_pairs) {
                match v {
                    Some(v) => s.push_str(&format!("{:>14}", format!("{:.2} ({n})", 100.0 * v))),
                    None => s.push_str(&format!("{:>14}", "NA")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Per-pair breakdown as CSV, in record order.
pub fn per_pair_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("pair,model_family,indicator,oracle,status,auroc,aupr_in,ap,fpr_at_tpr95,n_in,n_out\n");
    for r in records {
        let status = match r.status {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
            CellStatus::Unsupported => "unsupported",
        };
        s.push_str(&format!("{},{},{},{},{status}", r.pair, r.model_family, r.indicator, r.oracle));
        match &r.metrics {
            Some(m) => s.push_str(&format!(",{},{},{},{},{},{}\n", m.auroc, m.aupr_in, m.ap, m.fpr_at_tpr95, m.n_in, m.n_out)),
            None => s.push_str(",NA,NA,NA,NA,0,0\n"),
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pair: &str, family: Family, indicator: Indicator, auroc: Option<f64>) -> RunRecord {
        RunRecord {
            cell_id: format!("{pair}{family}{indicator}"),
            pair: pair.into(),
            in_dataset: "a".into(),
            out_dataset: "b".into(),
            model_family: family,
            indicator,
            oracle: indicator.is_oracle(),
            status: if auroc.is_some() { CellStatus::Ok } else { CellStatus::Failed },
            error: None,
            metrics: auroc.map(|a| MetricResult { auroc: a, aupr_in: a, ap: a, fpr_at_tpr95: 1.0 - a, n_in: 2, n_out: 2 }),
            score_file: None,
            details_file: None,
            config: serde_json::Value::Null,
            code_version: "test".into(),
            seed: 0,
            started_unix: 0.0,
            finished_unix: 0.0,
        }
    }

    #[test]
    fn table_is_uniform_over_pairs_with_na() {
        let recs = vec![
            record("a->b", Family::Vae, Indicator::Loglik, Some(0.2)),
            record("b->a", Family::Vae, Indicator::Loglik, Some(0.6)),
            record("a->b", Family::Vae, Indicator::SingleShot, None),
            record("a->b", Family::CouplingFlow, Indicator::Loglik, Some(0.9)),
        ];
        let t = AggregateTable::from_records(&recs, &[Indicator::Loglik, Indicator::SingleShot], &[Family::Vae, Family::CouplingFlow]);
        assert!((t.get(Indicator::Loglik, Family::Vae).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(t.get(Indicator::SingleShot, Family::Vae), None);
        assert!(t.to_csv().contains("single_shot,NA,NA"));
        assert_eq!(t.rows[0].n_pairs, vec![2, 1]);
        let single = AggregateTable::from_records(&recs[..1], &[Indicator::Loglik], &[Family::Vae]);
        assert_eq!(single.get(Indicator::Loglik, Family::Vae), Some(0.2));
        let reversed: Vec<_> = recs.iter().rev().cloned().collect();
        assert_eq!(AggregateTable::from_records(&reversed, &[Indicator::Loglik], &[Family::Vae]).to_csv(), AggregateTable::from_records(&recs, &[Indicator::Loglik], &[Family::Vae]).to_csv());
    }

    #[test]
    fn score_and_record_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ScoreRow {
            pair: "a->b".into(),
            indicator: "loglik".into(),
            model_family: "vae".into(),
            sample_id: "a/test/3".into(),
            label: "in".into(),
            score: -1234.567_890_123_456_7,
            seed: 9,
        }];
        let p = dir.path().join("s/scores.csv");
        write_scores(&p, &rows).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
        let recs = vec![record("a->b", Family::Vae, Indicator::Loglik, Some(0.25))];
        let rp = dir.path().join("records.jsonl");
        write_records(&rp, &recs).unwrap();
        assert_eq!(read_records(&rp).unwrap(), recs);
    }
}
