use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::Split;
use super::task::{LabelColumns, TaskSpec};
use super::PipelineError;
use crate::chem::{murcko_scaffold, parse_smiles, MolGraph, ScaffoldKey};
use crate::model::TaskType;

/// Rows skipped above this fraction fail the load unless explicitly allowed.
pub const MAX_SKIP_RATE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Record {
    /// Stable id derived from the data row (`m00017` is the 18th data row).
    pub id: String,
    pub row: usize,
    pub smiles: String,
    pub graph: MolGraph,
    pub scaffold: ScaffoldKey,
    pub labels: Vec<f64>,
    pub present: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    /// 1-based line number in the CSV, header being line 1.
    pub line: usize,
    pub smiles: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub spec: TaskSpec,
    pub label_names: Vec<String>,
    pub records: Vec<Record>,
    /// Aligned with `records`; empty until a split is assigned.
    pub splits: Vec<Split>,
    pub skipped: Vec<SkipEntry>,
}

pub fn record_id(row: usize) -> String {
    format!("m{row:05}")
}

impl DatasetBundle {
    pub fn num_tasks(&self) -> usize {
        self.label_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.splits.get(i) == Some(&split))
            .collect()
    }

    pub fn skip_rate(&self) -> f64 {
        let total = self.records.len() + self.skipped.len();
        if total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub allow_skips: bool,
}

pub fn load_dataset(
    path: &Path,
    spec: &TaskSpec,
    opts: LoadOptions,
) -> Result<DatasetBundle, PipelineError> {
    let file = std::fs::File::open(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    read_dataset(file, spec, opts)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    spec: &TaskSpec,
    opts: LoadOptions,
) -> Result<DatasetBundle, PipelineError> {
    spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            PipelineError::Data(format!(
                "missing column `{name}` (found: {})",
                headers.join(", ")
            ))
        })
    };
    let smiles_col = col(&spec.smiles_column)?;
    let id_col = spec.id_column.as_deref().map(col).transpose()?;
    let label_names: Vec<String> = match &spec.label_columns {
        LabelColumns::Explicit(cols) => cols.clone(),
        LabelColumns::AutoDetect => headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != smiles_col && Some(i) != id_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if label_names.is_empty() {
        return Err(PipelineError::Data("no label columns found".into()));
    }
    let label_cols = label_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let smiles = rec.get(smiles_col).unwrap_or("").trim().to_string();
        let mut skip = |reason: String| {
            log::debug!("skipping line {line}: {reason}");
            skipped.push(SkipEntry {
                line,
                smiles: smiles.clone(),
                reason,
            });
        };
        let graph = match parse_smiles(&smiles) {
            Ok(g) if !g.is_empty() => g,
            Ok(_) => {
                skip("empty molecule".into());
                continue;
            }
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let mut labels = Vec::with_capacity(label_cols.len());
        let mut present = Vec::with_capacity(label_cols.len());
        let mut bad = None;
        for (&c, name) in label_cols.iter().zip(&label_names) {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                labels.push(0.0);
                present.push(false);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if spec.task_type == TaskType::Classification && v != 0.0 && v != 1.0 {
                        bad = Some(format!("label `{name}` = {cell} is not 0 or 1"));
                        break;
                    }
                    labels.push(v);
                    present.push(true);
                }
                _ => {
                    bad = Some(format!("label `{name}` = `{cell}` is not a number"));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            skip(reason);
            continue;
        }
        if !present.iter().any(|&p| p) {
            skip("no labels present".into());
            continue;
        }
        let id = match id_col {
            Some(c) => rec.get(c).unwrap_or("").trim().to_string(),
            None => record_id(row),
        };
        records.push(Record {
            id,
            row,
            scaffold: murcko_scaffold(&graph),
            smiles,
            graph,
            labels,
            present,
        });
    }
    if records.is_empty() {
        return Err(PipelineError::Data("dataset has no usable rows".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(r) = records.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(PipelineError::Data(format!(
            "duplicate molecule id `{}`",
            r.id
        )));
    }
    let bundle = DatasetBundle {
        spec: spec.clone(),
        label_names,
        records,
        splits: Vec::new(),
        skipped,
    };
    let rate = bundle.skip_rate();
    if rate > MAX_SKIP_RATE {
        let msg = format!(
            "{} of {} rows skipped ({:.1}%)",
            bundle.skipped.len(),
            bundle.records.len() + bundle.skipped.len(),
            100.0 * rate
        );
        if !opts.allow_skips {
            return Err(PipelineError::Data(format!(
                "{msg}; pass --allow-skips to continue"
            )));
        }
        log::warn!("{msg}");
    } else if !bundle.skipped.is_empty() {
        log::info!("{} rows skipped", bundle.skipped.len());
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(csv: &str, spec: &TaskSpec) -> Result<DatasetBundle, PipelineError> {
        read_dataset(csv.as_bytes(), spec, LoadOptions::default())
    }

    #[test]
    fn bad_smiles_is_logged_not_fatal() {
        let mut csv = String::from("smiles,expt\n");
        for i in 0..30 {
            csv.push_str(&format!("{},{}\n", "C".repeat(i + 1), i));
        }
        csv.push_str("XX,1.0\n");
        let b = load(&csv, &TaskSpec::builtin("freesolv").unwrap()).unwrap();
        assert_eq!(b.records.len(), 30);
        assert_eq!(b.skipped.len(), 1);
        assert_eq!(b.skipped[0].smiles, "XX");
        assert_eq!(b.skipped[0].line, 32);
        assert_eq!(b.records[3].id, "m00003");
    }

    #[test]
    fn high_skip_rate_needs_permission() {
        let csv = "smiles,expt\nC,1\nXX,2\nCC,3\n";
        let spec = TaskSpec::builtin("freesolv").unwrap();
        assert!(matches!(load(csv, &spec), Err(PipelineError::Data(_))));
        let b = read_dataset(csv.as_bytes(), &spec, LoadOptions { allow_skips: true }).unwrap();
        assert_eq!(b.records.len(), 2);
    }

    #[test]
    fn missing_column_is_an_error() {
        let err = load(
            "smiles,value\nC,1\n",
            &TaskSpec::builtin("freesolv").unwrap(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("expt"));
    }

    #[test]
    fn autodetect_and_presence_flags() {
        let csv = "smiles,a,b,c\nCCO,1,,0\nc1ccccc1,0,1,1\n";
        let b = load(csv, &TaskSpec::builtin("sider").unwrap()).unwrap();
        assert_eq!(b.label_names, ["a", "b", "c"]);
        assert_eq!(b.records[0].present, [true, false, true]);
        assert_eq!(b.records[1].labels, [0.0, 1.0, 1.0]);
    }
}
