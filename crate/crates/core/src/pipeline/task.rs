use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::chem::REGISTERED_TASKS;
use crate::model::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    Scaffold,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumns {
    Explicit(Vec<String>),
    /// Every column except the SMILES and id columns.
    AutoDetect,
}

/// Per-task mean and (population) standard deviation of training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn forward(&self, task: usize, y: f64) -> f64 {
        (y - self.mean[task]) / self.std[task]
    }

    pub fn inverse(&self, task: usize, z: f64) -> f64 {
        z * self.std[task] + self.mean[task]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub task_type: TaskType,
    pub smiles_column: String,
    #[serde(default)]
    pub id_column: Option<String>,
    pub label_columns: LabelColumns,
    pub split: SplitPolicy,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub seed: u64,
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl TaskSpec {
    /// Built-in descriptors for the four benchmark datasets.
    pub fn builtin(name: &str) -> Result<Self, PipelineError> {
        let explicit =
            |cols: &[&str]| LabelColumns::Explicit(cols.iter().map(|c| c.to_string()).collect());
        let (task_type, smiles, labels, split) = match name.to_ascii_lowercase().as_str() {
            "freesolv" => (
                TaskType::Regression,
                "smiles",
                explicit(&["expt"]),
                SplitPolicy::Random,
            ),
            "bace" => (
                TaskType::Classification,
                "mol",
                explicit(&["Class"]),
                SplitPolicy::Scaffold,
            ),
            "clintox" => (
                TaskType::Classification,
                "smiles",
                explicit(&["FDA_APPROVED", "CT_TOX"]),
                SplitPolicy::Scaffold,
            ),
            "sider" => (
                TaskType::Classification,
                "smiles",
                LabelColumns::AutoDetect,
                SplitPolicy::Scaffold,
            ),
            _ => {
                return Err(PipelineError::Config(format!(
                    "unknown task `{name}` (registered: {})",
                    REGISTERED_TASKS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_ascii_lowercase(),
            task_type,
            smiles_column: smiles.into(),
            id_column: None,
            label_columns: labels,
            split,
            fractions: default_fractions(),
            standardization: None,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let f = self.fractions;
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x))
            || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(PipelineError::Config(format!(
                "split fractions {f:?} must be non-negative and sum to 1"
            )));
        }
        if let LabelColumns::Explicit(cols) = &self.label_columns {
            if cols.is_empty() {
                return Err(PipelineError::Config("no label columns".into()));
            }
        }
        if let Some(s) = &self.standardization {
            if s.std.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(PipelineError::Config(
                    "standardization std must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_cover_registered_tasks() {
        for t in REGISTERED_TASKS {
            let s = TaskSpec::builtin(t).unwrap();
            s.validate().unwrap();
            assert_eq!(s.split == SplitPolicy::Random, t == "freesolv");
        }
        assert!(TaskSpec::builtin("tox21").is_err());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let mut s = TaskSpec::builtin("bace").unwrap();
        s.fractions = [0.8, 0.1, 0.2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn standardize_then_invert_is_identity() {
        let s = Standardization {
            mean: vec![-3.8],
            std: vec![3.85],
        };
        for y in [-25.47, -3.8, 0.0, 3.43] {
            assert!((s.inverse(0, s.forward(0, y)) - y).abs() < 1e-12);
        }
    }
}
