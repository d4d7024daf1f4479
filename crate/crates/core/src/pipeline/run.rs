//! Run configuration and the end-to-end train / eval / analyze drivers that
//! produce a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::analysis::{analyze_features, write_analysis, Analysis, Representation};
use super::dataset::{load_dataset, DatasetBundle, LoadOptions};
use super::infer::{CheckpointMeta, Predictor};
use super::split::{assign_splits, Split};
use super::task::TaskSpec;
use super::train::{evaluate, standardize_targets, train, Evaluation, MetricKind, TrainConfig};
use super::PipelineError;
use crate::knowledge::{load_embeddings, BuiltinProvider, EmbeddingProvider, EmbeddingStore};
use crate::model::{
    save_checkpoint, FusionConfig, GinConfig, HeadConfig, ModelConfig, TaskType, Variant,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Builtin { dim: usize, seed: u64 },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Builtin { dim: 128, seed: 0 }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> BuiltinProvider {
        match *self {
            ProviderConfig::Builtin { dim, seed } => BuiltinProvider::new(dim.max(1), seed),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ProviderConfig::Builtin { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub gin: GinConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            gin: GinConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn to_config(
        &self,
        task_type: TaskType,
        tasks: usize,
        knowledge_dim: usize,
    ) -> ModelConfig {
        let mut fusion = self.fusion.clone();
        fusion.knowledge_dim = knowledge_dim;
        ModelConfig {
            variant: self.variant,
            task_type,
            tasks,
            gin: self.gin.clone(),
            fusion,
            head: self.head.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub provider: ProviderConfig,
    /// Embedding container directory written by `embed`.
    pub embeddings: Option<PathBuf>,
}

/// A registered task name or a full descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Name(String),
    Spec(TaskSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub task: TaskRef,
    pub data: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub knowledge: KnowledgeSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub allow_skips: bool,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn new(task: &str, data: PathBuf) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: TaskRef::Name(task.into()),
            data,
            model: ModelSection::default(),
            knowledge: KnowledgeSection::default(),
            train: TrainConfig::default(),
            seed: 0,
            output_dir: default_output(),
            allow_skips: false,
        }
    }

    /// Resolves the task descriptor; the run seed overrides the task's.
    pub fn task_spec(&self) -> Result<TaskSpec, PipelineError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut spec = match &self.task {
            TaskRef::Name(n) => TaskSpec::builtin(n)?,
            TaskRef::Spec(s) => s.clone(),
        };
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }

    /// A copy with the task descriptor expanded, as written to `config.json`.
    pub fn resolved(&self) -> Result<Self, PipelineError> {
        let mut c = self.clone();
        c.task = TaskRef::Spec(self.task_spec()?);
        c.train.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid: Evaluation,
    pub test: Evaluation,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_splits(path: &Path, b: &DatasetBundle) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "split", "scaffold"])?;
    for (r, s) in b.records.iter().zip(&b.splits) {
        w.write_record([r.id.as_str(), s.as_str(), r.scaffold.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_skips(path: &Path, b: &DatasetBundle) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["line", "smiles", "reason"])?;
    for s in &b.skipped {
        w.write_record([s.line.to_string(), s.smiles.clone(), s.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the embedding container and checks it covers `ids` with the
/// configured provider.
fn load_knowledge(
    path: Option<&Path>,
    provider: &ProviderConfig,
    bundle: &DatasetBundle,
) -> Result<EmbeddingStore, PipelineError> {
    let path = path
        .ok_or_else(|| PipelineError::Config("this variant needs knowledge.embeddings".into()))?;
    let store = load_embeddings(path)?;
    if let Some(d) = store.dim() {
        if d != provider.dim() {
            return Err(PipelineError::Data(format!(
                "embeddings have width {d}, provider is configured for {}",
                provider.dim()
            )));
        }
    }
    let want = provider.build().id();
    if let Some((id, e)) = store.iter().find(|(_, e)| e.provider_id != want) {
        return Err(PipelineError::Data(format!(
            "embedding `{id}` was made by `{}`, expected `{want}`",
            e.provider_id
        )));
    }
    if let Some(r) = bundle.records.iter().find(|r| store.get(&r.id).is_err()) {
        return Err(PipelineError::Data(format!(
            "no knowledge embedding for molecule `{}`",
            r.id
        )));
    }
    Ok(store)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    task: &'a str,
    variant: Variant,
    metric: MetricKind,
    label_names: &'a [String],
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    valid: &'a Evaluation,
    test: &'a Evaluation,
}

/// Full training run. Writes `config.json`, `skipped.csv`, `splits.csv`,
/// `epochs.jsonl`, `timings.jsonl`, `best.ckpt` and `metrics.json` under
/// `cfg.output_dir`.
pub fn train_run(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    let resolved = cfg.resolved()?;
    let spec = resolved.task_spec()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &resolved)?;

    let mut bundle = load_dataset(
        &cfg.data,
        &spec,
        LoadOptions {
            allow_skips: cfg.allow_skips,
        },
    )?;
    write_skips(&dir.join("skipped.csv"), &bundle)?;
    assign_splits(&mut bundle);
    write_splits(&dir.join("splits.csv"), &bundle)?;
    if spec.task_type == TaskType::Regression {
        standardize_targets(&mut bundle)?;
    }
    let provider = cfg.knowledge.provider;
    let store = if cfg.model.variant.uses_knowledge() {
        Some(load_knowledge(
            cfg.knowledge.embeddings.as_deref(),
            &provider,
            &bundle,
        )?)
    } else {
        None
    };
    let model = cfg
        .model
        .to_config(spec.task_type, bundle.num_tasks(), provider.dim());

    let mut epochs = fs::File::create(dir.join("epochs.jsonl"))?;
    let mut timings = fs::File::create(dir.join("timings.jsonl"))?;
    let outcome = train(&bundle, store.as_ref(), model, &cfg.train, cfg.seed, |r| {
        writeln!(epochs, "{}", serde_json::to_string(r)?)?;
        writeln!(
            timings,
            "{}",
            serde_json::json!({"epoch": r.epoch, "wall_time_s": r.wall_time_s})
        )?;
        Ok(())
    })?;

    let meta = CheckpointMeta {
        task: bundle.spec.clone(),
        label_names: bundle.label_names.clone(),
        provider,
        best_epoch: outcome.best_epoch,
        valid_metric: outcome.best_valid,
    };
    save_checkpoint(
        &dir.join("best.ckpt"),
        &outcome.best,
        &serde_json::to_value(&meta)?,
    )?;

    let valid = evaluate(
        &outcome.best,
        &bundle,
        &bundle.indices(Split::Valid),
        store.as_ref(),
    )?;
    let test = evaluate(
        &outcome.best,
        &bundle,
        &bundle.indices(Split::Test),
        store.as_ref(),
    )?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            task: &spec.name,
            variant: cfg.model.variant,
            metric: valid.metric,
            label_names: &bundle.label_names,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.reports.len(),
            stopped_early: outcome.stopped_early,
            valid: &valid,
            test: &test,
        },
    )?;
    Ok(RunSummary {
        run_dir: dir,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.reports.len(),
        valid,
        test,
    })
}

fn reload(
    predictor: &Predictor,
    data: &Path,
    embeddings: Option<&Path>,
    allow_skips: bool,
) -> Result<(DatasetBundle, Option<EmbeddingStore>), PipelineError> {
    let mut bundle = load_dataset(data, &predictor.meta.task, LoadOptions { allow_skips })?;
    if bundle.label_names != predictor.meta.label_names {
        return Err(PipelineError::Data(format!(
            "dataset labels {:?} differ from the checkpoint's {:?}",
            bundle.label_names, predictor.meta.label_names
        )));
    }
    assign_splits(&mut bundle);
    let store = if predictor.network.config.variant.uses_knowledge() {
        Some(load_knowledge(
            embeddings,
            &predictor.meta.provider,
            &bundle,
        )?)
    } else {
        None
    };
    Ok((bundle, store))
}

fn select(bundle: &DatasetBundle, split: Option<Split>) -> Vec<usize> {
    match split {
        Some(s) => bundle.indices(s),
        None => (0..bundle.records.len()).collect(),
    }
}

/// Evaluates a checkpoint on one split (recomputed from the stored task
/// spec) or, with `split = None`, on every record.
pub fn eval_run(
    checkpoint: &Path,
    data: &Path,
    embeddings: Option<&Path>,
    split: Option<Split>,
    allow_skips: bool,
) -> Result<Evaluation, PipelineError> {
    let p = Predictor::load(checkpoint)?;
    let (bundle, store) = reload(&p, data, embeddings, allow_skips)?;
    evaluate(&p.network, &bundle, &select(&bundle, split), store.as_ref())
}

pub fn analyze_run(
    checkpoint: &Path,
    data: &Path,
    embeddings: Option<&Path>,
    split: Option<Split>,
    reps: &[Representation],
    out_dir: &Path,
) -> Result<Vec<Analysis>, PipelineError> {
    let p = Predictor::load(checkpoint)?;
    let (bundle, store) = reload(&p, data, embeddings, true)?;
    let idx = select(&bundle, split);
    let mut out = Vec::new();
    for &rep in reps {
        let a = analyze_features(&p.network, &bundle, &idx, store.as_ref(), rep)?;
        write_analysis(out_dir, &a)?;
        out.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"task": "bace", "data": "bace.csv", "train": {"epochs": 3}}"#;
        let c: RunConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 128);
        let bad = r#"{"task": "bace", "data": "bace.csv", "train": {"epoch": 3}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad = r#"{"task": "bace", "data": "x", "colour": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn resolved_config_materializes_task() {
        let mut c = RunConfig::new("freesolv", "f.csv".into());
        c.seed = 9;
        let r = c.resolved().unwrap();
        let TaskRef::Spec(s) = &r.task else {
            panic!("task not expanded")
        };
        assert_eq!(s.seed, 9);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
