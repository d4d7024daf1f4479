use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::metrics::{multitask_auroc, rmse};
use super::split::Split;
use super::task::Standardization;
use super::PipelineError;
use crate::knowledge::{EmbeddingStore, KnowledgeEmbedding};
use crate::model::{Batch, GraphBatch, KnowledgeBatch, Mode, ModelConfig, Network, TaskType};
use crate::numkit::{Adam, MetricMode, OptimError, PlateauScheduler, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 1e-3,
            early_stop_patience: 10,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return bad("scheduler_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Auroc,
}

impl MetricKind {
    pub fn for_task(t: TaskType) -> Self {
        match t {
            TaskType::Regression => MetricKind::Rmse,
            TaskType::Classification => MetricKind::Auroc,
        }
    }

    pub fn mode(self) -> MetricMode {
        match self {
            MetricKind::Rmse => MetricMode::Min,
            MetricKind::Auroc => MetricMode::Max,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Auroc => "auroc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub lr: f64,
    pub early_stop_counter: usize,
    /// Kept out of the serialized log so identical runs give identical logs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Network<f64>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub reports: Vec<EpochReport>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: MetricKind,
    pub value: f64,
    pub per_task: Vec<Option<f64>>,
    pub count: usize,
}

/// Fits mean/std on the train split only and stores them in the bundle's
/// spec. Regression only.
pub fn standardize_targets(bundle: &mut DatasetBundle) -> Result<Standardization, PipelineError> {
    if bundle.spec.task_type != TaskType::Regression {
        return Err(PipelineError::Config(
            "standardization applies to regression tasks only".into(),
        ));
    }
    let train = bundle.indices(Split::Train);
    let tasks = bundle.num_tasks();
    let (mut mean, mut std) = (Vec::with_capacity(tasks), Vec::with_capacity(tasks));
    for t in 0..tasks {
        let ys: Vec<f64> = train
            .iter()
            .map(|&i| &bundle.records[i])
            .filter(|r| r.present[t])
            .map(|r| r.labels[t])
            .collect();
        if ys.is_empty() {
            return Err(PipelineError::Data(format!(
                "no training targets for `{}`",
                bundle.label_names[t]
            )));
        }
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / ys.len() as f64;
        if !(var > 0.0) {
            return Err(PipelineError::Data(format!(
                "training targets for `{}` have zero variance",
                bundle.label_names[t]
            )));
        }
        mean.push(m);
        std.push(var.sqrt());
    }
    let s = Standardization { mean, std };
    bundle.spec.standardization = Some(s.clone());
    Ok(s)
}

fn knowledge_for<'a>(
    bundle: &DatasetBundle,
    idx: &[usize],
    store: Option<&'a EmbeddingStore>,
) -> Result<Vec<&'a KnowledgeEmbedding>, PipelineError> {
    let store = store
        .ok_or_else(|| PipelineError::Config("this variant needs knowledge embeddings".into()))?;
    idx.iter()
        .map(|&i| {
            store
                .get(&bundle.records[i].id)
                .map_err(PipelineError::from)
        })
        .collect()
}

pub fn build_batch(
    net_cfg: &ModelConfig,
    bundle: &DatasetBundle,
    idx: &[usize],
    knowledge: Option<&EmbeddingStore>,
) -> Result<Batch<f64>, PipelineError> {
    let graph = if net_cfg.variant.uses_graph() {
        let graphs: Vec<_> = idx.iter().map(|&i| &bundle.records[i].graph).collect();
        Some(GraphBatch::from_graphs(&graphs, net_cfg.gin.features)?)
    } else {
        None
    };
    let knowledge = if net_cfg.variant.uses_knowledge() {
        Some(KnowledgeBatch::from_embeddings(&knowledge_for(
            bundle, idx, knowledge,
        )?)?)
    } else {
        None
    };
    Ok(Batch { graph, knowledge })
}

fn targets(bundle: &DatasetBundle, idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let std = bundle.spec.standardization.as_ref();
    let mut labels = Vec::new();
    let mut present = Vec::new();
    for &i in idx {
        let r = &bundle.records[i];
        for (t, (&y, &p)) in r.labels.iter().zip(&r.present).enumerate() {
            labels.push(match std {
                Some(s) if p => s.forward(t, y),
                _ => y,
            });
            present.push(p);
        }
    }
    (labels, present)
}

const EVAL_BATCH: usize = 256;

/// Model outputs for the given records, row-major `[n, tasks]`, in original
/// target units.
pub fn predict_records(
    net: &Network<f64>,
    bundle: &DatasetBundle,
    idx: &[usize],
    knowledge: Option<&EmbeddingStore>,
) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::with_capacity(idx.len() * net.config.tasks);
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = build_batch(&net.config, bundle, chunk, knowledge)?;
        out.extend_from_slice(net.predict(&batch)?.outputs.data());
    }
    if let Some(s) = &bundle.spec.standardization {
        let tasks = net.config.tasks;
        for (k, v) in out.iter_mut().enumerate() {
            *v = s.inverse(k % tasks, *v);
        }
    }
    Ok(out)
}

/// RMSE (original units) or mean AUROC over the given records.
pub fn evaluate(
    net: &Network<f64>,
    bundle: &DatasetBundle,
    idx: &[usize],
    knowledge: Option<&EmbeddingStore>,
) -> Result<Evaluation, PipelineError> {
    if idx.is_empty() {
        return Err(PipelineError::Data("cannot evaluate an empty split".into()));
    }
    let preds = predict_records(net, bundle, idx, knowledge)?;
    let tasks = bundle.num_tasks();
    let mut labels = Vec::with_capacity(preds.len());
    let mut present = Vec::with_capacity(preds.len());
    for &i in idx {
        labels.extend_from_slice(&bundle.records[i].labels);
        present.extend_from_slice(&bundle.records[i].present);
    }
    let metric = MetricKind::for_task(bundle.spec.task_type);
    let (value, per_task) = match metric {
        MetricKind::Auroc => {
            let m = multitask_auroc(&preds, &labels, &present, tasks)?;
            (m.mean, m.per_task)
        }
        MetricKind::Rmse => {
            let pick = |t: Option<usize>| -> (Vec<f64>, Vec<f64>) {
                (0..preds.len())
                    .filter(|&k| present[k] && t.is_none_or(|t| k % tasks == t))
                    .map(|k| (preds[k], labels[k]))
                    .unzip()
            };
            let (p, y) = pick(None);
            let per_task = (0..tasks)
                .map(|t| {
                    let (p, y) = pick(Some(t));
                    rmse(&p, &y).ok()
                })
                .collect();
            (rmse(&p, &y)?, per_task)
        }
    };
    Ok(Evaluation {
        metric,
        value,
        per_task,
        count: idx.len(),
    })
}

/// Trains from a fresh seeded initialization and returns the
/// best-validation network. `on_epoch` sees every report as it is produced.
pub fn train(
    bundle: &DatasetBundle,
    knowledge: Option<&EmbeddingStore>,
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<(), PipelineError>,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if model.tasks != bundle.num_tasks() || model.task_type != bundle.spec.task_type {
        return Err(PipelineError::Config(format!(
            "model expects {} {} task(s), dataset has {} {}",
            model.tasks,
            model.task_type.as_str(),
            bundle.num_tasks(),
            bundle.spec.task_type.as_str()
        )));
    }
    if bundle.spec.task_type == TaskType::Regression && bundle.spec.standardization.is_none() {
        return Err(PipelineError::Config(
            "regression targets must be standardized before training".into(),
        ));
    }
    let train_idx = bundle.indices(Split::Train);
    let valid_idx = bundle.indices(Split::Valid);
    if train_idx.is_empty() || valid_idx.is_empty() {
        return Err(PipelineError::Data(
            "train and valid splits must be non-empty".into(),
        ));
    }
    if model.variant.uses_knowledge() {
        knowledge_for(bundle, &train_idx, knowledge)?;
        knowledge_for(bundle, &valid_idx, knowledge)?;
    }

    let mut net = Network::<f64>::new(model, seed)?;
    let mut adam = Adam::new(&net.params, cfg.lr, cfg.weight_decay);
    let metric = MetricKind::for_task(bundle.spec.task_type);
    let mut sched =
        PlateauScheduler::with(metric.mode(), cfg.scheduler_factor, cfg.scheduler_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut best: Option<(Network<f64>, usize, f64)> = None;
    let mut since_best = 0;
    let mut reports = Vec::new();
    let mut stopped_early = false;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight_sum) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (labels, present) = targets(bundle, chunk);
            let n_present = present.iter().filter(|&&p| p).count();
            if n_present == 0 {
                continue;
            }
            let batch = build_batch(&net.config, bundle, chunk, knowledge)?;
            let grads = {
                let tape = Tape::new();
                let p = net.params.bind(&tape);
                let f = net.forward(&tape, &p, &batch, Mode::Train(&mut rng))?;
                let loss = net.loss(f.outputs, &labels, &present)?;
                let lv = loss.value().item();
                if !lv.is_finite() {
                    return Err(PipelineError::NonFinite {
                        what: "loss".into(),
                        epoch,
                        batch: bi,
                    });
                }
                loss_sum += lv * n_present as f64;
                weight_sum += n_present;
                tape.backward(loss)
                    .map_err(crate::model::ModelError::from)?;
                p.grads()
            };
            adam.step(&mut net.params, &grads).map_err(|e| match e {
                OptimError::NonFiniteGradient { param, .. } => PipelineError::NonFinite {
                    what: format!("gradient in `{param}`"),
                    epoch,
                    batch: bi,
                },
                other => other.into(),
            })?;
        }
        let valid = evaluate(&net, bundle, &valid_idx, knowledge)?.value;
        if !valid.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "validation metric".into(),
                epoch,
                batch: 0,
            });
        }
        let lr_used = adam.lr;
        adam.lr = sched.step(valid, adam.lr);
        if best
            .as_ref()
            .is_none_or(|b| metric.mode().improves(valid, b.2))
        {
            best = Some((net.clone(), epoch, valid));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let report = EpochReport {
            epoch,
            train_loss: if weight_sum > 0 {
                loss_sum / weight_sum as f64
            } else {
                0.0
            },
            valid_metric: valid,
            lr: lr_used,
            early_stop_counter: since_best,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:3}  loss {:.5}  valid {} {:.4}  lr {:.2e}",
            report.train_loss,
            metric.as_str(),
            valid,
            lr_used
        );
        on_epoch(&report)?;
        reports.push(report);
        if since_best >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (best, best_epoch, best_valid) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid,
        reports,
        stopped_early,
    })
}
