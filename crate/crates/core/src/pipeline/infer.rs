use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::run::ProviderConfig;
use super::task::TaskSpec;
use super::PipelineError;
use crate::chem::{parse_smiles, FeatureSet};
use crate::knowledge::{EmbeddingProvider, KnowledgeEmbedding};
use crate::model::{read_checkpoint, Batch, GraphBatch, KnowledgeBatch, Network, TaskType};

/// Everything besides weights needed to serve a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: TaskSpec,
    pub label_names: Vec<String>,
    pub provider: ProviderConfig,
    pub best_epoch: usize,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinglePrediction {
    /// Probabilities, or values in original target units.
    pub outputs: Vec<f64>,
    /// `(tanh α_xattn, tanh α_dense)` per fusion block.
    pub gates: Vec<(f64, f64)>,
    /// First fusion block, head-averaged, atoms × knowledge tokens.
    pub cross_attention: Option<Vec<Vec<f64>>>,
    pub atom_tokens: Vec<String>,
    pub knowledge_tokens: Vec<String>,
}

/// A loaded checkpoint ready for one-off predictions. Immutable, so it can
/// be shared across threads.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub network: Network<f64>,
    pub meta: CheckpointMeta,
    /// SHA-256 of the checkpoint bytes.
    pub checkpoint_hash: String,
}

/// Stored embeddings are `f32`; narrowing here keeps interactive inputs
/// identical to what training saw.
fn as_stored(mut e: KnowledgeEmbedding) -> KnowledgeEmbedding {
    e.tokens = e.tokens.map(|x| x as f32 as f64);
    e
}

impl Predictor {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let ck = read_checkpoint::<f64>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(ck.metadata)
            .map_err(|e| PipelineError::Data(format!("checkpoint metadata: {e}")))?;
        if meta.label_names.len() != ck.network.config.tasks {
            return Err(PipelineError::Data(
                "checkpoint metadata does not match the model".into(),
            ));
        }
        Ok(Self {
            network: ck.network,
            meta,
            checkpoint_hash: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn features(&self) -> FeatureSet {
        self.network.config.gin.features
    }

    pub fn predict(&self, smiles: &str, text: &str) -> Result<SinglePrediction, PipelineError> {
        let cfg = &self.network.config;
        let graph = parse_smiles(smiles)?;
        if graph.is_empty() {
            return Err(PipelineError::Data("SMILES contains no atoms".into()));
        }
        let provider = self.meta.provider.build();
        let (knowledge, knowledge_tokens) = if cfg.variant.uses_knowledge() {
            let e = as_stored(provider.embed(text)?);
            (
                Some(KnowledgeBatch::from_embeddings(&[&e])?),
                provider.tokens(text),
            )
        } else {
            (None, Vec::new())
        };
        let batch = Batch {
            graph: if cfg.variant.uses_graph() {
                Some(GraphBatch::from_graphs(&[&graph], self.features())?)
            } else {
                None
            },
            knowledge,
        };
        let pred = self.network.predict(&batch)?;
        let mut outputs = pred.outputs.data().to_vec();
        if cfg.task_type == TaskType::Regression {
            if let Some(s) = &self.meta.task.standardization {
                for (t, v) in outputs.iter_mut().enumerate() {
                    *v = s.inverse(t, *v);
                }
            }
        }
        let cross_attention = pred.cross_attention.first().map(|w| {
            let m = w.shape()[2];
            w.data().chunks(m).map(<[f64]>::to_vec).collect()
        });
        let atom_tokens = graph
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}{}", a.element.symbol(), i))
            .collect();
        Ok(SinglePrediction {
            outputs,
            gates: self.network.gates(),
            cross_attention,
            atom_tokens,
            knowledge_tokens,
        })
    }
}
