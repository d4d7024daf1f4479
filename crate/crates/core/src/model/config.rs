use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::chem::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    GinOnly,
    ChemOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::GinOnly, Variant::ChemOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GinOnly => "gin_only",
            Variant::ChemOnly => "chem_only",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Variant::ChemOnly
    }

    pub fn uses_knowledge(self) -> bool {
        self != Variant::GinOnly
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "unknown variant `{s}` (expected full, gin_only or chem_only)"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Regression,
    /// Independent binary labels, one sigmoid output each.
    #[serde(rename = "multilabel", alias = "classification")]
    Classification,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Regression => "regression",
            TaskType::Classification => "multilabel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GinConfig {
    pub layers: usize,
    pub hidden: usize,
    pub features: FeatureSet,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 128,
            features: FeatureSet::Extended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    /// Width of the incoming knowledge token vectors.
    pub knowledge_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            blocks: 1,
            ffn_mult: 4,
            knowledge_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { dropout: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task_type: TaskType,
    pub tasks: usize,
    #[serde(default)]
    pub gin: GinConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, task_type: TaskType, tasks: usize) -> Self {
        Self {
            variant,
            task_type,
            tasks,
            gin: GinConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.tasks == 0 {
            return bad("task count must be positive");
        }
        if self.gin.layers == 0 || self.gin.hidden == 0 {
            return bad("GIN needs at least one layer and positive width");
        }
        let f = &self.fusion;
        if f.width == 0 || f.heads == 0 || f.width % f.heads != 0 {
            return bad("fusion width must be a positive multiple of the head count");
        }
        if f.ffn_mult == 0 || f.knowledge_dim == 0 {
            return bad("fusion ffn_mult and knowledge_dim must be positive");
        }
        if self.variant == Variant::Full && f.blocks == 0 {
            return bad("full variant needs at least one fusion block");
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of the vector the head consumes.
    pub fn head_input(&self) -> usize {
        match self.variant {
            Variant::GinOnly => self.gin.hidden,
            Variant::Full | Variant::ChemOnly => self.fusion.width,
        }
    }

    pub fn head_hidden(&self) -> usize {
        (self.head_input() / 2).max(1)
    }
}
