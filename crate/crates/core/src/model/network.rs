use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TaskType, Variant};
use super::ModelError;
use crate::chem::{featurize, FeatureSet, MolGraph};
use crate::knowledge::{pad_batch, KnowledgeEmbedding};
use crate::numkit::{
    uniform_init, BoundParams, ParamStore, Scalar, Tape, Tensor, TensorError, Var,
};

/// Disjoint union of molecular graphs. Atoms of molecule `b` occupy rows
/// `offsets[b]..offsets[b+1]`.
#[derive(Debug, Clone)]
pub struct GraphBatch<T> {
    pub features: Tensor<T>,
    pub adjacency: Arc<Vec<Vec<usize>>>,
    pub offsets: Arc<Vec<usize>>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn from_graphs(graphs: &[&MolGraph], set: FeatureSet) -> Result<Self, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let width = set.width();
        let mut data = Vec::new();
        let mut adjacency = Vec::new();
        let mut offsets = vec![0];
        for (b, g) in graphs.iter().enumerate() {
            if g.is_empty() {
                return Err(ModelError::Input(format!("molecule {b} has no atoms")));
            }
            let base = adjacency.len();
            data.extend_from_slice(featurize::<T>(g, set).data());
            for nbrs in g.adjacency_lists() {
                adjacency.push(nbrs.into_iter().map(|u| u + base).collect());
            }
            offsets.push(adjacency.len());
        }
        Ok(Self {
            features: Tensor::new(vec![adjacency.len(), width], data)?,
            adjacency: Arc::new(adjacency),
            offsets: Arc::new(offsets),
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn atom_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_atoms(&self) -> usize {
        self.atom_counts().into_iter().max().unwrap_or(0)
    }

    /// `[B, max_atoms]` row-major; true for real atoms.
    pub fn mol_mask(&self) -> Vec<bool> {
        let n = self.max_atoms();
        self.atom_counts()
            .into_iter()
            .flat_map(|c| (0..n).map(move |i| i < c))
            .collect()
    }
}

/// Padded knowledge tokens `[B, m, d_k]` with a `[B, m]` mask.
#[derive(Debug, Clone)]
pub struct KnowledgeBatch<T> {
    pub tokens: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> KnowledgeBatch<T> {
    pub fn from_embeddings(items: &[&KnowledgeEmbedding]) -> Result<Self, ModelError> {
        let (tokens, mask) = pad_batch(items).map_err(|e| ModelError::Input(e.to_string()))?;
        let m = tokens.shape()[1];
        if let Some(b) = (0..items.len()).find(|&b| !mask[b * m..(b + 1) * m].iter().any(|&x| x)) {
            return Err(ModelError::Input(format!(
                "knowledge sequence {b} is fully masked"
            )));
        }
        Ok(Self { tokens, mask })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub graph: Option<GraphBatch<T>>,
    pub knowledge: Option<KnowledgeBatch<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        match (&self.graph, &self.knowledge) {
            (Some(g), _) => g.len(),
            (None, Some(k)) => k.len(),
            (None, None) => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum Mode<'r> {
    Eval,
    /// Training mode; dropout masks are drawn from the given generator.
    Train(&'r mut ChaCha8Rng),
}

pub struct Forward<'t, T> {
    /// `[B, T]`: probabilities for classification, standardized values for
    /// regression.
    pub outputs: Var<'t, T>,
    pub logits: Var<'t, T>,
    /// Per-node GIN output `[N, d_g]`.
    pub nodes: Option<Var<'t, T>>,
    /// Mean-pooled GIN readout `[B, d_g]`.
    pub mol_pooled: Option<Var<'t, T>>,
    /// Mean of projected knowledge tokens `[B, d]`.
    pub chem_pooled: Option<Var<'t, T>>,
    /// Mean of fused molecular tokens `[B, d]`.
    pub fused_pooled: Option<Var<'t, T>>,
    /// Per fusion block, head-averaged cross-attention `[B, n, m]`.
    pub cross_attention: Vec<Tensor<T>>,
    /// Per fusion block, head-averaged self-attention `[B, n, n]`.
    pub self_attention: Vec<Tensor<T>>,
}

/// Detached forward results for inference.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub outputs: Tensor<T>,
    pub mol_pooled: Option<Tensor<T>>,
    pub chem_pooled: Option<Tensor<T>>,
    pub fused_pooled: Option<Tensor<T>>,
    pub cross_attention: Vec<Tensor<T>>,
    pub self_attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = uniform_init(&mut self.rng, &[fan_in, fan_out], fan_in);
        self.store.insert(format!("{name}.weight"), w);
        self.store
            .insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    fn layer_norm(&mut self, name: &str, width: usize) {
        self.store
            .insert(format!("{name}.gamma"), Tensor::full(&[width], T::one()));
        self.store
            .insert(format!("{name}.beta"), Tensor::zeros(&[width]));
    }

    fn scalar(&mut self, name: &str) {
        self.store.insert(name, Tensor::zeros(&[1]));
    }
}

fn linear<'t, T: Scalar>(
    p: &BoundParams<'t, T>,
    name: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    x.matmul(p.get(&format!("{name}.weight")))?
        .add(p.get(&format!("{name}.bias")))
}

fn layer_norm<'t, T: Scalar>(
    p: &BoundParams<'t, T>,
    name: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    x.layer_norm(
        p.get(&format!("{name}.gamma")),
        p.get(&format!("{name}.beta")),
    )
}

fn feedforward<'t, T: Scalar>(
    p: &BoundParams<'t, T>,
    name: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let h = linear(p, &format!("{name}.0"), x)?.relu();
    linear(p, &format!("{name}.1"), h)
}

impl<T: Scalar> Network<T> {
    /// Weights ~ U(±√(3/fan_in)), biases and ε zero, layer-norm gains one,
    /// gates zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let d = c.fusion.width;
        if c.variant.uses_graph() {
            let mut width = c.gin.features.width();
            for k in 0..c.gin.layers {
                init.scalar(&format!("gin.layers.{k}.eps"));
                init.linear(&format!("gin.layers.{k}.mlp.0"), width, c.gin.hidden);
                init.linear(&format!("gin.layers.{k}.mlp.1"), c.gin.hidden, c.gin.hidden);
                width = c.gin.hidden;
            }
        }
        if c.variant == Variant::Full {
            init.linear("mol_proj", c.gin.hidden, d);
        }
        if c.variant.uses_knowledge() {
            init.linear("chem_proj", c.fusion.knowledge_dim, d);
        }
        if c.variant == Variant::Full {
            let wide = d * c.fusion.ffn_mult;
            for i in 0..c.fusion.blocks {
                let b = format!("fusion.blocks.{i}");
                init.layer_norm(&format!("{b}.ln_cross"), d);
                for proj in ["q", "k", "v", "o"] {
                    init.linear(&format!("{b}.cross_attn.{proj}"), d, d);
                }
                init.scalar(&format!("{b}.alpha_xattn"));
                init.layer_norm(&format!("{b}.ln_dense"), d);
                init.linear(&format!("{b}.dense.0"), d, wide);
                init.linear(&format!("{b}.dense.1"), wide, d);
                init.scalar(&format!("{b}.alpha_dense"));
                init.layer_norm(&format!("{b}.ln_self"), d);
                for proj in ["q", "k", "v", "o"] {
                    init.linear(&format!("{b}.self_attn.{proj}"), d, d);
                }
                init.layer_norm(&format!("{b}.ln_ffn"), d);
                init.linear(&format!("{b}.ffn.0"), d, wide);
                init.linear(&format!("{b}.ffn.1"), wide, d);
            }
        }
        init.linear("head.0", c.head_input(), c.head_hidden());
        init.linear("head.1", c.head_hidden(), c.tasks);
        Ok(Self {
            config,
            params: store,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Network::<T>::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(ModelError::Checkpoint(
                "parameter names do not match the configuration".into(),
            ));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// `tanh(α_xattn)`, `tanh(α_dense)` for each fusion block.
    pub fn gates(&self) -> Vec<(f64, f64)> {
        if self.config.variant != Variant::Full {
            return Vec::new();
        }
        (0..self.config.fusion.blocks)
            .map(|i| {
                let g = |n: &str| {
                    let a = self
                        .params
                        .get(&format!("fusion.blocks.{i}.{n}"))
                        .expect("gate");
                    a.item().to_f64_lossy().tanh()
                };
                (g("alpha_xattn"), g("alpha_dense"))
            })
            .collect()
    }

    pub fn set_gates(&mut self, xattn: f64, dense: f64) {
        for i in 0..self.config.fusion.blocks {
            for (n, v) in [("alpha_xattn", xattn), ("alpha_dense", dense)] {
                if let Some(t) = self.params.get_mut(&format!("fusion.blocks.{i}.{n}")) {
                    t.data_mut()[0] = T::from_f64_lossy(v);
                }
            }
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<usize, ModelError> {
        let v = self.config.variant;
        let g = batch.graph.as_ref();
        let k = batch.knowledge.as_ref();
        if v.uses_graph() && g.is_none() {
            return Err(ModelError::Input(format!("variant {v} needs graph input")));
        }
        if v.uses_knowledge() && k.is_none() {
            return Err(ModelError::Input(format!(
                "variant {v} needs knowledge input"
            )));
        }
        if let Some(g) = g.filter(|_| v.uses_graph()) {
            let w = self.config.gin.features.width();
            if g.features.shape()[1] != w {
                return Err(ModelError::Input(format!(
                    "atom features have width {}, model expects {w}",
                    g.features.shape()[1]
                )));
            }
        }
        if let Some(k) = k.filter(|_| v.uses_knowledge()) {
            let w = self.config.fusion.knowledge_dim;
            if k.tokens.shape()[2] != w {
                return Err(ModelError::Input(format!(
                    "knowledge tokens have width {}, model expects {w}",
                    k.tokens.shape()[2]
                )));
            }
        }
        if let (Some(g), Some(k)) = (g, k) {
            if v == Variant::Full && g.len() != k.len() {
                return Err(ModelError::Input(format!(
                    "{} graphs but {} knowledge sequences",
                    g.len(),
                    k.len()
                )));
            }
        }
        let n = batch.len();
        if n == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        Ok(n)
    }

    fn gin<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &BoundParams<'t, T>,
        g: &GraphBatch<T>,
    ) -> Result<Var<'t, T>, ModelError> {
        let one = tape.constant(Tensor::full(&[1], T::one()));
        let mut h = tape.constant(g.features.clone());
        let layers = self.config.gin.layers;
        for k in 0..layers {
            let pre = format!("gin.layers.{k}");
            let eps = p.get(&format!("{pre}.eps"));
            let z = h
                .mul(eps.add(one)?)?
                .add(h.neighbor_sum(g.adjacency.clone())?)?;
            let mut y = linear(p, &format!("{pre}.mlp.0"), z)?.relu();
            y = linear(p, &format!("{pre}.mlp.1"), y)?;
            h = if k + 1 < layers { y.relu() } else { y };
        }
        Ok(h)
    }

    /// Multi-head scaled dot-product attention. Returns the projected output
    /// and the head-averaged weights.
    fn attention<'t>(
        &self,
        p: &BoundParams<'t, T>,
        name: &str,
        query: Var<'t, T>,
        memory: Var<'t, T>,
        key_mask: &[bool],
    ) -> Result<(Var<'t, T>, Tensor<T>), ModelError> {
        let d = self.config.fusion.width;
        let heads = self.config.fusion.heads;
        let dh = d / heads;
        let q = linear(p, &format!("{name}.q"), query)?;
        let k = linear(p, &format!("{name}.k"), memory)?;
        let v = linear(p, &format!("{name}.v"), memory)?;
        let qs = q.shape();
        let (b, m) = (qs[0], memory.shape()[1]);
        let mask_shape = [b, 1, m];
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut avg: Option<Tensor<T>> = None;
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_last(lo, hi)?;
            let kh = k.slice_last(lo, hi)?.transpose()?;
            let vh = v.slice_last(lo, hi)?;
            let w = qh
                .bmm(kh)?
                .scale(scale)
                .softmax_last(Some((key_mask, &mask_shape)))?;
            let wv = w.value();
            avg = Some(match avg {
                None => wv,
                Some(mut a) => {
                    a.data_mut()
                        .iter_mut()
                        .zip(wv.data())
                        .for_each(|(x, &y)| *x = *x + y);
                    a
                }
            });
            outs.push(w.bmm(vh)?);
        }
        let hn = T::from_f64_lossy(heads as f64);
        let avg = avg.expect("at least one head").map(|x| x / hn);
        let o = Var::concat_last(&outs)?;
        Ok((linear(p, &format!("{name}.o"), o)?, avg))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &BoundParams<'t, T>,
        batch: &Batch<T>,
        mode: Mode<'_>,
    ) -> Result<Forward<'t, T>, ModelError> {
        let bsz = self.check_batch(batch)?;
        let c = &self.config;
        let mut out = Forward {
            outputs: tape.constant(Tensor::zeros(&[0])),
            logits: tape.constant(Tensor::zeros(&[0])),
            nodes: None,
            mol_pooled: None,
            chem_pooled: None,
            fused_pooled: None,
            cross_attention: Vec::new(),
            self_attention: Vec::new(),
        };

        if c.variant.uses_graph() {
            let g = batch.graph.as_ref().expect("checked");
            let nodes = self.gin(tape, p, g)?;
            out.mol_pooled = Some(nodes.segment_mean(g.offsets.clone())?);
            out.nodes = Some(nodes);
        }
        let chem_tokens = match (c.variant, batch.knowledge.as_ref()) {
            (Variant::Full, Some(k)) => {
                let t = linear(p, "chem_proj", tape.constant(k.tokens.clone()))?;
                out.chem_pooled = Some(t.masked_mean(Arc::new(k.mask.clone()))?);
                Some(t)
            }
            (Variant::ChemOnly, Some(k)) => {
                let mean = tape
                    .constant(k.tokens.clone())
                    .masked_mean(Arc::new(k.mask.clone()))?;
                out.chem_pooled = Some(linear(p, "chem_proj", mean)?);
                None
            }
            _ => None,
        };

        let pooled = match c.variant {
            Variant::GinOnly => out.mol_pooled.expect("graph pathway"),
            Variant::ChemOnly => out.chem_pooled.expect("knowledge pathway"),
            Variant::Full => {
                let g = batch.graph.as_ref().expect("checked");
                let k = batch.knowledge.as_ref().expect("checked");
                let chem = chem_tokens.expect("full variant projects knowledge");
                let n = g.max_atoms();
                let mol_mask = g.mol_mask();
                let projected = linear(p, "mol_proj", out.nodes.expect("graph pathway"))?;
                let mut h = projected.pad_segments(g.offsets.clone(), n)?;
                for i in 0..c.fusion.blocks {
                    let b = format!("fusion.blocks.{i}");
                    let q = layer_norm(p, &format!("{b}.ln_cross"), h)?;
                    let (a, w) = self
                        .attention(p, &format!("{b}.cross_attn"), q, chem, &k.mask)
                        .map_err(masked_knowledge)?;
                    out.cross_attention.push(w);
                    h = h.add(p.get(&format!("{b}.alpha_xattn")).tanh().mul(a)?)?;
                    let f = feedforward(
                        p,
                        &format!("{b}.dense"),
                        layer_norm(p, &format!("{b}.ln_dense"), h)?,
                    )?;
                    h = h.add(p.get(&format!("{b}.alpha_dense")).tanh().mul(f)?)?;
                    let s_in = layer_norm(p, &format!("{b}.ln_self"), h)?;
                    let (s, w) =
                        self.attention(p, &format!("{b}.self_attn"), s_in, s_in, &mol_mask)?;
                    out.self_attention.push(w);
                    h = h.add(s)?;
                    let f = feedforward(
                        p,
                        &format!("{b}.ffn"),
                        layer_norm(p, &format!("{b}.ln_ffn"), h)?,
                    )?;
                    h = h.add(f)?;
                }
                let fused = h.masked_mean(Arc::new(mol_mask))?;
                out.fused_pooled = Some(fused);
                fused
            }
        };

        let mut hidden = linear(p, "head.0", pooled)?.relu();
        if let Mode::Train(rng) = mode {
            let rate = c.head.dropout;
            if rate > 0.0 {
                let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                let n = bsz * c.head_hidden();
                let scale = (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                hidden = hidden.dropout_with(scale)?;
            }
        }
        out.logits = linear(p, "head.1", hidden)?;
        out.outputs = match c.task_type {
            TaskType::Classification => out.logits.sigmoid(),
            TaskType::Regression => out.logits,
        };
        Ok(out)
    }

    /// BCE (classification) or MSE (regression) over present labels.
    pub fn loss<'t>(
        &self,
        outputs: Var<'t, T>,
        labels: &[T],
        present: &[bool],
    ) -> Result<Var<'t, T>, ModelError> {
        let want = outputs.value().len();
        if labels.len() != want || present.len() != want {
            return Err(ModelError::Input(format!(
                "{} outputs but {} labels / {} presence flags",
                want,
                labels.len(),
                present.len()
            )));
        }
        if !present.iter().any(|&x| x) {
            return Err(ModelError::Input("batch has no labels".into()));
        }
        let weights: Vec<T> = present
            .iter()
            .map(|&x| if x { T::one() } else { T::zero() })
            .collect();
        Ok(match self.config.task_type {
            TaskType::Classification => {
                if let Some(i) = (0..want)
                    .find(|&i| present[i] && labels[i] != T::zero() && labels[i] != T::one())
                {
                    return Err(ModelError::Input(format!(
                        "classification label {} at position {i} is not 0 or 1",
                        labels[i]
                    )));
                }
                outputs.bce(labels, &weights)?
            }
            TaskType::Regression => outputs.mse(labels, &weights)?,
        })
    }

    /// Eval-mode forward pass with parameters held constant.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Prediction<T>, ModelError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let f = self.forward(&tape, &p, batch, Mode::Eval)?;
        let outputs = f.outputs.value();
        if !outputs.is_finite() {
            return Err(ModelError::Numeric("non-finite model output".into()));
        }
        Ok(Prediction {
            outputs,
            mol_pooled: f.mol_pooled.map(|v| v.value()),
            chem_pooled: f.chem_pooled.map(|v| v.value()),
            fused_pooled: f.fused_pooled.map(|v| v.value()),
            cross_attention: f.cross_attention,
            self_attention: f.self_attention,
        })
    }
}

fn masked_knowledge(e: ModelError) -> ModelError {
    match e {
        ModelError::Tensor(TensorError::FullyMasked { slice, .. }) => {
            ModelError::Input(format!("knowledge sequence {slice} is fully masked"))
        }
        other => other,
    }
}
