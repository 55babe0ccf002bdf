//! The click-prediction backbone: per-field embedding lookup with
//! mean-pooled multi-valued attributes, row-wise concatenation in the fixed
//! order (user id, user attrs, item id, item attrs), a relu MLP, and a
//! sigmoid prediction layer trained with binary cross entropy.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{FieldDef, InteractionLog, Record};
use crate::diffgraph::{
    adam_step, AdamConfig, AdamState, GatherPlan, Graph, GraphError, NodeId, OptimError, Tensor,
};

#[derive(Debug, Error)]
pub enum RecError {
    #[error("index {index} out of vocabulary {vocab} for field '{field}'")]
    OutOfVocab {
        field: String,
        index: u32,
        vocab: usize,
    },
    #[error("batch arity mismatch: {0}")]
    BatchArity(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("predictions and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Field layout of the model inputs plus the shared embedding width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user_vocab: usize,
    pub item_vocab: usize,
    pub user_fields: Vec<FieldDef>,
    pub item_fields: Vec<FieldDef>,
    pub embed_dim: usize,
}

impl FeatureSchema {
    pub fn from_log(log: &InteractionLog, embed_dim: usize) -> Self {
        Self {
            user_vocab: log.num_users,
            item_vocab: log.num_items,
            user_fields: log.user_fields.clone(),
            item_fields: log.item_fields.clone(),
            embed_dim,
        }
    }

    /// Width of the concatenated embedding row: (n + m + 2)·d.
    pub fn input_width(&self) -> usize {
        (self.user_fields.len() + self.item_fields.len() + 2) * self.embed_dim
    }
}

/// A V×d embedding matrix with a per-row training flag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable_rows: Vec<bool>,
}

impl EmbeddingTable {
    pub fn random(vocab: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let data = (0..vocab * dim).map(|_| rng.random_range(-0.01..0.01)).collect();
        Self {
            weights: Tensor::matrix(vocab, dim, data),
            trainable_rows: vec![true; vocab],
        }
    }

    pub fn vocab(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, i: u32) -> &[f64] {
        self.weights.row_slice(i as usize)
    }

    pub fn set_row(&mut self, i: u32, values: &[f64]) {
        self.weights.row_slice_mut(i as usize).copy_from_slice(values);
    }

    pub fn set_trainable_rows(&mut self, rows: &[u32]) {
        self.trainable_rows = vec![false; self.vocab()];
        for &r in rows {
            self.trainable_rows[r as usize] = true;
        }
    }

    pub fn all_trainable(&mut self) {
        self.trainable_rows = vec![true; self.vocab()];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub(crate) fn random(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Self::random_with_bound(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub(crate) fn random_with_bound(fan_in: usize, fan_out: usize, bound: f64, rng: &mut ChaCha12Rng) -> Self {
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w: Tensor::matrix(fan_in, fan_out, data),
            b: Tensor::matrix(1, fan_out, vec![0.0; fan_out]),
        }
    }
}

/// All trainable state of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub schema: FeatureSchema,
    pub user_table: EmbeddingTable,
    pub item_table: EmbeddingTable,
    pub user_attr_tables: Vec<EmbeddingTable>,
    pub item_attr_tables: Vec<EmbeddingTable>,
    pub hidden: Vec<DenseLayer>,
    pub pred: DenseLayer,
}

impl ModelParams {
    pub fn init(schema: FeatureSchema, hidden_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = schema.embed_dim;
        let user_table = EmbeddingTable::random(schema.user_vocab, d, &mut rng);
        let item_table = EmbeddingTable::random(schema.item_vocab, d, &mut rng);
        let user_attr_tables = schema
            .user_fields
            .iter()
            .map(|f| EmbeddingTable::random(f.vocab, d, &mut rng))
            .collect();
        let item_attr_tables = schema
            .item_fields
            .iter()
            .map(|f| EmbeddingTable::random(f.vocab, d, &mut rng))
            .collect();
        let mut hidden = Vec::new();
        let mut width = schema.input_width();
        for &h in hidden_sizes {
            hidden.push(DenseLayer::random(width, h, &mut rng));
            width = h;
        }
        let pred = DenseLayer::random(width, 1, &mut rng);
        Self {
            schema,
            user_table,
            item_table,
            user_attr_tables,
            item_attr_tables,
            hidden,
            pred,
        }
    }

    /// Every parameter tensor in a fixed order (tables first, then layers).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.user_table.weights];
        out.extend(self.user_attr_tables.iter().map(|t| &t.weights));
        out.push(&self.item_table.weights);
        out.extend(self.item_attr_tables.iter().map(|t| &t.weights));
        for l in &self.hidden {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.pred.w);
        out.push(&self.pred.b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.user_table.weights];
        out.extend(self.user_attr_tables.iter_mut().map(|t| &mut t.weights));
        out.push(&mut self.item_table.weights);
        out.extend(self.item_attr_tables.iter_mut().map(|t| &mut t.weights));
        for l in &mut self.hidden {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.pred.w);
        out.push(&mut self.pred.b);
        out
    }

    /// FNV-1a over the exact bit patterns of every parameter, for freeze
    /// contracts and protocol-isolation checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for t in self.tensors() {
            for &v in t.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Hash of everything except the item-ID table, for checks that should
    /// be insensitive to new-item row initialization.
    pub fn backbone_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (i, t) in self.tensors().iter().enumerate() {
            if i == 1 + self.user_attr_tables.len() {
                continue; // the item table slot
            }
            for &v in t.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// One batch of samples as parallel index vectors. `item_override`, when
/// set, replaces the item-ID embedding row of every sample.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    /// field → per-sample values
    pub user_attrs: Vec<Vec<Vec<u32>>>,
    pub item_attrs: Vec<Vec<Vec<u32>>>,
    pub labels: Vec<f64>,
    pub item_override: Option<Tensor>,
}

impl SampleBatch {
    pub fn from_records(log: &InteractionLog, records: &[Record]) -> Self {
        let user_attrs = (0..log.user_fields.len())
            .map(|f| records.iter().map(|r| log.user_attrs[r.user as usize][f].clone()).collect())
            .collect();
        let item_attrs = (0..log.item_fields.len())
            .map(|f| records.iter().map(|r| log.item_attrs[r.item as usize][f].clone()).collect())
            .collect();
        Self {
            user_ids: records.iter().map(|r| r.user).collect(),
            item_ids: records.iter().map(|r| r.item).collect(),
            user_attrs,
            item_attrs,
            labels: records.iter().map(|r| r.label as f64).collect(),
            item_override: None,
        }
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), RecError> {
        if self.is_empty() {
            return Err(RecError::EmptyBatch);
        }
        let n = self.len();
        if self.item_ids.len() != n || self.labels.len() != n {
            return Err(RecError::BatchArity("id and label vectors differ in length".into()));
        }
        if self.user_attrs.len() != schema.user_fields.len() || self.item_attrs.len() != schema.item_fields.len() {
            return Err(RecError::BatchArity("attribute field count differs from schema".into()));
        }
        if self.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(RecError::BatchArity("labels must be binary".into()));
        }
        if let Some(o) = &self.item_override {
            if o.shape() != [n, schema.embed_dim] {
                return Err(RecError::BatchArity(format!(
                    "override shape {:?}, expected [{n}, {}]",
                    o.shape(),
                    schema.embed_dim
                )));
            }
        }
        for &u in &self.user_ids {
            if u as usize >= schema.user_vocab {
                return Err(RecError::OutOfVocab { field: "user_id".into(), index: u, vocab: schema.user_vocab });
            }
        }
        for &i in &self.item_ids {
            if i as usize >= schema.item_vocab {
                return Err(RecError::OutOfVocab { field: "item_id".into(), index: i, vocab: schema.item_vocab });
            }
        }
        for (f, per_sample) in self.user_attrs.iter().enumerate() {
            if per_sample.len() != n {
                return Err(RecError::BatchArity(format!("user field {f} has wrong sample count")));
            }
            let def = &schema.user_fields[f];
            for vals in per_sample {
                for &v in vals {
                    if v as usize >= def.vocab {
                        return Err(RecError::OutOfVocab { field: def.name.clone(), index: v, vocab: def.vocab });
                    }
                }
            }
        }
        for (f, per_sample) in self.item_attrs.iter().enumerate() {
            if per_sample.len() != n {
                return Err(RecError::BatchArity(format!("item field {f} has wrong sample count")));
            }
            let def = &schema.item_fields[f];
            for vals in per_sample {
                for &v in vals {
                    if v as usize >= def.vocab {
                        return Err(RecError::OutOfVocab { field: def.name.clone(), index: v, vocab: def.vocab });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which leaves become trainable parameters when building a forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// every tensor is a trainable parameter
    TrainAll,
    /// only the item-ID table trains; everything else is constant
    TrainItemRows,
    /// everything constant (inference, or an outer module owns the params)
    Frozen,
}

/// Node handles of one forward construction.
pub struct ForwardNodes {
    /// parameter nodes in [`ModelParams::tensors`] order (empty when frozen)
    pub param_nodes: Vec<NodeId>,
    /// the item-ID table node when it is trainable
    pub item_table_node: Option<NodeId>,
    /// concatenated embedding matrix, batch × (n+m+2)d
    pub embed: NodeId,
    /// sigmoid predictions, batch × 1
    pub prediction: NodeId,
}

/// Builds the embed→MLP→sigmoid graph for one batch. The caller owns the
/// graph and can attach losses or overrides around it. `override_node`
/// (batch×d) takes the item-ID slot instead of the table rows; it wins over
/// `batch.item_override`.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    batch: &SampleBatch,
    mode: ForwardMode,
    override_node: Option<NodeId>,
) -> Result<ForwardNodes, RecError> {
    batch.validate(&params.schema)?;
    let mut param_nodes = Vec::new();
    let mut item_table_node = None;

    let table_node = |g: &mut Graph, t: &EmbeddingTable, trainable: bool, name: &str, sink: &mut Vec<NodeId>| {
        if trainable {
            let n = g.param(t.weights.clone(), name);
            sink.push(n);
            n
        } else {
            g.constant(t.weights.clone())
        }
    };

    let train_all = mode == ForwardMode::TrainAll;
    let user_node = table_node(g, &params.user_table, train_all, "user_table", &mut param_nodes);
    let user_attr_nodes: Vec<NodeId> = params
        .user_attr_tables
        .iter()
        .enumerate()
        .map(|(f, t)| table_node(g, t, train_all, &format!("user_attr{f}"), &mut param_nodes))
        .collect();
    let item_trainable = matches!(mode, ForwardMode::TrainAll | ForwardMode::TrainItemRows);
    let item_node = table_node(g, &params.item_table, item_trainable, "item_table", &mut param_nodes);
    if item_trainable {
        item_table_node = Some(item_node);
    }
    let item_attr_nodes: Vec<NodeId> = params
        .item_attr_tables
        .iter()
        .enumerate()
        .map(|(f, t)| table_node(g, t, train_all, &format!("item_attr{f}"), &mut param_nodes))
        .collect();

    // embedding slots in fixed order: user id, user attrs, item id, item attrs
    let mut slots = Vec::new();
    let user_plan = Rc::new(GatherPlan::lookup(&batch.user_ids));
    slots.push(g.gather(user_node, user_plan)?);
    for (f, tnode) in user_attr_nodes.iter().enumerate() {
        let plan = Rc::new(GatherPlan::mean_pool(&batch.user_attrs[f]));
        slots.push(g.gather(*tnode, plan)?);
    }
    let item_slot = if let Some(ov) = override_node {
        ov
    } else if let Some(ov) = &batch.item_override {
        g.constant(ov.clone())
    } else {
        let plan = Rc::new(GatherPlan::lookup(&batch.item_ids));
        g.gather(item_node, plan)?
    };
    slots.push(item_slot);
    for (f, tnode) in item_attr_nodes.iter().enumerate() {
        let plan = Rc::new(GatherPlan::mean_pool(&batch.item_attrs[f]));
        slots.push(g.gather(*tnode, plan)?);
    }
    let embed = g.concat_cols(&slots)?;

    let layer_node = |g: &mut Graph, l: &DenseLayer, name: &str, sink: &mut Vec<NodeId>| -> (NodeId, NodeId) {
        if train_all {
            let w = g.param(l.w.clone(), &format!("{name}.w"));
            let b = g.param(l.b.clone(), &format!("{name}.b"));
            sink.push(w);
            sink.push(b);
            (w, b)
        } else {
            (g.constant(l.w.clone()), g.constant(l.b.clone()))
        }
    };

    let mut h = embed;
    for (i, layer) in params.hidden.iter().enumerate() {
        let (w, b) = layer_node(g, layer, &format!("hidden{i}"), &mut param_nodes);
        let lin = g.matmul(h, w)?;
        let lin = g.add_row(lin, b)?;
        h = g.relu(lin);
    }
    let (w, b) = layer_node(g, &params.pred, "pred", &mut param_nodes);
    let lin = g.matmul(h, w)?;
    let lin = g.add_row(lin, b)?;
    let prediction = g.sigmoid(lin);

    Ok(ForwardNodes {
        param_nodes,
        item_table_node,
        embed,
        prediction,
    })
}

/// The concatenated embedding matrix for a batch.
pub fn embed_batch(params: &ModelParams, batch: &SampleBatch) -> Result<Tensor, RecError> {
    let mut g = Graph::new();
    let nodes = forward_graph(&mut g, params, batch, ForwardMode::Frozen, None)?;
    Ok(g.forward(nodes.embed, &[])?)
}

/// Predicted click probabilities, batch × 1.
pub fn predict(params: &ModelParams, batch: &SampleBatch) -> Result<Tensor, RecError> {
    let mut g = Graph::new();
    let nodes = forward_graph(&mut g, params, batch, ForwardMode::Frozen, None)?;
    Ok(g.forward(nodes.prediction, &[])?)
}

const CLAMP_LO: f64 = 1e-12;
const CLAMP_HI: f64 = 1.0 - 1e-12;

/// Mean binary cross entropy with the standard clamp before the logs.
/// Shared by training and by the evaluation harness.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64, RecError> {
    if predictions.is_empty() {
        return Err(RecError::EmptyBatch);
    }
    if predictions.len() != labels.len() {
        return Err(RecError::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut acc = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(CLAMP_LO, CLAMP_HI);
        acc += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-acc / predictions.len() as f64)
}

/// Epoch/optimizer settings for backbone training.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.001,
            batch_size: 256,
        }
    }
}

/// Trains every parameter on the given interactions with Adam over seeded,
/// shuffled minibatches. Returns the mean training loss per epoch.
pub fn pretrain(
    params: &mut ModelParams,
    log: &InteractionLog,
    records: &[Record],
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<f64>, RecError> {
    if records.is_empty() {
        return Err(RecError::EmptyTrainingSet);
    }
    let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut state = AdamState::new(AdamConfig::with_lr(settings.lr), &shapes);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);

    for _epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size.max(1)) {
            let recs: Vec<Record> = chunk.iter().map(|&i| records[i]).collect();
            let batch = SampleBatch::from_records(log, &recs);
            let mut g = Graph::new();
            let nodes = forward_graph(&mut g, params, &batch, ForwardMode::TrainAll, None)?;
            let labels = g.constant(Tensor::matrix(batch.len(), 1, batch.labels.clone()));
            let loss = g.bce(nodes.prediction, labels)?;
            epoch_loss += g.forward(loss, &[])?.item();
            batches += 1;
            let grads = g.backward(loss)?;
            let grad_tensors: Vec<&Tensor> = nodes
                .param_nodes
                .iter()
                .map(|&n| grads.tensor(&g, n).expect("gradient for every parameter"))
                .collect();
            let mut targets = params.tensors_mut();
            adam_step(&mut targets, &grad_tensors, &mut state)?;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Predictions for a record slice, evaluated in chunks.
pub fn predict_records(
    params: &ModelParams,
    log: &InteractionLog,
    records: &[Record],
    chunk: usize,
) -> Result<Vec<f64>, RecError> {
    let mut out = Vec::with_capacity(records.len());
    for part in records.chunks(chunk.max(1)) {
        let batch = SampleBatch::from_records(log, part);
        let preds = predict(params, &batch)?;
        out.extend_from_slice(preds.data());
    }
    Ok(out)
}

/// Warm-phase update: only the flagged item-ID rows move, every other
/// parameter is a constant in the graph, so the freeze holds by
/// construction. A fresh optimizer is used per call.
pub fn update_item_embeddings_only(
    params: &mut ModelParams,
    log: &InteractionLog,
    records: &[Record],
    trainable_items: &[u32],
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<f64>, RecError> {
    if records.is_empty() {
        return Err(RecError::EmptyTrainingSet);
    }
    params.item_table.set_trainable_rows(trainable_items);
    let mut state = AdamState::for_params(
        AdamConfig::with_lr(settings.lr),
        &[&params.item_table.weights],
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);

    for _epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size.max(1)) {
            let recs: Vec<Record> = chunk.iter().map(|&i| records[i]).collect();
            let batch = SampleBatch::from_records(log, &recs);
            let mut g = Graph::new();
            let nodes = forward_graph(&mut g, params, &batch, ForwardMode::TrainItemRows, None)?;
            let labels = g.constant(Tensor::matrix(batch.len(), 1, batch.labels.clone()));
            let loss = g.bce(nodes.prediction, labels)?;
            epoch_loss += g.forward(loss, &[])?.item();
            batches += 1;
            let grads = g.backward(loss)?;
            let table_node = nodes.item_table_node.expect("item table is trainable");
            let mut grad = grads.tensor(&g, table_node).expect("item table gradient").clone();
            // rows outside the trainable set stay bit-identical
            for (row, &flag) in params.item_table.trainable_rows.clone().iter().enumerate() {
                if !flag {
                    grad.row_slice_mut(row).fill(0.0);
                }
            }
            adam_step(&mut [&mut params.item_table.weights], &[&grad], &mut state)?;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}
