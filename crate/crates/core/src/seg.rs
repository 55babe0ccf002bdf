//! Shift embedding generator.
//!
//! A small network turns (mean interacted-user embedding, item attribute
//! embeddings) into a corrective shift added to the base embedding. It is
//! meta-trained on old items: predictions on a support minibatch give a
//! loss whose gradient takes one descent step on the shift itself, the
//! stepped shift is evaluated on a disjoint query minibatch, and the two
//! losses are blended. The gradient of that blend flows through the inner
//! step back into the generator parameters; the backbone stays frozen
//! throughout.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::beg::{base_embedding, top_k_neighbors, BegError, CooccurrenceIndex};
use crate::dataio::{InteractionLog, Record};
use crate::diffgraph::{
    adam_step, AdamConfig, AdamState, Graph, GraphError, NodeId, OptimError, Tensor,
};
use crate::recmodel::{forward_graph, DenseLayer, EmbeddingTable, ForwardMode, ModelParams, RecError, SampleBatch};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("empty interacted-user set; caller must substitute the global average")]
    EmptyUserSet,
    #[error("expected {expected} attribute embeddings, got {got}")]
    AttrArity { expected: usize, got: usize },
    #[error("episode minibatch is empty")]
    EmptyMinibatch,
    #[error("episode for item {item}: {detail}")]
    BadEpisode { item: u32, detail: String },
    #[error("no old item has at least {0} samples for episode construction")]
    NoEligibleItems(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rec(#[from] RecError),
    #[error(transparent)]
    Beg(#[from] BegError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Trainable state of the generator: the user refinement map, the attribute
/// refinement map, and the generator MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct SegParams {
    pub w_u: Tensor,
    pub w_f: Tensor,
    pub gen: Vec<DenseLayer>,
}

impl SegParams {
    /// `d` is the embedding width, `m` the number of item attribute fields.
    /// The generator output layer starts near zero so initial shifts stay
    /// small next to trained embeddings.
    pub fn init(d: usize, m: usize, gen_hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bu = 1.0 / (d as f64).sqrt();
        let w_u = Tensor::matrix(d, d, (0..d * d).map(|_| rng.random_range(-bu..bu)).collect());
        let bf = 1.0 / ((m * d) as f64).sqrt();
        let w_f = Tensor::matrix(m * d, d, (0..m * d * d).map(|_| rng.random_range(-bf..bf)).collect());
        let mut gen = Vec::new();
        let mut width = 2 * d;
        for &h in gen_hidden {
            gen.push(DenseLayer::random(width, h, &mut rng));
            width = h;
        }
        gen.push(DenseLayer::random_with_bound(width, d, 0.01, &mut rng));
        Self { w_u, w_f, gen }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_u.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_u, &self.w_f];
        for l in &self.gen {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_u, &mut self.w_f];
        for l in &mut self.gen {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

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
}

/// Where the pooled-user input comes from. The attribute-only baseline pins
/// it to the global user average so the generator sees no per-item
/// collaborative signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HuSource {
    ItemUsers,
    GlobalAverage,
}

/// Whether episodes add the neighbor-derived base embedding under the
/// shift, or train the shift to stand alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseSource {
    Neighbors,
    Zero,
}

#[derive(Debug, Clone)]
pub struct SegTrainConfig {
    /// inner gradient-descent step size
    pub eta: f64,
    /// blend weight of the support loss in the final objective
    pub beta: f64,
    /// samples per episode minibatch
    pub m: usize,
    pub epochs: usize,
    /// outer Adam learning rate
    pub lr: f64,
    /// stop gradients at the inner step instead of differentiating through it
    pub first_order: bool,
    pub k_neighbors: usize,
    pub gen_hidden: Vec<usize>,
    pub hu_source: HuSource,
    pub base_source: BaseSource,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            beta: 0.1,
            m: 20,
            epochs: 10,
            lr: 0.001,
            first_order: false,
            k_neighbors: 8,
            gen_hidden: vec![64, 64],
            hu_source: HuSource::ItemUsers,
            base_source: BaseSource::Neighbors,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if self.eta < 0.0 {
            return Err(SegError::InvalidConfig("eta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(SegError::InvalidConfig("beta must lie in [0,1]".into()));
        }
        if self.m == 0 {
            return Err(SegError::InvalidConfig("minibatch size m must be at least 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(SegError::InvalidConfig("k_neighbors must be at least 1".into()));
        }
        Ok(())
    }
}

/// One meta-training task: an item with two disjoint minibatches of its
/// interactions, M samples each.
#[derive(Debug, Clone)]
pub struct EpisodeBatchPair {
    pub item: u32,
    pub d_a: Vec<Record>,
    pub d_b: Vec<Record>,
}

impl EpisodeBatchPair {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |detail: String| SegError::BadEpisode { item: self.item, detail };
        if self.d_a.is_empty() || self.d_b.is_empty() {
            return Err(SegError::EmptyMinibatch);
        }
        if self.d_a.len() != self.d_b.len() {
            return Err(bad(format!("minibatch sizes differ: {} vs {}", self.d_a.len(), self.d_b.len())));
        }
        if self.d_a.iter().chain(&self.d_b).any(|r| r.item != self.item) {
            return Err(bad("sample references a different item".into()));
        }
        let key = |r: &Record| (r.user, r.ts, r.label);
        let a_keys: BTreeSet<_> = self.d_a.iter().map(key).collect();
        if self.d_b.iter().any(|r| a_keys.contains(&key(r))) {
            return Err(bad("support and query minibatches overlap".into()));
        }
        Ok(())
    }
}

/// Per-item constants of one episode: the base embedding and the pooled
/// interacted-user embedding, both fixed while the generator trains.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub v_beg: Vec<f64>,
    pub mean_user: Vec<f64>,
}

/// Arithmetic mean of the users' ID embedding rows.
pub fn mean_user_embedding(users: &BTreeSet<u32>, user_table: &EmbeddingTable) -> Result<Vec<f64>, SegError> {
    if users.is_empty() {
        return Err(SegError::EmptyUserSet);
    }
    let d = user_table.dim();
    let mut out = vec![0.0; d];
    for &u in users {
        for (o, &v) in out.iter_mut().zip(user_table.row(u)) {
            *o += v;
        }
    }
    let n = users.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Mean-pooled embedding of each item attribute field under the frozen
/// model, one d-vector per field.
pub fn item_attr_embeddings(model: &ModelParams, log: &InteractionLog, item: u32) -> Vec<Vec<f64>> {
    let d = model.schema.embed_dim;
    log.item_attrs[item as usize]
        .iter()
        .enumerate()
        .map(|(f, vals)| {
            let table = &model.item_attr_tables[f];
            let mut out = vec![0.0; d];
            for &v in vals {
                for (o, &x) in out.iter_mut().zip(table.row(v)) {
                    *o += x;
                }
            }
            if !vals.is_empty() {
                out.iter_mut().for_each(|x| *x /= vals.len() as f64);
            }
            out
        })
        .collect()
}

/// Node handles of one generator construction inside a caller-owned graph.
pub struct ShiftNodes {
    pub param_nodes: Vec<NodeId>,
    pub h_u: NodeId,
    pub h_f: NodeId,
    pub v_seg: NodeId,
}

/// Builds h_u, h_f and the generator MLP; returns the 1×d shift node.
pub fn shift_graph(
    g: &mut Graph,
    seg: &SegParams,
    mean_user: &[f64],
    attr_embeds: &[Vec<f64>],
    trainable: bool,
) -> Result<ShiftNodes, SegError> {
    let d = seg.embed_dim();
    let expected = seg.w_f.rows() / d;
    if attr_embeds.len() != expected {
        return Err(SegError::AttrArity { expected, got: attr_embeds.len() });
    }
    if mean_user.len() != d {
        return Err(SegError::InvalidConfig(format!(
            "pooled user embedding has length {}, expected {d}",
            mean_user.len()
        )));
    }

    let mut param_nodes = Vec::new();
    let leaf = |g: &mut Graph, t: &Tensor, name: &str, sink: &mut Vec<NodeId>| {
        if trainable {
            let n = g.param(t.clone(), name);
            sink.push(n);
            n
        } else {
            g.constant(t.clone())
        }
    };
    let w_u = leaf(g, &seg.w_u, "w_u", &mut param_nodes);
    let w_f = leaf(g, &seg.w_f, "w_f", &mut param_nodes);
    let gen_nodes: Vec<(NodeId, NodeId)> = seg
        .gen
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = leaf(g, &l.w, &format!("gen{i}.w"), &mut param_nodes);
            let b = leaf(g, &l.b, &format!("gen{i}.b"), &mut param_nodes);
            (w, b)
        })
        .collect();

    let mean = g.constant(Tensor::row(mean_user.to_vec()));
    let h_u = g.matmul(mean, w_u)?;
    let flat: Vec<f64> = attr_embeds.iter().flatten().copied().collect();
    let attrs = g.constant(Tensor::row(flat));
    let h_f = g.matmul(attrs, w_f)?;
    let mut h = g.concat_cols(&[h_u, h_f])?;
    for (i, (w, b)) in gen_nodes.iter().enumerate() {
        let lin = g.matmul(h, *w)?;
        let lin = g.add_row(lin, *b)?;
        h = if i + 1 < gen_nodes.len() { g.relu(lin) } else { lin };
    }
    Ok(ShiftNodes { param_nodes, h_u, h_f, v_seg: h })
}

fn eval_row(g: &mut Graph, node: NodeId) -> Result<Vec<f64>, SegError> {
    Ok(g.forward(node, &[])?.data().to_vec())
}

/// h_u = pooled-user embedding refined by the trainable map.
pub fn refined_user_repr(seg: &SegParams, mean_user: &[f64]) -> Result<Vec<f64>, SegError> {
    let mut g = Graph::new();
    let mean = g.constant(Tensor::row(mean_user.to_vec()));
    let w_u = g.constant(seg.w_u.clone());
    let h = g.matmul(mean, w_u)?;
    eval_row(&mut g, h)
}

/// h_f = concatenated attribute embeddings refined by the trainable map.
pub fn refined_attr_repr(seg: &SegParams, attr_embeds: &[Vec<f64>]) -> Result<Vec<f64>, SegError> {
    let d = seg.embed_dim();
    let expected = seg.w_f.rows() / d;
    if attr_embeds.len() != expected {
        return Err(SegError::AttrArity { expected, got: attr_embeds.len() });
    }
    let mut g = Graph::new();
    let flat: Vec<f64> = attr_embeds.iter().flatten().copied().collect();
    let attrs = g.constant(Tensor::row(flat));
    let w_f = g.constant(seg.w_f.clone());
    let h = g.matmul(attrs, w_f)?;
    eval_row(&mut g, h)
}

/// The generator output for one item, as a plain vector.
pub fn shift_embedding(seg: &SegParams, mean_user: &[f64], attr_embeds: &[Vec<f64>]) -> Result<Vec<f64>, SegError> {
    let mut g = Graph::new();
    let nodes = shift_graph(&mut g, seg, mean_user, attr_embeds, false)?;
    eval_row(&mut g, nodes.v_seg)
}

/// Everything one episode evaluation yields.
#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    pub loss_seg: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    /// gradients aligned with [`SegParams::tensors`]
    pub grads: Vec<Tensor>,
    pub v_seg: Vec<f64>,
    pub v_seg_stepped: Vec<f64>,
}

/// Node handles of one fully built episode objective.
pub struct EpisodeNodes {
    pub loss_seg: NodeId,
    pub loss_a: NodeId,
    pub loss_b: NodeId,
    pub v_seg: NodeId,
    pub v_seg_stepped: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Builds the full episode graph inside `g`. `v_beg_node` is the 1×d base
/// embedding; callers pass a constant except when instrumenting the
/// stop-gradient contract.
#[allow(clippy::too_many_arguments)]
pub fn episode_graph(
    g: &mut Graph,
    model: &ModelParams,
    log: &InteractionLog,
    seg: &SegParams,
    episode: &EpisodeBatchPair,
    mean_user: &[f64],
    v_beg_node: NodeId,
    cfg: &SegTrainConfig,
) -> Result<EpisodeNodes, SegError> {
    episode.validate()?;
    cfg.validate()?;
    let attr_embeds = item_attr_embeddings(model, log, episode.item);
    let shift = shift_graph(g, seg, mean_user, &attr_embeds, true)?;

    let broadcast_rows = |g: &mut Graph, row: NodeId, n: usize| -> Result<NodeId, GraphError> {
        let ones = g.constant(Tensor::matrix(n, 1, vec![1.0; n]));
        g.matmul(ones, row)
    };

    // support pass on the initial shift
    let v_a = g.add(v_beg_node, shift.v_seg)?;
    let batch_a = SampleBatch::from_records(log, &episode.d_a);
    let rep_a = broadcast_rows(g, v_a, batch_a.len())?;
    let fwd_a = forward_graph(g, model, &batch_a, ForwardMode::Frozen, Some(rep_a))?;
    let labels_a = g.constant(Tensor::matrix(batch_a.len(), 1, batch_a.labels.clone()));
    let loss_a = g.bce(fwd_a.prediction, labels_a)?;
    g.forward(loss_a, &[])?;

    // one descent step on the shift, kept differentiable unless first-order
    let inner = g.backward_to(loss_a, &[shift.v_seg])?;
    let mut grad_v = inner.node(shift.v_seg).expect("shift reaches the support loss");
    if cfg.first_order {
        let detached = g.value(grad_v).expect("inner gradient evaluated").clone();
        grad_v = g.constant(detached);
    }
    let v_seg_stepped = g.sgd_step(shift.v_seg, grad_v, cfg.eta)?;

    // query pass on the stepped shift
    let v_b = g.add(v_beg_node, v_seg_stepped)?;
    let batch_b = SampleBatch::from_records(log, &episode.d_b);
    let rep_b = broadcast_rows(g, v_b, batch_b.len())?;
    let fwd_b = forward_graph(g, model, &batch_b, ForwardMode::Frozen, Some(rep_b))?;
    let labels_b = g.constant(Tensor::matrix(batch_b.len(), 1, batch_b.labels.clone()));
    let loss_b = g.bce(fwd_b.prediction, labels_b)?;

    let wa = g.scale(loss_a, cfg.beta);
    let wb = g.scale(loss_b, 1.0 - cfg.beta);
    let loss_seg = g.add(wa, wb)?;
    g.forward(loss_seg, &[])?;

    Ok(EpisodeNodes {
        loss_seg,
        loss_a,
        loss_b,
        v_seg: shift.v_seg,
        v_seg_stepped,
        param_nodes: shift.param_nodes,
    })
}

/// Evaluates one episode and the gradient of its blended loss with respect
/// to the generator parameters only; the base embedding is a constant.
pub fn episode_loss(
    model: &ModelParams,
    log: &InteractionLog,
    seg: &SegParams,
    episode: &EpisodeBatchPair,
    ctx: &EpisodeContext,
    cfg: &SegTrainConfig,
) -> Result<EpisodeLoss, SegError> {
    let mut g = Graph::new();
    let v_beg = g.constant(Tensor::row(ctx.v_beg.clone()));
    let nodes = episode_graph(&mut g, model, log, seg, episode, &ctx.mean_user, v_beg, cfg)?;
    let grads_map = g.backward_to(nodes.loss_seg, &nodes.param_nodes)?;
    let grads = nodes
        .param_nodes
        .iter()
        .map(|&n| grads_map.tensor(&g, n).expect("gradient for every generator parameter").clone())
        .collect();
    Ok(EpisodeLoss {
        loss_seg: g.value(nodes.loss_seg).unwrap().item(),
        loss_a: g.value(nodes.loss_a).unwrap().item(),
        loss_b: g.value(nodes.loss_b).unwrap().item(),
        grads,
        v_seg: g.value(nodes.v_seg).unwrap().data().to_vec(),
        v_seg_stepped: g.value(nodes.v_seg_stepped).unwrap().data().to_vec(),
    })
}

/// Mean episode losses of one training epoch.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_seg: f64,
}

pub struct TrainedSeg {
    pub params: SegParams,
    pub curve: Vec<EpochLosses>,
}

/// Frozen surroundings of generator training.
pub struct SegTrainInputs<'a> {
    pub model: &'a ModelParams,
    pub log: &'a InteractionLog,
    /// old-item interactions reserved for cold-start-module training
    pub pool: &'a [Record],
    pub old_items: &'a BTreeSet<u32>,
    pub index: &'a CooccurrenceIndex,
    /// base embedding when an item has no scored neighbors
    pub fallback_base: &'a [f64],
    /// pooled-user input when pinned, or when an item has no pool users
    pub global_user_mean: &'a [f64],
}

/// Meta-trains the generator over per-item episodes: each eligible old item
/// contributes one episode per epoch with freshly sampled disjoint
/// minibatches. Backbone and embedding tables are read-only throughout.
pub fn train_seg(inputs: &SegTrainInputs, cfg: &SegTrainConfig, seed: u64) -> Result<TrainedSeg, SegError> {
    cfg.validate()?;
    let model = inputs.model;
    let d = model.schema.embed_dim;
    let m_fields = model.schema.item_fields.len();
    let mut seg = SegParams::init(d, m_fields, &cfg.gen_hidden, seed ^ 0x5e97_ab1e);

    // items with at least 2M pool samples can fill both minibatches
    let mut per_item: std::collections::BTreeMap<u32, Vec<Record>> = Default::default();
    for r in inputs.pool {
        per_item.entry(r.item).or_default().push(*r);
    }
    let eligible: Vec<u32> = per_item
        .iter()
        .filter(|(_, recs)| recs.len() >= 2 * cfg.m)
        .map(|(&i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(SegError::NoEligibleItems(2 * cfg.m));
    }

    // per-item constants: the base embedding (self excluded from its own
    // neighbor candidates) and the pooled-user input
    let mut contexts: std::collections::BTreeMap<u32, EpisodeContext> = Default::default();
    for &item in &eligible {
        let v_beg = match cfg.base_source {
            BaseSource::Zero => vec![0.0; d],
            BaseSource::Neighbors => match top_k_neighbors(inputs.index, item, inputs.old_items, cfg.k_neighbors) {
                Ok(list) => base_embedding(&list, &model.item_table)?
                    .unwrap_or_else(|| inputs.fallback_base.to_vec()),
                Err(BegError::UnindexedItem(_)) => inputs.fallback_base.to_vec(),
                Err(e) => return Err(e.into()),
            },
        };
        let mean_user = match cfg.hu_source {
            HuSource::GlobalAverage => inputs.global_user_mean.to_vec(),
            HuSource::ItemUsers => {
                let users: BTreeSet<u32> = per_item[&item].iter().map(|r| r.user).collect();
                mean_user_embedding(&users, &model.user_table)
                    .unwrap_or_else(|_| inputs.global_user_mean.to_vec())
            }
        };
        contexts.insert(item, EpisodeContext { v_beg, mean_user });
    }

    let shapes: Vec<&[usize]> = seg.tensors().iter().map(|t| t.shape()).collect();
    let mut state = AdamState::new(AdamConfig::with_lr(cfg.lr), &shapes);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        let (mut sum_a, mut sum_b, mut sum_seg) = (0.0, 0.0, 0.0);
        for &item in &order {
            let recs = &per_item[&item];
            let mut idx: Vec<usize> = (0..recs.len()).collect();
            idx.shuffle(&mut rng);
            let episode = EpisodeBatchPair {
                item,
                d_a: idx[..cfg.m].iter().map(|&i| recs[i]).collect(),
                d_b: idx[cfg.m..2 * cfg.m].iter().map(|&i| recs[i]).collect(),
            };
            let out = episode_loss(model, inputs.log, &seg, &episode, &contexts[&item], cfg)?;
            sum_a += out.loss_a;
            sum_b += out.loss_b;
            sum_seg += out.loss_seg;
            let grad_refs: Vec<&Tensor> = out.grads.iter().collect();
            let mut targets = seg.tensors_mut();
            adam_step(&mut targets, &grad_refs, &mut state)?;
        }
        let n = order.len() as f64;
        curve.push(EpochLosses {
            epoch,
            loss_a: sum_a / n,
            loss_b: sum_b / n,
            loss_seg: sum_seg / n,
        });
    }

    Ok(TrainedSeg { params: seg, curve })
}

/// Evaluates the support loss of a fixed episode at an arbitrary shift
/// value (no inner step). Used by the inner-step improvement check.
pub fn support_loss_at(
    model: &ModelParams,
    log: &InteractionLog,
    episode: &EpisodeBatchPair,
    v_beg: &[f64],
    shift: &[f64],
) -> Result<f64, SegError> {
    let mut batch = SampleBatch::from_records(log, &episode.d_a);
    let row: Vec<f64> = v_beg.iter().zip(shift).map(|(a, b)| a + b).collect();
    let n = batch.len();
    let mut data = Vec::with_capacity(n * row.len());
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    batch.item_override = Some(Tensor::matrix(n, row.len(), data));
    let preds = crate::recmodel::predict(model, &batch)?;
    Ok(crate::recmodel::bce_loss(preds.data(), &batch.labels)?)
}
