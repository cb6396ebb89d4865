//! Level-by-level transformer encoder.
//!
//! Every operator node is encoded from a short sequence: a learned token for
//! its operator type followed by the embeddings of its operands in stored
//! input order. Positions carry a learned table so operand order matters.
//! Nodes on the same level are independent and are batched together, grouped
//! by arity so no padding is needed. Only the output at the type token is
//! kept as the node's embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CircuitGraph, GraphError, LevelSchedule, NodeId, OperatorKind};
use crate::nn::{init_attention, init_linear, init_mlp, linear, mlp, multi_head_attention, AttnShape, ModelParams, NnError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node} consumes {pred}, which has no embedding yet")]
    Schedule { node: NodeId, pred: NodeId },
    #[error("circuit has no primary outputs")]
    NoOutputs,
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_per_step: usize,
    /// Sequence length: one type token plus the widest operand list.
    pub max_arity: usize,
    pub share_weights_across_levels: bool,
    /// Number of distinct step weight sets when weights are not shared;
    /// deeper levels reuse the last set.
    pub level_weight_sets: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_heads: 4,
            n_layers_per_step: 2,
            max_arity: 4,
            share_weights_across_levels: true,
            level_weight_sets: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let max_op = OperatorKind::ALL.iter().map(|k| k.arity()).max().unwrap_or(0);
        if self.max_arity < 1 + max_op {
            return Err(EncoderError::Config(format!("max_arity {} < {}", self.max_arity, 1 + max_op)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(EncoderError::Config(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.n_layers_per_step == 0 {
            return Err(EncoderError::Config("n_layers_per_step must be positive".into()));
        }
        if !self.share_weights_across_levels && self.level_weight_sets == 0 {
            return Err(EncoderError::Config("level_weight_sets must be positive".into()));
        }
        Ok(())
    }

    /// Parameter prefix of the step weights used at `level` (>= 1).
    pub fn step_prefix(&self, level: usize) -> String {
        if self.share_weights_across_levels {
            "enc.step".to_string()
        } else {
            format!("enc.step{}", level.clamp(1, self.level_weight_sets) - 1)
        }
    }

    fn ff_width(&self) -> usize {
        2 * self.d_model
    }
}

/// Initialise every encoder parameter under the `enc.` prefix.
pub fn init_encoder_params(config: &EncoderConfig, params: &mut ModelParams) -> Result<(), EncoderError> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = params.init_rng();
    params.init_uniform("enc.type_emb", &[OperatorKind::ALL.len(), d], 1, &mut rng);
    params.init_uniform("enc.pos", &[config.max_arity, d], 1, &mut rng);
    init_mlp(params, "enc.pi_mlp", &[1, d, d], &mut rng);
    let sets = if config.share_weights_across_levels { 1 } else { config.level_weight_sets };
    for s in 1..=sets {
        let prefix = config.step_prefix(s);
        for l in 0..config.n_layers_per_step {
            let lp = format!("{prefix}.l{l}");
            init_layer_norm(params, &format!("{lp}.ln1"), d);
            init_attention(params, &format!("{lp}.attn"), d, &mut rng);
            init_layer_norm(params, &format!("{lp}.ln2"), d);
            init_mlp(params, &format!("{lp}.ff"), &[d, config.ff_width(), d], &mut rng);
        }
        init_layer_norm(params, &format!("{prefix}.ln_f"), d);
    }
    init_linear(params, "enc.readout", d, d, &mut rng);
    Ok(())
}

fn init_layer_norm(params: &mut ModelParams, prefix: &str, d: usize) {
    params.init_const(format!("{prefix}.g"), &[d], 1.0);
    params.init_const(format!("{prefix}.b"), &[d], 0.0);
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams, prefix: &str, x: Var) -> Result<Var, NnError> {
    let g = tape.param(params, &format!("{prefix}.g"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x)?;
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// Per-node embeddings recorded on a tape: node `v` lives in row `.1` of
/// the matrix `.0`.
#[derive(Debug, Clone)]
pub struct NodeEmbeddings {
    locs: Vec<Option<(Var, usize)>>,
    level_computed: Vec<Option<usize>>,
    d_model: usize,
}

impl NodeEmbeddings {
    pub fn new(n: usize, d_model: usize) -> Self {
        NodeEmbeddings { locs: vec![None; n], level_computed: vec![None; n], d_model }
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn get(&self, v: NodeId) -> Option<(Var, usize)> {
        self.locs[v]
    }

    pub fn level_computed(&self, v: NodeId) -> Option<usize> {
        self.level_computed[v]
    }

    pub fn is_complete(&self) -> bool {
        self.locs.iter().all(Option::is_some)
    }

    fn set(&mut self, v: NodeId, loc: (Var, usize), level: usize) {
        assert!(self.locs[v].is_none(), "embedding of node {v} written twice");
        self.locs[v] = Some(loc);
        self.level_computed[v] = Some(level);
    }

    /// The embedding of `v` as a host vector.
    pub fn vector<T: Scalar>(&self, tape: &Tape<T>, v: NodeId) -> Option<Vec<T>> {
        let (var, row) = self.locs[v]?;
        Some(tape.value(var).row(row).to_vec())
    }

    /// All node embeddings stacked in node order, `[n, d_model]`.
    pub fn stacked<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var, EncoderError> {
        self.rows(tape, &(0..self.len()).collect::<Vec<_>>())
    }

    /// Selected node embeddings stacked in the given order.
    pub fn rows<T: Scalar>(&self, tape: &mut Tape<T>, nodes: &[NodeId]) -> Result<Var, EncoderError> {
        let srcs = nodes
            .iter()
            .map(|&v| self.locs[v].ok_or(EncoderError::Schedule { node: v, pred: v }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tape.stack_rows(&srcs)?)
    }
}

/// Level-0 embeddings: `MLP_pi([value]) + type_emb[kind]`, where the scalar
/// is the PI probability, a pseudo-PI's initial state, or 0 for CONST0.
pub fn init_level0<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<NodeEmbeddings, EncoderError> {
    let mut emb = NodeEmbeddings::new(graph.len(), config.d_model);
    let sources: Vec<NodeId> = schedule.level(0).to_vec();
    if sources.is_empty() {
        return Ok(emb);
    }
    let values: Vec<f64> = sources.iter().map(|&v| graph.source_value(v).unwrap_or(0.0)).collect();
    let x = tape.constant(Tensor::from_f64(&[sources.len(), 1], &values));
    let h = mlp(tape, params, "enc.pi_mlp", 2, x)?;
    let table = tape.param(params, "enc.type_emb")?;
    let kinds: Vec<usize> = sources.iter().map(|&v| graph.kind(v).index()).collect();
    let types = tape.embedding_lookup(table, &kinds)?;
    let out = tape.add(h, types)?;
    for (row, &v) in sources.iter().enumerate() {
        emb.set(v, (out, row), 0);
    }
    Ok(emb)
}

/// Token matrix `[max_arity, d]` for node `v` plus its pad mask (`true` =
/// padding). Pad rows hold zeros.
pub fn build_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    v: NodeId,
    emb: &NodeEmbeddings,
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<(Var, Vec<bool>), EncoderError> {
    let inputs = graph.inputs(v);
    if 1 + inputs.len() > config.max_arity {
        return Err(EncoderError::Config(format!("node {v} needs {} tokens, max_arity is {}", 1 + inputs.len(), config.max_arity)));
    }
    let table = tape.param(params, "enc.type_emb")?;
    let mut srcs = vec![(table, graph.kind(v).index())];
    for &u in inputs {
        srcs.push(emb.get(u).ok_or(EncoderError::Schedule { node: v, pred: u })?);
    }
    let pad = config.max_arity - srcs.len();
    if pad > 0 {
        let zeros = tape.constant(Tensor::zeros(&[1, config.d_model]));
        srcs.extend(std::iter::repeat((zeros, 0)).take(pad));
    }
    let mask = (0..config.max_arity).map(|i| i > inputs.len()).collect();
    Ok((tape.stack_rows(&srcs)?, mask))
}

/// Run the transformer step on `batch` sequences of length `t`, laid out as
/// `[batch * t, d]`, and return the token-0 outputs `[batch, d]`.
pub fn encode_step_batch<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    batch: usize,
    t: usize,
    key_mask: Option<&[bool]>,
    params: &ModelParams,
    config: &EncoderConfig,
    prefix: &str,
) -> Result<Var, EncoderError> {
    let d = config.d_model;
    if tape.shape(tokens) != [batch * t, d] || t > config.max_arity || t == 0 {
        return Err(NnError::Shape { op: "encode_step", lhs: tape.shape(tokens).to_vec(), rhs: vec![batch * t, d] }.into());
    }
    let pos_table = tape.param(params, "enc.pos")?;
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
    let pos = tape.embedding_lookup(pos_table, &pos_ids)?;
    let mut h = tape.add(tokens, pos)?;
    let heads = config.n_heads;
    let first_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
    for l in 0..config.n_layers_per_step {
        let lp = format!("{prefix}.l{l}");
        let last = l + 1 == config.n_layers_per_step;
        let a = layer_norm(tape, params, &format!("{lp}.ln1"), h)?;
        if last {
            // Only token 0 survives, so the final layer needs just its query.
            let q = tape.gather_rows(a, &first_rows)?;
            let shape = AttnShape { batch, tq: 1, tk: t, heads };
            let att = multi_head_attention(tape, params, &format!("{lp}.attn"), q, a, shape, key_mask)?;
            let h0 = tape.gather_rows(h, &first_rows)?;
            h = tape.add(h0, att)?;
        } else {
            let shape = AttnShape { batch, tq: t, tk: t, heads };
            let att = multi_head_attention(tape, params, &format!("{lp}.attn"), a, a, shape, key_mask)?;
            h = tape.add(h, att)?;
        }
        let f = layer_norm(tape, params, &format!("{lp}.ln2"), h)?;
        let f = mlp(tape, params, &format!("{lp}.ff"), 2, f)?;
        h = tape.add(h, f)?;
    }
    Ok(layer_norm(tape, params, &format!("{prefix}.ln_f"), h)?)
}

/// One sequence from [`build_sequence`] through the step; returns `[1, d]`.
pub fn encode_step<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    mask: &[bool],
    params: &ModelParams,
    config: &EncoderConfig,
    prefix: &str,
) -> Result<Var, EncoderError> {
    let t = tape.shape(seq)[0];
    encode_step_batch(tape, seq, 1, t, Some(mask), params, config, prefix)
}

/// How operator nodes of one level are pushed through the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Batching {
    /// One unpadded batch per (level, arity) group.
    #[default]
    Level,
    /// One padded `max_arity` sequence per node.
    PerNode,
}

pub fn encode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<NodeEmbeddings, EncoderError> {
    encode_graph_with(tape, graph, schedule, params, config, Batching::Level)
}

pub fn encode_graph_with<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    params: &ModelParams,
    config: &EncoderConfig,
    batching: Batching,
) -> Result<NodeEmbeddings, EncoderError> {
    config.validate()?;
    let mut emb = init_level0(tape, graph, schedule, params, config)?;
    for level in 1..schedule.num_levels() {
        let prefix = config.step_prefix(level);
        let nodes = schedule.level(level);
        match batching {
            Batching::PerNode => {
                for &v in nodes {
                    let (seq, mask) = build_sequence(tape, graph, v, &emb, params, config)?;
                    let out = encode_step(tape, seq, &mask, params, config, &prefix)?;
                    emb.set(v, (out, 0), level);
                }
            }
            Batching::Level => {
                for arity in 1..config.max_arity {
                    let group: Vec<NodeId> = nodes.iter().copied().filter(|&v| graph.inputs(v).len() == arity).collect();
                    if group.is_empty() {
                        continue;
                    }
                    let table = tape.param(params, "enc.type_emb")?;
                    let mut srcs = Vec::with_capacity(group.len() * (arity + 1));
                    for &v in &group {
                        srcs.push((table, graph.kind(v).index()));
                        for &u in graph.inputs(v) {
                            srcs.push(emb.get(u).ok_or(EncoderError::Schedule { node: v, pred: u })?);
                        }
                    }
                    let tokens = tape.stack_rows(&srcs)?;
                    let out = encode_step_batch(tape, tokens, group.len(), arity + 1, None, params, config, &prefix)?;
                    for (row, &v) in group.iter().enumerate() {
                        emb.set(v, (out, row), level);
                    }
                }
            }
        }
    }
    if !emb.is_complete() {
        let v = (0..graph.len()).find(|&v| emb.get(v).is_none()).unwrap_or(0);
        return Err(EncoderError::Schedule { node: v, pred: v });
    }
    Ok(emb)
}

/// Circuit embedding: linear projection of the mean primary-output
/// embedding, `[1, d]`.
pub fn graph_readout<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    emb: &NodeEmbeddings,
    params: &ModelParams,
) -> Result<Var, EncoderError> {
    if graph.outputs().is_empty() {
        return Err(EncoderError::NoOutputs);
    }
    let outs = emb.rows(tape, graph.outputs())?;
    let mean = tape.mean(outs, 0)?;
    let mean = tape.reshape(mean, &[1, emb.d_model()])?;
    Ok(linear(tape, params, "enc.readout", mean)?)
}

/// Encode a whole circuit and return its readout.
pub fn encode_circuit<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &CircuitGraph,
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<(NodeEmbeddings, Var), EncoderError> {
    let schedule = graph.compute_levels()?;
    let emb = encode_graph(tape, graph, &schedule, params, config)?;
    let r = graph_readout(tape, graph, &emb, params)?;
    Ok((emb, r))
}
