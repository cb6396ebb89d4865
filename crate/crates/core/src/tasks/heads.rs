//! Pairwise similarity and transition-probability heads.

use crate::corpus::DatasetRecord;
use crate::encoder::{encode_graph, EncoderConfig, NodeEmbeddings};
use crate::graph::CircuitGraph;
use crate::nn::{init_mlp, mlp, ModelParams, Scalar, Tape, Tensor, Var};

use super::config::RunConfig;
use super::fsl::channel;
use super::metrics::{eval_regression, RegressionMetrics};
use super::train::{init_model, train_loop, TrainRun};
use super::TaskError;

pub const SIM_HEAD: &str = "sim";
pub const TRANSITION_HEAD: &str = "trans";

/// `3d -> d -> 1` over `[e_i || e_j || e_i * e_j]`.
pub fn init_similarity_head(params: &mut ModelParams, d: usize, rng: &mut crate::rng::SplitMix64) {
    init_mlp(params, SIM_HEAD, &[3 * d, d, 1], rng);
}

/// Predicted similarity in `(0, 1)` for each row pair of `ei`, `ej`.
pub fn similarity_head<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams, ei: Var, ej: Var) -> Result<Var, TaskError> {
    let prod = tape.mul(ei, ej)?;
    let x = tape.concat(&[ei, ej, prod], 1)?;
    let h = mlp(tape, params, SIM_HEAD, 2, x)?;
    Ok(tape.sigmoid(h))
}

/// `d -> d -> 2`, sigmoid outputs `(P_0->1, P_1->0)`.
pub fn init_transition_head(params: &mut ModelParams, d: usize, rng: &mut crate::rng::SplitMix64) {
    init_mlp(params, TRANSITION_HEAD, &[d, d, 2], rng);
}

pub fn transition_head<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams, x: Var) -> Result<Var, TaskError> {
    let h = mlp(tape, params, TRANSITION_HEAD, 2, x)?;
    Ok(tape.sigmoid(h))
}

fn pairs_of(record: &DatasetRecord) -> Result<&[(usize, usize, f64)], TaskError> {
    record.sim_pairs.as_deref().ok_or_else(|| TaskError::MissingLabels { channel: "sim_pairs", record: record.id.clone() })
}

fn encode_batch(
    tape: &mut Tape<f32>,
    graphs: &[&CircuitGraph],
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<(NodeEmbeddings, Vec<usize>), TaskError> {
    let (union, offsets) = CircuitGraph::disjoint_union(graphs.iter().copied());
    let schedule = union.compute_levels()?;
    let emb = encode_graph(tape, &union, &schedule, params, config)?;
    Ok((emb, offsets))
}

/// L1 regression of the similarity head on the stored node pairs.
pub fn train_similarity(records: &[DatasetRecord], config: &RunConfig) -> Result<TrainRun, TaskError> {
    let graphs = records.iter().map(|r| r.circuit()).collect::<Result<Vec<_>, _>>()?;
    let pairs = records.iter().map(pairs_of).collect::<Result<Vec<_>, _>>()?;
    let d = config.model.d_model;
    let mut params = init_model(config, |p, rng| init_similarity_head(p, d, rng))?;
    let loss_curve = train_loop(graphs.len(), &config.train, &mut params, |params, batch, _, _, tape| {
        let members: Vec<&CircuitGraph> = batch.iter().map(|&i| &graphs[i]).collect();
        if batch.iter().all(|&i| pairs[i].is_empty()) {
            return Ok(None);
        }
        let (emb, offsets) = encode_batch(tape, &members, params, &config.model)?;
        let (mut li, mut ri, mut target) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &i) in batch.iter().enumerate() {
            for &(a, b, s) in pairs[i] {
                li.push(offsets[k] + a);
                ri.push(offsets[k] + b);
                target.push(s);
            }
        }
        let ei = emb.rows(tape, &li)?;
        let ej = emb.rows(tape, &ri)?;
        let pred = similarity_head(tape, params, ei, ej)?;
        let t = Tensor::from_f64(&[target.len(), 1], &target);
        let loss = tape.l1_loss(pred, &t)?;
        Ok(Some((loss, loss)))
    })?;
    Ok(TrainRun { config: config.clone(), seed: config.train.seed, loss_curve, params })
}

/// Predicted similarity for arbitrary node pairs of one circuit.
pub fn predict_similarity(
    graph: &CircuitGraph,
    pairs: &[(usize, usize)],
    params: &ModelParams,
    config: &EncoderConfig,
) -> Result<Vec<f64>, TaskError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::<f32>::new();
    let (emb, _) = encode_batch(&mut tape, &[graph], params, config)?;
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ei = emb.rows(&mut tape, &a)?;
    let ej = emb.rows(&mut tape, &b)?;
    let pred = similarity_head(&mut tape, params, ei, ej)?;
    Ok(tape.value(pred).data().iter().map(|&x| x as f64).collect())
}

pub fn evaluate_similarity(records: &[DatasetRecord], params: &ModelParams, config: &EncoderConfig) -> Result<RegressionMetrics, TaskError> {
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for r in records {
        let g = r.circuit()?;
        let pairs = pairs_of(r)?;
        let idx: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
        preds.extend(predict_similarity(&g, &idx, params, config)?);
        targets.extend(pairs.iter().map(|p| p.2));
    }
    eval_regression(&preds, &targets)
}

fn transition_targets(record: &DatasetRecord, n: usize) -> Result<Vec<f64>, TaskError> {
    let p01 = channel(record, "transition_p01")?;
    let p10 = channel(record, "transition_p10")?;
    if p01.len() != n || p10.len() != n {
        return Err(TaskError::MissingLabels { channel: "transition_p01", record: record.id.clone() });
    }
    Ok(p01.iter().zip(p10).flat_map(|(&a, &b)| [a, b]).collect())
}

/// L1 regression of both transition rates at every node.
pub fn train_transition(records: &[DatasetRecord], config: &RunConfig) -> Result<TrainRun, TaskError> {
    let graphs = records.iter().map(|r| r.circuit()).collect::<Result<Vec<_>, _>>()?;
    let targets = records.iter().zip(&graphs).map(|(r, g)| transition_targets(r, g.len())).collect::<Result<Vec<_>, _>>()?;
    let d = config.model.d_model;
    let mut params = init_model(config, |p, rng| init_transition_head(p, d, rng))?;
    let loss_curve = train_loop(graphs.len(), &config.train, &mut params, |params, batch, _, _, tape| {
        let members: Vec<&CircuitGraph> = batch.iter().map(|&i| &graphs[i]).collect();
        let (emb, _) = encode_batch(tape, &members, params, &config.model)?;
        let x = emb.stacked(tape)?;
        let pred = transition_head(tape, params, x)?;
        let t: Vec<f64> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let t = Tensor::from_f64(&[t.len() / 2, 2], &t);
        let loss = tape.l1_loss(pred, &t)?;
        Ok(Some((loss, loss)))
    })?;
    Ok(TrainRun { config: config.clone(), seed: config.train.seed, loss_curve, params })
}

/// Per-node `(P_0->1, P_1->0)` predictions.
pub fn predict_transition(graph: &CircuitGraph, params: &ModelParams, config: &EncoderConfig) -> Result<Vec<(f64, f64)>, TaskError> {
    let mut tape = Tape::<f32>::new();
    let (emb, _) = encode_batch(&mut tape, &[graph], params, config)?;
    let x = emb.stacked(&mut tape)?;
    let pred = transition_head(&mut tape, params, x)?;
    Ok(tape.value(pred).data().chunks(2).map(|c| (c[0] as f64, c[1] as f64)).collect())
}

pub fn evaluate_transition(records: &[DatasetRecord], params: &ModelParams, config: &EncoderConfig) -> Result<RegressionMetrics, TaskError> {
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for r in records {
        let g = r.circuit()?;
        targets.extend(transition_targets(r, g.len())?);
        preds.extend(predict_transition(&g, params, config)?.into_iter().flat_map(|(a, b)| [a, b]));
    }
    eval_regression(&preds, &targets)
}
