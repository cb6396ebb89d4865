//! Contrastive training of circuit readouts and retrieval evaluation.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{random_equivalent, DatasetRecord};
use crate::encoder::{encode_graph, EncoderConfig, EncoderError, NodeEmbeddings};
use crate::graph::CircuitGraph;
use crate::nn::{linear, ModelParams, Scalar, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded};

use super::config::RunConfig;
use super::metrics::RetrievalItem;
use super::train::{init_model, train_loop, TrainRun};
use super::TaskError;

const READOUT_CHUNK: usize = 32;
/// Added to logits that must not compete: a query against itself and
/// against other circuits' positives.
const EXCLUDED_LOGIT: f64 = -1e9;

/// How the positive of a circuit is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositiveMode {
    /// One to three function-preserving rewrites.
    #[default]
    Rewrite,
    /// An exact copy.
    Identity,
}

pub fn positive_for(graph: &CircuitGraph, mode: PositiveMode, seed: u64) -> CircuitGraph {
    match mode {
        PositiveMode::Rewrite => random_equivalent(graph, seed).0,
        PositiveMode::Identity => graph.clone(),
    }
}

/// Readouts of every component of a disjoint union, `[components, d]`.
pub fn component_readouts<T: Scalar>(
    tape: &mut Tape<T>,
    union: &CircuitGraph,
    offsets: &[usize],
    emb: &NodeEmbeddings,
    params: &ModelParams,
) -> Result<Var, TaskError> {
    let mut means = Vec::with_capacity(offsets.len() - 1);
    for w in offsets.windows(2) {
        let outs: Vec<usize> = union.outputs().iter().copied().filter(|&o| o >= w[0] && o < w[1]).collect();
        if outs.is_empty() {
            return Err(EncoderError::NoOutputs.into());
        }
        let rows = emb.rows(tape, &outs)?;
        let m = tape.mean(rows, 0)?;
        means.push(tape.reshape(m, &[1, emb.d_model()])?);
    }
    let stacked = tape.concat(&means, 0)?;
    Ok(linear(tape, params, "enc.readout", stacked)?)
}

/// Circuit embeddings for many graphs, computed in chunks.
pub fn readouts(graphs: &[CircuitGraph], params: &ModelParams, config: &EncoderConfig) -> Result<Vec<Vec<f64>>, TaskError> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(READOUT_CHUNK) {
        let (union, offsets) = CircuitGraph::disjoint_union(chunk);
        let mut tape = Tape::<f32>::new();
        let schedule = union.compute_levels()?;
        let emb = encode_graph(&mut tape, &union, &schedule, params, config)?;
        let r = component_readouts(&mut tape, &union, &offsets, &emb, params)?;
        for i in 0..chunk.len() {
            out.push(tape.value(r).row(i).iter().map(|&x| x as f64).collect());
        }
    }
    Ok(out)
}

/// InfoNCE over a batch: query `i` is circuit `i`, its positive is the
/// rewritten circuit `i`, and the other `B - 1` circuits of the batch are its
/// negatives.
pub fn train_contrastive(records: &[DatasetRecord], config: &RunConfig, mode: PositiveMode) -> Result<TrainRun, TaskError> {
    if config.train.batch_size < 2 {
        return Err(TaskError::BatchTooSmall(config.train.batch_size));
    }
    let graphs = records.iter().map(|r| r.circuit()).collect::<Result<Vec<_>, _>>()?;
    let mut params = init_model(config, |_, _| {})?;
    let tau = config.train.temperature;
    let loss_curve = train_loop(graphs.len(), &config.train, &mut params, |params, batch, seed, _, tape| {
        let b = batch.len();
        if b < 2 {
            return Ok(None);
        }
        let positives: Vec<CircuitGraph> =
            batch.iter().enumerate().map(|(k, &i)| positive_for(&graphs[i], mode, derive_seed(seed, k as u64))).collect();
        let members = batch.iter().map(|&i| &graphs[i]).chain(positives.iter());
        let (union, offsets) = CircuitGraph::disjoint_union(members);
        let schedule = union.compute_levels()?;
        let emb = encode_graph(tape, &union, &schedule, params, &config.model)?;
        let r = component_readouts(tape, &union, &offsets, &emb, params)?;
        let q = tape.slice(r, 0, 0, b)?;
        let p = tape.slice(r, 0, b, 2 * b)?;
        let keys = tape.concat(&[p, q], 0)?;
        let sims = crate::nn::cosine_matrix(tape, q, keys)?;
        let logits = tape.scale(sims, 1.0 / tau);
        // Row i keeps its own positive and the other circuits' queries.
        let mut mask = vec![0.0; b * 2 * b];
        for i in 0..b {
            for j in 0..b {
                if j != i {
                    mask[i * 2 * b + j] = EXCLUDED_LOGIT;
                }
            }
            mask[i * 2 * b + b + i] = EXCLUDED_LOGIT;
        }
        let mask = tape.constant(Tensor::from_f64(&[b, 2 * b], &mask));
        let logits = tape.add(logits, mask)?;
        let logp = tape.log_softmax(logits, 1)?;
        let picked: Vec<usize> = (0..b).map(|i| i * 2 * b + i).collect();
        let lp = tape.select(logp, &picked)?;
        let mean = tape.mean(lp, 0)?;
        let loss = tape.scale(mean, -1.0);
        Ok(Some((loss, loss)))
    })?;
    Ok(TrainRun { config: config.clone(), seed: config.train.seed, loss_curve, params })
}

fn pool_indices(n: usize, pool_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, TaskError> {
    if pool_size < 1 || n < pool_size {
        return Err(TaskError::Metrics(format!("pool of {pool_size} needs at least that many circuits, have {n}")));
    }
    let mut rng = seeded(seed);
    Ok((0..n)
        .map(|i| sample(&mut rng, n - 1, pool_size - 1).into_iter().map(|j| if j >= i { j + 1 } else { j }).collect())
        .collect())
}

/// Retrieval items over held-out circuits: each circuit queries for its own
/// rewritten positive among the positives of `pool_size - 1` others.
pub fn retrieval_items(
    graphs: &[CircuitGraph],
    params: &ModelParams,
    config: &EncoderConfig,
    pool_size: usize,
    seed: u64,
) -> Result<Vec<RetrievalItem>, TaskError> {
    let pools = pool_indices(graphs.len(), pool_size, derive_seed(seed, 1))?;
    let positives: Vec<CircuitGraph> =
        graphs.iter().enumerate().map(|(i, g)| positive_for(g, PositiveMode::Rewrite, derive_seed(seed, 1000 + i as u64))).collect();
    let q = readouts(graphs, params, config)?;
    let p = readouts(&positives, params, config)?;
    Ok(pools
        .into_iter()
        .enumerate()
        .map(|(i, pool)| RetrievalItem {
            query: q[i].clone(),
            positive: p[i].clone(),
            distractors: pool.into_iter().map(|j| p[j].clone()).collect(),
        })
        .collect())
}

/// The same pools filled with independent Gaussian vectors.
pub fn null_retrieval_items(n: usize, pool_size: usize, d: usize, seed: u64) -> Result<Vec<RetrievalItem>, TaskError> {
    let pools = pool_indices(n, pool_size, derive_seed(seed, 1))?;
    let mut rng = seeded(derive_seed(seed, 2));
    let mut draw = || -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let q: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
    let p: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
    Ok(pools
        .into_iter()
        .enumerate()
        .map(|(i, pool)| RetrievalItem {
            query: q[i].clone(),
            positive: p[i].clone(),
            distractors: pool.into_iter().map(|j| p[j].clone()).collect(),
        })
        .collect())
}
