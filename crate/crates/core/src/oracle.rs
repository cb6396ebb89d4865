//! Exact and sampled logic simulation. Produces every ground-truth label:
//! global (joint-distribution) probabilities, local (independence-assuming)
//! probabilities, their difference, pairwise functional similarity and
//! sequential transition rates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CircuitGraph, GraphError, LevelSchedule, NodeId, OperatorKind};
use crate::rng;

pub const DEFAULT_EXHAUSTIVE_MAX_INPUTS: usize = 20;
pub const DEFAULT_MC_SAMPLES: usize = 1 << 15;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("exhaustive simulation over {inputs} inputs exceeds the cap of {cap}")]
    TooManyInputs { inputs: usize, cap: usize },
    #[error("{kind} expects {expected} input probabilities, got {found}")]
    Arity { kind: OperatorKind, expected: usize, found: usize },
    #[error("{0} is a source node; its probability is its own parameter")]
    SourceNode(OperatorKind),
    #[error("NotSequential: circuit has no latches")]
    NotSequential,
    #[error("transition labels need at least 2 cycles, got {0}")]
    TooFewCycles(usize),
    #[error("pattern source must have at least one pattern")]
    NoPatterns,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternSource {
    Exhaustive,
    MonteCarlo { seed: u64, patterns: usize },
}

impl PatternSource {
    /// Exhaustive when the PI count is within `cap`, otherwise sampled.
    pub fn auto(graph: &CircuitGraph, cap: usize, mc_samples: usize, seed: u64) -> Self {
        if graph.pis().len() <= cap {
            PatternSource::Exhaustive
        } else {
            PatternSource::MonteCarlo { seed, patterns: mc_samples }
        }
    }
}

/// Per-node bit vectors under a shared pattern set. Bit `t` of a node's row
/// is its value under pattern `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthTableSet {
    n_patterns: usize,
    source: PatternSource,
    bits: Vec<Vec<u64>>,
}

impl TruthTableSet {
    pub fn n_patterns(&self) -> usize {
        self.n_patterns
    }

    pub fn source(&self) -> PatternSource {
        self.source
    }

    pub fn row(&self, v: NodeId) -> &[u64] {
        &self.bits[v]
    }

    pub fn bit(&self, v: NodeId, t: usize) -> bool {
        (self.bits[v][t / 64] >> (t % 64)) & 1 == 1
    }

    /// Row of node `v` unpacked to 0/1 values.
    pub fn table(&self, v: NodeId) -> Vec<u8> {
        (0..self.n_patterns).map(|t| self.bit(v, t) as u8).collect()
    }

    pub fn popcount(&self, v: NodeId) -> u64 {
        self.bits[v].iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn hamming(&self, i: NodeId, j: NodeId) -> u64 {
        self.bits[i].iter().zip(&self.bits[j]).map(|(a, b)| (a ^ b).count_ones() as u64).sum()
    }
}

fn tail_mask(n_patterns: usize, words: usize) -> Vec<u64> {
    let mut mask = vec![!0u64; words];
    let rem = n_patterns % 64;
    if rem != 0 {
        mask[words - 1] = (1u64 << rem) - 1;
    }
    mask
}

/// Column of input `bit` (bit position within the pattern index) for exhaustive enumeration.
fn exhaustive_column(bit: usize, words: usize) -> Vec<u64> {
    const LOW: [u64; 6] = [
        0xAAAA_AAAA_AAAA_AAAA,
        0xCCCC_CCCC_CCCC_CCCC,
        0xF0F0_F0F0_F0F0_F0F0,
        0xFF00_FF00_FF00_FF00,
        0xFFFF_0000_FFFF_0000,
        0xFFFF_FFFF_0000_0000,
    ];
    if bit < 6 {
        vec![LOW[bit]; words]
    } else {
        (0..words).map(|w| if (w >> (bit - 6)) & 1 == 1 { !0 } else { 0 }).collect()
    }
}

fn eval_word(kind: OperatorKind, inputs: &[NodeId], bits: &[Vec<u64>], w: usize, mask: u64) -> u64 {
    match kind {
        OperatorKind::And2 => bits[inputs[0]][w] & bits[inputs[1]][w],
        OperatorKind::Not => !bits[inputs[0]][w] & mask,
        OperatorKind::Mux => {
            let s = bits[inputs[0]][w];
            (s & bits[inputs[2]][w]) | (bits[inputs[1]][w] & !s)
        }
        OperatorKind::Const0 => 0,
        OperatorKind::Pi | OperatorKind::PseudoPi => unreachable!("sources are seeded before evaluation"),
    }
}

/// Bit-parallel simulation in level order. PIs are enumerated (PI 0 is the
/// most significant bit of the pattern index) or sampled from their Bernoulli
/// parameters; pseudo-PIs hold their initial state.
pub fn simulate(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    source: PatternSource,
) -> Result<TruthTableSet, OracleError> {
    simulate_with_cap(graph, schedule, source, DEFAULT_EXHAUSTIVE_MAX_INPUTS)
}

pub fn simulate_with_cap(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    source: PatternSource,
    cap: usize,
) -> Result<TruthTableSet, OracleError> {
    let pis = graph.pis();
    let n_patterns = match source {
        PatternSource::Exhaustive => {
            if pis.len() > cap {
                return Err(OracleError::TooManyInputs { inputs: pis.len(), cap });
            }
            1usize << pis.len()
        }
        PatternSource::MonteCarlo { patterns, .. } => {
            if patterns == 0 {
                return Err(OracleError::NoPatterns);
            }
            patterns
        }
    };
    let words = n_patterns.div_ceil(64);
    let mask = tail_mask(n_patterns, words);
    let mut bits = vec![Vec::new(); graph.len()];

    match source {
        PatternSource::Exhaustive => {
            let n = pis.len();
            for (i, &v) in pis.iter().enumerate() {
                let mut col = exhaustive_column(n - 1 - i, words);
                col.iter_mut().zip(&mask).for_each(|(c, m)| *c &= m);
                bits[v] = col;
            }
        }
        PatternSource::MonteCarlo { seed, .. } => {
            let mut rng = rng::seeded(seed);
            for &v in &pis {
                let p = graph.source_value(v).unwrap_or(0.5);
                let mut col = vec![0u64; words];
                for t in 0..n_patterns {
                    if rng.gen::<f64>() < p {
                        col[t / 64] |= 1 << (t % 64);
                    }
                }
                bits[v] = col;
            }
        }
    }
    for v in graph.pseudo_pis() {
        let one = graph.source_value(v) == Some(1.0);
        bits[v] = if one { mask.clone() } else { vec![0; words] };
    }

    for v in schedule.order() {
        let node = &graph.nodes()[v];
        if matches!(node.kind, OperatorKind::Pi | OperatorKind::PseudoPi) {
            continue;
        }
        let row: Vec<u64> = (0..words).map(|w| eval_word(node.kind, &node.inputs, &bits, w, mask[w])).collect();
        bits[v] = row;
    }
    Ok(TruthTableSet { n_patterns, source, bits })
}

/// Probability weight of each exhaustive pattern under independent Bernoulli PIs.
/// `None` when every PI parameter is 0.5 (uniform weights).
fn pattern_weights(graph: &CircuitGraph) -> Option<Vec<f64>> {
    let params: Vec<f64> = graph.pis().iter().map(|&v| graph.source_value(v).unwrap_or(0.5)).collect();
    if params.iter().all(|&p| p == 0.5) {
        return None;
    }
    // PI 0 is the most significant bit of the pattern index.
    let mut weights = vec![1.0f64];
    for &p in &params {
        let mut next = Vec::with_capacity(weights.len() * 2);
        for &w in &weights {
            next.push(w * (1.0 - p));
            next.push(w * p);
        }
        weights = next;
    }
    Some(weights)
}

/// Expected value of every node: probability-weighted mean over exhaustive
/// patterns, or the sample frequency for Monte-Carlo tables.
pub fn global_function(graph: &CircuitGraph, tts: &TruthTableSet) -> Vec<f64> {
    let weights = match tts.source {
        PatternSource::Exhaustive => pattern_weights(graph),
        PatternSource::MonteCarlo { .. } => None,
    };
    let p = tts.n_patterns as f64;
    (0..graph.len())
        .map(|v| match &weights {
            None => tts.popcount(v) as f64 / p,
            Some(weights) => {
                let mut acc = 0.0;
                for (w, &word) in tts.bits[v].iter().enumerate() {
                    let mut word = word;
                    while word != 0 {
                        let b = word.trailing_zeros() as usize;
                        acc += weights[w * 64 + b];
                        word &= word - 1;
                    }
                }
                acc.min(1.0)
            }
        })
        .collect()
}

/// The operator applied to input expectations as if the inputs were independent.
pub fn local_function(kind: OperatorKind, input_probs: &[f64]) -> Result<f64, OracleError> {
    if input_probs.len() != kind.arity() {
        return Err(OracleError::Arity { kind, expected: kind.arity(), found: input_probs.len() });
    }
    Ok(match kind {
        OperatorKind::And2 => input_probs[0] * input_probs[1],
        OperatorKind::Not => 1.0 - input_probs[0],
        OperatorKind::Mux => {
            let (s, a, b) = (input_probs[0], input_probs[1], input_probs[2]);
            s * b + (1.0 - s) * a
        }
        OperatorKind::Const0 => 0.0,
        OperatorKind::Pi | OperatorKind::PseudoPi => return Err(OracleError::SourceNode(kind)),
    })
}

/// Local function of node `v` given probabilities for every node; sources
/// return their own parameter.
pub fn node_local(graph: &CircuitGraph, v: NodeId, probs: &[f64]) -> f64 {
    if let Some(value) = graph.source_value(v) {
        return value;
    }
    let kind = graph.kind(v);
    let inputs = graph.inputs(v);
    match kind {
        OperatorKind::And2 => probs[inputs[0]] * probs[inputs[1]],
        OperatorKind::Not => 1.0 - probs[inputs[0]],
        OperatorKind::Mux => {
            let (s, a, b) = (probs[inputs[0]], probs[inputs[1]], probs[inputs[2]]);
            s * b + (1.0 - s) * a
        }
        _ => unreachable!("sources handled above"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeFunctionLabels {
    pub global_prob: f64,
    pub local_prob: f64,
    pub shift: f64,
}

/// Chooses the shift so that `local + shift` lands on `global` when
/// representable and never leaves `[0, 1]`.
fn exact_shift(global: f64, local: f64) -> f64 {
    // Weighted sums can overshoot 1 by an ulp.
    let global = global.clamp(0.0, 1.0);
    let mut shift = global - local;
    for _ in 0..4 {
        let sum = local + shift;
        if sum == global {
            break;
        }
        shift = if sum > global { next_down(shift) } else { next_up(shift) };
    }
    if local + shift > 1.0 {
        shift = 1.0 - local;
        while local + shift > 1.0 {
            shift = next_down(shift);
        }
    }
    if local + shift < 0.0 {
        shift = -local;
    }
    shift
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Global, local and shift labels for every node. Local values are computed
/// from the predecessors' true global probabilities, and the stored global
/// satisfies `global == local + shift` exactly.
pub fn function_shift_labels(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    source: PatternSource,
) -> Result<Vec<NodeFunctionLabels>, OracleError> {
    let tts = simulate(graph, schedule, source)?;
    Ok(function_shift_from_tables(graph, schedule, &tts))
}

pub fn function_shift_from_tables(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    tts: &TruthTableSet,
) -> Vec<NodeFunctionLabels> {
    let truth = global_function(graph, tts);
    let mut stored = vec![0.0f64; graph.len()];
    let mut labels = vec![NodeFunctionLabels { global_prob: 0.0, local_prob: 0.0, shift: 0.0 }; graph.len()];
    for v in schedule.order() {
        // Sources keep their exact parameter; the weighted pattern sum can
        // be an ulp off, and inference starts from the parameter.
        let (global, local) = if graph.kind(v).is_source() {
            let p = graph.source_value(v).unwrap_or(truth[v]);
            (p, p)
        } else {
            (truth[v], node_local(graph, v, &stored))
        };
        let shift = exact_shift(global, local);
        stored[v] = local + shift;
        labels[v] = NodeFunctionLabels { global_prob: stored[v], local_prob: local, shift };
    }
    labels
}

/// `1 - hamming(T_i, T_j) / P` for each pair.
pub fn similarity_labels(tts: &TruthTableSet, pairs: &[(NodeId, NodeId)]) -> Vec<f64> {
    let p = tts.n_patterns as f64;
    pairs.iter().map(|&(i, j)| 1.0 - tts.hamming(i, j) as f64 / p).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub n_cycles: usize,
    pub seed: u64,
}

/// Per-node `(P_0->1, P_1->0)`.
pub type TransitionRates = (f64, f64);

/// Runs the sequential circuit cycle by cycle and returns per-node rise and
/// fall counts. `fill_inputs` writes one word per PI for each cycle; lanes
/// outside `lane_mask` are ignored.
fn run_sequence(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    n_cycles: usize,
    lane_mask: u64,
    mut fill_inputs: impl FnMut(usize, &mut [u64]),
) -> (Vec<u64>, Vec<u64>) {
    let pis = graph.pis();
    let n = graph.len();
    let mut state: Vec<u64> = vec![0; n];
    for (&q, latch) in graph.latches() {
        state[q] = if latch.init { lane_mask } else { 0 };
    }
    let mut pi_words = vec![0u64; pis.len()];
    let mut prev: Option<Vec<u64>> = None;
    let mut rise = vec![0u64; n];
    let mut fall = vec![0u64; n];
    for cycle in 0..n_cycles {
        fill_inputs(cycle, &mut pi_words);
        let mut cur = vec![0u64; n];
        for (&v, &w) in pis.iter().zip(&pi_words) {
            cur[v] = w & lane_mask;
        }
        for &q in graph.latches().keys() {
            cur[q] = state[q];
        }
        for v in schedule.order() {
            let node = &graph.nodes()[v];
            let word = match node.kind {
                OperatorKind::Pi | OperatorKind::PseudoPi => continue,
                OperatorKind::And2 => cur[node.inputs[0]] & cur[node.inputs[1]],
                OperatorKind::Not => !cur[node.inputs[0]] & lane_mask,
                OperatorKind::Mux => {
                    let s = cur[node.inputs[0]];
                    (s & cur[node.inputs[2]]) | (cur[node.inputs[1]] & !s)
                }
                OperatorKind::Const0 => 0,
            };
            cur[v] = word;
        }
        if let Some(prev) = &prev {
            for v in 0..n {
                rise[v] += (!prev[v] & cur[v] & lane_mask).count_ones() as u64;
                fall[v] += (prev[v] & !cur[v] & lane_mask).count_ones() as u64;
            }
        }
        for (&q, latch) in graph.latches() {
            state[q] = cur[latch.next];
        }
        prev = Some(cur);
    }
    (rise, fall)
}

const LANES: u64 = 64;

/// Transition rates under random PI streams. 64 independent streams run in
/// parallel bit lanes; counts are normalized by the number of cycle
/// boundaries observed, `64 * (n_cycles - 1)`.
pub fn transition_labels(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    spec: TransitionSpec,
) -> Result<Vec<TransitionRates>, OracleError> {
    if !graph.is_sequential() {
        return Err(OracleError::NotSequential);
    }
    if spec.n_cycles < 2 {
        return Err(OracleError::TooFewCycles(spec.n_cycles));
    }
    let params: Vec<f64> = graph.pis().iter().map(|&v| graph.source_value(v).unwrap_or(0.5)).collect();
    let mut rng = rng::seeded(spec.seed);
    let (rise, fall) = run_sequence(graph, schedule, spec.n_cycles, !0, |_, words| {
        for (w, &p) in words.iter_mut().zip(&params) {
            let mut word = 0u64;
            for lane in 0..LANES {
                if rng.gen::<f64>() < p {
                    word |= 1 << lane;
                }
            }
            *w = word;
        }
    });
    let denom = (LANES * (spec.n_cycles as u64 - 1)) as f64;
    Ok(rise.iter().zip(&fall).map(|(&r, &f)| (r as f64 / denom, f as f64 / denom)).collect())
}

/// Transition rates for one explicit stream per PI (`streams[i][t]` is PI
/// `i` at cycle `t`). Works on combinational circuits too.
pub fn transition_labels_from_streams(
    graph: &CircuitGraph,
    schedule: &LevelSchedule,
    streams: &[Vec<bool>],
) -> Result<Vec<TransitionRates>, OracleError> {
    let n_cycles = streams.first().map(|s| s.len()).unwrap_or(0);
    if n_cycles < 2 {
        return Err(OracleError::TooFewCycles(n_cycles));
    }
    let (rise, fall) = run_sequence(graph, schedule, n_cycles, 1, |t, words| {
        for (w, stream) in words.iter_mut().zip(streams) {
            *w = stream[t] as u64;
        }
    });
    let denom = (n_cycles - 1) as f64;
    Ok(rise.iter().zip(&fall).map(|(&r, &f)| (r as f64 / denom, f as f64 / denom)).collect())
}
