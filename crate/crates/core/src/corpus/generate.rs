//! Seeded random AIG generation.
//!
//! Generated circuits are in the canonical node order produced by
//! [`super::parse_aiger`], so `parse(serialize(g)) == g` holds exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{CircuitBuilder, CircuitGraph, NodeId};
use crate::rng::{self, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_pis: usize,
    pub n_gates: usize,
    pub seed: u64,
    /// Probability that each gate operand (and each output) is inverted.
    pub p_not: f64,
    pub sequential: bool,
    pub n_latches: usize,
    /// Bernoulli parameter assigned to every PI.
    pub pi_p: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { n_pis: 4, n_gates: 8, seed: 0, p_not: 0.3, sequential: false, n_latches: 0, pi_p: 0.5 }
    }
}

/// Builder wrapper that creates at most one NOT per signal, on first use.
struct LiteralBuilder {
    b: CircuitBuilder,
    not_of: HashMap<NodeId, NodeId>,
}

impl LiteralBuilder {
    fn lit(&mut self, signal: NodeId, inverted: bool) -> NodeId {
        if !inverted {
            return signal;
        }
        if let Some(&n) = self.not_of.get(&signal) {
            return n;
        }
        let n = self.b.not(signal);
        self.not_of.insert(signal, n);
        n
    }
}

/// Random DAG: each and-gate takes two operands drawn from earlier PIs,
/// latches and gates. Gates without consumers become primary outputs, so
/// every gate reaches an output.
pub fn generate_random_aig(spec: &GeneratorSpec) -> CircuitGraph {
    assert!(spec.n_pis >= 1 && spec.n_gates >= 1, "generator needs at least one PI and one gate");
    let mut rng = rng::seeded(spec.seed);
    let mut lb = LiteralBuilder { b: CircuitBuilder::new(), not_of: HashMap::new() };
    let mut signals: Vec<NodeId> = (0..spec.n_pis).map(|_| lb.b.pi(spec.pi_p)).collect();
    let n_latches = if spec.sequential { spec.n_latches } else { 0 };
    let latches: Vec<NodeId> = (0..n_latches).map(|_| lb.b.pseudo_pi(rng.gen_bool(0.5))).collect();
    signals.extend(&latches);

    let mut used = vec![false; spec.n_pis + n_latches + 3 * spec.n_gates + 1];
    let mut gates = Vec::with_capacity(spec.n_gates);
    for _ in 0..spec.n_gates {
        let a = *signals.choose(&mut rng).expect("at least one signal");
        let b = if signals.len() > 1 {
            loop {
                let b = *signals.choose(&mut rng).expect("at least one signal");
                if b != a {
                    break b;
                }
            }
        } else {
            a
        };
        let ia = rng.gen_bool(spec.p_not);
        let ib = rng.gen_bool(spec.p_not);
        used[a] = true;
        used[b] = true;
        let la = lb.lit(a, ia);
        let lbv = lb.lit(b, ib);
        let g = lb.b.and(la, lbv);
        if used.len() <= g {
            used.resize(g + 1, false);
        }
        signals.push(g);
        gates.push(g);
    }
    for &g in &gates {
        if !used[g] {
            let inv = rng.gen_bool(spec.p_not);
            let o = lb.lit(g, inv);
            lb.b.output(o);
        }
    }
    for &q in &latches {
        let driver = *gates.choose(&mut rng).expect("at least one gate");
        let inv = rng.gen_bool(spec.p_not);
        let next = lb.lit(driver, inv);
        lb.b.bind_latch(q, next);
    }
    lb.b.build().expect("generator output is well formed")
}

/// Random tree: every PI and every gate drives exactly one consumer, so no
/// signal reconverges. Uses `n_pis - 1` and-gates and one output.
pub fn generate_random_tree(n_pis: usize, p_not: f64, pi_p: f64, seed: u64) -> CircuitGraph {
    assert!(n_pis >= 1, "tree needs at least one PI");
    let mut rng: SplitMix64 = rng::seeded(seed);
    let mut lb = LiteralBuilder { b: CircuitBuilder::new(), not_of: HashMap::new() };
    let mut pool: Vec<(NodeId, bool)> = (0..n_pis).map(|_| (lb.b.pi(pi_p), rng.gen_bool(p_not))).collect();
    while pool.len() > 1 {
        let i = rng.gen_range(0..pool.len());
        let (sa, ia) = pool.swap_remove(i);
        let j = rng.gen_range(0..pool.len());
        let (sb, ib) = pool.swap_remove(j);
        let la = lb.lit(sa, ia);
        let lbv = lb.lit(sb, ib);
        let g = lb.b.and(la, lbv);
        pool.push((g, rng.gen_bool(p_not)));
    }
    let (root, inv) = pool[0];
    let o = lb.lit(root, inv);
    lb.b.output(o);
    lb.b.build().expect("tree output is well formed")
}

/// Copy of `graph` whose PIs draw their Bernoulli parameters uniformly from
/// `[lo, hi)`, one independent draw per PI.
pub fn with_random_pi_params(graph: &CircuitGraph, lo: f64, hi: f64, seed: u64) -> CircuitGraph {
    let mut rng: SplitMix64 = rng::seeded(seed);
    let params: Vec<f64> = graph.pis().iter().map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();
    graph.with_pi_params(&params).expect("one parameter per PI")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_aiger, serialize_aiger};
    use crate::graph::OperatorKind;
    use crate::oracle::{simulate, PatternSource};

    #[test]
    fn deterministic() {
        let spec = GeneratorSpec { n_pis: 3, n_gates: 5, seed: 7, ..Default::default() };
        let a = generate_random_aig(&spec);
        let b = generate_random_aig(&spec);
        assert_eq!(a, b);
        assert_eq!(serialize_aiger(&a).unwrap(), serialize_aiger(&b).unwrap());
    }

    #[test]
    fn single_gate_is_identity() {
        let spec = GeneratorSpec { n_pis: 1, n_gates: 1, seed: 3, p_not: 0.0, ..Default::default() };
        let g = generate_random_aig(&spec);
        assert_eq!(g.len(), 2);
        assert_eq!(g.inputs(1), &[0, 0]);
        let tts = simulate(&g, &g.compute_levels().unwrap(), PatternSource::Exhaustive).unwrap();
        assert_eq!(tts.table(1), tts.table(0));
    }

    #[test]
    fn sequential_latches() {
        let spec = GeneratorSpec { n_pis: 3, n_gates: 10, seed: 1, sequential: true, n_latches: 2, ..Default::default() };
        let g = generate_random_aig(&spec);
        assert_eq!(g.pseudo_pis().len(), 2);
        assert_eq!(g.latches().len(), 2);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn canonical_round_trip() {
        for seed in 0..50 {
            let spec = GeneratorSpec { n_pis: 1 + seed as usize % 6, n_gates: 1 + seed as usize % 20, seed, p_not: 0.4, sequential: seed % 3 == 0, n_latches: 2, pi_p: 0.5 };
            let g = generate_random_aig(&spec);
            let text = serialize_aiger(&g).unwrap();
            assert_eq!(parse_aiger(&text).unwrap(), g, "seed {seed}\n{text}");
        }
    }

    #[test]
    fn every_gate_reaches_an_output() {
        let g = generate_random_aig(&GeneratorSpec { n_pis: 5, n_gates: 30, seed: 11, ..Default::default() });
        let fanout = g.fanout_counts();
        for v in 0..g.len() {
            if g.kind(v) == OperatorKind::And2 && fanout[v] == 0 {
                assert!(g.outputs().contains(&v));
            }
        }
    }

    #[test]
    fn trees_have_unit_fanout() {
        for seed in 0..20 {
            let g = generate_random_tree(1 + seed as usize % 9, 0.4, 0.5, seed);
            assert!(g.is_tree());
            let text = serialize_aiger(&g).unwrap();
            assert_eq!(parse_aiger(&text).unwrap(), g);
        }
    }
}
