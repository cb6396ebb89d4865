//! Function-preserving structural rewrites, used to build contrastive positives.
//!
//! Rewrites keep every existing node id (a rewritten node keeps its id so
//! consumers need no redirection) and append new nodes at the end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{CircuitGraph, Node, NodeId, OperatorKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewriteKind {
    /// Inserts `NOT(NOT(u))` on one edge.
    DoubleNegation,
    /// `AND(a, b) -> AND(b, a)`.
    AndInputSwap,
    /// Pushes an inversion bubble through an and-gate:
    /// `AND(x, y) -> NOT(NOT(AND(x', y')))` where an operand that is not
    /// already inverted becomes `NOT(NOT(x))` and an inverted operand
    /// `NOT(a)` is re-realized as a fresh `NOT(a)`.
    DeMorgan,
    /// `AND(AND(a, b), c) -> AND(a, AND(b, c))` and its mirror.
    AndReassoc,
}

impl RewriteKind {
    pub const ALL: [RewriteKind; 4] =
        [RewriteKind::DoubleNegation, RewriteKind::AndInputSwap, RewriteKind::DeMorgan, RewriteKind::AndReassoc];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewriteSite {
    /// Input slot `slot` of `node`.
    Edge { node: NodeId, slot: usize },
    /// Primary output at `position`.
    Output { position: usize },
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRule {
    pub kind: RewriteKind,
    pub site: RewriteSite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteOutcome {
    pub graph: CircuitGraph,
    /// `None` when no applicable site existed and the input was returned unchanged.
    pub applied: Option<RewriteRule>,
}

/// Every site where `kind` applies, in deterministic order.
pub fn applicable_sites(graph: &CircuitGraph, kind: RewriteKind) -> Vec<RewriteSite> {
    let mut sites = Vec::new();
    match kind {
        RewriteKind::DoubleNegation => {
            for v in 0..graph.len() {
                for slot in 0..graph.inputs(v).len() {
                    sites.push(RewriteSite::Edge { node: v, slot });
                }
            }
            for position in 0..graph.outputs().len() {
                sites.push(RewriteSite::Output { position });
            }
        }
        RewriteKind::AndInputSwap => {
            for v in 0..graph.len() {
                if graph.kind(v) == OperatorKind::And2 && graph.inputs(v)[0] != graph.inputs(v)[1] {
                    sites.push(RewriteSite::Node(v));
                }
            }
        }
        RewriteKind::DeMorgan => {
            for v in 0..graph.len() {
                if graph.kind(v) == OperatorKind::And2 {
                    sites.push(RewriteSite::Node(v));
                }
            }
        }
        RewriteKind::AndReassoc => {
            for v in 0..graph.len() {
                if graph.kind(v) == OperatorKind::And2
                    && graph.inputs(v).iter().any(|&u| graph.kind(u) == OperatorKind::And2)
                {
                    sites.push(RewriteSite::Node(v));
                }
            }
        }
    }
    sites
}

struct Editor {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

impl Editor {
    fn push(&mut self, kind: OperatorKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    fn double_not(&mut self, u: NodeId) -> NodeId {
        let n1 = self.push(OperatorKind::Not, vec![u]);
        self.push(OperatorKind::Not, vec![n1])
    }
}

/// Applies one rule at an explicit site. Returns `None` if the site does not
/// match the rule's pattern.
pub fn apply_rewrite_at(graph: &CircuitGraph, rule: RewriteRule) -> Option<CircuitGraph> {
    if !applicable_sites(graph, rule.kind).contains(&rule.site) {
        return None;
    }
    let mut ed = Editor { nodes: graph.nodes().to_vec(), outputs: graph.outputs().to_vec() };
    match (rule.kind, rule.site) {
        (RewriteKind::DoubleNegation, RewriteSite::Edge { node, slot }) => {
            let u = ed.nodes[node].inputs[slot];
            let n2 = ed.double_not(u);
            ed.nodes[node].inputs[slot] = n2;
        }
        (RewriteKind::DoubleNegation, RewriteSite::Output { position }) => {
            let n2 = ed.double_not(ed.outputs[position]);
            ed.outputs[position] = n2;
        }
        (RewriteKind::AndInputSwap, RewriteSite::Node(v)) => {
            ed.nodes[v].inputs.swap(0, 1);
        }
        (RewriteKind::DeMorgan, RewriteSite::Node(v)) => {
            let operands = ed.nodes[v].inputs.clone();
            let mut pushed = Vec::with_capacity(2);
            for x in operands {
                let y = if graph.kind(x) == OperatorKind::Not {
                    let a = graph.inputs(x)[0];
                    ed.push(OperatorKind::Not, vec![a])
                } else {
                    ed.double_not(x)
                };
                pushed.push(y);
            }
            let and = ed.push(OperatorKind::And2, pushed);
            let inner = ed.push(OperatorKind::Not, vec![and]);
            ed.nodes[v] = Node { kind: OperatorKind::Not, inputs: vec![inner] };
        }
        (RewriteKind::AndReassoc, RewriteSite::Node(v)) => {
            let ins = graph.inputs(v).to_vec();
            let fanout = graph.fanout_counts();
            let pinned = |u: NodeId| {
                graph.outputs().contains(&u) || graph.latches().values().any(|l| l.next == u)
            };
            if graph.kind(ins[0]) == OperatorKind::And2 {
                // AND(AND(a, b), c) -> AND(a, AND(b, c))
                let u = ins[0];
                let (a, b, c) = (graph.inputs(u)[0], graph.inputs(u)[1], ins[1]);
                let w = if fanout[u] == 1 && !pinned(u) {
                    ed.nodes[u].inputs = vec![b, c];
                    u
                } else {
                    ed.push(OperatorKind::And2, vec![b, c])
                };
                ed.nodes[v].inputs = vec![a, w];
            } else {
                // AND(c, AND(a, b)) -> AND(AND(c, a), b)
                let u = ins[1];
                let (c, a, b) = (ins[0], graph.inputs(u)[0], graph.inputs(u)[1]);
                let w = if fanout[u] == 1 && !pinned(u) {
                    ed.nodes[u].inputs = vec![c, a];
                    u
                } else {
                    ed.push(OperatorKind::And2, vec![c, a])
                };
                ed.nodes[v].inputs = vec![w, b];
            }
        }
        _ => return None,
    }
    let out = CircuitGraph::from_parts(ed.nodes, ed.outputs, graph.pi_params().clone(), graph.latches().clone());
    debug_assert!(out.validate().is_ok(), "{}", out.validate());
    Some(out)
}

/// Applies `kind` at a site chosen uniformly by `seed`.
pub fn apply_rewrite(graph: &CircuitGraph, kind: RewriteKind, seed: u64) -> RewriteOutcome {
    let sites = applicable_sites(graph, kind);
    if sites.is_empty() {
        return RewriteOutcome { graph: graph.clone(), applied: None };
    }
    let mut rng = rng::seeded(seed);
    let site = sites[rng.gen_range(0..sites.len())];
    let rule = RewriteRule { kind, site };
    let out = apply_rewrite_at(graph, rule).expect("site drawn from the applicable set");
    RewriteOutcome { graph: out, applied: Some(rule) }
}

/// Composes 1 to 3 rewrites, each rule drawn uniformly from the kinds that
/// have at least one applicable site.
pub fn random_equivalent(graph: &CircuitGraph, seed: u64) -> (CircuitGraph, Vec<RewriteRule>) {
    let mut rng = rng::seeded(seed);
    let count = rng.gen_range(1..=3);
    let mut current = graph.clone();
    let mut applied = Vec::with_capacity(count);
    for _ in 0..count {
        let kinds: Vec<RewriteKind> =
            RewriteKind::ALL.into_iter().filter(|&k| !applicable_sites(&current, k).is_empty()).collect();
        if kinds.is_empty() {
            break;
        }
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let outcome = apply_rewrite(&current, kind, rng.gen());
        if let Some(rule) = outcome.applied {
            applied.push(rule);
        }
        current = outcome.graph;
    }
    (current, applied)
}
