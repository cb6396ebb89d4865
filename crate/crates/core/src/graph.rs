//! Computational-graph data model: typed operator nodes with ordered fan-in,
//! validation, logic levelization and structural statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node index, `0..n`.
pub type NodeId = usize;

/// Operator vocabulary. `Mux` takes `(S, A, B)` and computes `(S & B) | (A & !S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Pi,
    PseudoPi,
    And2,
    Not,
    Mux,
    Const0,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 6] = [
        OperatorKind::Pi,
        OperatorKind::PseudoPi,
        OperatorKind::And2,
        OperatorKind::Not,
        OperatorKind::Mux,
        OperatorKind::Const0,
    ];

    pub fn arity(self) -> usize {
        match self {
            OperatorKind::Pi | OperatorKind::PseudoPi | OperatorKind::Const0 => 0,
            OperatorKind::Not => 1,
            OperatorKind::And2 => 2,
            OperatorKind::Mux => 3,
        }
    }

    /// Level-0 kinds: primary inputs, latch outputs and the constant.
    pub fn is_source(self) -> bool {
        self.arity() == 0
    }

    /// Stable small integer used for type-embedding lookups.
    pub fn index(self) -> usize {
        match self {
            OperatorKind::Pi => 0,
            OperatorKind::PseudoPi => 1,
            OperatorKind::And2 => 2,
            OperatorKind::Not => 3,
            OperatorKind::Mux => 4,
            OperatorKind::Const0 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Pi => "PI",
            OperatorKind::PseudoPi => "PSEUDO_PI",
            OperatorKind::And2 => "AND2",
            OperatorKind::Not => "NOT",
            OperatorKind::Mux => "MUX",
            OperatorKind::Const0 => "CONST0",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: OperatorKind,
    pub inputs: Vec<NodeId>,
}

/// Latch state element: a pseudo-PI whose next value is taken from `next`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latch {
    pub next: NodeId,
    pub init: bool,
}

/// Directed acyclic circuit. Sequential feedback is held in `latches`
/// (pseudo-PI -> next-state driver) rather than as edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    pi_params: BTreeMap<NodeId, f64>,
    latches: BTreeMap<NodeId, Latch>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ArityMismatch { node: NodeId, kind: OperatorKind, expected: usize, found: usize },
    DanglingInput { node: NodeId, input: NodeId },
    DanglingOutput { position: usize, node: NodeId },
    Cycle { nodes: Vec<NodeId> },
    MissingPiParam { node: NodeId },
    StrayPiParam { node: NodeId },
    PiParamOutOfRange { node: NodeId, value: f64 },
    LatchNotPseudoPi { node: NodeId },
    DanglingLatchDriver { node: NodeId, next: NodeId },
    UnboundPseudoPi { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ArityMismatch { node, kind, expected, found } => write!(
                f,
                "arity mismatch at node {node}: {kind} expects {expected} inputs, found {found}"
            ),
            Violation::DanglingInput { node, input } => {
                write!(f, "dangling id: node {node} references missing node {input}")
            }
            Violation::DanglingOutput { position, node } => {
                write!(f, "dangling id: output #{position} references missing node {node}")
            }
            Violation::Cycle { nodes } => write!(f, "cycle among combinational edges through nodes {nodes:?}"),
            Violation::MissingPiParam { node } => write!(f, "PI node {node} has no Bernoulli parameter"),
            Violation::StrayPiParam { node } => write!(f, "non-PI node {node} carries a PI parameter"),
            Violation::PiParamOutOfRange { node, value } => {
                write!(f, "PI node {node} parameter {value} outside [0,1]")
            }
            Violation::LatchNotPseudoPi { node } => write!(f, "latch entry on non-PSEUDO_PI node {node}"),
            Violation::DanglingLatchDriver { node, next } => {
                write!(f, "dangling id: latch {node} driven by missing node {next}")
            }
            Violation::UnboundPseudoPi { node } => write!(f, "PSEUDO_PI node {node} has no latch entry"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid circuit: {0}")]
    Invalid(ValidationReport),
    #[error("combinational cycle through nodes {0:?}")]
    Cycle(Vec<NodeId>),
}

impl CircuitGraph {
    /// Assembles a graph without checking it. Use [`CircuitGraph::validate`]
    /// or [`CircuitBuilder`] when the parts come from untrusted input.
    pub fn from_parts(
        nodes: Vec<Node>,
        outputs: Vec<NodeId>,
        pi_params: BTreeMap<NodeId, f64>,
        latches: BTreeMap<NodeId, Latch>,
    ) -> Self {
        CircuitGraph { nodes, outputs, pi_params, latches }
    }

    /// Like [`CircuitGraph::from_parts`] but rejects graphs that fail validation.
    pub fn try_from_parts(
        nodes: Vec<Node>,
        outputs: Vec<NodeId>,
        pi_params: BTreeMap<NodeId, f64>,
        latches: BTreeMap<NodeId, Latch>,
    ) -> Result<Self, GraphError> {
        let g = Self::from_parts(nodes, outputs, pi_params, latches);
        let report = g.validate();
        if report.is_ok() {
            Ok(g)
        } else {
            Err(GraphError::Invalid(report))
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn kind(&self, v: NodeId) -> OperatorKind {
        self.nodes[v].kind
    }

    pub fn inputs(&self, v: NodeId) -> &[NodeId] {
        &self.nodes[v].inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn pi_params(&self) -> &BTreeMap<NodeId, f64> {
        &self.pi_params
    }

    pub fn latches(&self) -> &BTreeMap<NodeId, Latch> {
        &self.latches
    }

    pub fn is_sequential(&self) -> bool {
        !self.latches.is_empty()
    }

    /// Primary inputs in id order.
    pub fn pis(&self) -> Vec<NodeId> {
        self.ids_of(OperatorKind::Pi)
    }

    pub fn pseudo_pis(&self) -> Vec<NodeId> {
        self.ids_of(OperatorKind::PseudoPi)
    }

    fn ids_of(&self, kind: OperatorKind) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&v| self.nodes[v].kind == kind).collect()
    }

    /// Scalar carried by a level-0 node: a PI's Bernoulli parameter, a
    /// pseudo-PI's initial state, or 0 for the constant. `None` for operators.
    pub fn source_value(&self, v: NodeId) -> Option<f64> {
        match self.nodes[v].kind {
            OperatorKind::Pi => Some(self.pi_params.get(&v).copied().unwrap_or(0.5)),
            OperatorKind::PseudoPi => {
                Some(if self.latches.get(&v).map(|l| l.init).unwrap_or(false) { 1.0 } else { 0.0 })
            }
            OperatorKind::Const0 => Some(0.0),
            _ => None,
        }
    }

    /// Returns a copy with every PI parameter replaced by `p`.
    pub fn with_uniform_pi_param(&self, p: f64) -> CircuitGraph {
        let mut g = self.clone();
        for value in g.pi_params.values_mut() {
            *value = p;
        }
        g
    }

    /// Returns a copy with PI parameters assigned in PI id order.
    pub fn with_pi_params(&self, params: &[f64]) -> Result<CircuitGraph, GraphError> {
        let pis = self.pis();
        let mut g = self.clone();
        if params.len() != pis.len() {
            return Err(GraphError::Invalid(ValidationReport {
                violations: pis.iter().map(|&node| Violation::MissingPiParam { node }).collect(),
            }));
        }
        for (v, &p) in pis.iter().zip(params) {
            g.pi_params.insert(*v, p);
        }
        let report = g.validate();
        if report.is_ok() {
            Ok(g)
        } else {
            Err(GraphError::Invalid(report))
        }
    }

    /// Number of consumers of each node (edges plus output references are not counted).
    pub fn fanout_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &u in &node.inputs {
                if u < counts.len() {
                    counts[u] += 1;
                }
            }
        }
        counts
    }

    pub fn validate(&self) -> ValidationReport {
        let n = self.nodes.len();
        let mut violations = Vec::new();
        let mut edges_ok = true;
        for (v, node) in self.nodes.iter().enumerate() {
            let expected = node.kind.arity();
            if node.inputs.len() != expected {
                violations.push(Violation::ArityMismatch {
                    node: v,
                    kind: node.kind,
                    expected,
                    found: node.inputs.len(),
                });
            }
            for &u in &node.inputs {
                if u >= n {
                    edges_ok = false;
                    violations.push(Violation::DanglingInput { node: v, input: u });
                }
            }
            match node.kind {
                OperatorKind::Pi => match self.pi_params.get(&v) {
                    None => violations.push(Violation::MissingPiParam { node: v }),
                    Some(&p) if !(0.0..=1.0).contains(&p) => {
                        violations.push(Violation::PiParamOutOfRange { node: v, value: p })
                    }
                    _ => {}
                },
                OperatorKind::PseudoPi => {
                    if !self.latches.contains_key(&v) {
                        violations.push(Violation::UnboundPseudoPi { node: v });
                    }
                }
                _ => {}
            }
        }
        for &v in self.pi_params.keys() {
            if v >= n || self.nodes[v].kind != OperatorKind::Pi {
                violations.push(Violation::StrayPiParam { node: v });
            }
        }
        for (position, &o) in self.outputs.iter().enumerate() {
            if o >= n {
                violations.push(Violation::DanglingOutput { position, node: o });
            }
        }
        for (&v, latch) in &self.latches {
            if v >= n || self.nodes[v].kind != OperatorKind::PseudoPi {
                violations.push(Violation::LatchNotPseudoPi { node: v });
            }
            if latch.next >= n {
                violations.push(Violation::DanglingLatchDriver { node: v, next: latch.next });
            }
        }
        if edges_ok {
            if let Err(nodes) = topo_order(&self.nodes) {
                violations.push(Violation::Cycle { nodes });
            }
        }
        ValidationReport { violations }
    }

    /// Logic levels: 0 for sources, `1 + max(level of inputs)` otherwise.
    pub fn compute_levels(&self) -> Result<LevelSchedule, GraphError> {
        let order = topo_order(&self.nodes).map_err(GraphError::Cycle)?;
        let mut level_of = vec![0usize; self.nodes.len()];
        for &v in &order {
            let node = &self.nodes[v];
            if !node.kind.is_source() {
                level_of[v] = 1 + node.inputs.iter().map(|&u| level_of[u]).max().unwrap_or(0);
            }
        }
        let max_level = level_of.iter().copied().max().unwrap_or(0);
        let mut levels = vec![Vec::new(); if self.nodes.is_empty() { 0 } else { max_level + 1 }];
        for (v, &l) in level_of.iter().enumerate() {
            levels[l].push(v);
        }
        Ok(LevelSchedule { levels, level_of })
    }

    /// Fraction of padded slots when every node's fan-in is padded to the
    /// graph-wide maximum in-degree.
    pub fn padding_overhead(&self) -> f64 {
        padding_overhead_of(self.nodes.iter().map(|n| n.inputs.len()))
    }

    pub fn in_degree_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for node in &self.nodes {
            *hist.entry(node.inputs.len()).or_insert(0) += 1;
        }
        hist
    }

    /// True when every node drives at most one consumer (outputs excluded).
    pub fn is_tree(&self) -> bool {
        self.fanout_counts().iter().all(|&c| c <= 1)
    }

    /// Place several graphs side by side in one graph. Graph `i` occupies
    /// ids `offsets[i]..offsets[i + 1]`.
    pub fn disjoint_union<'a>(graphs: impl IntoIterator<Item = &'a CircuitGraph>) -> (CircuitGraph, Vec<usize>) {
        let mut nodes = Vec::new();
        let mut outputs = Vec::new();
        let mut pi_params = BTreeMap::new();
        let mut latches = BTreeMap::new();
        let mut offsets = vec![0];
        for g in graphs {
            let off = nodes.len();
            nodes.extend(g.nodes.iter().map(|n| Node { kind: n.kind, inputs: n.inputs.iter().map(|&u| u + off).collect() }));
            outputs.extend(g.outputs.iter().map(|&o| o + off));
            pi_params.extend(g.pi_params.iter().map(|(&v, &p)| (v + off, p)));
            latches.extend(g.latches.iter().map(|(&v, l)| (v + off, Latch { next: l.next + off, init: l.init })));
            offsets.push(nodes.len());
        }
        (CircuitGraph { nodes, outputs, pi_params, latches }, offsets)
    }
}

/// `(n * max_d - sum_d) / (n * max_d)`, 0 when the maximum degree is 0.
pub fn padding_overhead_of(degrees: impl IntoIterator<Item = usize>) -> f64 {
    let mut n = 0usize;
    let mut max_d = 0usize;
    let mut sum_d = 0usize;
    for d in degrees {
        n += 1;
        max_d = max_d.max(d);
        sum_d += d;
    }
    if max_d == 0 {
        return 0.0;
    }
    let total = (n * max_d) as f64;
    (total - sum_d as f64) / total
}

/// Kahn order with smallest-id-first tie breaking. On a cycle, returns the
/// nodes that could not be ordered.
fn topo_order(nodes: &[Node]) -> Result<Vec<NodeId>, Vec<NodeId>> {
    let n = nodes.len();
    let mut indeg = vec![0usize; n];
    let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for (v, node) in nodes.iter().enumerate() {
        for &u in &node.inputs {
            indeg[v] += 1;
            consumers[u].push(v);
        }
    }
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<NodeId>> =
        (0..n).filter(|&v| indeg[v] == 0).map(std::cmp::Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &consumers[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(std::cmp::Reverse(w));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&v| indeg[v] > 0).collect())
    }
}

/// Nodes grouped by logic level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSchedule {
    levels: Vec<Vec<NodeId>>,
    level_of: Vec<usize>,
}

impl LevelSchedule {
    pub fn levels(&self) -> &[Vec<NodeId>] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &[NodeId] {
        &self.levels[k]
    }

    pub fn level_of(&self, v: NodeId) -> usize {
        self.level_of[v]
    }

    pub fn max_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Nodes in level order, ids ascending within a level.
    pub fn order(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.levels.iter().flatten().copied()
    }
}

/// Incremental construction of well-formed circuits.
#[derive(Debug, Clone, Default)]
pub struct CircuitBuilder {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    pi_params: BTreeMap<NodeId, f64>,
    latches: BTreeMap<NodeId, Latch>,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: NodeId) -> OperatorKind {
        self.nodes[v].kind
    }

    pub fn inputs(&self, v: NodeId) -> &[NodeId] {
        &self.nodes[v].inputs
    }

    fn push(&mut self, kind: OperatorKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    pub fn pi(&mut self, p: f64) -> NodeId {
        let v = self.push(OperatorKind::Pi, Vec::new());
        self.pi_params.insert(v, p);
        v
    }

    /// Adds a latch output; its driver is bound later with [`CircuitBuilder::bind_latch`].
    pub fn pseudo_pi(&mut self, init: bool) -> NodeId {
        let v = self.push(OperatorKind::PseudoPi, Vec::new());
        self.latches.insert(v, Latch { next: v, init });
        v
    }

    pub fn bind_latch(&mut self, latch: NodeId, next: NodeId) {
        if let Some(l) = self.latches.get_mut(&latch) {
            l.next = next;
        }
    }

    pub fn const0(&mut self) -> NodeId {
        self.push(OperatorKind::Const0, Vec::new())
    }

    pub fn and(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OperatorKind::And2, vec![a, b])
    }

    pub fn not(&mut self, a: NodeId) -> NodeId {
        self.push(OperatorKind::Not, vec![a])
    }

    pub fn mux(&mut self, s: NodeId, a: NodeId, b: NodeId) -> NodeId {
        self.push(OperatorKind::Mux, vec![s, a, b])
    }

    pub fn output(&mut self, v: NodeId) {
        self.outputs.push(v);
    }

    pub fn build(self) -> Result<CircuitGraph, GraphError> {
        CircuitGraph::try_from_parts(self.nodes, self.outputs, self.pi_params, self.latches)
    }
}

/// `x, y, z` PIs; `a = x & y`, `b = y & z`, `c = a & b`. `y` reconverges at `c`.
pub fn reconvergence_example(p: f64) -> CircuitGraph {
    let mut b = CircuitBuilder::new();
    let x = b.pi(p);
    let y = b.pi(p);
    let z = b.pi(p);
    let a = b.and(x, y);
    let bb = b.and(y, z);
    let c = b.and(a, bb);
    b.output(c);
    b.build().expect("reconvergence example is well formed")
}
