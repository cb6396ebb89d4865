//! ASCII AIGER (`aag`) reader and writer.
//!
//! Inverted literals materialize as NOT nodes (one per inverted variable),
//! literal 0/1 as a CONST0 node (plus a NOT for 1), latches as PSEUDO_PI nodes.
//! Node ids follow a canonical order: inputs, latches, then and-gates in file
//! order with each gate's NOT/CONST0 operands created just before first use,
//! then operands first referenced by outputs, then by latch next-states.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::graph::{CircuitGraph, Latch, Node, NodeId, OperatorKind};

use super::CorpusError;

fn parse_err(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { line, message: message.into() }
}

#[derive(Debug, Clone, Copy)]
struct Header {
    m: usize,
    i: usize,
    l: usize,
    o: usize,
    a: usize,
}

fn parse_header(line: &str) -> Result<Header, CorpusError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("aag") {
        return Err(parse_err(1, "expected header `aag M I L O A`"));
    }
    let nums: Result<Vec<usize>, _> = parts.map(|p| p.parse::<usize>()).collect();
    let nums = nums.map_err(|_| parse_err(1, "header fields must be non-negative integers"))?;
    if nums.len() < 5 {
        return Err(parse_err(1, format!("header has {} of 5 fields M I L O A", nums.len())));
    }
    if nums[5..].iter().any(|&x| x != 0) {
        return Err(parse_err(1, "bad-state, constraint, justice and fairness sections are not supported"));
    }
    let h = Header { m: nums[0], i: nums[1], l: nums[2], o: nums[3], a: nums[4] };
    if h.i + h.l + h.a > h.m {
        return Err(parse_err(1, format!("M={} is smaller than I+L+A={}", h.m, h.i + h.l + h.a)));
    }
    Ok(h)
}

fn parse_fields(line_no: usize, line: &str, min: usize, max: usize, what: &str) -> Result<Vec<usize>, CorpusError> {
    let fields: Result<Vec<usize>, _> = line.split_whitespace().map(|p| p.parse::<usize>()).collect();
    let fields = fields.map_err(|_| parse_err(line_no, format!("malformed {what} line `{line}`")))?;
    if fields.len() < min || fields.len() > max {
        return Err(parse_err(line_no, format!("malformed {what} line `{line}`")));
    }
    Ok(fields)
}

#[derive(Clone, Copy)]
enum VarDef {
    Input(NodeId),
    Latch(NodeId),
    And { line: usize, rhs0: usize, rhs1: usize },
}

struct Resolver {
    m: usize,
    defs: Vec<Option<VarDef>>,
    var_node: Vec<Option<NodeId>>,
    not_node: Vec<Option<NodeId>>,
    const0: Option<NodeId>,
    nodes: Vec<Node>,
}

impl Resolver {
    fn push(&mut self, kind: OperatorKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    fn check_lit(&self, line: usize, lit: usize) -> Result<(), CorpusError> {
        if lit / 2 > self.m {
            return Err(parse_err(line, format!("literal {lit} out of range (M={})", self.m)));
        }
        Ok(())
    }

    /// Node for a literal, creating AND/NOT/CONST0 nodes on first use.
    fn literal(&mut self, line: usize, lit: usize) -> Result<NodeId, CorpusError> {
        self.check_lit(line, lit)?;
        let var = lit / 2;
        let base = if var == 0 {
            match self.const0 {
                Some(c) => c,
                None => {
                    let c = self.push(OperatorKind::Const0, Vec::new());
                    self.const0 = Some(c);
                    c
                }
            }
        } else {
            self.variable(line, var)?
        };
        if lit % 2 == 0 {
            return Ok(base);
        }
        if let Some(n) = self.not_node[var] {
            return Ok(n);
        }
        let n = self.push(OperatorKind::Not, vec![base]);
        self.not_node[var] = Some(n);
        Ok(n)
    }

    fn variable(&mut self, line: usize, var: usize) -> Result<NodeId, CorpusError> {
        if let Some(v) = self.var_node[var] {
            return Ok(v);
        }
        // Iterative DFS over and-gate definitions.
        let mut on_stack = vec![false; self.m + 1];
        let mut stack = vec![(var, 0usize)];
        while let Some(&(cur, stage)) = stack.last() {
            let (def_line, rhs) = match self.defs[cur] {
                None => return Err(parse_err(line, format!("undefined variable {cur} (literal {})", cur * 2))),
                Some(VarDef::Input(v)) | Some(VarDef::Latch(v)) => {
                    self.var_node[cur] = Some(v);
                    stack.pop();
                    continue;
                }
                Some(VarDef::And { line, rhs0, rhs1 }) => (line, [rhs0, rhs1]),
            };
            if stage < 2 {
                stack.last_mut().expect("non-empty").1 += 1;
                let dep = rhs[stage] / 2;
                on_stack[cur] = true;
                if dep != 0 && self.var_node[dep].is_none() {
                    if on_stack[dep] {
                        return Err(parse_err(def_line, format!("combinational cycle through variable {dep}")));
                    }
                    stack.push((dep, 0));
                }
                continue;
            }
            let a = self.literal(def_line, rhs[0])?;
            let b = self.literal(def_line, rhs[1])?;
            let v = self.push(OperatorKind::And2, vec![a, b]);
            self.var_node[cur] = Some(v);
            on_stack[cur] = false;
            stack.pop();
        }
        Ok(self.var_node[var].expect("resolved above"))
    }
}

/// Parses ASCII AIGER. PI parameters default to 0.5.
pub fn parse_aiger(text: &str) -> Result<CircuitGraph, CorpusError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header_line) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let h = parse_header(header_line.trim())?;
    let mut next_line = |what: &str| -> Result<(usize, &str), CorpusError> {
        lines.next().ok_or_else(|| parse_err(0, format!("unexpected end of input while reading {what}")))
    };

    let mut r = Resolver {
        m: h.m,
        defs: vec![None; h.m + 1],
        var_node: vec![None; h.m + 1],
        not_node: vec![None; h.m + 1],
        const0: None,
        nodes: Vec::new(),
    };
    let mut pi_params = BTreeMap::new();

    let define = |r: &mut Resolver, line: usize, lit: usize, def: VarDef| -> Result<(), CorpusError> {
        r.check_lit(line, lit)?;
        if lit % 2 == 1 || lit == 0 {
            return Err(parse_err(line, format!("defined literal {lit} must be even and non-zero")));
        }
        let var = lit / 2;
        if r.defs[var].is_some() {
            return Err(parse_err(line, format!("duplicate definition of literal {lit}")));
        }
        r.defs[var] = Some(def);
        Ok(())
    };

    for _ in 0..h.i {
        let (ln, line) = next_line("inputs")?;
        let f = parse_fields(ln, line, 1, 1, "input")?;
        let v = r.push(OperatorKind::Pi, Vec::new());
        pi_params.insert(v, 0.5);
        define(&mut r, ln, f[0], VarDef::Input(v))?;
    }
    let mut latch_lines = Vec::with_capacity(h.l);
    for _ in 0..h.l {
        let (ln, line) = next_line("latches")?;
        let f = parse_fields(ln, line, 2, 3, "latch")?;
        let v = r.push(OperatorKind::PseudoPi, Vec::new());
        define(&mut r, ln, f[0], VarDef::Latch(v))?;
        let init = match f.get(2) {
            None | Some(0) => false,
            Some(1) => true,
            Some(&x) if x == f[0] => false,
            Some(&x) => return Err(parse_err(ln, format!("latch init value {x} must be 0, 1 or the latch literal"))),
        };
        r.check_lit(ln, f[1])?;
        latch_lines.push((ln, v, f[1], init));
    }
    let mut output_lits = Vec::with_capacity(h.o);
    for _ in 0..h.o {
        let (ln, line) = next_line("outputs")?;
        let f = parse_fields(ln, line, 1, 1, "output")?;
        r.check_lit(ln, f[0])?;
        output_lits.push((ln, f[0]));
    }
    let mut and_vars = Vec::with_capacity(h.a);
    for k in 0..h.a {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("header declares A={} and-gates but only {k} were found", h.a)))?;
        let f = parse_fields(ln, line, 3, 3, "and-gate")?;
        r.check_lit(ln, f[1])?;
        r.check_lit(ln, f[2])?;
        define(&mut r, ln, f[0], VarDef::And { line: ln, rhs0: f[1], rhs1: f[2] })?;
        and_vars.push((ln, f[0] / 2));
    }
    for (ln, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t == "c" || t.starts_with("c ") {
            break;
        }
        let is_symbol = matches!(t.as_bytes()[0], b'i' | b'l' | b'o' | b'b' | b'c' | b'j' | b'f')
            && t[1..].chars().next().is_some_and(|c| c.is_ascii_digit());
        if !is_symbol {
            return Err(parse_err(
                ln,
                format!("unexpected line `{t}`: header declares A={} and-gates", h.a),
            ));
        }
    }

    for &(ln, var) in &and_vars {
        r.variable(ln, var)?;
    }
    let mut outputs = Vec::with_capacity(output_lits.len());
    for &(ln, lit) in &output_lits {
        outputs.push(r.literal(ln, lit)?);
    }
    let mut latches = BTreeMap::new();
    for &(ln, v, next_lit, init) in &latch_lines {
        let next = r.literal(ln, next_lit)?;
        latches.insert(v, Latch { next, init });
    }
    let graph = CircuitGraph::from_parts(r.nodes, outputs, pi_params, latches);
    let report = graph.validate();
    if !report.is_ok() {
        return Err(parse_err(0, format!("parsed circuit is invalid: {report}")));
    }
    Ok(graph)
}

/// Writes canonical ASCII AIGER: inputs and latches in id order, and-gates in
/// topological order. NOT chains collapse into literal polarity.
pub fn serialize_aiger(graph: &CircuitGraph) -> Result<String, CorpusError> {
    if let Some(node) = graph.nodes().iter().find(|n| n.kind == OperatorKind::Mux) {
        return Err(CorpusError::UnsupportedKind(node.kind));
    }
    let n = graph.len();
    let mut var_of: Vec<Option<usize>> = vec![None; n];
    let mut next_var = 1;
    for v in graph.pis().into_iter().chain(graph.pseudo_pis()) {
        var_of[v] = Some(next_var);
        next_var += 1;
    }

    // Post-order over and-gates, looking through NOT nodes.
    let mut and_order = Vec::new();
    let mut visited = vec![false; n];
    for root in 0..n {
        if graph.kind(root) != OperatorKind::And2 || visited[root] {
            continue;
        }
        let mut stack = vec![(root, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                and_order.push(v);
                continue;
            }
            if visited[v] {
                continue;
            }
            visited[v] = true;
            stack.push((v, true));
            for &u in graph.inputs(v).iter().rev() {
                let mut w = u;
                while graph.kind(w) == OperatorKind::Not {
                    w = graph.inputs(w)[0];
                }
                if graph.kind(w) == OperatorKind::And2 && !visited[w] {
                    stack.push((w, false));
                }
            }
        }
    }
    for &v in &and_order {
        var_of[v] = Some(next_var);
        next_var += 1;
    }

    let lit_of = |mut v: NodeId| -> usize {
        let mut inv = 0;
        loop {
            match graph.kind(v) {
                OperatorKind::Not => {
                    inv ^= 1;
                    v = graph.inputs(v)[0];
                }
                OperatorKind::Const0 => return inv,
                _ => return 2 * var_of[v].expect("numbered above") + inv,
            }
        }
    };

    let pis = graph.pis();
    let latches = graph.pseudo_pis();
    let mut out = String::new();
    let m = pis.len() + latches.len() + and_order.len();
    writeln!(out, "aag {} {} {} {} {}", m, pis.len(), latches.len(), graph.outputs().len(), and_order.len()).unwrap();
    for &v in &pis {
        writeln!(out, "{}", lit_of(v)).unwrap();
    }
    for &v in &latches {
        let latch = graph.latches().get(&v).copied().unwrap_or(Latch { next: v, init: false });
        writeln!(out, "{} {} {}", lit_of(v), lit_of(latch.next), latch.init as u8).unwrap();
    }
    for &o in graph.outputs() {
        writeln!(out, "{}", lit_of(o)).unwrap();
    }
    for &v in &and_order {
        let ins = graph.inputs(v);
        writeln!(out, "{} {} {}", lit_of(v), lit_of(ins[0]), lit_of(ins[1])).unwrap();
    }
    Ok(out)
}
