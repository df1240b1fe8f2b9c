//! Discrete architectures: derivation from a decided search space, the
//! versioned text format and DOT export.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CellSpace, CellType, OperationKind, SearchSpace};

pub const HEADER: &str = "binas-genotype v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenotypeEdge {
    pub target: usize,
    pub source: i32,
    pub op: OperationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub edges: Vec<GenotypeEdge>,
    pub concat: Vec<usize>,
}

impl CellGenotype {
    pub fn nodes(&self) -> usize {
        self.edges.iter().map(|e| e.target).max().unwrap_or(0)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.concat.is_empty() {
            return Err("empty concat list".into());
        }
        let m = self.nodes();
        if m == 0 {
            return Err("no edges".into());
        }
        for e in &self.edges {
            if e.source < -1 || e.source >= e.target as i32 {
                return Err(format!("edge {} -> {} is not forward", e.source, e.target));
            }
            if e.op == OperationKind::Zero {
                return Err(format!("edge {} -> {} retains the zero operation", e.source, e.target));
            }
        }
        for j in 1..=m {
            let inc: Vec<_> = self.edges.iter().filter(|e| e.target == j).collect();
            if inc.len() != 2 {
                return Err(format!("node {j} has {} inputs, expected 2", inc.len()));
            }
            if inc[0].source == inc[1].source {
                return Err(format!("node {j} takes the same input twice"));
            }
        }
        if let Some(&bad) = self.concat.iter().find(|&&c| c == 0 || c > m) {
            return Err(format!("concat names node {bad} outside 1..={m}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

impl Genotype {
    pub fn cell(&self, t: CellType) -> &CellGenotype {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [CellType::Normal, CellType::Reduction] {
            self.cell(t).validate().map_err(|m| Error::usage(format!("{} cell: {m}", t.name())))?;
        }
        Ok(())
    }

    /// A uniformly random genotype with `nodes` intermediate nodes: two
    /// distinct inputs per node, each with a random non-zero operation.
    pub fn random<R: Rng + ?Sized>(nodes: usize, rng: &mut R) -> Self {
        let ops: Vec<_> = OperationKind::ALL.into_iter().filter(|&k| k != OperationKind::Zero).collect();
        let cell = |rng: &mut R| {
            let mut edges = Vec::new();
            for j in 1..=nodes {
                let mut picks = sample(rng, j + 1, 2).into_vec();
                picks.sort_unstable();
                for p in picks {
                    edges.push(GenotypeEdge { target: j, source: p as i32 - 1, op: ops[rng.random_range(0..ops.len())] });
                }
            }
            CellGenotype { edges, concat: (1..=nodes).collect() }
        };
        let normal = cell(rng);
        let reduce = cell(rng);
        Genotype { normal, reduce }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        for t in [CellType::Normal, CellType::Reduction] {
            let c = self.cell(t);
            writeln!(out, "[{}]", t.name()).unwrap();
            let concat: Vec<String> = c.concat.iter().map(|n| n.to_string()).collect();
            writeln!(out, "concat = {}", concat.join(" ")).unwrap();
            let mut edges = c.edges.clone();
            edges.sort();
            for e in edges {
                writeln!(out, "edge {} {} {}", e.target, e.source, e.op).unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(Error::at_line(n, format!("expected `{HEADER}`, found `{other}`"))),
            None => return Err(Error::at_line(1, "empty genotype file")),
        }
        let mut cells: Vec<(CellType, usize, Option<Vec<usize>>, Vec<GenotypeEdge>)> = Vec::new();
        for (n, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let t = match name {
                    "normal" => CellType::Normal,
                    "reduce" => CellType::Reduction,
                    _ => return Err(Error::at_line(n, format!("unknown section `{name}`"))),
                };
                let expected = if cells.is_empty() { CellType::Normal } else { CellType::Reduction };
                if t != expected || cells.len() >= 2 {
                    return Err(Error::at_line(n, format!("section `{name}` out of order")));
                }
                cells.push((t, n, None, Vec::new()));
                continue;
            }
            let Some(cell) = cells.last_mut() else {
                return Err(Error::at_line(n, "content before the first section"));
            };
            if let Some(rest) = line.strip_prefix("concat") {
                let rest = rest.trim_start().strip_prefix('=').ok_or_else(|| Error::at_line(n, "expected `concat = ...`"))?;
                if cell.2.is_some() {
                    return Err(Error::at_line(n, "duplicate concat line"));
                }
                let nodes = rest
                    .split_whitespace()
                    .map(|v| v.parse::<usize>().map_err(|_| Error::at_line(n, format!("bad node `{v}`"))))
                    .collect::<Result<Vec<_>>>()?;
                cell.2 = Some(nodes);
            } else if let Some(rest) = line.strip_prefix("edge ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [target, source, op] = parts[..] else {
                    return Err(Error::at_line(n, "expected `edge <target> <source> <op>`"));
                };
                let target = target.parse().map_err(|_| Error::at_line(n, format!("bad target `{target}`")))?;
                let source = source.parse().map_err(|_| Error::at_line(n, format!("bad source `{source}`")))?;
                let op = op.parse().map_err(|e: String| Error::at_line(n, e))?;
                cell.3.push(GenotypeEdge { target, source, op });
            } else {
                return Err(Error::at_line(n, format!("unrecognised line `{line}`")));
            }
        }
        if cells.len() != 2 {
            let last = text.lines().count().max(1);
            return Err(Error::at_line(last, "expected [normal] and [reduce] sections"));
        }
        let mut built = cells.into_iter().map(|(_, line, concat, mut edges)| -> Result<CellGenotype> {
            edges.sort();
            let g = CellGenotype { edges, concat: concat.unwrap_or_default() };
            g.validate().map_err(|m| Error::at_line(line, m))?;
            Ok(g)
        });
        let normal = built.next().unwrap()?;
        let reduce = built.next().unwrap()?;
        Ok(Genotype { normal, reduce })
    }

    /// Graphviz digraph with one cluster per cell type.
    pub fn to_dot(&self) -> String {
        self.dot(&[CellType::Normal, CellType::Reduction])
    }

    /// Graphviz digraph of a single cell type.
    pub fn cell_dot(&self, t: CellType) -> String {
        self.dot(&[t])
    }

    fn dot(&self, types: &[CellType]) -> String {
        let mut out = String::from("digraph genotype {\n  rankdir=LR;\n  node [shape=box];\n");
        for &t in types {
            let c = self.cell(t);
            let p = t.name();
            writeln!(out, "  subgraph cluster_{p} {{").unwrap();
            writeln!(out, "    label=\"{p} cell\";").unwrap();
            writeln!(out, "    {p}_in0 [label=\"B-1\"];").unwrap();
            writeln!(out, "    {p}_in1 [label=\"B0\"];").unwrap();
            for j in 1..=c.nodes() {
                writeln!(out, "    {p}_n{j} [label=\"B{j}\"];").unwrap();
            }
            writeln!(out, "    {p}_out [label=\"output\"];").unwrap();
            let node = |s: i32| match s {
                -1 => format!("{p}_in0"),
                0 => format!("{p}_in1"),
                j => format!("{p}_n{j}"),
            };
            let mut edges = c.edges.clone();
            edges.sort();
            for e in &edges {
                writeln!(out, "    {} -> {} [label=\"{}\"];", node(e.source), node(e.target as i32), e.op).unwrap();
            }
            for &j in &c.concat {
                writeln!(out, "    {} -> {p}_out [style=dashed];", node(j as i32)).unwrap();
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        out
    }
}

/// Ranking key of a candidate edge: higher `s` first, then lower source
/// index, then lower operation index.
fn rank_key(s: f64, source: i32, op: OperationKind) -> (std::cmp::Reverse<OrdF64>, i32, usize) {
    (std::cmp::Reverse(OrdF64(s)), source, op.index())
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn derive_cell(cell: &CellSpace) -> Result<CellGenotype> {
    let topo = &cell.topology;
    let mut edges = Vec::new();
    for j in 1..=topo.nodes() {
        let mut cands = Vec::new();
        for i in topo.incoming(j) {
            let state = &cell.edges[i];
            let op = state
                .decided()
                .ok_or_else(|| Error::state(format!("edge {i} of the {} cell still has {} operations", cell.cell_type.name(), state.len())))?;
            let src = topo.edges()[i].source;
            // An edge decided as Zero falls back to its last abandoned op,
            // ranked behind every edge that kept a real operation.
            let (tier, slot) = match (op, state.abandoned().last()) {
                (OperationKind::Zero, Some(last)) if last.kind != OperationKind::Zero => (1, last),
                (OperationKind::Zero, _) => continue,
                _ => (0, &state.slots()[0]),
            };
            cands.push(((tier, rank_key(slot.s, src, slot.kind)), GenotypeEdge { target: j, source: src, op: slot.kind }));
        }
        if cands.len() < 2 {
            return Err(Error::state(format!(
                "node {j} of the {} cell has {} non-zero inputs, needs 2",
                cell.cell_type.name(),
                cands.len()
            )));
        }
        cands.sort_by(|a, b| a.0.cmp(&b.0));
        edges.extend(cands.into_iter().take(2).map(|(_, e)| e));
    }
    edges.sort();
    Ok(CellGenotype { edges, concat: (1..=topo.nodes()).collect() })
}

/// Keeps, per intermediate node, the two non-zero incoming edges with the
/// highest selection likelihood. Edges decided as Zero only fill in, with
/// their runner-up op, when a node has fewer than two real inputs.
pub fn derive_genotype(space: &SearchSpace) -> Result<Genotype> {
    Ok(Genotype { normal: derive_cell(&space.normal)?, reduce: derive_cell(&space.reduction)? })
}
