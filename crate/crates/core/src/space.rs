//! Cell search space: operation vocabulary, cell topology and the per-edge
//! search state (surviving operations, α, selection likelihood).

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight candidate operations, in their canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    MaxPool3,
    Zero,
    AvgPool3,
    Identity,
    DilConv3,
    DilConv5,
    SepConv3,
    SepConv5,
}

impl OperationKind {
    pub const ALL: [OperationKind; 8] = [
        OperationKind::MaxPool3,
        OperationKind::Zero,
        OperationKind::AvgPool3,
        OperationKind::Identity,
        OperationKind::DilConv3,
        OperationKind::DilConv5,
        OperationKind::SepConv3,
        OperationKind::SepConv5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::MaxPool3 => "max_pool_3x3",
            OperationKind::Zero => "none",
            OperationKind::AvgPool3 => "avg_pool_3x3",
            OperationKind::Identity => "skip_connect",
            OperationKind::DilConv3 => "dil_conv_3x3",
            OperationKind::DilConv5 => "dil_conv_5x5",
            OperationKind::SepConv3 => "sep_conv_3x3",
            OperationKind::SepConv5 => "sep_conv_5x5",
        }
    }

    /// Whether the operation carries trainable convolution weights.
    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            OperationKind::DilConv3 | OperationKind::DilConv5 | OperationKind::SepConv3 | OperationKind::SepConv5
        )
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OperationKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown operation `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduce",
        }
    }
}

/// A directed edge `source → target`. Sources `-1` and `0` are the two cell
/// inputs; intermediate nodes are numbered `1..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub source: i32,
}

impl Edge {
    /// Whether the source is one of the two cell inputs.
    pub fn from_input(&self) -> bool {
        self.source <= 0
    }
}

/// Fully connected DAG over `M` intermediate nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTopology {
    nodes: usize,
    edges: Vec<Edge>,
}

impl CellTopology {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::config("a cell needs at least one intermediate node"));
        }
        let edges = (1..=nodes)
            .flat_map(|j| (-1..j as i32).map(move |i| Edge { target: j, source: i }))
            .collect();
        Ok(CellTopology { nodes, edges })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Positions (in [`Self::edges`]) of the edges entering node `j`.
    pub fn incoming(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().enumerate().filter(move |(_, e)| e.target == j).map(|(i, _)| i)
    }
}

/// One candidate on an edge: the operation, its architecture weight α and
/// its accumulated selection likelihood `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSlot {
    pub kind: OperationKind,
    pub alpha: f64,
    pub s: f64,
}

/// Surviving operations of one edge, kept sorted by operation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    slots: Vec<OpSlot>,
    /// Removed candidates, oldest first, with their values at removal.
    #[serde(default)]
    abandoned: Vec<OpSlot>,
}

impl EdgeState {
    pub fn new(mut slots: Vec<OpSlot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::state("an edge needs at least one surviving operation"));
        }
        slots.sort_by_key(|s| s.kind);
        if slots.windows(2).any(|w| w[0].kind == w[1].kind) {
            return Err(Error::state("duplicate operation on an edge"));
        }
        Ok(EdgeState { slots, abandoned: Vec::new() })
    }

    pub fn slots(&self) -> &[OpSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [OpSlot] {
        &mut self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn kinds(&self) -> Vec<OperationKind> {
        self.slots.iter().map(|s| s.kind).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.alpha).collect()
    }

    pub fn contains(&self, kind: OperationKind) -> bool {
        self.position(kind).is_some()
    }

    pub fn position(&self, kind: OperationKind) -> Option<usize> {
        self.slots.iter().position(|s| s.kind == kind)
    }

    pub fn slot(&self, kind: OperationKind) -> Option<&OpSlot> {
        self.slots.iter().find(|s| s.kind == kind)
    }

    pub fn slot_mut(&mut self, kind: OperationKind) -> Option<&mut OpSlot> {
        self.slots.iter_mut().find(|s| s.kind == kind)
    }

    /// Removes `kind`; the last surviving operation cannot be removed.
    pub fn remove(&mut self, kind: OperationKind) -> Result<OpSlot> {
        if self.slots.len() < 2 {
            return Err(Error::state("cannot remove the last surviving operation"));
        }
        let pos = self.position(kind).ok_or_else(|| Error::state(format!("{kind} is not alive on this edge")))?;
        let slot = self.slots.remove(pos);
        self.abandoned.push(slot.clone());
        Ok(slot)
    }

    pub fn abandoned(&self) -> &[OpSlot] {
        &self.abandoned
    }

    /// The single remaining operation, once the edge is decided.
    pub fn decided(&self) -> Option<OperationKind> {
        (self.slots.len() == 1).then(|| self.slots[0].kind)
    }
}

/// Search state of one cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpace {
    pub cell_type: CellType,
    pub topology: CellTopology,
    pub edges: Vec<EdgeState>,
}

impl CellSpace {
    /// `Π_edges |surviving|` for this cell type alone.
    pub fn combinations(&self) -> BigUint {
        self.edges.iter().fold(BigUint::from(1u32), |acc, e| acc * BigUint::from(e.len()))
    }

    /// `2 · Π_edges |surviving|`: the space size if both cell types were
    /// in this state.
    pub fn space_size(&self) -> BigUint {
        self.combinations() * 2u32
    }
}

/// Search state of both cell types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub normal: CellSpace,
    pub reduction: CellSpace,
}

impl SearchSpace {
    pub fn cell(&self, t: CellType) -> &CellSpace {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn cell_mut(&mut self, t: CellType) -> &mut CellSpace {
        match t {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
        }
    }

    pub fn cells(&self) -> [&CellSpace; 2] {
        [&self.normal, &self.reduction]
    }

    pub fn nodes(&self) -> usize {
        self.normal.topology.nodes()
    }

    /// Every `(cell type, edge position)` pair in a fixed order.
    pub fn edge_keys(&self) -> Vec<(CellType, usize)> {
        [CellType::Normal, CellType::Reduction]
            .into_iter()
            .flat_map(|t| (0..self.cell(t).edges.len()).map(move |i| (t, i)))
            .collect()
    }

    pub fn edge(&self, t: CellType, i: usize) -> &EdgeState {
        &self.cell(t).edges[i]
    }

    pub fn edge_mut(&mut self, t: CellType, i: usize) -> &mut EdgeState {
        &mut self.cell_mut(t).edges[i]
    }

    /// Size of the space counted the way the search literature counts it:
    /// the two cell types contribute additively, so a symmetric space of
    /// `K` ops on `E` edges has size `2·K^E`.
    pub fn space_size(&self) -> BigUint {
        self.normal.combinations() + self.reduction.combinations()
    }

    /// True once every edge has exactly one operation left.
    pub fn is_decided(&self) -> bool {
        self.cells().iter().all(|c| c.edges.iter().all(|e| e.len() == 1))
    }

    /// Number of surviving operations if it is the same on every edge.
    pub fn uniform_width(&self) -> Option<usize> {
        let mut widths = self.cells().into_iter().flat_map(|c| c.edges.iter().map(|e| e.len()));
        let first = widths.next()?;
        widths.all(|w| w == first).then_some(first)
    }
}

/// Fresh search space: the first `k` operations alive on every edge,
/// α drawn from `N(0, 1e-3)` and `s = 0`.
pub fn init_space<R: Rng + ?Sized>(nodes: usize, k: usize, rng: &mut R) -> Result<SearchSpace> {
    if !(2..=OperationKind::ALL.len()).contains(&k) {
        return Err(Error::config(format!("operation count must lie in 2..=8, got {k}")));
    }
    let topology = CellTopology::new(nodes)?;
    let normal = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut make = |cell_type| -> Result<CellSpace> {
        let edges = topology
            .edges()
            .iter()
            .map(|_| {
                EdgeState::new(
                    OperationKind::ALL[..k]
                        .iter()
                        .map(|&kind| OpSlot { kind, alpha: normal.sample(rng), s: 0.0 })
                        .collect(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(CellSpace { cell_type, topology: topology.clone(), edges })
    };
    let normal_cell = make(CellType::Normal)?;
    let reduction_cell = make(CellType::Reduction)?;
    Ok(SearchSpace { normal: normal_cell, reduction: reduction_cell })
}
