//! Performance-based search: sample subnets from the lowest-α half of each
//! edge, turn their validation accuracies into selection likelihoods and
//! abandon the least likely operation per edge until one remains.

use std::time::Instant;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, Genotype};
use crate::rng::{SeedSplitter, Stream};
use crate::space::{CellType, EdgeState, OperationKind, SearchSpace};
use crate::supernet::SubnetChoice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionConfig {
    /// Warm-up epochs before the first reduction.
    pub warmup_epochs: usize,
    /// Leading warm-up epochs with α frozen.
    pub frozen_epochs: usize,
    /// Sampling rounds per reduction.
    pub rounds: usize,
    /// α re-search epochs after each reduction.
    pub research_epochs: usize,
    pub reduction_batch: usize,
    pub validation_fraction: f64,
    pub sampling: SamplingMode,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            warmup_epochs: 5,
            frozen_epochs: 3,
            rounds: 3,
            research_epochs: 1,
            reduction_batch: 400,
            validation_fraction: 0.1,
            sampling: SamplingMode::Coupled,
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 || self.rounds == 0 {
            return Err(Error::config("warm-up epochs and sampling rounds must be at least 1"));
        }
        if self.frozen_epochs > self.warmup_epochs {
            return Err(Error::config("frozen epochs exceed warm-up epochs"));
        }
        if self.reduction_batch == 0 {
            return Err(Error::config("reduction batch must be positive"));
        }
        Ok(())
    }

    /// Sampled-subnet epochs over a whole search starting from `k` ops.
    pub fn subnet_epochs(&self, k: usize) -> u64 {
        (2..=k).map(|k| (self.rounds * k.div_ceil(2)) as u64).sum()
    }

    /// Every epoch-sized unit of work in a search starting from `k` ops.
    pub fn total_units(&self, k: usize) -> u64 {
        self.warmup_epochs as u64 + self.subnet_epochs(k) + (k.saturating_sub(1) * self.research_epochs) as u64
    }
}

/// How one operation per edge is drawn at each sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// One permutation of ranks per round, shared by all edges; each edge
    /// takes the operation at that rank of its α-sorted candidate list.
    Coupled,
    /// An independent permutation per edge.
    Independent,
}

/// The `⌈K/2⌉` operations with the smallest α, ordered by `(α, op index)`.
pub fn select_smaller(edge: &EdgeState) -> Result<Vec<OperationKind>> {
    let k = edge.len();
    if k < 2 {
        return Err(Error::state(format!("select_smaller needs at least 2 operations, edge has {k}")));
    }
    let mut slots: Vec<_> = edge.slots().iter().collect();
    slots.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.kind.cmp(&b.kind)));
    Ok(slots.into_iter().take(k.div_ceil(2)).map(|s| s.kind).collect())
}

/// Softmax of the mean accuracies.
pub fn likelihood_smaller(means: &[f64]) -> Vec<f64> {
    let mx = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = means.iter().map(|m| (m - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Likelihood shared by the unsampled ops: `½(max s + (1/⌈K/2⌉)·Σ s)`.
pub fn likelihood_larger(s_smaller: &[f64]) -> f64 {
    let n = s_smaller.len() as f64;
    let mx = s_smaller.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (mx + s_smaller.iter().sum::<f64>() / n)
}

/// `s ← ½s + q·s_smaller + (1−q)·s_larger` for every surviving op.
pub fn update_likelihood(edge: &mut EdgeState, s_smaller: &[(OperationKind, f64)], s_larger: f64) {
    for slot in edge.slots_mut() {
        let term = s_smaller.iter().find(|(k, _)| *k == slot.kind).map_or(s_larger, |(_, s)| *s);
        slot.s = 0.5 * slot.s + term;
    }
}

/// Removes the op with the smallest `s` (lowest index on ties).
pub fn abandon_worst(edge: &mut EdgeState) -> Result<OperationKind> {
    if edge.len() < 2 {
        return Err(Error::state("cannot abandon the last operation of an edge"));
    }
    let worst = edge
        .slots()
        .iter()
        .min_by(|a, b| a.s.total_cmp(&b.s).then(a.kind.cmp(&b.kind)))
        .map(|s| s.kind)
        .expect("nonempty edge");
    edge.remove(worst)?;
    Ok(worst)
}

/// Accuracies recorded for one edge in the current reduction iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLedger {
    pub cell: CellType,
    pub edge: usize,
    /// `O_smaller`, ordered by `(α, op index)`.
    pub smaller: Vec<OperationKind>,
    /// Accuracies per entry of `smaller`.
    pub accuracies: Vec<Vec<f64>>,
}

impl EdgeLedger {
    pub fn record(&mut self, op: OperationKind, acc: f64) -> Result<()> {
        let i = self
            .smaller
            .iter()
            .position(|&k| k == op)
            .ok_or_else(|| Error::state(format!("{op} is not a sampling candidate on this edge")))?;
        self.accuracies[i].push(acc);
        Ok(())
    }

    /// Softmax over the mean accuracies, after checking every candidate has
    /// exactly `rounds` entries.
    pub fn s_smaller(&self, rounds: usize) -> Result<Vec<(OperationKind, f64)>> {
        if let Some(i) = self.accuracies.iter().position(|a| a.len() != rounds) {
            return Err(Error::state(format!(
                "{} has {} accuracies, expected {rounds}",
                self.smaller[i],
                self.accuracies[i].len()
            )));
        }
        let means: Vec<f64> = self.accuracies.iter().map(|a| a.iter().sum::<f64>() / rounds as f64).collect();
        Ok(self.smaller.iter().copied().zip(likelihood_smaller(&means)).collect())
    }
}

/// Ledger for all edges of the current reduction iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AccuracyLedger {
    pub edges: Vec<EdgeLedger>,
}

impl AccuracyLedger {
    pub fn open(space: &SearchSpace) -> Result<Self> {
        let edges = space
            .edge_keys()
            .into_iter()
            .map(|(cell, edge)| {
                let smaller = select_smaller(space.edge(cell, edge))?;
                let accuracies = vec![Vec::new(); smaller.len()];
                Ok(EdgeLedger { cell, edge, smaller, accuracies })
            })
            .collect::<Result<_>>()?;
        Ok(AccuracyLedger { edges })
    }
}

/// Epoch-sized work the driver asks of a backend.
pub trait SearchBackend {
    /// One supernet epoch on the current space (α untouched if frozen).
    fn pcdarts_epoch(&mut self, space: &mut SearchSpace, unit: Unit, freeze_alpha: bool) -> Result<()>;

    /// Trains the subnet `choice` for one epoch and returns its
    /// validation accuracy in `[0, 1]`.
    fn train_and_evaluate(&mut self, space: &SearchSpace, choice: &SubnetChoice, unit: Unit) -> Result<f64>;

    fn snapshot(&self) -> Result<serde_json::Value>;

    fn restore(&mut self, state: serde_json::Value) -> Result<()>;
}

/// Position of a unit of work in the whole search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub index: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "kebab-case")]
pub enum Phase {
    Warmup { epoch: usize },
    Sampling { round: usize, step: usize },
    Research { epoch: usize },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abandoned {
    pub cell: CellType,
    pub edge: usize,
    pub op: OperationKind,
}

/// One line of the search report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Operations per edge before the reduction.
    pub k: usize,
    /// Space size after the reduction, in decimal.
    pub space_size: String,
    pub subnets_trained: usize,
    pub abandoned: Vec<Abandoned>,
    /// Selection likelihood of every surviving op after the update.
    pub s: Vec<Vec<(OperationKind, f64)>>,
    pub seconds: f64,
}

/// Resumable state of the search loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub space: SearchSpace,
    pub phase: Phase,
    pub iteration: usize,
    pub units_done: u64,
    pub total_units: u64,
    pub subnets_trained: u64,
    pub ledger: AccuracyLedger,
    /// Rank order of the current round, per edge (one shared row when
    /// sampling is coupled).
    pub orders: Vec<Vec<usize>>,
    pub iteration_seconds: f64,
    pub report: Vec<IterationRecord>,
}

pub struct SearchDriver {
    pub config: ReductionConfig,
    pub seeds: SeedSplitter,
    pub state: SearchState,
}

impl SearchDriver {
    pub fn new(config: ReductionConfig, seed: u64, space: SearchSpace) -> Result<Self> {
        config.validate()?;
        let k = space.uniform_width().ok_or_else(|| Error::state("search must start with the same operations on every edge"))?;
        let total_units = config.total_units(k);
        let state = SearchState {
            space,
            phase: Phase::Warmup { epoch: 0 },
            iteration: 0,
            units_done: 0,
            total_units,
            subnets_trained: 0,
            ledger: AccuracyLedger::default(),
            orders: Vec::new(),
            iteration_seconds: 0.0,
            report: Vec::new(),
        };
        Ok(SearchDriver { config, seeds: SeedSplitter::new(seed), state })
    }

    pub fn resume(config: ReductionConfig, seed: u64, state: SearchState) -> Result<Self> {
        config.validate()?;
        Ok(SearchDriver { config, seeds: SeedSplitter::new(seed), state })
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    fn unit(&self) -> Unit {
        Unit { index: self.state.units_done, total: self.state.total_units }
    }

    fn candidates(&self) -> usize {
        self.state.ledger.edges.first().map_or(0, |e| e.smaller.len())
    }

    fn draw_orders(&mut self, round: usize) {
        let h = self.candidates();
        let stream = (self.state.iteration * self.config.rounds + round) as u64;
        let mut rng = self.seeds.rng(Stream::OpSample, stream);
        let rows = match self.config.sampling {
            SamplingMode::Coupled => 1,
            SamplingMode::Independent => self.state.ledger.edges.len(),
        };
        self.state.orders = (0..rows)
            .map(|_| {
                let mut p: Vec<usize> = (0..h).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
    }

    fn begin_iteration(&mut self) -> Result<()> {
        if self.state.space.is_decided() {
            self.state.phase = Phase::Done;
            return Ok(());
        }
        self.state.ledger = AccuracyLedger::open(&self.state.space)?;
        let h = self.candidates();
        if self.state.ledger.edges.iter().any(|e| e.smaller.len() != h) {
            return Err(Error::state("edges disagree on the number of sampling candidates"));
        }
        self.state.iteration_seconds = 0.0;
        self.state.phase = Phase::Sampling { round: 0, step: 0 };
        self.draw_orders(0);
        Ok(())
    }

    /// The subnet of sampling step `step` in the current round.
    pub fn current_choice(&self, step: usize) -> SubnetChoice {
        let mut choice = SubnetChoice { normal: Vec::new(), reduction: Vec::new() };
        for (i, e) in self.state.ledger.edges.iter().enumerate() {
            let row = if self.state.orders.len() == 1 { 0 } else { i };
            let op = e.smaller[self.state.orders[row][step]];
            match e.cell {
                CellType::Normal => choice.normal.push(op),
                CellType::Reduction => choice.reduction.push(op),
            }
        }
        choice
    }

    fn finish_iteration(&mut self) -> Result<()> {
        let rounds = self.config.rounds;
        let k = self.state.space.uniform_width().unwrap_or(0);
        let mut abandoned = Vec::new();
        let mut s_report = Vec::new();
        for el in &self.state.ledger.edges {
            let s_small = el.s_smaller(rounds)?;
            let probs: Vec<f64> = s_small.iter().map(|(_, s)| *s).collect();
            let s_large = likelihood_larger(&probs);
            let edge = self.state.space.edge_mut(el.cell, el.edge);
            update_likelihood(edge, &s_small, s_large);
            let op = abandon_worst(edge)?;
            abandoned.push(Abandoned { cell: el.cell, edge: el.edge, op });
            s_report.push(edge.slots().iter().map(|s| (s.kind, s.s)).collect());
        }
        let record = IterationRecord {
            iteration: self.state.iteration,
            k,
            space_size: self.state.space.space_size().to_string(),
            subnets_trained: rounds * self.candidates(),
            abandoned,
            s: s_report,
            seconds: self.state.iteration_seconds,
        };
        self.state.report.push(record);
        self.state.iteration += 1;
        self.state.ledger = AccuracyLedger::default();
        self.state.orders.clear();
        Ok(())
    }

    /// Runs one unit of work. Returns `false` once the search is complete.
    pub fn step(&mut self, backend: &mut dyn SearchBackend) -> Result<bool> {
        let started = Instant::now();
        let unit = self.unit();
        match self.state.phase {
            Phase::Done => return Ok(false),
            Phase::Warmup { epoch } => {
                backend.pcdarts_epoch(&mut self.state.space, unit, epoch < self.config.frozen_epochs)?;
                self.state.units_done += 1;
                if epoch + 1 < self.config.warmup_epochs {
                    self.state.phase = Phase::Warmup { epoch: epoch + 1 };
                } else {
                    self.begin_iteration()?;
                }
            }
            Phase::Sampling { round, step } => {
                let choice = self.current_choice(step);
                let acc = backend.train_and_evaluate(&self.state.space, &choice, unit)?;
                if !acc.is_finite() || !(0.0..=1.0).contains(&acc) {
                    return Err(Error::Numeric(format!("subnet accuracy {acc} outside [0, 1]")));
                }
                for el in self.state.ledger.edges.iter_mut() {
                    el.record(choice.get(el.cell, el.edge), acc)?;
                }
                self.state.units_done += 1;
                self.state.subnets_trained += 1;
                self.state.iteration_seconds += started.elapsed().as_secs_f64();
                if step + 1 < self.candidates() {
                    self.state.phase = Phase::Sampling { round, step: step + 1 };
                } else if round + 1 < self.config.rounds {
                    self.state.phase = Phase::Sampling { round: round + 1, step: 0 };
                    self.draw_orders(round + 1);
                } else {
                    self.finish_iteration()?;
                    if self.config.research_epochs > 0 {
                        self.state.phase = Phase::Research { epoch: 0 };
                    } else {
                        self.begin_iteration()?;
                    }
                }
                return Ok(true);
            }
            Phase::Research { epoch } => {
                backend.pcdarts_epoch(&mut self.state.space, unit, false)?;
                self.state.units_done += 1;
                if let Some(last) = self.state.report.last_mut() {
                    last.seconds += started.elapsed().as_secs_f64();
                }
                if epoch + 1 < self.config.research_epochs {
                    self.state.phase = Phase::Research { epoch: epoch + 1 };
                } else {
                    self.begin_iteration()?;
                }
            }
        }
        Ok(!self.is_done())
    }

    /// Runs to completion, calling `after_unit` after every unit (the CLI
    /// writes its checkpoint there). An error from the hook stops the run.
    pub fn run(
        &mut self,
        backend: &mut dyn SearchBackend,
        after_unit: &mut dyn FnMut(&SearchDriver, &dyn SearchBackend) -> Result<()>,
    ) -> Result<SearchOutcome> {
        while self.step(backend)? {
            after_unit(self, backend)?;
        }
        after_unit(self, backend)?;
        self.outcome()
    }

    pub fn outcome(&self) -> Result<SearchOutcome> {
        if !self.is_done() {
            return Err(Error::state("search has not finished"));
        }
        Ok(SearchOutcome { genotype: derive_genotype(&self.state.space)?, report: self.state.report.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub report: Vec<IterationRecord>,
}

/// Space size trajectory `[initial, after iteration 1, …]` of a report.
pub fn size_trajectory(initial: &BigUint, report: &[IterationRecord]) -> Vec<BigUint> {
    std::iter::once(initial.clone()).chain(report.iter().map(|r| r.space_size.parse().expect("decimal size"))).collect()
}

/// Deterministic stand-in backend: α tracks a fixed per-operation quality
/// and a subnet's accuracy is the mean quality of its operations.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub quality: [f64; 8],
    pub alpha_epochs: u64,
    pub frozen_epochs: u64,
    pub subnet_epochs: u64,
}

impl StubBackend {
    pub fn new(quality: [f64; 8]) -> Self {
        StubBackend { quality, alpha_epochs: 0, frozen_epochs: 0, subnet_epochs: 0 }
    }
}

impl SearchBackend for StubBackend {
    fn pcdarts_epoch(&mut self, space: &mut SearchSpace, _unit: Unit, freeze_alpha: bool) -> Result<()> {
        if freeze_alpha {
            self.frozen_epochs += 1;
            return Ok(());
        }
        self.alpha_epochs += 1;
        for (t, i) in space.edge_keys() {
            for slot in space.edge_mut(t, i).slots_mut() {
                slot.alpha = self.quality[slot.kind.index()];
            }
        }
        Ok(())
    }

    fn train_and_evaluate(&mut self, _space: &SearchSpace, choice: &SubnetChoice, _unit: Unit) -> Result<f64> {
        self.subnet_epochs += 1;
        let ops: Vec<_> = choice.normal.iter().chain(&choice.reduction).collect();
        Ok(ops.iter().map(|k| self.quality[k.index()]).sum::<f64>() / ops.len() as f64)
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!([self.alpha_epochs, self.frozen_epochs, self.subnet_epochs]))
    }

    fn restore(&mut self, state: serde_json::Value) -> Result<()> {
        let v: [u64; 3] = serde_json::from_value(state).map_err(|e| Error::state(e.to_string()))?;
        [self.alpha_epochs, self.frozen_epochs, self.subnet_epochs] = v;
        Ok(())
    }
}
