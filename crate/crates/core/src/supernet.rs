//! The over-parameterized network: every edge carries all surviving
//! operations and evaluates the partial-channel mixed operation, or a
//! single sampled operation when training a subnet in place.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitops::BinarizeConfig;
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::nn::{sample_mask, EdgeExec, EdgeSite, Mode, Network, NetworkConfig, Pass};
use crate::optim::{AlphaAdam, Sgd};
use crate::space::{CellType, OperationKind, SearchSpace};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub cells: usize,
    pub reduction_positions: Vec<usize>,
    pub init_channels: usize,
    /// Channel sampling divisor: `⌊c/C⌋` channels enter each mixed op.
    pub divisor: usize,
    pub stem_multiplier: usize,
    pub stem_stride: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig { cells: 6, reduction_positions: vec![1, 3], init_channels: 16, divisor: 2, stem_multiplier: 3, stem_stride: 1 }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divisor == 0 || self.divisor > self.init_channels {
            return Err(Error::config(format!("divisor {} must lie in 1..={}", self.divisor, self.init_channels)));
        }
        Ok(())
    }

    pub fn network(&self, in_channels: usize, num_classes: usize, nodes: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            num_classes,
            init_channels: self.init_channels,
            cells: self.cells,
            reduction_positions: self.reduction_positions.clone(),
            nodes,
            stem_multiplier: self.stem_multiplier,
            stem_stride: self.stem_stride,
        }
    }
}

/// One operation per edge for both cell types.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetChoice {
    pub normal: Vec<OperationKind>,
    pub reduction: Vec<OperationKind>,
}

impl SubnetChoice {
    pub fn get(&self, t: CellType, edge: usize) -> OperationKind {
        match t {
            CellType::Normal => self.normal[edge],
            CellType::Reduction => self.reduction[edge],
        }
    }

    /// Every chosen operation must still be alive on its edge.
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        for (t, ops) in [(CellType::Normal, &self.normal), (CellType::Reduction, &self.reduction)] {
            let cell = space.cell(t);
            if ops.len() != cell.edges.len() {
                return Err(Error::usage(format!("{} choices for {} {} edges", ops.len(), cell.edges.len(), t.name())));
            }
            for (i, (&op, e)) in ops.iter().zip(&cell.edges).enumerate() {
                if !e.contains(op) {
                    return Err(Error::usage(format!("{op} was abandoned on {} edge {i}", t.name())));
                }
            }
        }
        Ok(())
    }

    /// The single surviving operation of every edge.
    pub fn decided(space: &SearchSpace) -> Result<Self> {
        let pick = |t: CellType| -> Result<Vec<OperationKind>> {
            space.cell(t).edges.iter().map(|e| e.decided().ok_or_else(|| Error::state("edge is not decided"))).collect()
        };
        Ok(SubnetChoice { normal: pick(CellType::Normal)?, reduction: pick(CellType::Reduction)? })
    }
}

#[derive(Debug, Clone)]
pub struct Supernet<F: Real = f32> {
    pub net: Network<F>,
    pub divisor: usize,
}

impl<F: Real> Supernet<F> {
    /// Builds weights for every operation alive in `space`.
    pub fn new<R: Rng + ?Sized>(
        config: &SupernetConfig,
        in_channels: usize,
        num_classes: usize,
        space: &SearchSpace,
        binarize: Option<BinarizeConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let nc = config.network(in_channels, num_classes, space.nodes());
        let edges_for = |t: CellType| {
            let cell = space.cell(t);
            cell.topology.edges().iter().copied().zip(cell.edges.iter().map(|e| e.kinds())).collect()
        };
        let concat_for = |_| (1..=space.nodes()).collect();
        let net = Network::build(nc, binarize, false, &edges_for, &concat_for, rng)?;
        Ok(Supernet { net, divisor: config.divisor })
    }

    /// A pass with every edge computing its partial-channel mixture; `masks` supplies the
    /// selected channel indices of each edge.
    pub fn run_mixed(
        &mut self,
        mode: Mode,
        x: &Tensor<F>,
        labels: Option<&[usize]>,
        space: &SearchSpace,
        masks: &mut dyn FnMut(EdgeSite) -> Vec<usize>,
    ) -> Result<Pass<F>> {
        self.net.run(mode, x, labels, Some(space), &mut |site, av| {
            let (_, weights) = av.expect("alpha handles").get(site.cell_type, site.edge);
            Ok(EdgeExec::Mixed { kinds: space.edge(site.cell_type, site.edge).kinds(), weights, mask: masks(site) })
        })
    }

    /// [`Self::run_mixed`] with masks drawn from `rng`.
    pub fn run_mixed_sampled<R: Rng + ?Sized>(
        &mut self,
        mode: Mode,
        x: &Tensor<F>,
        labels: Option<&[usize]>,
        space: &SearchSpace,
        rng: &mut R,
    ) -> Result<Pass<F>> {
        let divisor = self.divisor;
        self.run_mixed(mode, x, labels, space, &mut |site| sample_mask(site.channels, divisor, rng))
    }

    /// A pass through the subnet that takes exactly `choice` on every edge,
    /// at full width and sharing the supernet weights.
    pub fn run_subnet(&mut self, mode: Mode, x: &Tensor<F>, labels: Option<&[usize]>, choice: &SubnetChoice) -> Result<Pass<F>> {
        self.net.run(mode, x, labels, None, &mut |site, _| Ok(EdgeExec::Single(choice.get(site.cell_type, site.edge))))
    }
}

/// Consecutive batches over a shuffled copy of `idx`.
pub fn batches<R: Rng + ?Sized>(idx: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// Optimizer settings of a search epoch.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub batch_size: usize,
    pub lr: f64,
}

/// One PC-DARTS epoch: a weight step on the weight half, then (unless
/// `freeze_alpha`) a first-order α step on the α half.
#[allow(clippy::too_many_arguments)]
pub fn pcdarts_epoch<R: Rng + ?Sized>(
    net: &mut Supernet<f32>,
    space: &mut SearchSpace,
    data: &Dataset,
    split: &SplitPlan,
    sgd: &mut Sgd<f32>,
    adam: &mut AlphaAdam,
    settings: StepSettings,
    freeze_alpha: bool,
    rng: &mut R,
) -> Result<EpochStats> {
    if split.weight_half.is_empty() || split.alpha_half.is_empty() {
        return Err(Error::config("search split has an empty half"));
    }
    let wb = batches(&split.weight_half, settings.batch_size, rng);
    let ab = batches(&split.alpha_half, settings.batch_size, rng);
    let mut total = 0.0;
    for (i, idx) in wb.iter().enumerate() {
        let (x, y) = data.batch::<f32>(idx);
        let pass = net.run_mixed_sampled(Mode::WEIGHT_STEP, &x, Some(&y), space, rng)?;
        sgd.step(&mut net.net.store, &pass.param_grads, settings.lr)?;
        total += pass.loss.unwrap_or(0.0);
        if !freeze_alpha {
            let (xa, ya) = data.batch::<f32>(&ab[i % ab.len()]);
            let pass = net.run_mixed_sampled(Mode::ALPHA_STEP, &xa, Some(&ya), space, rng)?;
            adam.step(space, &pass.alpha_grads)?;
        }
    }
    Ok(EpochStats { mean_loss: total / wb.len() as f64, steps: wb.len() })
}

/// One epoch of in-place training of the subnet `choice` on `idx`.
#[allow(clippy::too_many_arguments)]
pub fn train_subnet_epoch<R: Rng + ?Sized>(
    net: &mut Supernet<f32>,
    space: &SearchSpace,
    choice: &SubnetChoice,
    data: &Dataset,
    idx: &[usize],
    sgd: &mut Sgd<f32>,
    settings: StepSettings,
    rng: &mut R,
) -> Result<EpochStats> {
    choice.validate(space)?;
    let bs = batches(idx, settings.batch_size, rng);
    let mut total = 0.0;
    for b in &bs {
        let (x, y) = data.batch::<f32>(b);
        let pass = net.run_subnet(Mode::WEIGHT_STEP, &x, Some(&y), choice)?;
        sgd.step(&mut net.net.store, &pass.param_grads, settings.lr)?;
        total += pass.loss.unwrap_or(0.0);
    }
    Ok(EpochStats { mean_loss: total / bs.len().max(1) as f64, steps: bs.len() })
}

/// Top-1 accuracy of the subnet `choice` on `idx`, in inference mode.
pub fn evaluate_subnet(net: &mut Supernet<f32>, choice: &SubnetChoice, data: &Dataset, idx: &[usize], batch: usize, packed: bool) -> Result<f64> {
    let mode = if packed { Mode::EVAL_PACKED } else { Mode::EVAL };
    let mut correct = 0usize;
    for b in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch::<f32>(b);
        let pass = net.run_subnet(mode, &x, None, choice)?;
        correct += crate::train::count_correct(&pass.logits, &y);
    }
    Ok(correct as f64 / idx.len().max(1) as f64)
}
