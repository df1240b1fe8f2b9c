//! Training and evaluation of the network stacked from a derived genotype.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitops::BinarizeConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::nn::{EdgeExec, Mode, Network, NetworkConfig, Pass};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::rng::{SeedSplitter, Stream};
use crate::space::{CellType, Edge, OperationKind};
use crate::supernet::batches;
use crate::tensor::Tensor;

/// Correct top-1 predictions; ties go to the lowest class index.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub cells: usize,
    pub init_channels: usize,
    /// Defaults to one third and two thirds of the depth.
    pub reduction_positions: Option<Vec<usize>>,
    pub stem_multiplier: usize,
    pub stem_stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cells: 8,
            init_channels: 16,
            reduction_positions: None,
            stem_multiplier: 3,
            stem_stride: 1,
            epochs: 60,
            batch_size: 96,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("epochs and batch sizes must be positive"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("learning rate and gradient clip must be positive"));
        }
        Ok(())
    }

    pub fn network(&self, in_channels: usize, num_classes: usize, nodes: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            num_classes,
            init_channels: self.init_channels,
            cells: self.cells,
            reduction_positions: self.reduction_positions.clone().unwrap_or_else(|| NetworkConfig::thirds(self.cells)),
            nodes,
            stem_multiplier: self.stem_multiplier,
            stem_stride: self.stem_stride,
        }
    }
}

/// A network whose cells follow a fixed genotype.
#[derive(Debug, Clone)]
pub struct FinalNet {
    pub net: Network<f32>,
    pub genotype: Genotype,
}

impl FinalNet {
    pub fn build<R: Rng + ?Sized>(genotype: &Genotype, config: NetworkConfig, binarize: Option<BinarizeConfig>, rng: &mut R) -> Result<Self> {
        genotype.validate()?;
        if genotype.normal.nodes() != config.nodes || genotype.reduce.nodes() != config.nodes {
            return Err(Error::config("genotype node count differs from the network configuration"));
        }
        let edges_for = |t: CellType| {
            genotype.cell(t).edges.iter().map(|e| (Edge { target: e.target, source: e.source }, vec![e.op])).collect()
        };
        let concat_for = |t: CellType| genotype.cell(t).concat.clone();
        let net = Network::build(config, binarize, true, &edges_for, &concat_for, rng)?;
        Ok(FinalNet { net, genotype: genotype.clone() })
    }

    pub fn run(&mut self, mode: Mode, x: &Tensor<f32>, labels: Option<&[usize]>) -> Result<Pass<f32>> {
        let ops: [Vec<OperationKind>; 2] = [CellType::Normal, CellType::Reduction].map(|t| self.genotype.cell(t).edges.iter().map(|e| e.op).collect());
        self.net.run(mode, x, labels, None, &mut |site, _| {
            let list = &ops[(site.cell_type == CellType::Reduction) as usize];
            Ok(EdgeExec::Single(list[site.edge]))
        })
    }

    /// Trainable scalars.
    pub fn param_count(&self) -> usize {
        self.net.store.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and top-1 accuracy over the whole of `data`.
pub fn evaluate(model: &mut FinalNet, data: &Dataset, batch: usize, packed: bool) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let mode = if packed { Mode::EVAL_PACKED } else { Mode::EVAL };
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for b in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch::<f32>(b);
        let pass = model.run(mode, &x, Some(&y))?;
        loss += pass.loss.unwrap_or(0.0) * b.len() as f64;
        correct += count_correct(&pass.logits, &y);
    }
    Ok(EvalResult { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: FinalNet,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a freshly initialized network for `genotype` and evaluates it on
/// `val` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_final(
    genotype: &Genotype,
    config: &TrainConfig,
    binarize: Option<BinarizeConfig>,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let seeds = SeedSplitter::new(seed);
    let nc = config.network(train.channels(), train.num_classes(), genotype.normal.nodes());
    let mut model = FinalNet::build(genotype, nc, binarize, &mut seeds.rng(Stream::Init, 1))?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let idx: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch as f64, config.epochs as f64, config.lr)?;
        let mut rng = seeds.rng(Stream::Shuffle, 1 << 32 | epoch as u64);
        let (mut loss, mut correct) = (0.0, 0usize);
        for b in batches(&idx, config.batch_size, &mut rng) {
            let (x, y) = train.batch::<f32>(&b);
            let mut pass = model.run(Mode::WEIGHT_STEP, &x, Some(&y))?;
            clip_grad_norm(&mut pass.param_grads, config.grad_clip);
            sgd.step(&mut model.net.store, &pass.param_grads, lr)?;
            loss += pass.loss.unwrap_or(0.0) * b.len() as f64;
            correct += count_correct(&pass.logits, &y);
        }
        let v = evaluate(&mut model, val, config.eval_batch, false)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics })
}
