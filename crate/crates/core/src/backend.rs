//! The search backend that trains a real supernet.

use serde::{Deserialize, Serialize};

use crate::bitops::BinarizeConfig;
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AlphaAdam, Sgd};
use crate::rng::{SeedSplitter, Stream};
use crate::search::{SearchBackend, Unit};
use crate::space::SearchSpace;
use crate::supernet::{evaluate_subnet, pcdarts_epoch, train_subnet_epoch, StepSettings, SubnetChoice, Supernet, SupernetConfig};

/// Optimizer settings of the search phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchOptim {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
}

impl Default for SearchOptim {
    fn default() -> Self {
        SearchOptim {
            batch_size: 128,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha_lr: 0.01,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
        }
    }
}

impl SearchOptim {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.alpha_lr > 0.0) {
            return Err(Error::config("search batch size and learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    names: Vec<String>,
    params: Vec<Vec<f32>>,
    bn: Vec<(Vec<f32>, Vec<f32>)>,
    velocity: Vec<Option<Vec<f32>>>,
    adam: AlphaAdam,
}

pub struct SupernetBackend<'d> {
    pub supernet: Supernet<f32>,
    pub split: SplitPlan,
    data: &'d Dataset,
    train_idx: Vec<usize>,
    optim: SearchOptim,
    reduction_batch: usize,
    sgd: Sgd<f32>,
    adam: AlphaAdam,
    seeds: SeedSplitter,
}

impl<'d> SupernetBackend<'d> {
    /// `space` must be the initial space; weights exist for each of its ops.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &SupernetConfig,
        optim: SearchOptim,
        reduction_batch: usize,
        validation_fraction: f64,
        data: &'d Dataset,
        space: &SearchSpace,
        binarize: Option<BinarizeConfig>,
        seed: u64,
    ) -> Result<Self> {
        optim.validate()?;
        let seeds = SeedSplitter::new(seed);
        let split = SplitPlan::new(data.len(), validation_fraction, &mut seeds.rng(Stream::Split, 0))?;
        if split.reduction_val.is_empty() {
            return Err(Error::config("validation split is empty"));
        }
        let supernet = Supernet::new(config, data.channels(), data.num_classes(), space, binarize, &mut seeds.rng(Stream::Init, 0))?;
        let mut train_idx = [split.weight_half.clone(), split.alpha_half.clone()].concat();
        train_idx.sort_unstable();
        Ok(SupernetBackend {
            supernet,
            split,
            data,
            train_idx,
            sgd: Sgd::new(optim.momentum, optim.weight_decay),
            adam: AlphaAdam::new(optim.alpha_lr, optim.alpha_beta1, optim.alpha_beta2, optim.alpha_weight_decay),
            optim,
            reduction_batch,
            seeds,
        })
    }

    fn lr(&self, unit: Unit) -> Result<f64> {
        cosine_lr(unit.index as f64, unit.total as f64, self.optim.lr)
    }
}

impl SearchBackend for SupernetBackend<'_> {
    fn pcdarts_epoch(&mut self, space: &mut SearchSpace, unit: Unit, freeze_alpha: bool) -> Result<()> {
        let settings = StepSettings { batch_size: self.optim.batch_size, lr: self.lr(unit)? };
        let mut rng = self.seeds.rng(Stream::Mask, unit.index);
        pcdarts_epoch(&mut self.supernet, space, self.data, &self.split, &mut self.sgd, &mut self.adam, settings, freeze_alpha, &mut rng)?;
        Ok(())
    }

    fn train_and_evaluate(&mut self, space: &SearchSpace, choice: &SubnetChoice, unit: Unit) -> Result<f64> {
        let settings = StepSettings { batch_size: self.reduction_batch, lr: self.lr(unit)? };
        let mut rng = self.seeds.rng(Stream::Shuffle, unit.index);
        train_subnet_epoch(&mut self.supernet, space, choice, self.data, &self.train_idx, &mut self.sgd, settings, &mut rng)?;
        evaluate_subnet(&mut self.supernet, choice, self.data, &self.split.reduction_val, self.reduction_batch, false)
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        let store = &self.supernet.net.store;
        let snap = Snapshot {
            names: store.params().iter().map(|p| p.name.clone()).collect(),
            params: store.params().iter().map(|p| p.value.data().to_vec()).collect(),
            bn: store.stats().iter().map(|s| (s.mean.clone(), s.var.clone())).collect(),
            velocity: self.sgd.velocity().to_vec(),
            adam: self.adam.clone(),
        };
        serde_json::to_value(snap).map_err(|e| Error::state(format!("snapshot: {e}")))
    }

    fn restore(&mut self, state: serde_json::Value) -> Result<()> {
        let snap: Snapshot = serde_json::from_value(state).map_err(|e| Error::state(format!("checkpoint backend state: {e}")))?;
        let store = &mut self.supernet.net.store;
        if snap.names.len() != store.len() || snap.bn.len() != store.stats().len() {
            return Err(Error::state("checkpoint was written for a different supernet"));
        }
        for ((p, name), values) in store.params_mut().iter_mut().zip(&snap.names).zip(snap.params) {
            if &p.name != name || p.value.len() != values.len() {
                return Err(Error::state(format!("checkpoint parameter {name} does not match {}", p.name)));
            }
            p.value.data_mut().copy_from_slice(&values);
        }
        for (s, (mean, var)) in store.stats_mut().iter_mut().zip(snap.bn) {
            if s.mean.len() != mean.len() || s.var.len() != var.len() {
                return Err(Error::state("checkpoint batch-norm statistics do not match"));
            }
            s.mean = mean;
            s.var = var;
        }
        self.sgd.set_velocity(snap.velocity);
        self.adam = snap.adam;
        Ok(())
    }
}
