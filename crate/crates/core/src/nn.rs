//! Network building blocks shared by the supernet and the final network:
//! parameter storage, the per-forward context, binarizable convolutions,
//! batch norm, the eight candidate operations and cell assembly.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Gradients, Graph, Var};
use crate::bitops::{self, AmplitudeGranularity, BinarizeConfig, BinarizeMode, BinaryKernel, PackedActivations};
use crate::error::{Error, Result};
use crate::kernels::{out_extent, ConvSpec, PoolKind, PoolSpec};
use crate::space::{CellType, Edge, OperationKind};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const STE_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Full-precision convolution kernel.
    Conv,
    /// Kernel that is binarized in the forward pass.
    BinaryConv,
    /// Learned binarization amplitude.
    Amplitude,
    BnAffine,
    Linear,
    Bias,
}

impl ParamKind {
    /// Whether weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Conv | ParamKind::BinaryConv | ParamKind::Linear | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct BnStats<F: Real> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Owner of every trainable tensor and batch-norm running statistic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    params: Vec<Param<F>>,
    stats: Vec<BnStats<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), stats: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<F>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, channels: usize) -> BnId {
        self.stats.push(BnStats { mean: vec![F::zero(); channels], var: vec![F::one(); channels] });
        BnId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[BnStats<F>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [BnStats<F>] {
        &mut self.stats
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| BnStats {
                    mean: s.mean.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn update_running(&mut self, id: BnId, sel: Option<&[usize]>, mean: &[F], var: &[F], count: usize) {
        let m = F::from_f64_lossy(BN_MOMENTUM);
        let unbias = if count > 1 { F::from_f64_lossy(count as f64 / (count - 1) as f64) } else { F::one() };
        let st = &mut self.stats[id.0];
        for (j, (&mu, &v)) in mean.iter().zip(var).enumerate() {
            let c = sel.map_or(j, |s| s[j]);
            st.mean[c] = (F::one() - m) * st.mean[c] + m * mu;
            st.var[c] = (F::one() - m) * st.var[c] + m * v * unbias;
        }
    }
}

/// State of one forward pass: the tape, parameter bindings and the
/// amplitude-loss terms collected from binarized convolutions.
pub struct Ctx<'s, F: Real> {
    pub g: Graph<F>,
    store: &'s mut ParamStore<F>,
    bound: Vec<Option<Var>>,
    /// Batch statistics (and running-stat updates) instead of running stats.
    pub train: bool,
    /// Bind parameters as constants so no weight gradients are formed.
    pub frozen: bool,
    pub binarize: Option<BinarizeConfig>,
    /// Route binarized convolutions through the XNOR-popcount kernels.
    /// Only honoured on forward-only graphs.
    pub packed: bool,
    amp_terms: Vec<Var>,
}

impl<'s, F: Real> Ctx<'s, F> {
    pub fn new(store: &'s mut ParamStore<F>, graph: Graph<F>, train: bool, binarize: Option<BinarizeConfig>) -> Self {
        let n = store.len();
        Ctx { g: graph, store, bound: vec![None; n], train, frozen: false, binarize, packed: false, amp_terms: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.params[id.0].value.clone();
        let v = if self.frozen || !self.g.is_recording() { self.g.constant(t) } else { self.g.leaf(t) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Amplitude loss terms gathered so far.
    pub fn amplitude_terms(&self) -> &[Var] {
        &self.amp_terms
    }

    /// `cross-entropy + Σ amplitude losses`.
    pub fn total_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ce = self.g.cross_entropy(logits, labels)?;
        if self.amp_terms.is_empty() {
            return Ok(ce);
        }
        let mut terms = vec![ce];
        terms.extend(self.amp_terms.iter().copied());
        self.g.add(&terms)
    }

    /// Back-propagates `loss` and returns it with the gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.g.backward(loss)
    }

    /// Gradients of every parameter bound in this pass, in id order.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

fn kaiming<F: Real, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<F> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| F::from_f64_lossy(dist.sample(rng)))
}

/// A 2-D convolution whose kernel may be binarized.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub amplitude: Option<ParamId>,
    pub spec: ConvSpec,
    pub binary: bool,
    pub depthwise: bool,
}

pub struct Builder<'a, F: Real, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
    pub binarize: Option<BinarizeConfig>,
    pub affine: bool,
}

impl<F: Real, R: Rng + ?Sized> Builder<'_, F, R> {
    /// `binary` marks convolutions that are binarized when binarization
    /// is enabled for the network.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, spec: ConvSpec, binary: bool) -> Conv {
        let depthwise = spec.groups > 1;
        let shape = [c_out, c_in / spec.groups.max(1), k, k];
        let w: Tensor<F> = kaiming(shape, self.rng);
        let binary = binary && self.binarize.is_some();
        let amplitude = match self.binarize {
            Some(cfg) if binary && cfg.mode == BinarizeMode::PcnnAmp => {
                let a = bitops::fit_amplitude(&w, cfg.granularity).expect("nonempty kernel");
                let len = a.len();
                Some(self.store.add(format!("{name}.amp"), ParamKind::Amplitude, Tensor::new([len], a).expect("len")))
            }
            _ => None,
        };
        let kind = if binary { ParamKind::BinaryConv } else { ParamKind::Conv };
        let weight = self.store.add(format!("{name}.weight"), kind, w);
        Conv { weight, amplitude, spec, binary, depthwise }
    }

    pub fn bn(&mut self, name: &str, channels: usize, affine: bool) -> BatchNorm {
        let affine = affine.then(|| {
            let g = self.store.add(format!("{name}.gamma"), ParamKind::BnAffine, Tensor::full([channels], F::one()));
            let b = self.store.add(format!("{name}.beta"), ParamKind::BnAffine, Tensor::zeros([channels]));
            (g, b)
        });
        BatchNorm { affine, stats: self.store.add_bn(channels) }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let w = Tensor::from_fn([d_out, d_in], |_| F::from_f64_lossy(dist.sample(self.rng)));
        let b = Tensor::from_fn([d_out], |_| F::from_f64_lossy(dist.sample(self.rng)));
        Linear {
            weight: self.store.add(format!("{name}.weight"), ParamKind::Linear, w),
            bias: self.store.add(format!("{name}.bias"), ParamKind::Bias, b),
        }
    }

    pub fn op(&mut self, name: &str, kind: OperationKind, c: usize, stride: usize) -> OpModule {
        let affine = self.affine;
        match kind {
            OperationKind::Zero => OpModule::Zero { stride },
            OperationKind::Identity if stride == 1 => OpModule::Identity,
            OperationKind::Identity => OpModule::FactorizedReduce {
                conv: self.conv(&format!("{name}.fr"), c, c, 1, ConvSpec::new(2, 0, 1), true),
                bn: self.bn(&format!("{name}.bn"), c, affine),
            },
            OperationKind::MaxPool3 | OperationKind::AvgPool3 => OpModule::Pool {
                kind: if kind == OperationKind::MaxPool3 { PoolKind::Max } else { PoolKind::Avg },
                stride,
                bn: self.bn(&format!("{name}.bn"), c, affine),
            },
            OperationKind::SepConv3 | OperationKind::SepConv5 | OperationKind::DilConv3 | OperationKind::DilConv5 => {
                let (k, dil) = match kind {
                    OperationKind::SepConv3 => (3, 1),
                    OperationKind::SepConv5 => (5, 1),
                    OperationKind::DilConv3 => (3, 2),
                    _ => (5, 2),
                };
                let pad = dil * (k - 1) / 2;
                OpModule::Conv {
                    dw: self.conv(&format!("{name}.dw"), c, c, k, ConvSpec::new(stride, pad, dil).grouped(c), true),
                    pw: self.conv(&format!("{name}.pw"), c, c, 1, ConvSpec::new(1, 0, 1), true),
                    bn: self.bn(&format!("{name}.bn"), c, affine),
                }
            }
        }
    }
}

impl Conv {
    /// Applies the convolution. `sel` restricts both the input and output
    /// channels to a subset (the input must already be restricted).
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, sel: Option<&[usize]>) -> Result<Var> {
        let mut w = ctx.param(self.weight);
        let mut spec = self.spec;
        if let Some(idx) = sel {
            w = ctx.g.select(w, 0, idx)?;
            if self.depthwise {
                spec.groups = idx.len();
            } else {
                w = ctx.g.select(w, 1, idx)?;
            }
        }
        let cfg = match ctx.binarize {
            Some(cfg) if self.binary => cfg,
            _ => return ctx.g.conv2d(x, w, spec),
        };
        let amp = match (self.amplitude, cfg.mode) {
            (Some(a), BinarizeMode::PcnnAmp) => {
                let v = ctx.param(a);
                match (sel, cfg.granularity) {
                    (Some(idx), AmplitudeGranularity::PerFilter) => Some(ctx.g.select(v, 0, idx)?),
                    _ => Some(v),
                }
            }
            _ => None,
        };
        if ctx.packed && !ctx.g.is_recording() {
            return packed_conv(ctx, x, w, amp, cfg.granularity, spec);
        }
        let clip = F::from_f64_lossy(STE_CLIP);
        let xb = ctx.g.sign_ste(x, clip, true)?;
        let wb = ctx.g.binarize_weight(w, amp, cfg.granularity, clip)?;
        if cfg.theta > 0.0 && ctx.g.is_recording() {
            let l = ctx.g.amplitude_loss(w, amp, cfg.granularity, F::from_f64_lossy(cfg.theta))?;
            ctx.amp_terms.push(l);
        }
        ctx.g.conv2d(xb, wb, spec)
    }
}

fn packed_conv<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    w: Var,
    amp: Option<Var>,
    granularity: AmplitudeGranularity,
    spec: ConvSpec,
) -> Result<Var> {
    let wt = ctx.g.value(w);
    let kernel = match amp {
        None => BinaryKernel::from_weights(wt, granularity)?,
        Some(a) => {
            let amps = ctx.g.value(a).data().iter().map(|v| v.as_f64() as f32).collect();
            BinaryKernel::from_parts(wt, amps, granularity)?
        }
    };
    let act = PackedActivations::pack_scaled(ctx.g.value(x), spec.groups.max(1))?;
    let y = bitops::xnor_conv2d(&act, &kernel, spec)?;
    Ok(ctx.g.constant(y.cast()))
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub affine: Option<(ParamId, ParamId)>,
    pub stats: BnId,
}

impl BatchNorm {
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, sel: Option<&[usize]>) -> Result<Var> {
        let (gamma, beta) = match self.affine {
            Some((g, b)) => {
                let (mut g, mut b) = (ctx.param(g), ctx.param(b));
                if let Some(idx) = sel {
                    g = ctx.g.select(g, 0, idx)?;
                    b = ctx.g.select(b, 0, idx)?;
                }
                (Some(g), Some(b))
            }
            None => (None, None),
        };
        let eps = F::from_f64_lossy(BN_EPS);
        if ctx.train {
            let [n, _, h, w] = ctx.g.value(x).dims4()?;
            let (y, mean, var) = ctx.g.batch_norm_train(x, gamma, beta, eps)?;
            ctx.store.update_running(self.stats, sel, &mean, &var, n * h * w);
            Ok(y)
        } else {
            let st = &ctx.store.stats[self.stats.0];
            let (mean, var): (Vec<F>, Vec<F>) = match sel {
                Some(idx) => (idx.iter().map(|&i| st.mean[i]).collect(), idx.iter().map(|&i| st.var[i]).collect()),
                None => (st.mean.clone(), st.var.clone()),
            };
            ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.g.linear(x, w, Some(b))
    }
}

/// One candidate operation on an edge.
#[derive(Debug, Clone)]
pub enum OpModule {
    Zero { stride: usize },
    Identity,
    /// Identity on a stride-2 edge: a stride-2 1×1 convolution.
    FactorizedReduce { conv: Conv, bn: BatchNorm },
    Pool { kind: PoolKind, stride: usize, bn: BatchNorm },
    /// Separable or dilated: depthwise, pointwise, batch norm.
    Conv { dw: Conv, pw: Conv, bn: BatchNorm },
}

fn maybe_relu<F: Real>(ctx: &mut Ctx<'_, F>, x: Var) -> Var {
    // Binarized convolutions take the sign of their input, which already
    // acts as the nonlinearity.
    if ctx.binarize.is_some() {
        x
    } else {
        ctx.g.relu(x)
    }
}

impl OpModule {
    /// Output of the operation, or `None` for the zero operation.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, sel: Option<&[usize]>) -> Result<Option<Var>> {
        Ok(Some(match self {
            OpModule::Zero { .. } => return Ok(None),
            OpModule::Identity => x,
            OpModule::FactorizedReduce { conv, bn } => {
                let h = maybe_relu(ctx, x);
                let h = conv.forward(ctx, h, sel)?;
                bn.forward(ctx, h, sel)?
            }
            OpModule::Pool { kind, stride, bn } => {
                let h = ctx.g.pool2d(x, PoolSpec { kind: *kind, window: 3, stride: *stride, padding: 1 })?;
                bn.forward(ctx, h, sel)?
            }
            OpModule::Conv { dw, pw, bn } => {
                let h = maybe_relu(ctx, x);
                let h = dw.forward(ctx, h, sel)?;
                let h = pw.forward(ctx, h, sel)?;
                bn.forward(ctx, h, sel)?
            }
        }))
    }
}

/// Spatial extent after a 3×3, padding-1 window with `stride`.
pub fn reduced(size: usize, stride: usize) -> usize {
    out_extent(size, 3, stride, 1, 1).unwrap_or(0)
}

/// `1×1` conv + BN, or a factorized reduce when the input has twice the
/// resolution of the cell.
#[derive(Debug, Clone)]
pub struct Preprocess {
    conv: Conv,
    bn: BatchNorm,
}

impl Preprocess {
    pub fn build<F: Real, R: Rng + ?Sized>(b: &mut Builder<'_, F, R>, name: &str, c_in: usize, c_out: usize, reduce: bool) -> Self {
        let spec = if reduce { ConvSpec::new(2, 0, 1) } else { ConvSpec::new(1, 0, 1) };
        let affine = b.affine;
        Preprocess { conv: b.conv(&format!("{name}.conv"), c_in, c_out, 1, spec, true), bn: b.bn(&format!("{name}.bn"), c_out, affine) }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = maybe_relu(ctx, x);
        let h = self.conv.forward(ctx, h, None)?;
        self.bn.forward(ctx, h, None)
    }
}

/// How one edge is evaluated in a forward pass.
#[derive(Debug, Clone)]
pub enum EdgeExec {
    /// The α-weighted sum of `kinds` on the channels `mask`; the
    /// other channels bypass. `weights` holds `softmax(α)` in `kinds` order.
    Mixed { kinds: Vec<OperationKind>, weights: Var, mask: Vec<usize> },
    /// Exactly one operation at full width.
    Single(OperationKind),
}

/// Identifies an edge to the [`EdgeExec`] callback.
#[derive(Debug, Clone, Copy)]
pub struct EdgeSite {
    pub cell: usize,
    pub cell_type: CellType,
    pub edge: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct CellEdge {
    pub edge: Edge,
    pub stride: usize,
    pub ops: Vec<(OperationKind, OpModule)>,
}

impl CellEdge {
    pub fn module(&self, kind: OperationKind) -> Result<&OpModule> {
        self.ops
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::usage(format!("operation {kind} is not available on edge {:?}", self.edge)))
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub cell_type: CellType,
    pub channels: usize,
    pub nodes: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub edges: Vec<CellEdge>,
    pub concat: Vec<usize>,
}

impl Cell {
    /// Builds a cell whose edge `i` carries the operations `ops[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn build<F: Real, R: Rng + ?Sized>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cell_type: CellType,
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction_prev: bool,
        nodes: usize,
        edges: &[(Edge, Vec<OperationKind>)],
        concat: Vec<usize>,
    ) -> Self {
        let pre0 = Preprocess::build(b, &format!("{name}.pre0"), c_pp, c, reduction_prev);
        let pre1 = Preprocess::build(b, &format!("{name}.pre1"), c_p, c, false);
        let edges = edges
            .iter()
            .map(|(e, kinds)| {
                let stride = if cell_type == CellType::Reduction && e.from_input() { 2 } else { 1 };
                let ops = kinds
                    .iter()
                    .map(|&k| (k, b.op(&format!("{name}.e{}_{}.{}", e.source, e.target, k.name()), k, c, stride)))
                    .collect();
                CellEdge { edge: *e, stride, ops }
            })
            .collect();
        Cell { cell_type, channels: c, nodes, pre0, pre1, edges, concat }
    }

    pub fn out_channels(&self) -> usize {
        self.concat.len() * self.channels
    }

    pub fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<'_, F>,
        s0: Var,
        s1: Var,
        index: usize,
        exec: &mut dyn FnMut(&mut Ctx<'_, F>, EdgeSite) -> Result<EdgeExec>,
    ) -> Result<Var> {
        let p0 = self.pre0.forward(ctx, s0)?;
        let p1 = self.pre1.forward(ctx, s1)?;
        let [n, _, h, w] = ctx.g.value(p1).dims4()?;
        let stride = if self.cell_type == CellType::Reduction { 2 } else { 1 };
        let node_shape = [n, self.channels, reduced(h, stride), reduced(w, stride)];
        let mut states = vec![p0, p1];
        for j in 1..=self.nodes {
            let mut terms = Vec::new();
            for (pos, ce) in self.edges.iter().enumerate().filter(|(_, ce)| ce.edge.target == j) {
                let x = states[(ce.edge.source + 1) as usize];
                let site = EdgeSite { cell: index, cell_type: self.cell_type, edge: pos, channels: self.channels };
                let out = match exec(ctx, site)? {
                    EdgeExec::Single(kind) => ce.module(kind)?.forward(ctx, x, None)?,
                    EdgeExec::Mixed { kinds, weights, mask } => Some(mixed_forward(ctx, ce, x, &kinds, weights, &mask)?),
                };
                terms.extend(out);
            }
            let node = if terms.is_empty() { ctx.g.constant(Tensor::zeros(node_shape.to_vec())) } else { ctx.g.add(&terms)? };
            states.push(node);
        }
        let outs: Vec<Var> = self.concat.iter().map(|&j| states[j + 1]).collect();
        ctx.g.concat(&outs)
    }
}

/// Partial-channel mixture on one edge: `Σ_k w_k · o_k(S∗x) + (1−S)∗x`. Masked channels pass
/// through unchanged (max-pooled on stride-2 edges to match resolution).
pub fn mixed_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    edge: &CellEdge,
    x: Var,
    kinds: &[OperationKind],
    weights: Var,
    mask: &[usize],
) -> Result<Var> {
    if kinds.is_empty() {
        return Err(Error::state("mixed operation with no surviving operations"));
    }
    let [n, c, h, w] = ctx.g.value(x).dims4()?;
    if mask.is_empty() || mask.len() > c || mask.iter().any(|&i| i >= c) {
        return Err(Error::dim(format!("channel mask of {} entries for {c} channels", mask.len())));
    }
    let full = mask.len() == c;
    let xs = if full { x } else { ctx.g.select(x, 1, mask)? };
    let sel = if full { None } else { Some(mask) };
    let mut terms = Vec::with_capacity(kinds.len());
    for &k in kinds {
        terms.push(edge.module(k)?.forward(ctx, xs, sel)?);
    }
    let shape = [n, mask.len(), reduced(h, edge.stride), reduced(w, edge.stride)];
    let mixed = ctx.g.weighted_sum(weights, &terms, &shape)?;
    if full {
        return Ok(mixed);
    }
    let base = if edge.stride == 1 {
        x
    } else {
        ctx.g.pool2d(x, PoolSpec { kind: PoolKind::Max, window: 3, stride: edge.stride, padding: 1 })?
    };
    ctx.g.merge_channels(base, mixed, mask)
}

/// `⌊channels / divisor⌋` channel indices drawn uniformly, sorted.
pub fn sample_mask<R: Rng + ?Sized>(channels: usize, divisor: usize, rng: &mut R) -> Vec<usize> {
    let k = (channels / divisor.max(1)).max(1);
    let mut idx = sample(rng, channels, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub init_channels: usize,
    pub cells: usize,
    pub reduction_positions: Vec<usize>,
    pub nodes: usize,
    pub stem_multiplier: usize,
    pub stem_stride: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.init_channels == 0 || self.nodes == 0 {
            return Err(Error::config("cells, channels and nodes must be positive"));
        }
        if let Some(&p) = self.reduction_positions.iter().find(|&&p| p >= self.cells) {
            return Err(Error::config(format!("reduction position {p} beyond {} cells", self.cells)));
        }
        if !(1..=2).contains(&self.stem_stride) {
            return Err(Error::config("stem stride must be 1 or 2"));
        }
        Ok(())
    }

    /// Default reduction positions at one and two thirds of the depth.
    pub fn thirds(cells: usize) -> Vec<usize> {
        let mut v = vec![cells / 3, 2 * cells / 3];
        v.dedup();
        v
    }
}

/// Stem, stacked cells and classifier over a parameter store.
#[derive(Debug, Clone)]
pub struct Network<F: Real = f32> {
    pub config: NetworkConfig,
    pub binarize: Option<BinarizeConfig>,
    pub store: ParamStore<F>,
    pub arch: Arch,
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub cells: Vec<Cell>,
    pub classifier: Linear,
}

impl<F: Real> Network<F> {
    /// `edges_for(t)` lists the edges of a cell of type `t` with the
    /// operations each carries; `concat_for(t)` its output nodes.
    pub fn build<R: Rng + ?Sized>(
        config: NetworkConfig,
        binarize: Option<BinarizeConfig>,
        affine: bool,
        edges_for: &dyn Fn(CellType) -> Vec<(Edge, Vec<OperationKind>)>,
        concat_for: &dyn Fn(CellType) -> Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(b) = binarize {
            b.validate()?;
        }
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng, binarize, affine };
        let c_stem = config.stem_multiplier * config.init_channels;
        let stem = b.conv("stem", config.in_channels, c_stem, 3, ConvSpec::new(config.stem_stride, 1, 1), false);
        let stem_bn = b.bn("stem.bn", c_stem, true);
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, config.init_channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.cells);
        for i in 0..config.cells {
            let t = if config.reduction_positions.contains(&i) { CellType::Reduction } else { CellType::Normal };
            if t == CellType::Reduction {
                c *= 2;
            }
            let cell = Cell::build(&mut b, &format!("cell{i}"), t, c_pp, c_p, c, reduction_prev, config.nodes, &edges_for(t), concat_for(t));
            reduction_prev = t == CellType::Reduction;
            c_pp = c_p;
            c_p = cell.out_channels();
            cells.push(cell);
        }
        let classifier = b.linear("classifier", c_p, config.num_classes);
        Ok(Network { config, binarize, store, arch: Arch { stem, stem_bn, cells, classifier } })
    }

    /// Opens a forward context over this network's parameters.
    pub fn ctx(&mut self, graph: Graph<F>, train: bool) -> (Ctx<'_, F>, &Arch) {
        let Network { store, arch, binarize, .. } = self;
        (Ctx::new(store, graph, train, *binarize), arch)
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network { config: self.config.clone(), binarize: self.binarize, store: self.store.cast(), arch: self.arch.clone() }
    }
}

impl Arch {
    /// Logits for the input batch `x`.
    pub fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<'_, F>,
        x: Var,
        exec: &mut dyn FnMut(&mut Ctx<'_, F>, EdgeSite) -> Result<EdgeExec>,
    ) -> Result<Var> {
        let h = self.stem.forward(ctx, x, None)?;
        let h = self.stem_bn.forward(ctx, h, None)?;
        let (mut s0, mut s1) = (h, h);
        for (i, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(ctx, s0, s1, i, exec)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = ctx.g.global_avg_pool(s1)?;
        self.classifier.forward(ctx, pooled)
    }
}

/// Gradient of the loss w.r.t. the α of one edge, in slot order.
pub type AlphaGrad = (CellType, usize, Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    None,
    Weights,
    Alpha,
}

/// What a forward pass is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub grads: GradTarget,
    pub packed: bool,
}

impl Mode {
    pub const WEIGHT_STEP: Mode = Mode { train: true, grads: GradTarget::Weights, packed: false };
    pub const ALPHA_STEP: Mode = Mode { train: true, grads: GradTarget::Alpha, packed: false };
    /// Batch statistics, no tape.
    pub const TRAIN_FORWARD: Mode = Mode { train: true, grads: GradTarget::None, packed: false };
    pub const EVAL: Mode = Mode { train: false, grads: GradTarget::None, packed: false };
    /// Inference with binarized convolutions on the bit-packed kernels.
    pub const EVAL_PACKED: Mode = Mode { train: false, grads: GradTarget::None, packed: true };
}

/// Per-edge `(α leaf, softmax(α))` handles for both cell types.
pub struct AlphaVars {
    pub normal: Vec<(Var, Var)>,
    pub reduction: Vec<(Var, Var)>,
}

impl AlphaVars {
    pub fn get(&self, t: CellType, edge: usize) -> (Var, Var) {
        match t {
            CellType::Normal => self.normal[edge],
            CellType::Reduction => self.reduction[edge],
        }
    }
}

/// Results of [`Network::run`].
pub struct Pass<F: Real> {
    pub logits: Tensor<F>,
    pub loss: Option<f64>,
    pub param_grads: Vec<(ParamId, Tensor<F>)>,
    pub alpha_grads: Vec<AlphaGrad>,
}

impl<F: Real> Network<F> {
    /// One forward pass (and backward, per `mode`). With `space`, softmax(α)
    /// handles for every edge are made available to `exec`.
    pub fn run(
        &mut self,
        mode: Mode,
        x: &Tensor<F>,
        labels: Option<&[usize]>,
        space: Option<&crate::space::SearchSpace>,
        exec: &mut dyn FnMut(EdgeSite, Option<&AlphaVars>) -> Result<EdgeExec>,
    ) -> Result<Pass<F>> {
        let backward = mode.grads != GradTarget::None;
        if backward && labels.is_none() {
            return Err(Error::usage("a gradient pass needs labels"));
        }
        let graph = if backward { Graph::new() } else { Graph::inference() };
        let (mut ctx, arch) = self.ctx(graph, mode.train);
        ctx.frozen = mode.grads != GradTarget::Weights;
        ctx.packed = mode.packed;
        let alphas = match space {
            Some(space) => {
                let make = |t: CellType, ctx: &mut Ctx<'_, F>| -> Result<Vec<(Var, Var)>> {
                    space
                        .cell(t)
                        .edges
                        .iter()
                        .map(|e| {
                            let a: Vec<F> = e.alphas().into_iter().map(F::from_f64_lossy).collect();
                            let a = Tensor::new([a.len()], a)?;
                            let v = if mode.grads == GradTarget::Alpha { ctx.g.leaf(a) } else { ctx.g.constant(a) };
                            Ok((v, ctx.g.softmax(v)?))
                        })
                        .collect()
                };
                let normal = make(CellType::Normal, &mut ctx)?;
                let reduction = make(CellType::Reduction, &mut ctx)?;
                Some(AlphaVars { normal, reduction })
            }
            None => None,
        };
        let xv = ctx.g.constant(x.clone());
        let logits = arch.forward(&mut ctx, xv, &mut |_, site| exec(site, alphas.as_ref()))?;
        let mut pass = Pass { logits: ctx.g.value(logits).clone(), loss: None, param_grads: Vec::new(), alpha_grads: Vec::new() };
        let Some(labels) = labels else { return Ok(pass) };
        let loss = ctx.total_loss(logits, labels)?;
        let lv = ctx.g.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is {lv}")));
        }
        pass.loss = Some(lv);
        if !backward {
            return Ok(pass);
        }
        let mut grads = ctx.backward(loss)?;
        match mode.grads {
            GradTarget::Weights => pass.param_grads = ctx.param_grads(&mut grads),
            GradTarget::Alpha => {
                let av = alphas.as_ref().ok_or_else(|| Error::usage("α gradients need a search space"))?;
                for (t, list) in [(CellType::Normal, &av.normal), (CellType::Reduction, &av.reduction)] {
                    for (i, (a, _)) in list.iter().enumerate() {
                        let g = grads.get(*a).map(|g| g.data().iter().map(|v| v.as_f64()).collect());
                        let len = ctx.g.value(*a).len();
                        pass.alpha_grads.push((t, i, g.unwrap_or_else(|| vec![0.0; len])));
                    }
                }
            }
            GradTarget::None => {}
        }
        Ok(pass)
    }
}
