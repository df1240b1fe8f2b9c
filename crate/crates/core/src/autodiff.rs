//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends one
//! node holding its output value plus whatever it needs for the backward
//! rule; [`Graph::backward`] walks the tape in reverse.

use crate::bitops::{self, AmplitudeGranularity};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, PoolSpec};
use crate::tensor::{gemm, Real, Tensor, Trans};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv { x: Var, w: Var, spec: ConvSpec },
    Pool { x: Var, spec: PoolSpec, argmax: Vec<u32> },
    Add(Vec<Var>),
    Scale { x: Var, k: F },
    Mul { a: Var, b: Var },
    WeightedSum { w: Var, terms: Vec<Option<Var>> },
    Concat { xs: Vec<Var> },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<F>, inv_std: Vec<F>, train: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Select { x: Var, axis: usize, idx: Vec<usize> },
    Merge { base: Var, sub: Var, idx: Vec<usize> },
    SignSte { x: Var, clip: F, scale: Vec<F> },
    BinarizeWeight { x: Var, amp: Option<Var>, granularity: AmplitudeGranularity, clip: F, amps: Vec<F> },
    AmplitudeLoss { x: Var, amp: Option<Var>, granularity: AmplitudeGranularity, theta: F, amps: Vec<F> },
    Sum { x: Var },
    Mean { x: Var },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::Pool { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x }
            | Op::Select { x, .. }
            | Op::SignSte { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Add(xs) | Op::Concat { xs } => xs.clone(),
            Op::WeightedSum { w, terms } => std::iter::once(*w).chain(terms.iter().flatten().copied()).collect(),
            Op::BatchNorm { x, gamma, beta, .. } => std::iter::once(*x).chain(*gamma).chain(*beta).collect(),
            Op::Linear { x, w, b } => std::iter::once(*x).chain(std::iter::once(*w)).chain(*b).collect(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Merge { base, sub, .. } => vec![*base, *sub],
            Op::Mul { a, b } => vec![*a, *b],
            Op::BinarizeWeight { x, amp, .. } | Op::AmplitudeLoss { x, amp, .. } => {
                std::iter::once(*x).chain(*amp).collect()
            }
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<F: Real>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sign<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

impl<F: Real> Graph<F> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// A forward-only graph; `backward` on it is a usage error.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let needs_grad = self.record && op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), spec)?;
        Ok(self.push(y, Op::Conv { x, w, spec }))
    }

    pub fn pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (y, argmax) = kernels::pool2d_forward(self.value(x), spec)?;
        Ok(self.push(y, Op::Pool { x, spec, argmax }))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("add of zero tensors"))?;
        let mut acc = self.value(*first).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x))?;
        }
        Ok(self.push(acc, Op::Add(xs.to_vec())))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale { x, k })
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let y = Tensor::from_fn(self.shape(a).to_vec(), |i| av[i] * bv[i]);
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// `Σ_k w[k] · term_k`; `None` terms are zero tensors of `shape`.
    pub fn weighted_sum(&mut self, w: Var, terms: &[Option<Var>], shape: &[usize]) -> Result<Var> {
        if self.value(w).len() != terms.len() {
            return Err(Error::dim(format!("{} weights for {} terms", self.value(w).len(), terms.len())));
        }
        let mut acc = Tensor::zeros(shape.to_vec());
        for (k, t) in terms.iter().enumerate() {
            if let Some(t) = t {
                let tv = self.value(*t);
                if tv.shape() != shape {
                    return Err(Error::dim(format!("term shape {:?} vs {shape:?}", tv.shape())));
                }
                let wk = self.value(w).data()[k];
                for (a, &b) in acc.data_mut().iter_mut().zip(tv.data()) {
                    *a += wk * b;
                }
            }
        }
        Ok(self.push(acc, Op::WeightedSum { w, terms: terms.to_vec() }))
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let [n, _, h, w] = self.value(xs[0]).dims4()?;
        let mut total = 0;
        for &x in xs {
            let [n2, c2, h2, w2] = self.value(x).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::dim(format!("concat of {:?} with {:?}", self.shape(xs[0]), self.shape(x))));
            }
            total += c2;
        }
        let mut out = Vec::with_capacity(n * total * h * w);
        for ni in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * h * w..(ni + 1) * c * h * w]);
            }
        }
        let y = Tensor::new([n, total, h, w], out)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(F::zero()));
        self.push(y, Op::Relu { x })
    }

    /// Batch normalization with batch statistics. Returns the output and
    /// the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: F,
    ) -> Result<(Var, Vec<F>, Vec<F>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let m = n * h * w;
        let mf = F::from_usize(m).unwrap();
        let xv = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ci in 0..c {
            let mut s = F::zero();
            for ni in 0..n {
                s += xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w].iter().copied().sum::<F>();
            }
            let mu = s / mf;
            let mut v = F::zero();
            for ni in 0..n {
                for &e in &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                    v += (e - mu) * (e - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = v / mf;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std)?;
        let keep = if self.record { xhat } else { Vec::new() };
        let node = self.push(y, Op::BatchNorm { x, gamma, beta, xhat: keep, inv_std, train: true });
        Ok((node, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Var> {
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, mean, &inv_std)?;
        let keep = if self.record { xhat } else { Vec::new() };
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, xhat: keep, inv_std, train: false }))
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[F],
        inv_std: &[F],
    ) -> Result<(Tensor<F>, Vec<F>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if mean.len() != c {
            return Err(Error::dim(format!("batch norm over {c} channels given {} statistics", mean.len())));
        }
        let g = gamma.map(|v| self.value(v).data());
        let b = beta.map(|v| self.value(v).data());
        for p in g.iter().chain(b.iter()) {
            if p.len() != c {
                return Err(Error::dim(format!("batch norm affine parameter of length {} for {c} channels", p.len())));
            }
        }
        let xv = self.value(x).data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut y = vec![F::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let gs = g.map_or(F::one(), |g| g[ci]);
                let bs = b.map_or(F::zero(), |b| b[ci]);
                let r = (ni * c + ci) * h * w..(ni * c + ci + 1) * h * w;
                for i in r {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = gs * xh + bs;
                }
            }
        }
        Ok((Tensor::new([n, c, h, w], y)?, xhat))
    }

    /// `x (N×D) · wᵀ (D×O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, d, o) = match (&xs[..], &ws[..]) {
            ([n, d], [o, d2]) if d == d2 => (*n, *d, *o),
            _ => return Err(Error::dim(format!("linear of {xs:?} with weight {ws:?}"))),
        };
        let mut y = vec![F::zero(); n * o];
        gemm(n, d, o, self.value(x).data(), Trans::No, self.value(w).data(), Trans::Yes, &mut y, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::dim("linear bias length"));
            }
            for row in y.chunks_mut(o) {
                for (a, &bb) in row.iter_mut().zip(bv) {
                    *a += bb;
                }
            }
        }
        let y = Tensor::new([n, o], y)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = F::from_usize(h * w).unwrap();
        let xv = self.value(x).data();
        let y = Tensor::from_fn([n, c], |i| xv[i * h * w..(i + 1) * h * w].iter().copied().sum::<F>() / hw);
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::dim("softmax expects a 1-D tensor"));
        }
        let y = softmax_vec(self.value(x).data());
        let y = Tensor::new([y.len()], y)?;
        Ok(self.push(y, Op::Softmax { x }))
    }

    /// Mean cross-entropy of `N×K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            [n, k] => (*n, *k),
            s => return Err(Error::dim(format!("cross entropy expects N×K logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::usage(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = F::zero();
        for (row, &l) in lv.chunks(k).zip(labels) {
            let p = softmax_vec(row);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            loss += lse - row[l];
            probs.extend(p);
        }
        let loss = loss / F::from_usize(n).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Gathers the given indices along `axis`.
    pub fn select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
            return Err(Error::dim(format!("index {bad} beyond axis of length {dim}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &j in idx {
                out.extend_from_slice(&xv[(o * dim + j) * inner..(o * dim + j + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = idx.len();
        let y = Tensor::new(oshape, out)?;
        Ok(self.push(y, Op::Select { x, axis, idx: idx.to_vec() }))
    }

    /// `base` with channels `idx` replaced by the channels of `sub`.
    pub fn merge_channels(&mut self, base: Var, sub: Var, idx: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(base).dims4()?;
        let [n2, k, h2, w2] = self.value(sub).dims4()?;
        if (n, h, w) != (n2, h2, w2) || k != idx.len() || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim(format!(
                "merge of {:?} into {:?} at {} channels",
                self.shape(sub),
                self.shape(base),
                idx.len()
            )));
        }
        let mut out = self.value(base).clone();
        let sv = self.value(sub).data();
        let hw = h * w;
        for ni in 0..n {
            for (j, &ci) in idx.iter().enumerate() {
                out.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                    .copy_from_slice(&sv[(ni * k + j) * hw..(ni * k + j + 1) * hw]);
            }
        }
        Ok(self.push(out, Op::Merge { base, sub, idx: idx.to_vec() }))
    }

    /// Activation binarization `a_n · sign(x)` with a clipped straight-through
    /// gradient. With `scaled`, `a_n` is the mean absolute value of sample
    /// `n` (held constant for the gradient); otherwise 1.
    pub fn sign_ste(&mut self, x: Var, clip: F, scaled: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let per = self.value(x).len() / n.max(1);
        let xv = self.value(x).data();
        let scale: Vec<F> = (0..n)
            .map(|i| {
                if scaled {
                    bitops::mean_abs(&xv[i * per..(i + 1) * per])
                } else {
                    F::one()
                }
            })
            .collect();
        let y = Tensor::from_fn(shape, |i| scale[i / per] * sign(xv[i]));
        Ok(self.push(y, Op::SignSte { x, clip, scale }))
    }

    /// Kernel binarization `A ⊙ sign(X)`. Without `amp` the amplitude is
    /// the closed-form mean |X| per group; with `amp` it is a learned tensor.
    pub fn binarize_weight(
        &mut self,
        x: Var,
        amp: Option<Var>,
        granularity: AmplitudeGranularity,
        clip: F,
    ) -> Result<Var> {
        let xt = self.value(x);
        let amps = match amp {
            None => bitops::fit_amplitude(xt, granularity)?,
            Some(a) => self.value(a).data().to_vec(),
        };
        let group = bitops::group_len(xt.shape(), granularity)?;
        if amps.len() * group != xt.len() {
            return Err(Error::dim(format!("{} amplitudes for kernel {:?}", amps.len(), xt.shape())));
        }
        let y = Tensor::from_fn(xt.shape().to_vec(), |i| amps[i / group] * sign(xt.data()[i]));
        Ok(self.push(y, Op::BinarizeWeight { x, amp, granularity, clip, amps }))
    }

    /// `θ/2 · Σ ‖X − A ⊙ sign(X)‖²` as a differentiable scalar.
    pub fn amplitude_loss(
        &mut self,
        x: Var,
        amp: Option<Var>,
        granularity: AmplitudeGranularity,
        theta: F,
    ) -> Result<Var> {
        if theta < F::zero() {
            return Err(Error::config("amplitude loss weight must be nonnegative"));
        }
        let xt = self.value(x);
        let amps = match amp {
            None => bitops::fit_amplitude(xt, granularity)?,
            Some(a) => self.value(a).data().to_vec(),
        };
        let loss = bitops::amplitude_loss(xt, &amps, granularity, theta)?;
        Ok(self.push(Tensor::scalar(loss), Op::AmplitudeLoss { x, amp, granularity, theta, amps }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / F::from_usize(t.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.record {
            return Err(Error::usage("backward on a forward-only graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.node_backward(&node.op, &node.value, &g)?;
            for (v, gi) in contributions {
                if self.nodes[v.0].needs_grad {
                    add_into(&mut grads[v.0], gi);
                }
            }
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, op: &Op<F>, out: &Tensor<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Conv { x, w, spec } => {
                let (gx, gw) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *spec)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Pool { x, spec, argmax } => {
                let gx = kernels::pool2d_backward(self.value(*x).dims4()?, g, argmax, *spec)?;
                vec![(*x, gx)]
            }
            Op::Add(xs) => xs.iter().map(|&x| (x, g.clone())).collect(),
            Op::Scale { x, k } => vec![(*x, g.map(|v| v * *k))],
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * bv[i]);
                let gb = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * av[i]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::WeightedSum { w, terms } => {
                let wv = self.value(*w).data();
                let mut gw = vec![F::zero(); wv.len()];
                let mut out = Vec::new();
                for (k, t) in terms.iter().enumerate() {
                    if let Some(t) = t {
                        gw[k] = g.data().iter().zip(self.value(*t).data()).map(|(&a, &b)| a * b).sum();
                        if needs(*t) {
                            out.push((*t, g.map(|v| v * wv[k])));
                        }
                    }
                }
                out.push((*w, Tensor::new([wv.len()], gw)?));
                out
            }
            Op::Concat { xs } => {
                let [n, total, h, w] = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                let mut out = Vec::new();
                for &x in xs {
                    let c = self.shape(x)[1];
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for ni in 0..n {
                        gx.extend_from_slice(&g.data()[(ni * total + offset) * hw..(ni * total + offset + c) * hw]);
                    }
                    offset += c;
                    out.push((x, Tensor::new(self.shape(x).to_vec(), gx)?));
                }
                out
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| if xv[i] > F::zero() { g.data()[i] } else { F::zero() });
                vec![(*x, gx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = g.dims4()?;
                let hw = h * w;
                let m = F::from_usize(n * hw).unwrap();
                let gd = g.data();
                let gam = gamma.map(|v| self.value(v).data());
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                let mut gx = vec![F::zero(); gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let gs = gam.map_or(F::one(), |v| v[ci]);
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            gx[i] = if *train {
                                gs * inv_std[ci] / m * (m * gd[i] - sum_g[ci] - xhat[i] * sum_gx[ci])
                            } else {
                                gs * inv_std[ci] * gd[i]
                            };
                        }
                    }
                }
                let mut out = vec![(*x, Tensor::new([n, c, h, w], gx)?)];
                if let Some(gm) = gamma {
                    out.push((*gm, Tensor::new([c], sum_gx)?));
                }
                if let Some(b) = beta {
                    out.push((*b, Tensor::new([c], sum_g)?));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let mut gx = vec![F::zero(); n * d];
                gemm(n, o, d, g.data(), Trans::No, self.value(*w).data(), Trans::No, &mut gx, false);
                let mut gw = vec![F::zero(); o * d];
                gemm(o, n, d, g.data(), Trans::Yes, self.value(*x).data(), Trans::No, &mut gw, false);
                let mut out = vec![(*x, Tensor::new([n, d], gx)?), (*w, Tensor::new([o, d], gw)?)];
                if let Some(b) = b {
                    let mut gb = vec![F::zero(); o];
                    for row in g.data().chunks(o) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((*b, Tensor::new([o], gb)?));
                }
                out
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = F::one() / F::from_usize(hw).unwrap();
                let gx = Tensor::from_fn([n, c, h, w], |i| g.data()[i / hw] * inv);
                vec![(*x, gx)]
            }
            Op::Softmax { x } => {
                let y = out.data();
                let dot: F = y.iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let gx = Tensor::from_fn([y.len()], |i| y[i] * (g.data()[i] - dot));
                vec![(*x, gx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g.data()[0] / F::from_usize(n).unwrap();
                let mut gx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= F::one();
                }
                for v in &mut gx {
                    *v *= scale;
                }
                vec![(*logits, Tensor::new([n, k], gx)?)]
            }
            Op::Select { x, axis, idx } => {
                let shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&shape, *axis);
                let mut gx = vec![F::zero(); outer * dim * inner];
                let gd = g.data();
                for o in 0..outer {
                    for (jj, &j) in idx.iter().enumerate() {
                        let src = &gd[(o * idx.len() + jj) * inner..(o * idx.len() + jj + 1) * inner];
                        let dst = &mut gx[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![(*x, Tensor::new(shape, gx)?)]
            }
            Op::Merge { base, sub, idx } => {
                let [n, c, h, w] = g.dims4()?;
                let hw = h * w;
                let k = idx.len();
                let mut gb = g.clone();
                let mut gs = vec![F::zero(); n * k * hw];
                for ni in 0..n {
                    for (j, &ci) in idx.iter().enumerate() {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        gs[(ni * k + j) * hw..(ni * k + j + 1) * hw].copy_from_slice(&g.data()[r.clone()]);
                        gb.data_mut()[r].fill(F::zero());
                    }
                }
                vec![(*base, gb), (*sub, Tensor::new([n, k, h, w], gs)?)]
            }
            Op::SignSte { x, clip, scale } => {
                let xv = self.value(*x).data();
                let per = xv.len() / scale.len().max(1);
                let ste = bitops::ste_grad(g.data(), xv, *clip);
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| ste[i] * scale[i / per]);
                vec![(*x, gx)]
            }
            Op::BinarizeWeight { x, amp, granularity, clip, amps } => {
                let xt = self.value(*x);
                let xv = xt.data();
                let group = bitops::group_len(xt.shape(), *granularity)?;
                let ste = bitops::ste_grad(g.data(), xv, *clip);
                // Σ g·D per group: amplitude gradient, and the closed-form
                // amplitude's own dependence on X.
                let gd: Vec<F> = (0..amps.len())
                    .map(|gi| (gi * group..(gi + 1) * group).map(|i| g.data()[i] * sign(xv[i])).sum())
                    .collect();
                let gx = Tensor::from_fn(xt.shape().to_vec(), |i| {
                    let gi = i / group;
                    let base = ste[i] * amps[gi];
                    match amp {
                        None => base + sign(xv[i]) * gd[gi] / F::from_usize(group).unwrap(),
                        Some(_) => base,
                    }
                });
                let mut out = vec![(*x, gx)];
                if let Some(a) = amp {
                    out.push((*a, Tensor::new(self.shape(*a).to_vec(), gd)?));
                }
                out
            }
            Op::AmplitudeLoss { x, amp, granularity, theta, amps } => {
                let xt = self.value(*x);
                let xv = xt.data();
                let group = bitops::group_len(xt.shape(), *granularity)?;
                let s = g.data()[0] * *theta;
                let resid = |i: usize| xv[i] - amps[i / group] * sign(xv[i]);
                let gx = Tensor::from_fn(xt.shape().to_vec(), |i| s * resid(i));
                let mut out = vec![(*x, gx)];
                if let Some(a) = amp {
                    let ga: Vec<F> = (0..amps.len())
                        .map(|gi| -s * (gi * group..(gi + 1) * group).map(|i| sign(xv[i]) * resid(i)).sum::<F>())
                        .collect();
                    out.push((*a, Tensor::new(self.shape(*a).to_vec(), ga)?));
                }
                out
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0]))],
            Op::Mean { x } => {
                let n = F::from_usize(self.value(*x).len().max(1)).unwrap();
                vec![(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n))]
            }
        })
    }
}

pub fn softmax_vec<F: Real>(x: &[F]) -> Vec<F> {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
