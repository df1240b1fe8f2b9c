//! Kernel and activation binarization.
//!
//! A full-precision kernel `X` is approximated by `A ⊙ D` with `D = sign(X)`
//! and a nonnegative amplitude `A` shared per layer or per output filter.
//! Inference packs `±1` values into `u64` words (`+1` → bit set) so dot
//! products become `2·popcount(XNOR) − n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{out_extent, ConvSpec};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AmplitudeGranularity {
    #[default]
    PerLayer,
    PerFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeMode {
    /// Closed-form amplitude `mean |X|`, recomputed every forward pass.
    #[default]
    Xnor,
    /// Amplitude is a trained parameter pulled toward `X` by the amplitude loss.
    PcnnAmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizeConfig {
    pub mode: BinarizeMode,
    pub theta: f64,
    pub granularity: AmplitudeGranularity,
}

impl BinarizeConfig {
    pub fn xnor() -> Self {
        BinarizeConfig { mode: BinarizeMode::Xnor, theta: 0.0, granularity: AmplitudeGranularity::PerLayer }
    }

    pub fn pcnn_amp() -> Self {
        BinarizeConfig { mode: BinarizeMode::PcnnAmp, theta: 1e-4, granularity: AmplitudeGranularity::PerLayer }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(Error::config(format!("theta must be a finite nonnegative value, got {}", self.theta)));
        }
        Ok(())
    }
}

/// Sign with the tie rule `sign(0) = +1`.
#[inline]
pub fn sign_of<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

pub fn sign_binarize<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.all_finite() {
        return Err(Error::Numeric("cannot binarize non-finite values".into()));
    }
    Ok(x.map(sign_of))
}

pub fn mean_abs<F: Real>(v: &[F]) -> F {
    if v.is_empty() {
        return F::zero();
    }
    // f64 accumulation makes the mean of n copies of A exactly A again.
    F::from_f64_lossy(v.iter().map(|x| x.abs().as_f64()).sum::<f64>() / v.len() as f64)
}

/// Number of kernel elements sharing one amplitude.
pub fn group_len(shape: &[usize], granularity: AmplitudeGranularity) -> Result<usize> {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(Error::usage("amplitude over an empty kernel"));
    }
    Ok(match granularity {
        AmplitudeGranularity::PerLayer => numel,
        AmplitudeGranularity::PerFilter => numel / shape[0],
    })
}

/// Minimizer of `Σ ‖X − A·sign(X)‖²` over one scalar `A` per group: the
/// first-order condition `A·n = Σ|X|` gives `A = mean |X|`.
pub fn fit_amplitude<F: Real>(x: &Tensor<F>, granularity: AmplitudeGranularity) -> Result<Vec<F>> {
    let group = group_len(x.shape(), granularity)?;
    Ok(x.data().chunks(group).map(mean_abs).collect())
}

/// `θ/2 · Σ ‖X − A ⊙ sign(X)‖²`.
pub fn amplitude_loss<F: Real>(
    x: &Tensor<F>,
    amps: &[F],
    granularity: AmplitudeGranularity,
    theta: F,
) -> Result<F> {
    if theta < F::zero() {
        return Err(Error::config("amplitude loss weight must be nonnegative"));
    }
    let group = group_len(x.shape(), granularity)?;
    if amps.len() * group != x.len() {
        return Err(Error::dim(format!("{} amplitudes for kernel {:?}", amps.len(), x.shape())));
    }
    let sq: F = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = v - amps[i / group] * sign_of(v);
            r * r
        })
        .sum();
    Ok(theta / F::from_f64_lossy(2.0) * sq)
}

/// Clipped straight-through estimate of the gradient through `sign`.
pub fn ste_grad<F: Real>(upstream: &[F], x: &[F], clip: F) -> Vec<F> {
    upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| if v.abs() <= clip { g } else { F::zero() })
        .collect()
}

/// `±1` values packed into 64-bit words; bit set means `+1`. Bits past
/// `len` in the last word are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBits {
    pub words: Vec<u64>,
    pub len: usize,
}

pub fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

/// Mask of the valid bits in word `w` of an `n`-bit vector.
#[inline]
pub fn tail_mask(n: usize, w: usize) -> u64 {
    let rem = n.saturating_sub(w * 64);
    if rem >= 64 {
        !0
    } else {
        (1u64 << rem) - 1
    }
}

impl PackedBits {
    pub fn pack<F: Real>(values: &[F]) -> Self {
        let mut words = vec![0u64; words_for(values.len())];
        for (i, &v) in values.iter().enumerate() {
            if v >= F::zero() {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        PackedBits { words, len: values.len() }
    }

    pub fn unpack<F: Real>(&self) -> Vec<F> {
        (0..self.len)
            .map(|i| if self.words[i / 64] >> (i % 64) & 1 == 1 { F::one() } else { -F::one() })
            .collect()
    }

    /// Serialized size in bytes of the bit payload.
    pub fn byte_len(&self) -> usize {
        self.len.div_ceil(8)
    }
}

pub fn pack_signs<F: Real>(d: &Tensor<F>) -> PackedBits {
    PackedBits::pack(d.data())
}

/// Exact `Σ aᵢbᵢ` of two packed `±1` vectors.
pub fn xnor_dot(a: &PackedBits, b: &PackedBits) -> Result<i64> {
    if a.len != b.len || a.words.len() != b.words.len() {
        return Err(Error::usage(format!("xnor_dot of lengths {} and {}", a.len, b.len)));
    }
    Ok(xnor_dot_words(&a.words, &b.words, a.len))
}

#[inline]
pub fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let mut agree = 0u32;
    for (w, (&x, &y)) in a.iter().zip(b).enumerate() {
        agree += (!(x ^ y) & tail_mask(n, w)).count_ones();
    }
    2 * agree as i64 - n as i64
}

/// A binarized convolution kernel: signs, amplitudes and per-tap packed
/// input-channel words (`[o][ky][kx][words]`, one word run per tap).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryKernel {
    /// OIHW shape of the full-precision kernel.
    pub shape: [usize; 4],
    pub signs: Tensor<f32>,
    pub amplitudes: Vec<f32>,
    pub granularity: AmplitudeGranularity,
    words_per_tap: usize,
    packed: Vec<u64>,
}

impl BinaryKernel {
    /// Binarizes `x` with closed-form amplitudes.
    pub fn from_weights<F: Real>(x: &Tensor<F>, granularity: AmplitudeGranularity) -> Result<Self> {
        let amps = fit_amplitude(x, granularity)?;
        Self::from_parts(x, amps.iter().map(|a| a.as_f64() as f32).collect(), granularity)
    }

    /// Binarizes `x` with the given amplitudes (learned or precomputed).
    pub fn from_parts<F: Real>(x: &Tensor<F>, amplitudes: Vec<f32>, granularity: AmplitudeGranularity) -> Result<Self> {
        let shape = x.dims4()?;
        let group = group_len(x.shape(), granularity)?;
        if amplitudes.len() * group != x.len() {
            return Err(Error::dim(format!("{} amplitudes for kernel {shape:?}", amplitudes.len())));
        }
        if amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Numeric("amplitudes must be nonnegative".into()));
        }
        let signs: Tensor<f32> = sign_binarize(x)?.cast();
        let [o, cg, kh, kw] = shape;
        let wpt = words_for(cg);
        let mut packed = vec![0u64; o * kh * kw * wpt];
        for oc in 0..o {
            for ci in 0..cg {
                for ki in 0..kh {
                    for kj in 0..kw {
                        if signs.data()[((oc * cg + ci) * kh + ki) * kw + kj] > 0.0 {
                            let base = ((oc * kh + ki) * kw + kj) * wpt;
                            packed[base + ci / 64] |= 1 << (ci % 64);
                        }
                    }
                }
            }
        }
        Ok(BinaryKernel { shape, signs, amplitudes, granularity, words_per_tap: wpt, packed })
    }

    /// Recovers `D` from the packed words.
    pub fn unpack(&self) -> Tensor<f32> {
        let [o, cg, kh, kw] = self.shape;
        Tensor::from_fn(self.shape.to_vec(), |i| {
            let kj = i % kw;
            let ki = (i / kw) % kh;
            let ci = (i / (kw * kh)) % cg;
            let oc = i / (kw * kh * cg);
            let word = self.packed[((oc * kh + ki) * kw + kj) * self.words_per_tap + ci / 64];
            if word >> (ci % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
        .reshape([o, cg, kh, kw])
        .expect("kernel shape")
    }

    /// Reconstruction `A ⊙ D`.
    pub fn reconstruct(&self) -> Tensor<f32> {
        let group = self.signs.len() / self.amplitudes.len();
        Tensor::from_fn(self.shape.to_vec(), |i| self.amplitudes[i / group] * self.signs.data()[i])
    }

    fn amplitude_of(&self, oc: usize) -> f32 {
        match self.granularity {
            AmplitudeGranularity::PerLayer => self.amplitudes[0],
            AmplitudeGranularity::PerFilter => self.amplitudes[oc],
        }
    }
}

/// Sign-binarized activations packed along channels: for every pixel and
/// channel group, `ceil(channels_per_group / 64)` words.
#[derive(Debug, Clone)]
pub struct PackedActivations {
    pub shape: [usize; 4],
    pub groups: usize,
    /// Per-sample activation amplitude.
    pub amplitudes: Vec<f32>,
    words_per_group: usize,
    words: Vec<u64>,
}

impl PackedActivations {
    /// Packs `sign(x)` with one amplitude per sample.
    pub fn pack<F: Real>(x: &Tensor<F>, groups: usize, amplitudes: Vec<f32>) -> Result<Self> {
        let [n, c, h, w] = x.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!("{c} channels in {groups} groups")));
        }
        if amplitudes.len() != n {
            return Err(Error::dim(format!("{} activation amplitudes for batch of {n}", amplitudes.len())));
        }
        let cg = c / groups;
        let wpg = words_for(cg);
        let mut words = vec![0u64; n * h * w * groups * wpg];
        let xd = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let (gi, cl) = (ci / cg, ci % cg);
                for p in 0..h * w {
                    if xd[(ni * c + ci) * h * w + p] >= F::zero() {
                        words[((ni * h * w + p) * groups + gi) * wpg + cl / 64] |= 1 << (cl % 64);
                    }
                }
            }
        }
        Ok(PackedActivations { shape: [n, c, h, w], groups, amplitudes, words_per_group: wpg, words })
    }

    /// Packs `x` with the per-sample amplitude `mean |x_n|`.
    pub fn pack_scaled<F: Real>(x: &Tensor<F>, groups: usize) -> Result<Self> {
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let amps = (0..n).map(|i| mean_abs(&x.data()[i * per..(i + 1) * per]).as_f64() as f32).collect();
        Self::pack(x, groups, amps)
    }
}

/// Integer XNOR-popcount convolution core: `Σ` over in-bounds taps of the
/// `±1` channel dot products. Padded positions are skipped, which matches a
/// zero-padded float convolution of the same `±1` operands.
pub fn xnor_conv2d_int(act: &PackedActivations, kernel: &BinaryKernel, spec: ConvSpec) -> Result<(Vec<i64>, [usize; 4])> {
    let [n, c, h, w] = act.shape;
    let [o, cg, kh, kw] = kernel.shape;
    if act.groups != spec.groups.max(1) || cg * act.groups != c || o % act.groups != 0 {
        return Err(Error::dim(format!(
            "packed input with {c} channels in {} groups vs kernel {:?}",
            act.groups, kernel.shape
        )));
    }
    let (oh, ow) = match (
        out_extent(h, kh, spec.stride, spec.padding, spec.dilation),
        out_extent(w, kw, spec.stride, spec.padding, spec.dilation),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::dim("binarized conv window does not fit")),
    };
    let og = o / act.groups;
    let wpg = act.words_per_group;
    debug_assert_eq!(wpg, kernel.words_per_tap);
    let mut out = vec![0i64; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            let gi = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ki in 0..kh {
                        let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let p = (ni * h + iy as usize) * w + ix as usize;
                            let a = &act.words[(p * act.groups + gi) * wpg..(p * act.groups + gi + 1) * wpg];
                            let kb = ((oc * kh + ki) * kw + kj) * wpg;
                            acc += xnor_dot_words(a, &kernel.packed[kb..kb + wpg], cg);
                        }
                    }
                    out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok((out, [n, o, oh, ow]))
}

/// Binarized convolution: `A_w · A_act · (integer XNOR-popcount core)`.
pub fn xnor_conv2d(act: &PackedActivations, kernel: &BinaryKernel, spec: ConvSpec) -> Result<Tensor<f32>> {
    let (ints, shape) = xnor_conv2d_int(act, kernel, spec)?;
    let [_, o, oh, ow] = shape;
    let plane = oh * ow;
    let data = ints
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let oc = (i / plane) % o;
            let ni = i / (plane * o);
            kernel.amplitude_of(oc) * act.amplitudes[ni] * v as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
