//! Raw NCHW convolution and pooling kernels, forward and backward.
//!
//! Work is split per sample; per-sample weight-gradient partials are summed
//! in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec { stride, padding, dilation, groups: 1 }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent of one spatial axis, or `None` when no window fits.
pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Range of output positions `o` with `0 <= o*stride + offset < size`.
#[inline]
fn valid_range(offset: isize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if size as isize - offset <= 0 { 0 } else { ((size as isize - offset) + s - 1) / s };
    let lo = (lo as usize).min(out);
    let hi = (hi.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

fn im2col<F: Real>(x: &[F], g: &Geom, col: &mut [F]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                let xoff = (kj * g.dil) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(xoff, g.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..xlo].fill(F::zero());
                    d[xhi..].fill(F::zero());
                    if xlo == xhi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        d[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src[(ox as isize * g.stride as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Real>(col: &[F], g: &Geom, x: &mut [F]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let srcrow = &col[row * ohw..(row + 1) * ohw];
                let xoff = (kj * g.dil) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(xoff, g.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &srcrow[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        dst[(ox as isize * g.stride as isize + xoff) as usize] += s[ox];
                    }
                }
            }
        }
    }
}

struct ConvShape {
    n: usize,
    c: usize,
    o: usize,
    cg: usize,
    og: usize,
    groups: usize,
    geom: Geom,
}

impl ConvShape {
    fn depthwise(&self) -> bool {
        self.groups == self.c && self.cg == 1 && self.og == 1
    }

    fn pointwise(&self) -> bool {
        let g = &self.geom;
        g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
    }
}

fn conv_shape(xs: [usize; 4], ws: &[usize], spec: ConvSpec) -> Result<ConvShape> {
    let [n, c, h, w] = xs;
    let [o, cg, kh, kw] = match ws[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::dim(format!("conv kernel must be rank 4, got {ws:?}"))),
    };
    if !(1..=2).contains(&spec.dilation) || spec.stride == 0 {
        return Err(Error::usage(format!("unsupported conv spec {spec:?}")));
    }
    let groups = spec.groups.max(1);
    if c % groups != 0 || o % groups != 0 || cg * groups != c {
        return Err(Error::dim(format!(
            "input has {c} channels but kernel {ws:?} with {groups} groups expects {}",
            cg * groups
        )));
    }
    let oh = out_extent(h, kh, spec.stride, spec.padding, spec.dilation);
    let ow = out_extent(w, kw, spec.stride, spec.padding, spec.dilation);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::dim(format!("{h}x{w} input admits no {kh}x{kw} window under {spec:?}"))),
    };
    Ok(ConvShape {
        n,
        c,
        o,
        cg,
        og: o / groups,
        groups,
        geom: Geom { c: cg, h, w, kh, kw, oh, ow, stride: spec.stride, pad: spec.padding, dil: spec.dilation },
    })
}

fn depthwise_forward<F: Real>(x: &[F], w: &[F], s: &ConvShape, out: &mut [F]) {
    let g = &s.geom;
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    for ch in 0..s.c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * ohw..(ch + 1) * ohw];
        dst.fill(F::zero());
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = w[(ch * g.kh + ki) * g.kw + kj];
                let xoff = (kj * g.dil) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(xoff, g.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if xlo == xhi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        for (dv, &sv) in d[xlo..xhi].iter_mut().zip(&src[start..start + (xhi - xlo)]) {
                            *dv += wv * sv;
                        }
                    } else {
                        for ox in xlo..xhi {
                            d[ox] += wv * src[(ox as isize * g.stride as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<F: Real>(x: &[F], w: &[F], gout: &[F], s: &ConvShape, gx: &mut [F], gw: &mut [F]) {
    let g = &s.geom;
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    for ch in 0..s.c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let gplane = &mut gx[ch * hw..(ch + 1) * hw];
        let go = &gout[ch * ohw..(ch + 1) * ohw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let widx = (ch * g.kh + ki) * g.kw + kj;
                let wv = w[widx];
                let mut acc = F::zero();
                let xoff = (kj * g.dil) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(xoff, g.stride, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = iy as usize * g.w;
                    let gor = &go[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        let ix = row + (ox as isize * g.stride as isize + xoff) as usize;
                        acc += gor[ox] * plane[ix];
                        gplane[ix] += wv * gor[ox];
                    }
                }
                gw[widx] += acc;
            }
        }
    }
}

/// Grouped 2-D convolution of an NCHW input with an OIHW kernel.
pub fn conv2d_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, spec: ConvSpec) -> Result<Tensor<F>> {
    let s = conv_shape(x.dims4()?, w.shape(), spec)?;
    let g = s.geom;
    let (chw, ohw) = (s.c * g.h * g.w, g.oh * g.ow);
    let ckk = s.cg * g.kh * g.kw;
    let mut out = vec![F::zero(); s.n * s.o * ohw];
    let (xd, wd) = (x.data(), w.data());
    out.par_chunks_mut(s.o * ohw).enumerate().for_each(|(ni, dst)| {
        let xs = &xd[ni * chw..(ni + 1) * chw];
        if s.depthwise() {
            depthwise_forward(xs, wd, &s, dst);
            return;
        }
        let mut col = if s.pointwise() { Vec::new() } else { vec![F::zero(); ckk * ohw] };
        for gi in 0..s.groups {
            let xg = &xs[gi * s.cg * g.h * g.w..(gi + 1) * s.cg * g.h * g.w];
            let wg = &wd[gi * s.og * ckk..(gi + 1) * s.og * ckk];
            let cols: &[F] = if s.pointwise() {
                xg
            } else {
                im2col(xg, &g, &mut col);
                &col
            };
            gemm(s.og, ckk, ohw, wg, Trans::No, cols, Trans::No, &mut dst[gi * s.og * ohw..(gi + 1) * s.og * ohw], false);
        }
    });
    Tensor::new([s.n, s.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    spec: ConvSpec,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = conv_shape(x.dims4()?, w.shape(), spec)?;
    let g = s.geom;
    let (chw, ohw) = (s.c * g.h * g.w, g.oh * g.ow);
    let ckk = s.cg * g.kh * g.kw;
    if gout.shape() != [s.n, s.o, g.oh, g.ow] {
        return Err(Error::dim(format!("conv upstream gradient has shape {:?}", gout.shape())));
    }
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut gx = vec![F::zero(); s.n * chw];
    let partials: Vec<Vec<F>> = gx
        .par_chunks_mut(chw)
        .enumerate()
        .map(|(ni, gxs)| {
            let xs = &xd[ni * chw..(ni + 1) * chw];
            let go = &gd[ni * s.o * ohw..(ni + 1) * s.o * ohw];
            let mut gw = vec![F::zero(); wd.len()];
            if s.depthwise() {
                depthwise_backward(xs, wd, go, &s, gxs, &mut gw);
                return gw;
            }
            let mut col = vec![F::zero(); ckk * ohw];
            for gi in 0..s.groups {
                let gslice = gi * s.cg * g.h * g.w..(gi + 1) * s.cg * g.h * g.w;
                let wg = &wd[gi * s.og * ckk..(gi + 1) * s.og * ckk];
                let gog = &go[gi * s.og * ohw..(gi + 1) * s.og * ohw];
                let gwg = &mut gw[gi * s.og * ckk..(gi + 1) * s.og * ckk];
                if s.pointwise() {
                    gemm(s.og, ohw, ckk, gog, Trans::No, &xs[gslice.clone()], Trans::Yes, gwg, true);
                    gemm(ckk, s.og, ohw, wg, Trans::Yes, gog, Trans::No, &mut gxs[gslice], true);
                } else {
                    im2col(&xs[gslice.clone()], &g, &mut col);
                    gemm(s.og, ohw, ckk, gog, Trans::No, &col, Trans::Yes, gwg, true);
                    gemm(ckk, s.og, ohw, wg, Trans::Yes, gog, Trans::No, &mut col, false);
                    col2im_add(&col, &g, &mut gxs[gslice]);
                }
            }
            gw
        })
        .collect();
    let mut gw = vec![F::zero(); wd.len()];
    for p in &partials {
        for (a, &b) in gw.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Pooling forward. For max pooling also returns the in-plane argmax of
/// every output; average pooling divides by the in-bounds element count.
pub fn pool2d_forward<F: Real>(x: &Tensor<F>, spec: PoolSpec) -> Result<(Tensor<F>, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    let k = spec.window;
    let (oh, ow) = match (out_extent(h, k, spec.stride, spec.padding, 1), out_extent(w, k, spec.stride, spec.padding, 1)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::dim(format!("{h}x{w} input admits no pooling window under {spec:?}"))),
    };
    if spec.padding >= k {
        return Err(Error::usage("pool padding must be smaller than the window"));
    }
    let planes = n * c;
    let mut out = vec![F::zero(); planes * oh * ow];
    let mut arg = if spec.kind == PoolKind::Max { vec![0u32; planes * oh * ow] } else { Vec::new() };
    let xd = x.data();
    let body = |p: usize, dst: &mut [F], mut am: Option<&mut [u32]>| {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let y0 = (oy * spec.stride) as isize - spec.padding as isize;
            let ylo = y0.max(0) as usize;
            let yhi = ((y0 + k as isize).min(h as isize)).max(0) as usize;
            for ox in 0..ow {
                let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                let xlo = x0.max(0) as usize;
                let xhi = ((x0 + k as isize).min(w as isize)).max(0) as usize;
                let o = oy * ow + ox;
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = F::neg_infinity();
                        let mut bi = 0usize;
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                let v = plane[iy * w + ix];
                                if v > best {
                                    best = v;
                                    bi = iy * w + ix;
                                }
                            }
                        }
                        dst[o] = best;
                        if let Some(a) = am.as_deref_mut() {
                            a[o] = bi as u32;
                        }
                    }
                    PoolKind::Avg => {
                        let mut acc = F::zero();
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                acc += plane[iy * w + ix];
                            }
                        }
                        let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                        dst[o] = acc / F::from_f64_lossy(count);
                    }
                }
            }
        }
    };
    if spec.kind == PoolKind::Max {
        out.par_chunks_mut(oh * ow)
            .zip(arg.par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(p, (dst, am))| body(p, dst, Some(am)));
    } else {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| body(p, dst, None));
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn pool2d_backward<F: Real>(
    input_shape: [usize; 4],
    gout: &Tensor<F>,
    argmax: &[u32],
    spec: PoolSpec,
) -> Result<Tensor<F>> {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = gout.dims4()?;
    let k = spec.window;
    let mut gx = vec![F::zero(); n * c * h * w];
    let gd = gout.data();
    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, gplane)| {
        let go = &gd[p * oh * ow..(p + 1) * oh * ow];
        match spec.kind {
            PoolKind::Max => {
                let am = &argmax[p * oh * ow..(p + 1) * oh * ow];
                for (o, &g) in go.iter().enumerate() {
                    gplane[am[o] as usize] += g;
                }
            }
            PoolKind::Avg => {
                for oy in 0..oh {
                    let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                    let ylo = y0.max(0) as usize;
                    let yhi = ((y0 + k as isize).min(h as isize)).max(0) as usize;
                    for ox in 0..ow {
                        let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                        let xlo = x0.max(0) as usize;
                        let xhi = ((x0 + k as isize).min(w as isize)).max(0) as usize;
                        let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                        let g = go[oy * ow + ox] / F::from_f64_lossy(count);
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                gplane[iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(input_shape.to_vec(), gx)
}
