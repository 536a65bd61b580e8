//! f64 loop nests shared by the forward paths.
//!
//! Each output element is accumulated from zero in a fixed order (input
//! channel, then kernel taps in d, h, w order), so splitting the output across
//! threads never changes a result bit.

use super::bank::BatchNorm;
use crate::tensor::{Element, Volume4};

/// Below this many MACs a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;

/// Geometry of one strided, same-padded correlation over (d, h, w).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Geom {
    pub fn pad_lo(&self) -> [usize; 3] {
        self.kernel.map(|k| (k - 1) / 2)
    }

    pub fn padded(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.input[i] + self.kernel[i] - 1)
    }

    pub fn output(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.input[i].div_ceil(self.stride[i]))
    }
}

/// Zero-pad every channel of `v` for `g` and widen to f64.
pub(crate) fn pad_f64<T: Element>(v: &Volume4<T>, g: &Geom) -> Vec<f64> {
    let pvol = g.padded().iter().product::<usize>();
    let sites = v.shape().sites();
    let mut out = vec![0.0; v.shape().c * pvol];
    for (chan, dst) in v.data().chunks(sites).zip(out.chunks_mut(pvol)) {
        pad_into(chan, g, dst);
    }
    out
}

/// Write one `g.input`-sized channel, zero-padded for `g`, into `dst`, whose
/// padding must already be zero.
fn pad_into<E: Element>(chan: &[E], g: &Geom, dst: &mut [f64]) {
    let [d_n, h_n, w_n] = g.input;
    let [_, ph, pw] = g.padded();
    let [ld, lh, lw] = g.pad_lo();
    for d in 0..d_n {
        for h in 0..h_n {
            let src = (d * h_n + h) * w_n;
            let at = ((d + ld) * ph + h + lh) * pw + lw;
            for (o, i) in dst[at..at + w_n].iter_mut().zip(&chan[src..src + w_n]) {
                *o = i.to_f64();
            }
        }
    }
}

/// Run `f(slab_index, slab)` over consecutive `slab`-sized chunks of `out`,
/// in parallel when the `parallel` feature is on and `work` is large enough.
pub(crate) fn for_each_slab<U, F>(out: &mut [U], slab: usize, work: usize, f: F)
where
    U: Send,
    F: Fn(usize, &mut [U]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK && out.len() > slab {
        use rayon::prelude::*;
        out.par_chunks_mut(slab).enumerate().for_each(|(i, s)| f(i, s));
        return;
    }
    let _ = work;
    out.chunks_mut(slab).enumerate().for_each(|(i, s)| f(i, s));
}

/// [`for_each_slab`] with per-worker scratch state from `init`, so large
/// buffers are allocated once per worker instead of once per slab.
pub(crate) fn for_each_slab_with<U, S, I, F>(out: &mut [U], slab: usize, work: usize, init: I, f: F)
where
    U: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(&mut S, usize, &mut [U]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if work >= PAR_MIN_WORK && out.len() > slab {
        use rayon::prelude::*;
        out.par_chunks_mut(slab).enumerate().for_each_init(&init, |st, (i, s)| f(st, i, s));
        return;
    }
    let _ = work;
    let mut st = init();
    out.chunks_mut(slab).enumerate().for_each(|(i, s)| f(&mut st, i, s));
}

/// Add the contribution of `n_ch` padded input channels starting at `first`
/// to output plane `z`. `weights` is `[n_ch][kd][kh][kw]`.
pub(crate) fn correlate_slab(
    slab: &mut [f64],
    z: usize,
    src: &[f64],
    first: usize,
    n_ch: usize,
    weights: &[f64],
    g: &Geom,
) {
    let [kd, kh, kw] = g.kernel;
    let [_, ph, pw] = g.padded();
    let pvol = g.padded().iter().product::<usize>();
    let [sd, sh, sw] = g.stride;
    let [_, oh, ow] = g.output();
    let kv = kd * kh * kw;
    for ci in 0..n_ch {
        let chan = &src[(first + ci) * pvol..(first + ci + 1) * pvol];
        let wc = &weights[ci * kv..(ci + 1) * kv];
        // Rows outer so one output row stays in L1 across every tap.
        for (y, acc) in slab.chunks_mut(ow).enumerate().take(oh) {
            for a in 0..kd {
                let plane = (z * sd + a) * ph;
                for b in 0..kh {
                    let row0 = (plane + y * sh + b) * pw;
                    for c in 0..kw {
                        let wv = wc[(a * kh + b) * kw + c];
                        let row = row0 + c;
                        if sw == 1 {
                            for (o, &v) in acc.iter_mut().zip(&chan[row..row + ow]) {
                                *o += wv * v;
                            }
                        } else {
                            for (x, o) in acc.iter_mut().enumerate() {
                                *o += wv * chan[row + x * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Full correlation: `c_out` outputs, each mixing all input channels.
pub(crate) fn full_raw<T: Element>(x: &Volume4<T>, c_out: usize, w: &[T], g: &Geom) -> Vec<f64> {
    let src = pad_f64(x, g);
    let wf: Vec<f64> = w.iter().map(|v| v.to_f64()).collect();
    let [od, oh, ow] = g.output();
    let c_in = x.shape().c;
    let kv = g.kernel.iter().product::<usize>();
    let mut out = vec![0.0; c_out * od * oh * ow];
    let work = out.len() * c_in * kv;
    for_each_slab(&mut out, oh * ow, work, |idx, slab| {
        let (o, z) = (idx / od, idx % od);
        correlate_slab(slab, z, &src, 0, c_in, &wf[o * c_in * kv..(o + 1) * c_in * kv], g);
    });
    out
}

/// Correlate one padded channel into `out`, which holds every output plane.
fn correlate_channel(out: &mut [f64], src: &[f64], w: &[f64], g: &Geom) {
    let [_, oh, ow] = g.output();
    for (z, slab) in out.chunks_mut(oh * ow).enumerate() {
        correlate_slab(slab, z, src, 0, 1, w, g);
    }
}

/// Per-channel correlation: channel `c` uses `w[c]` only.
pub(crate) fn depthwise_raw<T: Element>(x: &Volume4<T>, w: &[T], g: &Geom) -> Vec<f64> {
    let wf = to_f64s(w);
    let per = g.output().iter().product::<usize>();
    let kv = g.kernel.iter().product::<usize>();
    let pvol = g.padded().iter().product::<usize>();
    let sites = x.shape().sites();
    let mut out = vec![0.0; x.shape().c * per];
    let work = out.len() * kv;
    for_each_slab(&mut out, per, work, |ch, acc| {
        let mut src = vec![0.0; pvol];
        pad_into(&x.data()[ch * sites..(ch + 1) * sites], g, &mut src);
        correlate_channel(acc, &src, &wf[ch * kv..(ch + 1) * kv], g);
    });
    out
}

/// [`depthwise_raw`] with an optional per-channel BN, rounded to `T`. Each
/// channel is padded, filtered and rounded on its own, so no padded or f64
/// copy of the whole volume is built.
pub(crate) fn depthwise_t<T: Element>(x: &Volume4<T>, w: &[T], g: &Geom, bn: Option<&Bn64>) -> Vec<T> {
    let wf = to_f64s(w);
    let per = g.output().iter().product::<usize>();
    let kv = g.kernel.iter().product::<usize>();
    let pvol = g.padded().iter().product::<usize>();
    let sites = x.shape().sites();
    let mut out = vec![T::default(); x.shape().c * per];
    let work = out.len() * kv;
    let init = || (vec![0.0; pvol], vec![0.0; per]);
    for_each_slab_with(&mut out, per, work, init, |(src, acc), ch, dst| {
        pad_into(&x.data()[ch * sites..(ch + 1) * sites], g, src);
        acc.fill(0.0);
        correlate_channel(acc, src, &wf[ch * kv..(ch + 1) * kv], g);
        affine(acc, ch, None, bn);
        for (o, v) in dst.iter_mut().zip(acc.iter()) {
            *o = T::from_f64(*v);
        }
    });
    out
}

/// The two depthwise stages of FDwSC fused per channel: `g1` filter (one
/// plane deep), BN, round to `T`, then `g2` filter (along d only), BN, round
/// to `T`. Same values as running [`depthwise_t`] twice: the disparity stage
/// skips taps that fall in the zero padding, and adding a zero product never
/// changes an accumulator that starts at +0.
pub(crate) fn fdwsc_stages_t<T: Element>(
    x: &Volume4<T>,
    spatial: &[T],
    disparity: &[T],
    g1: &Geom,
    g2: &Geom,
    bn1: Option<&Bn64>,
    bn2: Option<&Bn64>,
) -> Vec<T> {
    debug_assert_eq!(g1.output(), g2.input);
    debug_assert!(g1.kernel[0] == 1 && g2.kernel[1] == 1 && g2.kernel[2] == 1);
    let (sf, df) = (to_f64s(spatial), to_f64s(disparity));
    let [d1, oh, ow] = g1.output();
    let plane = oh * ow;
    let [od, _, _] = g2.output();
    let (kv1, kd) = (g1.kernel[1] * g1.kernel[2], g2.kernel[0]);
    let (sd, lo) = (g2.stride[0], g2.pad_lo()[0]);
    let flat = Geom { input: [1, g1.input[1], g1.input[2]], kernel: g1.kernel, stride: g1.stride };
    let sites = x.shape().sites();
    let in_plane = g1.input[1] * g1.input[2];
    let mut out = vec![T::default(); x.shape().c * od * plane];
    let work = x.shape().c * plane * (d1 * kv1 + od * kd);
    let init = || (vec![0.0; flat.padded().iter().product()], vec![0.0; d1 * plane], vec![0.0; plane]);
    for_each_slab_with(&mut out, od * plane, work, init, |(src, mid, acc), ch, dst| {
        let chan = &x.data()[ch * sites..(ch + 1) * sites];
        let w1 = &sf[ch * kv1..(ch + 1) * kv1];
        for (z, m) in mid.chunks_mut(plane).enumerate() {
            pad_into(&chan[z * in_plane..(z + 1) * in_plane], &flat, src);
            m.fill(0.0);
            correlate_slab(m, 0, src, 0, 1, w1, &flat);
        }
        affine(mid, ch, None, bn1);
        mid.iter_mut().for_each(|v| *v = T::from_f64(*v).to_f64());
        let w2 = &df[ch * kd..(ch + 1) * kd];
        for (z, d) in dst.chunks_mut(plane).enumerate() {
            acc.fill(0.0);
            for (a, &wv) in w2.iter().enumerate() {
                let Some(zi) = (z * sd + a).checked_sub(lo).filter(|&zi| zi < d1) else { continue };
                for (o, &v) in acc.iter_mut().zip(&mid[zi * plane..(zi + 1) * plane]) {
                    *o += wv * v;
                }
            }
            affine(acc, ch, None, bn2);
            for (o, v) in d.iter_mut().zip(acc.iter()) {
                *o = T::from_f64(*v);
            }
        }
    });
    out
}

/// Sites per tile in the pointwise kernels; one tile of every input channel
/// stays in cache while all outputs are accumulated from it.
const PW_TILE: usize = 256;

/// Accumulate every output channel of depth `z` into `acc`, laid out
/// `[c_out][h * w]`.
fn pointwise_depth<T: Element>(acc: &mut [f64], x: &Volume4<T>, z: usize, c_out: usize, wf: &[f64]) {
    let s = x.shape();
    let (sites, plane) = (s.sites(), s.h * s.w);
    let xs = x.data();
    for t0 in (0..plane).step_by(PW_TILE) {
        let t1 = (t0 + PW_TILE).min(plane);
        for o in 0..c_out {
            let run = &mut acc[o * plane + t0..o * plane + t1];
            for i in 0..s.c {
                let wv = wf[o * s.c + i];
                let off = i * sites + z * plane;
                for (a, v) in run.iter_mut().zip(&xs[off + t0..off + t1]) {
                    *a += wv * v.to_f64();
                }
            }
        }
    }
}

/// Move `[d][c][plane]` blocks to `[c][d][plane]`.
fn depth_major_to_channel_major<U: Copy + Default>(by_depth: &[U], c: usize, d: usize, plane: usize) -> Vec<U> {
    let mut out = vec![U::default(); by_depth.len()];
    for z in 0..d {
        for o in 0..c {
            let src = (z * c + o) * plane;
            let dst = (o * d + z) * plane;
            out[dst..dst + plane].copy_from_slice(&by_depth[src..src + plane]);
        }
    }
    out
}

/// 1x1x1 channel mixing. `w` is `[c_out][c_in]`.
pub(crate) fn pointwise_raw<T: Element>(x: &Volume4<T>, c_out: usize, w: &[T]) -> Vec<f64> {
    let s = x.shape();
    let wf = to_f64s(w);
    let plane = s.h * s.w;
    // Depth-major blocks read each input plane once per depth.
    let mut by_depth = vec![0.0; c_out * s.sites()];
    let work = by_depth.len() * s.c;
    for_each_slab(&mut by_depth, c_out * plane, work, |z, acc| pointwise_depth(acc, x, z, c_out, &wf));
    depth_major_to_channel_major(&by_depth, c_out, s.d, plane)
}

/// Which index selects the epilogue parameters of a pointwise output.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum EpilogueAxis {
    Channel,
    Depth,
}

/// [`pointwise_raw`] followed by bias and BN, rounded to `T`.
pub(crate) fn pointwise_t<T: Element>(
    x: &Volume4<T>,
    c_out: usize,
    w: &[T],
    bias: Option<&[f64]>,
    bn: Option<&Bn64>,
    axis: EpilogueAxis,
) -> Vec<T> {
    let s = x.shape();
    let wf = to_f64s(w);
    let plane = s.h * s.w;
    let mut by_depth = vec![T::default(); c_out * s.sites()];
    let work = by_depth.len() * s.c;
    let init = || vec![0.0; c_out * plane];
    for_each_slab_with(&mut by_depth, c_out * plane, work, init, |acc, z, dst| {
        acc.fill(0.0);
        pointwise_depth(acc, x, z, c_out, &wf);
        for (o, run) in acc.chunks_mut(plane).enumerate() {
            affine(run, if axis == EpilogueAxis::Depth { z } else { o }, bias, bn);
        }
        for (o, v) in dst.iter_mut().zip(acc.iter()) {
            *o = T::from_f64(*v);
        }
    });
    depth_major_to_channel_major(&by_depth, c_out, s.d, plane)
}

/// Batch-norm parameters widened to f64 with `1 / sqrt(var + eps)` folded.
pub(crate) struct Bn64 {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Bn64 {
    pub fn new<T: Element>(bn: &BatchNorm<T>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.to_f64()).collect::<Vec<_>>();
        Self {
            gamma: f(&bn.gamma),
            beta: f(&bn.beta),
            mean: f(&bn.mean),
            inv_std: bn.var.iter().map(|v| 1.0 / (v.to_f64() + bn.eps).sqrt()).collect(),
        }
    }
}

/// Bias, then normalize, then affine, on a buffer of `inner`-sized runs whose
/// channel index cycles with period `channels`.
pub(crate) fn epilogue(
    buf: &mut [f64],
    inner: usize,
    channels: usize,
    bias: Option<&[f64]>,
    bn: Option<&Bn64>,
) {
    if bias.is_none() && bn.is_none() {
        return;
    }
    for (idx, run) in buf.chunks_mut(inner).enumerate() {
        affine(run, idx % channels, bias, bn);
    }
}

/// The epilogue of channel `c` on one run.
fn affine(run: &mut [f64], c: usize, bias: Option<&[f64]>, bn: Option<&Bn64>) {
    if let Some(b) = bias {
        let bv = b[c];
        run.iter_mut().for_each(|v| *v += bv);
    }
    if let Some(bn) = bn {
        let (m, s, g, be) = (bn.mean[c], bn.inv_std[c], bn.gamma[c], bn.beta[c]);
        run.iter_mut().for_each(|v| *v = g * ((*v - m) * s) + be);
    }
}

pub(crate) fn to_f64s<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}
