use super::bank::{BatchNorm, KernelBank, Weights};
use super::kernels::{
    depthwise_t, epilogue, fdwsc_stages_t, for_each_slab, full_raw, pointwise_t, to_f64s, Bn64, EpilogueAxis, Geom,
};
use super::{Kernel3, VariantKind};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Axis, Element, Shape4, Volume4};

fn check_stride(stride: usize) -> Result<()> {
    ensure!(stride >= 1, "stride must be >= 1, got {stride}");
    Ok(())
}

fn check_channels<T: Element>(input: &Volume4<T>, c_in: usize) -> Result<()> {
    ensure!(
        input.shape().c == c_in,
        "channel mismatch: input has {} channels, weights expect {c_in}",
        input.shape().c
    );
    Ok(())
}

fn finish<T: Element>(
    mut raw: Vec<f64>,
    shape: Shape4,
    bias: Option<&Vec<T>>,
    bn: Option<&BatchNorm<T>>,
) -> Volume4<T> {
    let bias = bias.map(|b| to_f64s(b));
    let bn = bn.map(Bn64::new);
    epilogue(&mut raw, shape.sites(), shape.c, bias.as_deref(), bn.as_ref());
    Volume4::from_f64_vec(shape, raw)
}

/// Pointwise stage plus the bank's epilogue.
fn mix<T: Element>(x: &Volume4<T>, c_out: usize, pw: &[T], bank: &KernelBank<T>, axis: EpilogueAxis) -> Result<Volume4<T>> {
    let bias = bank.bias.as_ref().map(|b| to_f64s(b));
    let bn = bank.bn.as_ref().map(Bn64::new);
    Volume4::from_vec(Shape4 { c: c_out, ..x.shape() }, pointwise_t(x, c_out, pw, bias.as_deref(), bn.as_ref(), axis))
}

/// Dense 3D convolution with same padding and stride `s` on every axis.
pub fn conv3d_full<T: Element>(input: &Volume4<T>, bank: &KernelBank<T>, stride: usize) -> Result<Volume4<T>> {
    check_stride(stride)?;
    bank.validate()?;
    let Weights::Full { c_in, c_out, kernel, data } = &bank.weights else {
        return Err(Error::validation(format!("conv3d_full needs full weights, got {}", bank.variant())));
    };
    check_channels(input, *c_in)?;
    let g = Geom { input: input.shape().spatial(), kernel: kernel.dims(), stride: [stride; 3] };
    let raw = full_raw(input, *c_out, data, &g);
    Ok(finish(raw, Shape4::with_spatial(*c_out, g.output()), bank.bias.as_ref(), bank.bn.as_ref()))
}

/// Per-channel correlation with one `kernel`-sized filter per channel.
/// `weights` is `[c][kd][kh][kw]`; `stride` is per (d, h, w).
pub fn depthwise<T: Element>(
    input: &Volume4<T>,
    weights: &[T],
    kernel: Kernel3,
    stride: [usize; 3],
) -> Result<Volume4<T>> {
    depthwise_bn(input, weights, kernel, stride, None)
}

fn depthwise_bn<T: Element>(
    input: &Volume4<T>,
    weights: &[T],
    kernel: Kernel3,
    stride: [usize; 3],
    bn: Option<&BatchNorm<T>>,
) -> Result<Volume4<T>> {
    for s in stride {
        check_stride(s)?;
    }
    let c = input.shape().c;
    ensure!(
        weights.len() == c * kernel.volume(),
        "depthwise weights have {} entries, expected {} ({c} channels x {} taps)",
        weights.len(),
        c * kernel.volume(),
        kernel.volume()
    );
    let g = Geom { input: input.shape().spatial(), kernel: kernel.dims(), stride };
    let bn = bn.map(Bn64::new);
    Volume4::from_vec(Shape4::with_spatial(c, g.output()), depthwise_t(input, weights, &g, bn.as_ref()))
}

/// 1x1x1 convolution mixing channels. `weights` is `[c_out][c_in]`.
pub fn pointwise<T: Element>(input: &Volume4<T>, weights: &[T], c_out: usize) -> Result<Volume4<T>> {
    ensure!(c_out >= 1, "pointwise c_out must be >= 1");
    let c_in = input.shape().c;
    ensure!(
        weights.len() == c_out * c_in,
        "pointwise weights have {} entries, expected {c_out} x {c_in}",
        weights.len()
    );
    let s = input.shape();
    Volume4::from_vec(Shape4 { c: c_out, ..s }, pointwise_t(input, c_out, weights, None, None, EpilogueAxis::Channel))
}

/// Feature-wise separable: per-channel k^3 filter, then pointwise `c_in -> c_out`.
pub fn fwsc<T: Element>(input: &Volume4<T>, bank: &KernelBank<T>, stride: usize) -> Result<Volume4<T>> {
    check_stride(stride)?;
    bank.validate()?;
    let Weights::FwSC { c_in, c_out, kernel, depthwise: dw, pointwise: pw } = &bank.weights else {
        return Err(Error::validation(format!("fwsc needs FwSC weights, got {}", bank.variant())));
    };
    check_channels(input, *c_in)?;
    let stage1 = depthwise(input, dw, *kernel, [stride; 3])?;
    mix(&stage1, *c_out, pw, bank, EpilogueAxis::Channel)
}

/// Disparity-wise separable: the FwSC machinery with channel and disparity
/// swapped. Each disparity slice gets its own filter over (channel, h, w),
/// then a pointwise stage mixes `d_in -> d_out`. Channels are preserved and
/// the stride applies to h and w.
pub fn dwsc<T: Element>(input: &Volume4<T>, bank: &KernelBank<T>, stride: usize) -> Result<Volume4<T>> {
    check_stride(stride)?;
    bank.validate()?;
    let Weights::DwSC { channels, d_in, d_out, kernel, depthwise: dw, pointwise: pw } = &bank.weights else {
        return Err(Error::validation(format!("dwsc needs DwSC weights, got {}", bank.variant())));
    };
    check_channels(input, *channels)?;
    ensure!(
        input.shape().d == *d_in,
        "disparity mismatch: input has {} disparities, DwSC weights expect {d_in}",
        input.shape().d
    );
    const SWAP: [Axis; 4] = [Axis::D, Axis::C, Axis::H, Axis::W];
    let swapped = input.permute(SWAP)?;
    let stage1 = depthwise(&swapped, dw, *kernel, [1, stride, stride])?;
    // Layout here is (d_out, c, h, w); the epilogue is per channel `c`.
    mix(&stage1, *d_out, pw, bank, EpilogueAxis::Depth)?.permute(SWAP)
}

/// Feature-and-disparity-wise separable: per-channel `1 x k x k` spatial
/// filter (stride on h, w), per-channel `k x 1 x 1` disparity filter (stride
/// on d), then pointwise `c_in -> c_out`.
pub fn fdwsc<T: Element>(input: &Volume4<T>, bank: &KernelBank<T>, stride: usize) -> Result<Volume4<T>> {
    check_stride(stride)?;
    bank.validate()?;
    let Weights::FDwSC { c_in, c_out, kernel, spatial, disparity, pointwise: pw, stage_bn } = &bank.weights
    else {
        return Err(Error::validation(format!("fdwsc needs FDwSC weights, got {}", bank.variant())));
    };
    check_channels(input, *c_in)?;
    let (bn1, bn2) = match stage_bn {
        Some(sb) => (Some(&sb[0]), Some(&sb[1])),
        None => (None, None),
    };
    let g1 = Geom { input: input.shape().spatial(), kernel: [1, kernel.kh, kernel.kw], stride: [1, stride, stride] };
    let g2 = Geom { input: g1.output(), kernel: [kernel.kd, 1, 1], stride: [stride, 1, 1] };
    let (bn1, bn2) = (bn1.map(Bn64::new), bn2.map(Bn64::new));
    let staged = fdwsc_stages_t(input, spatial, disparity, &g1, &g2, bn1.as_ref(), bn2.as_ref());
    let stage2 = Volume4::from_vec(Shape4::with_spatial(*c_in, g2.output()), staged)?;
    mix(&stage2, *c_out, pw, bank, EpilogueAxis::Channel)
}

/// Shape produced by [`forward`] for an input of shape `input`.
pub fn output_shape<T: Element>(bank: &KernelBank<T>, input: Shape4, stride: usize) -> Result<Shape4> {
    check_stride(stride)?;
    ensure!(
        input.c == bank.c_in(),
        "channel mismatch: input has {} channels, weights expect {}",
        input.c,
        bank.c_in()
    );
    let sp = input.spatial().map(|n| n.div_ceil(stride));
    Ok(match &bank.weights {
        Weights::DwSC { channels, d_out, .. } => Shape4 { c: *channels, d: *d_out, h: sp[1], w: sp[2] },
        w => Shape4::with_spatial(w.c_out(), sp),
    })
}

/// Dispatch on the bank's variant.
pub fn forward<T: Element>(input: &Volume4<T>, bank: &KernelBank<T>, stride: usize) -> Result<Volume4<T>> {
    match bank.variant() {
        VariantKind::Full => conv3d_full(input, bank, stride),
        VariantKind::FwSC => fwsc(input, bank, stride),
        VariantKind::DwSC => dwsc(input, bank, stride),
        VariantKind::FDwSC => fdwsc(input, bank, stride),
    }
}

/// `scale * (x + bias) + shift` per channel; absent terms are identities.
pub fn scale_shift<T: Element>(
    input: &Volume4<T>,
    bias: Option<&[T]>,
    scale: Option<&[T]>,
    shift: Option<&[T]>,
) -> Result<Volume4<T>> {
    let s = input.shape();
    for (name, p) in [("bias", bias), ("scale", scale), ("shift", shift)] {
        if let Some(p) = p {
            ensure!(p.len() == s.c, "{name} has {} entries, input has {} channels", p.len(), s.c);
        }
    }
    let n = s.sites();
    let mut out = input.to_f64_vec();
    for (c, run) in out.chunks_mut(n).enumerate() {
        let b = bias.map_or(0.0, |p| p[c].to_f64());
        let sc = scale.map_or(1.0, |p| p[c].to_f64());
        let sh = shift.map_or(0.0, |p| p[c].to_f64());
        for v in run.iter_mut() {
            *v = sc * (*v + b) + sh;
        }
    }
    Ok(Volume4::from_f64_vec(s, out))
}

/// Output extent of a transposed convolution along one axis.
///
/// Without `output_padding` the extent is `n * s`. With it, the usual
/// `(n - 1) * s - 2 * p + k + output_padding` with `p = floor((k - 1) / 2)`.
pub fn deconv_extent(n: usize, k: usize, s: usize, output_padding: Option<usize>) -> Result<usize> {
    ensure!(n >= 1 && k >= 1 && s >= 1, "deconv extents and stride must be >= 1");
    match output_padding {
        None => Ok(n * s),
        Some(op) => {
            ensure!(op < s, "output_padding ({op}) must be smaller than stride ({s})");
            let full = (n - 1) * s + k + op;
            let p2 = 2 * ((k - 1) / 2);
            ensure!(full > p2, "deconv with k={k}, s={s} on extent {n} produces an empty output");
            Ok(full - p2)
        }
    }
}

/// Transposed 3D convolution (full weights only). Each input site scatters a
/// `kernel`-sized patch of `w[o][i]` onto the upsampled grid at offset
/// `s * site - p`; taps landing outside the output are dropped.
pub fn deconv3d<T: Element>(
    input: &Volume4<T>,
    bank: &KernelBank<T>,
    stride: usize,
    output_padding: Option<usize>,
) -> Result<Volume4<T>> {
    check_stride(stride)?;
    bank.validate()?;
    let Weights::Full { c_in, c_out, kernel, data } = &bank.weights else {
        return Err(Error::validation(format!(
            "transposed convolution supports full weights only, got {}",
            bank.variant()
        )));
    };
    check_channels(input, *c_in)?;
    let s = input.shape();
    let k = kernel.dims();
    let mut out_sp = [0; 3];
    for i in 0..3 {
        out_sp[i] = deconv_extent(s.spatial()[i], k[i], stride, output_padding)?;
    }
    let shape = Shape4::with_spatial(*c_out, out_sp);
    let pad = k.map(|k| (k - 1) / 2);
    let xf = input.to_f64_vec();
    let wf = to_f64s(data);
    let kv = kernel.volume();
    let [od, oh, ow] = out_sp;
    let mut out = vec![0.0; shape.len()];
    let work = s.len() * kv * c_out;
    for_each_slab(&mut out, shape.sites(), work, |o, acc| {
        for i in 0..*c_in {
            let wk = &wf[(o * c_in + i) * kv..(o * c_in + i + 1) * kv];
            for z in 0..s.d {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let v = xf[s.index(i, z, y, x)];
                        for a in 0..k[0] {
                            let Some(zo) = (z * stride + a).checked_sub(pad[0]).filter(|&t| t < od) else {
                                continue;
                            };
                            for b in 0..k[1] {
                                let Some(yo) = (y * stride + b).checked_sub(pad[1]).filter(|&t| t < oh) else {
                                    continue;
                                };
                                let row = (zo * oh + yo) * ow;
                                for c in 0..k[2] {
                                    if let Some(xo) = (x * stride + c).checked_sub(pad[2]).filter(|&t| t < ow) {
                                        acc[row + xo] += wk[(a * k[1] + b) * k[2] + c] * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(finish(out, shape, bank.bias.as_ref(), bank.bn.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::BankSpec;
    use crate::tensor::Fill;

    fn shape(c: usize, d: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(c, d, h, w).unwrap()
    }

    fn ones(s: Shape4) -> Volume4<f32> {
        Volume4::new(s, Fill::Constant(1.0)).unwrap()
    }

    fn k(n: usize) -> Kernel3 {
        Kernel3::cube(n).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = Volume4::<f32>::seeded(shape(1, 3, 4, 5), 2).unwrap();
        let bank = KernelBank::from_weights(Weights::Full { c_in: 1, c_out: 1, kernel: k(1), data: vec![1.0] }).unwrap();
        assert!(conv3d_full(&x, &bank, 1).unwrap().bits_eq(&x));
    }

    #[test]
    fn all_ones_full_center() {
        let bank = KernelBank::from_weights(Weights::Full { c_in: 2, c_out: 1, kernel: k(3), data: vec![1.0; 54] }).unwrap();
        let y = conv3d_full(&ones(shape(2, 3, 3, 3)), &bank, 1).unwrap();
        assert_eq!(y.shape(), shape(1, 3, 3, 3));
        assert_eq!(y.get(0, 1, 1, 1), 54.0);
        assert_eq!(y.get(0, 0, 0, 0), 16.0);
    }

    #[test]
    fn all_ones_fwsc_center() {
        let bank = KernelBank::from_weights(Weights::FwSC {
            c_in: 2,
            c_out: 1,
            kernel: k(3),
            depthwise: vec![1.0; 54],
            pointwise: vec![1.0; 2],
        })
        .unwrap();
        assert_eq!(fwsc(&ones(shape(2, 3, 3, 3)), &bank, 1).unwrap().get(0, 1, 1, 1), 54.0);
    }

    #[test]
    fn all_ones_fdwsc_center() {
        let bank = KernelBank::from_weights(Weights::FDwSC {
            c_in: 2,
            c_out: 1,
            kernel: k(3),
            spatial: vec![1.0; 18],
            disparity: vec![1.0; 6],
            pointwise: vec![1.0; 2],
            stage_bn: None,
        })
        .unwrap();
        assert_eq!(fdwsc(&ones(shape(2, 3, 3, 3)), &bank, 1).unwrap().get(0, 1, 1, 1), 54.0);
    }

    #[test]
    fn all_ones_dwsc_interior() {
        // (c=2, d=4, h=3, w=3): the channel axis is only 2 deep, so a 3-tap
        // filter along it sees 2 values; 4 slices are summed by the pointwise.
        let bank = KernelBank::from_weights(Weights::DwSC {
            channels: 2,
            d_in: 4,
            d_out: 1,
            kernel: k(3),
            depthwise: vec![1.0; 108],
            pointwise: vec![1.0; 4],
        })
        .unwrap();
        let y = dwsc(&ones(shape(2, 4, 3, 3)), &bank, 1).unwrap();
        assert_eq!(y.shape(), shape(2, 1, 3, 3));
        assert_eq!(y.get(0, 0, 1, 1), 4.0 * 18.0);
        assert_eq!(y.get(1, 0, 0, 0), 4.0 * 8.0);
    }

    #[test]
    fn strided_shapes() {
        let x = Volume4::<f32>::seeded(shape(3, 5, 6, 7), 1).unwrap();
        for v in VariantKind::ALL {
            let c_out = if v == VariantKind::DwSC { 3 } else { 4 };
            let spec = BankSpec::new(v, 3, c_out, k(3)).with_disparity(5, 3);
            let bank = KernelBank::seeded(spec, 9).unwrap();
            let y = forward(&x, &bank, 2).unwrap();
            assert_eq!(y.shape(), shape(c_out, 3, 3, 4), "{v}");
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Volume4::<f32>::seeded(shape(3, 2, 2, 2), 1).unwrap();
        let bank = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::Full, 2, 4, k(3)), 0).unwrap();
        let err = forward(&x, &bank, 1).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");
    }

    #[test]
    fn scale_shift_arithmetic() {
        let x = Volume4::<f32>::new(shape(1, 1, 1, 1), Fill::Constant(2.0)).unwrap();
        let y = scale_shift(&x, Some(&[1.0]), Some(&[3.0]), Some(&[-1.0])).unwrap();
        assert_eq!(y.data(), &[8.0]);
        let id = scale_shift(&x, Some(&[0.0]), Some(&[1.0]), Some(&[0.0])).unwrap();
        assert!(id.bits_eq(&x));
        assert!(scale_shift(&x, Some(&[0.0, 1.0]), None, None).is_err());
    }

    #[test]
    fn deconv_extents() {
        assert_eq!(deconv_extent(24, 3, 2, None).unwrap(), 48);
        assert_eq!(deconv_extent(24, 3, 2, Some(1)).unwrap(), 48);
        assert_eq!(deconv_extent(5, 3, 2, Some(0)).unwrap(), 9);
        assert_eq!(deconv_extent(4, 4, 2, Some(0)).unwrap(), 8);
        assert!(deconv_extent(4, 3, 2, Some(2)).is_err());
    }

    /// Transposed convolution as zero insertion followed by a stride-1
    /// correlation with the flipped kernel.
    fn deconv_oracle(x: &Volume4<f64>, w: &[f64], c_out: usize, kk: [usize; 3], s: usize, out: [usize; 3]) -> Vec<f64> {
        let sh = x.shape();
        let n = sh.spatial();
        let p = kk.map(|k| (k - 1) / 2);
        // Upsampled grid, shifted so index `j` holds position `j - (k-1-p)`.
        let lo = [0, 1, 2].map(|i| kk[i] - 1 - p[i]);
        let ext = [0, 1, 2].map(|i| out[i] + kk[i] - 1);
        let mut u = vec![0.0; sh.c * ext[0] * ext[1] * ext[2]];
        for c in 0..sh.c {
            for z in 0..n[0] {
                for y in 0..n[1] {
                    for xx in 0..n[2] {
                        let pos = [z * s + lo[0], y * s + lo[1], xx * s + lo[2]];
                        if pos.iter().zip(&ext).all(|(a, b)| a < b) {
                            u[((c * ext[0] + pos[0]) * ext[1] + pos[1]) * ext[2] + pos[2]] = x.get(c, z, y, xx);
                        }
                    }
                }
            }
        }
        let kv = kk[0] * kk[1] * kk[2];
        let mut y = vec![0.0; c_out * out[0] * out[1] * out[2]];
        for o in 0..c_out {
            for z in 0..out[0] {
                for yy in 0..out[1] {
                    for xx in 0..out[2] {
                        let mut acc = 0.0;
                        for i in 0..sh.c {
                            for a in 0..kk[0] {
                                for b in 0..kk[1] {
                                    for c in 0..kk[2] {
                                        let wv = w[(o * sh.c + i) * kv + ((kk[0] - 1 - a) * kk[1] + kk[1] - 1 - b) * kk[2] + kk[2] - 1 - c];
                                        acc += wv * u[((i * ext[0] + z + a) * ext[1] + yy + b) * ext[2] + xx + c];
                                    }
                                }
                            }
                        }
                        y[((o * out[0] + z) * out[1] + yy) * out[2] + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn deconv_matches_zero_insertion() {
        for (kk, op) in [([3, 3, 3], None), ([3, 4, 4], Some(0)), ([3, 3, 3], Some(1)), ([1, 2, 3], None)] {
            let x = Volume4::<f64>::seeded(shape(2, 3, 4, 5), 8).unwrap();
            let kernel = Kernel3::new(kk[0], kk[1], kk[2]).unwrap();
            let bank = KernelBank::<f64>::seeded(BankSpec::new(VariantKind::Full, 2, 3, kernel), 4).unwrap();
            let y = deconv3d(&x, &bank, 2, op).unwrap();
            let Weights::Full { data, .. } = &bank.weights else { unreachable!() };
            let want = deconv_oracle(&x, data, 3, kk, 2, y.shape().spatial());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{kk:?} {op:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn deconv_odd_kernel_equals_upsample_then_conv() {
        let x = Volume4::<f64>::seeded(shape(2, 3, 3, 4), 8).unwrap();
        let bank = KernelBank::<f64>::seeded(BankSpec::new(VariantKind::Full, 2, 2, k(3)), 4).unwrap();
        let y = deconv3d(&x, &bank, 2, None).unwrap();
        // Zero-insert to (2, 6, 6, 8) then run the ordinary convolution with
        // spatially flipped weights.
        let mut up = Volume4::<f64>::zeros(shape(2, 6, 6, 8)).unwrap().into_data();
        let us = shape(2, 6, 6, 8);
        for c in 0..2 {
            for z in 0..3 {
                for h in 0..3 {
                    for w in 0..4 {
                        up[us.index(c, 2 * z, 2 * h, 2 * w)] = x.get(c, z, h, w);
                    }
                }
            }
        }
        let up = Volume4::from_vec(us, up).unwrap();
        let Weights::Full { data, .. } = &bank.weights else { unreachable!() };
        let flipped: Vec<f64> = (0..data.len())
            .map(|i| {
                let (oi, t) = (i / 27, i % 27);
                data[oi * 27 + 26 - t]
            })
            .collect();
        let fb = KernelBank::from_weights(Weights::Full { c_in: 2, c_out: 2, kernel: k(3), data: flipped }).unwrap();
        let want = conv3d_full(&up, &fb, 1).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}
