//! Instrumented reference loops.
//!
//! These are written separately from the production kernels: one plain loop
//! nest per variant, explicit bounds checks instead of a padded buffer, and a
//! counter bumped on every multiply-accumulate. Per output element the taps
//! are summed in the same order as production, so outputs match bit for bit.

use crate::conv::{deconv_extent, BatchNorm, KernelBank, Weights};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Shape4, Volume4};

/// Value at a possibly out-of-range position; zero outside the volume.
fn tap<T: Element>(x: &Volume4<T>, c: usize, z: isize, y: isize, w: isize) -> f64 {
    let s = x.shape();
    if z < 0 || y < 0 || w < 0 || z as usize >= s.d || y as usize >= s.h || w as usize >= s.w {
        return 0.0;
    }
    x.get(c, z as usize, y as usize, w as usize).to_f64()
}

fn lo(k: usize) -> isize {
    ((k - 1) / 2) as isize
}

fn ceil_div(n: usize, s: usize) -> usize {
    (n + s - 1) / s
}

fn affine<T: Element>(
    mut v: f64,
    c: usize,
    bias: Option<&[T]>,
    bn: Option<&BatchNorm<T>>,
    macs: &mut u64,
) -> f64 {
    if let Some(b) = bias {
        v += b[c].to_f64();
        *macs += 1;
    }
    if let Some(bn) = bn {
        let inv_std = 1.0 / (bn.var[c].to_f64() + bn.eps).sqrt();
        let norm = (v - bn.mean[c].to_f64()) * inv_std;
        v = bn.gamma[c].to_f64() * norm + bn.beta[c].to_f64();
        *macs += 2;
    }
    v
}

/// Forward pass plus the number of MACs executed, including padded taps,
/// bias adds (1 each) and batch norm (2 each).
pub fn counted_forward<T: Element>(
    input: &Volume4<T>,
    bank: &KernelBank<T>,
    stride: usize,
) -> Result<(Volume4<T>, u64)> {
    ensure!(stride >= 1, "stride must be >= 1");
    bank.validate()?;
    let s = input.shape();
    ensure!(
        s.c == bank.c_in(),
        "channel mismatch: input has {} channels, weights expect {}",
        s.c,
        bank.c_in()
    );
    let st = stride as isize;
    let bias = bank.bias.as_deref();
    let bn = bank.bn.as_ref();
    let mut macs = 0u64;
    let (od, oh, ow) = (ceil_div(s.d, stride), ceil_div(s.h, stride), ceil_div(s.w, stride));

    let out = match &bank.weights {
        Weights::Full { c_in, c_out, kernel, data } => {
            let [kd, kh, kw] = kernel.dims();
            let mut out = Vec::with_capacity(c_out * od * oh * ow);
            for o in 0..*c_out {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..*c_in {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for c in 0..kw {
                                            let wv = data[(((o * c_in + i) * kd + a) * kh + b) * kw + c].to_f64();
                                            let v = tap(
                                                input,
                                                i,
                                                z as isize * st + a as isize - lo(kd),
                                                y as isize * st + b as isize - lo(kh),
                                                x as isize * st + c as isize - lo(kw),
                                            );
                                            acc += wv * v;
                                            macs += 1;
                                        }
                                    }
                                }
                            }
                            out.push(T::from_f64(affine(acc, o, bias, bn, &mut macs)));
                        }
                    }
                }
            }
            Volume4::from_vec(Shape4::new(*c_out, od, oh, ow)?, out)?
        }

        Weights::FwSC { c_in, c_out, kernel, depthwise, pointwise } => {
            let [kd, kh, kw] = kernel.dims();
            let mut mid = Vec::with_capacity(c_in * od * oh * ow);
            for i in 0..*c_in {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let wv = depthwise[((i * kd + a) * kh + b) * kw + c].to_f64();
                                        let v = tap(
                                            input,
                                            i,
                                            z as isize * st + a as isize - lo(kd),
                                            y as isize * st + b as isize - lo(kh),
                                            x as isize * st + c as isize - lo(kw),
                                        );
                                        acc += wv * v;
                                        macs += 1;
                                    }
                                }
                            }
                            mid.push(T::from_f64(acc));
                        }
                    }
                }
            }
            let sites = od * oh * ow;
            let mut out = Vec::with_capacity(c_out * sites);
            for o in 0..*c_out {
                for p in 0..sites {
                    let mut acc = 0.0;
                    for i in 0..*c_in {
                        acc += pointwise[o * c_in + i].to_f64() * mid[i * sites + p].to_f64();
                        macs += 1;
                    }
                    out.push(T::from_f64(affine(acc, o, bias, bn, &mut macs)));
                }
            }
            Volume4::from_vec(Shape4::new(*c_out, od, oh, ow)?, out)?
        }

        Weights::DwSC { channels, d_in, d_out, kernel, depthwise, pointwise } => {
            ensure!(s.d == *d_in, "disparity mismatch: input has {} disparities, DwSC weights expect {d_in}", s.d);
            // The kernel's first extent runs along channels.
            let [kc, kh, kw] = kernel.dims();
            let nc = *channels;
            let plane = oh * ow;
            // mid[dd][cc][y][x]
            let mut mid = Vec::with_capacity(d_in * nc * plane);
            for dd in 0..*d_in {
                for cc in 0..nc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kc {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let wv = depthwise[((dd * kc + a) * kh + b) * kw + c].to_f64();
                                        let ch = cc as isize + a as isize - lo(kc);
                                        let v = if ch < 0 || ch as usize >= nc {
                                            0.0
                                        } else {
                                            tap(
                                                input,
                                                ch as usize,
                                                dd as isize,
                                                y as isize * st + b as isize - lo(kh),
                                                x as isize * st + c as isize - lo(kw),
                                            )
                                        };
                                        acc += wv * v;
                                        macs += 1;
                                    }
                                }
                            }
                            mid.push(T::from_f64(acc));
                        }
                    }
                }
            }
            let shape = Shape4::new(nc, *d_out, oh, ow)?;
            let mut out = vec![T::default(); shape.len()];
            for o in 0..*d_out {
                for cc in 0..nc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for dd in 0..*d_in {
                                let m = mid[((dd * nc + cc) * oh + y) * ow + x].to_f64();
                                acc += pointwise[o * d_in + dd].to_f64() * m;
                                macs += 1;
                            }
                            out[shape.index(cc, o, y, x)] = T::from_f64(affine(acc, cc, bias, bn, &mut macs));
                        }
                    }
                }
            }
            Volume4::from_vec(shape, out)?
        }

        Weights::FDwSC { c_in, c_out, kernel, spatial, disparity, pointwise, stage_bn } => {
            let [kd, kh, kw] = kernel.dims();
            let (bn1, bn2) = match stage_bn {
                Some(sb) => (Some(&sb[0]), Some(&sb[1])),
                None => (None, None),
            };
            // Stage 1 keeps the full disparity extent.
            let s1 = Shape4::new(*c_in, s.d, oh, ow)?;
            let mut a1 = Vec::with_capacity(s1.len());
            for i in 0..*c_in {
                for z in 0..s.d {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for b in 0..kh {
                                for c in 0..kw {
                                    let wv = spatial[(i * kh + b) * kw + c].to_f64();
                                    let v = tap(
                                        input,
                                        i,
                                        z as isize,
                                        y as isize * st + b as isize - lo(kh),
                                        x as isize * st + c as isize - lo(kw),
                                    );
                                    acc += wv * v;
                                    macs += 1;
                                }
                            }
                            a1.push(T::from_f64(affine(acc, i, None, bn1, &mut macs)));
                        }
                    }
                }
            }
            let a1 = Volume4::from_vec(s1, a1)?;
            let s2 = Shape4::new(*c_in, od, oh, ow)?;
            let mut a2 = Vec::with_capacity(s2.len());
            for i in 0..*c_in {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kd {
                                let wv = disparity[i * kd + a].to_f64();
                                let v = tap(&a1, i, z as isize * st + a as isize - lo(kd), y as isize, x as isize);
                                acc += wv * v;
                                macs += 1;
                            }
                            a2.push(T::from_f64(affine(acc, i, None, bn2, &mut macs)));
                        }
                    }
                }
            }
            let sites = s2.sites();
            let mut out = Vec::with_capacity(c_out * sites);
            for o in 0..*c_out {
                for p in 0..sites {
                    let mut acc = 0.0;
                    for i in 0..*c_in {
                        acc += pointwise[o * c_in + i].to_f64() * a2[i * sites + p].to_f64();
                        macs += 1;
                    }
                    out.push(T::from_f64(affine(acc, o, bias, bn, &mut macs)));
                }
            }
            Volume4::from_vec(Shape4::new(*c_out, od, oh, ow)?, out)?
        }
    };
    Ok((out, macs))
}

/// Transposed convolution by scattering every input site through the whole
/// kernel into an uncropped buffer, then cropping. Every scattered tap is
/// counted, cropped or not.
pub fn counted_deconv<T: Element>(
    input: &Volume4<T>,
    bank: &KernelBank<T>,
    stride: usize,
    output_padding: Option<usize>,
) -> Result<(Volume4<T>, u64)> {
    bank.validate()?;
    let Weights::Full { c_in, c_out, kernel, data } = &bank.weights else {
        return Err(Error::validation("transposed convolution supports full weights only"));
    };
    let s = input.shape();
    ensure!(s.c == *c_in, "channel mismatch: input has {} channels, weights expect {c_in}", s.c);
    let k = kernel.dims();
    let n = s.spatial();
    let mut out_ext = [0; 3];
    let mut buf_ext = [0; 3];
    for i in 0..3 {
        out_ext[i] = deconv_extent(n[i], k[i], stride, output_padding)?;
        buf_ext[i] = ((n[i] - 1) * stride + k[i]).max(out_ext[i] + (k[i] - 1) / 2);
    }
    let mut macs = 0u64;
    let bsites = buf_ext[0] * buf_ext[1] * buf_ext[2];
    let mut buf = vec![0.0f64; c_out * bsites];
    for o in 0..*c_out {
        for i in 0..*c_in {
            for z in 0..s.d {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let v = input.get(i, z, y, x).to_f64();
                        for a in 0..k[0] {
                            for b in 0..k[1] {
                                for c in 0..k[2] {
                                    let wv = data[(((o * c_in + i) * k[0] + a) * k[1] + b) * k[2] + c].to_f64();
                                    let p = ((z * stride + a) * buf_ext[1] + y * stride + b) * buf_ext[2] + x * stride + c;
                                    buf[o * bsites + p] += wv * v;
                                    macs += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = Shape4::with_spatial(*c_out, out_ext);
    let off = k.map(|k| (k - 1) / 2);
    let mut out = Vec::with_capacity(shape.len());
    for o in 0..*c_out {
        for z in 0..out_ext[0] {
            for y in 0..out_ext[1] {
                for x in 0..out_ext[2] {
                    let p = ((z + off[0]) * buf_ext[1] + y + off[1]) * buf_ext[2] + x + off[2];
                    let v = affine(buf[o * bsites + p], o, bank.bias.as_deref(), bank.bn.as_ref(), &mut macs);
                    out.push(T::from_f64(v));
                }
            }
        }
    }
    Ok((Volume4::from_vec(shape, out)?, macs))
}
