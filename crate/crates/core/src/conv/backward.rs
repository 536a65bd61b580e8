//! Analytic gradients of the forward maps.
//!
//! Everything is recomputed and differentiated in f64; intermediate rounding
//! to the storage type is ignored, so gradients are exact for f64 volumes.

use super::bank::{KernelBank, Weights};
use super::forward::output_shape;
use super::kernels::{depthwise_raw, epilogue, full_raw, pad_f64, pointwise_raw, to_f64s, Bn64, Geom};
use super::Kernel3;
use crate::error::{ensure, Result};
use crate::tensor::{Axis, Element, Shape4, Volume4};

/// Gradients of `sum(grad_out * forward(input))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub input: Volume4<T>,
    /// Same layout as the forward bank. BN running statistics are constants,
    /// so their slots hold zeros.
    pub bank: KernelBank<T>,
}

pub fn backward<T: Element>(
    input: &Volume4<T>,
    bank: &KernelBank<T>,
    grad_out: &Volume4<T>,
    stride: usize,
) -> Result<Gradients<T>> {
    bank.validate()?;
    let out_shape = output_shape(bank, input.shape(), stride)?;
    if let Weights::DwSC { d_in, .. } = &bank.weights {
        ensure!(
            input.shape().d == *d_in,
            "disparity mismatch: input has {} disparities, DwSC weights expect {d_in}",
            input.shape().d
        );
    }
    ensure!(
        grad_out.shape() == out_shape,
        "grad_out shape {} does not match forward output shape {out_shape}",
        grad_out.shape()
    );
    let x: Volume4<f64> = input.cast();
    let gy = grad_out.to_f64_vec();
    let bias = bank.bias.as_ref().map(|b| to_f64s(b));
    let bn = bank.bn.as_ref().map(Bn64::new);
    let mut params = Vec::with_capacity(bank.param_count());

    let dx = match &bank.weights {
        Weights::Full { c_in, c_out, kernel, data } => {
            let g = Geom { input: x.shape().spatial(), kernel: kernel.dims(), stride: [stride; 3] };
            let w = to_f64s(data);
            let raw = full_raw(&x, *c_out, &w, &g);
            let aff = affine_backward(&raw, &gy, out_shape.sites(), *c_out, bias.as_deref(), bn.as_ref());
            let (dx, dw) = correlate_backward(&x, &w, &aff.graw, &g, *c_in, *c_out, false);
            params.extend(dw);
            aff.push_params(&mut params);
            dx
        }
        Weights::FwSC { c_in, c_out, kernel, depthwise, pointwise } => {
            let g = Geom { input: x.shape().spatial(), kernel: kernel.dims(), stride: [stride; 3] };
            let (dw, pw) = (to_f64s(depthwise), to_f64s(pointwise));
            let s1 = Volume4::from_f64_vec(Shape4::with_spatial(*c_in, g.output()), depthwise_raw(&x, &dw, &g));
            let raw = pointwise_raw(&s1, *c_out, &pw);
            let aff = affine_backward(&raw, &gy, out_shape.sites(), *c_out, bias.as_deref(), bn.as_ref());
            let (ds1, dpw) = pointwise_backward(&s1, &pw, &aff.graw, *c_out);
            let (dx, ddw) = correlate_backward(&x, &dw, &ds1, &g, *c_in, *c_in, true);
            params.extend(ddw);
            params.extend(dpw);
            aff.push_params(&mut params);
            dx
        }
        Weights::DwSC { channels, d_in, d_out, kernel, depthwise, pointwise } => {
            const SWAP: [Axis; 4] = [Axis::D, Axis::C, Axis::H, Axis::W];
            let xp = x.permute(SWAP)?;
            let g = Geom { input: xp.shape().spatial(), kernel: kernel.dims(), stride: [1, stride, stride] };
            let (dw, pw) = (to_f64s(depthwise), to_f64s(pointwise));
            let s1 = Volume4::from_f64_vec(Shape4::with_spatial(*d_in, g.output()), depthwise_raw(&xp, &dw, &g));
            let raw = pointwise_raw(&s1, *d_out, &pw);
            let gyp = Volume4::from_f64_vec(out_shape, gy).permute(SWAP)?.into_data();
            let plane = out_shape.h * out_shape.w;
            let aff = affine_backward(&raw, &gyp, plane, *channels, bias.as_deref(), bn.as_ref());
            let (ds1, dpw) = pointwise_backward(&s1, &pw, &aff.graw, *d_out);
            let (dxp, ddw) = correlate_backward(&xp, &dw, &ds1, &g, *d_in, *d_in, true);
            params.extend(ddw);
            params.extend(dpw);
            aff.push_params(&mut params);
            Volume4::from_f64_vec(xp.shape(), dxp).permute(SWAP)?.into_data()
        }
        Weights::FDwSC { c_in, c_out, kernel, spatial, disparity, pointwise, stage_bn } => {
            let (sp, dp, pw) = (to_f64s(spatial), to_f64s(disparity), to_f64s(pointwise));
            let bn1 = stage_bn.as_ref().map(|sb| Bn64::new(&sb[0]));
            let bn2 = stage_bn.as_ref().map(|sb| Bn64::new(&sb[1]));
            let k1 = Kernel3 { kd: 1, ..*kernel };
            let k2 = Kernel3 { kd: kernel.kd, kh: 1, kw: 1 };

            let g1 = Geom { input: x.shape().spatial(), kernel: k1.dims(), stride: [1, stride, stride] };
            let s1_shape = Shape4::with_spatial(*c_in, g1.output());
            let raw1 = depthwise_raw(&x, &sp, &g1);
            let mut a1 = raw1.clone();
            epilogue(&mut a1, s1_shape.sites(), *c_in, None, bn1.as_ref());
            let a1 = Volume4::from_f64_vec(s1_shape, a1);

            let g2 = Geom { input: s1_shape.spatial(), kernel: k2.dims(), stride: [stride, 1, 1] };
            let s2_shape = Shape4::with_spatial(*c_in, g2.output());
            let raw2 = depthwise_raw(&a1, &dp, &g2);
            let mut a2 = raw2.clone();
            epilogue(&mut a2, s2_shape.sites(), *c_in, None, bn2.as_ref());
            let a2 = Volume4::from_f64_vec(s2_shape, a2);

            let raw3 = pointwise_raw(&a2, *c_out, &pw);
            let aff3 = affine_backward(&raw3, &gy, out_shape.sites(), *c_out, bias.as_deref(), bn.as_ref());
            let (da2, dpw) = pointwise_backward(&a2, &pw, &aff3.graw, *c_out);
            let aff2 = affine_backward(&raw2, &da2, s2_shape.sites(), *c_in, None, bn2.as_ref());
            let (da1, ddp) = correlate_backward(&a1, &dp, &aff2.graw, &g2, *c_in, *c_in, true);
            let aff1 = affine_backward(&raw1, &da1, s1_shape.sites(), *c_in, None, bn1.as_ref());
            let (dx, dsp) = correlate_backward(&x, &sp, &aff1.graw, &g1, *c_in, *c_in, true);

            params.extend(dsp);
            params.extend(ddp);
            params.extend(dpw);
            aff1.push_bn(&mut params);
            aff2.push_bn(&mut params);
            aff3.push_params(&mut params);
            dx
        }
    };

    let mut grad_bank = bank.with_trainable(&params)?;
    zero_statistics(&mut grad_bank);
    Ok(Gradients { input: Volume4::from_f64_vec(input.shape(), dx), bank: grad_bank })
}

fn zero_statistics<T: Element>(bank: &mut KernelBank<T>) {
    let mut clear = |bn: &mut super::BatchNorm<T>| {
        bn.mean.iter_mut().for_each(|v| *v = T::default());
        bn.var.iter_mut().for_each(|v| *v = T::default());
    };
    if let Some(bn) = &mut bank.bn {
        clear(bn);
    }
    if let Weights::FDwSC { stage_bn: Some(sb), .. } = &mut bank.weights {
        sb.iter_mut().for_each(&mut clear);
    }
}

struct AffineGrad {
    /// Gradient with respect to the pre-epilogue values.
    graw: Vec<f64>,
    bias: Option<Vec<f64>>,
    gamma_beta: Option<(Vec<f64>, Vec<f64>)>,
}

impl AffineGrad {
    fn push_bn(&self, out: &mut Vec<f64>) {
        if let Some((g, b)) = &self.gamma_beta {
            out.extend(g);
            out.extend(b);
        }
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        if let Some(b) = &self.bias {
            out.extend(b);
        }
        self.push_bn(out);
    }
}

fn affine_backward(
    raw: &[f64],
    g: &[f64],
    inner: usize,
    channels: usize,
    bias: Option<&[f64]>,
    bn: Option<&Bn64>,
) -> AffineGrad {
    let mut graw = g.to_vec();
    let mut dbias = bias.map(|_| vec![0.0; channels]);
    let mut dgb = bn.map(|_| (vec![0.0; channels], vec![0.0; channels]));
    for (idx, (gr, r)) in graw.chunks_mut(inner).zip(raw.chunks(inner)).enumerate() {
        let c = idx % channels;
        let b = bias.map_or(0.0, |b| b[c]);
        if let (Some(bn), Some((dg, db))) = (bn, dgb.as_mut()) {
            let scale = bn.gamma[c] * bn.inv_std[c];
            for (gv, &rv) in gr.iter_mut().zip(r) {
                let n = (rv + b - bn.mean[c]) * bn.inv_std[c];
                dg[c] += *gv * n;
                db[c] += *gv;
                *gv *= scale;
            }
        }
        if let Some(d) = dbias.as_mut() {
            d[c] += gr.iter().sum::<f64>();
        }
    }
    AffineGrad { graw, bias: dbias, gamma_beta: dgb }
}

/// `y[o] = sum_i w[o][i] x[i]`: returns (dx, dw).
fn pointwise_backward(x: &Volume4<f64>, w: &[f64], gy: &[f64], c_out: usize) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let n = s.sites();
    let xd = x.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; w.len()];
    for o in 0..c_out {
        let go = &gy[o * n..(o + 1) * n];
        for i in 0..s.c {
            let xi = &xd[i * n..(i + 1) * n];
            let wv = w[o * s.c + i];
            let mut acc = 0.0;
            for ((d, &xv), &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(xi).zip(go) {
                *d += wv * gv;
                acc += gv * xv;
            }
            dw[o * s.c + i] = acc;
        }
    }
    (dx, dw)
}

/// Backward of a same-padded strided correlation. With `depthwise`, output
/// channel `o` reads input channel `o` through `w[o]`; otherwise it reads all
/// inputs through `w[o][i]`. Returns (dx unpadded, dw).
fn correlate_backward(
    x: &Volume4<f64>,
    w: &[f64],
    gy: &[f64],
    g: &Geom,
    c_in: usize,
    c_out: usize,
    depthwise: bool,
) -> (Vec<f64>, Vec<f64>) {
    let xpad = pad_f64(x, g);
    let [kd, kh, kw] = g.kernel;
    let kv = kd * kh * kw;
    let [pd, ph, pw] = g.padded();
    let pvol = pd * ph * pw;
    let [od, oh, ow] = g.output();
    let [sd, sh, sw] = g.stride;
    let mut dxpad = vec![0.0; xpad.len()];
    let mut dw = vec![0.0; w.len()];
    for o in 0..c_out {
        let inputs = if depthwise { o..o + 1 } else { 0..c_in };
        for i in inputs {
            let wb = if depthwise { o } else { o * c_in + i } * kv;
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let t = wb + (a * kh + b) * kw + c;
                        let wv = w[t];
                        let mut acc = 0.0;
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let gv = gy[((o * od + z) * oh + y) * ow + xx];
                                    let pi = i * pvol + ((z * sd + a) * ph + y * sh + b) * pw + xx * sw + c;
                                    acc += gv * xpad[pi];
                                    dxpad[pi] += gv * wv;
                                }
                            }
                        }
                        dw[t] += acc;
                    }
                }
            }
        }
    }
    let s = x.shape();
    let [ld, lh, lw] = g.pad_lo();
    let mut dx = Vec::with_capacity(s.len());
    for c in 0..s.c {
        for d in 0..s.d {
            for h in 0..s.h {
                let off = c * pvol + ((d + ld) * ph + h + lh) * pw + lw;
                dx.extend_from_slice(&dxpad[off..off + s.w]);
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{forward, BankSpec, VariantKind};

    #[test]
    fn scalar_product_rule() {
        let s = Shape4::new(1, 1, 1, 1).unwrap();
        let x = Volume4::from_vec(s, vec![2.0f64]).unwrap();
        let bank = KernelBank::from_weights(Weights::Full {
            c_in: 1,
            c_out: 1,
            kernel: Kernel3::cube(1).unwrap(),
            data: vec![3.0],
        })
        .unwrap();
        let g = backward(&x, &bank, &Volume4::from_vec(s, vec![1.0]).unwrap(), 1).unwrap();
        assert_eq!(g.input.data(), &[3.0]);
        assert_eq!(g.bank.trainable(), vec![2.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let x = Volume4::<f64>::seeded(Shape4::new(2, 3, 4, 4).unwrap(), 1).unwrap();
        for v in VariantKind::ALL {
            let c_out = if v == VariantKind::DwSC { 2 } else { 3 };
            let spec = BankSpec::new(v, 2, c_out, Kernel3::cube(3).unwrap())
                .with_disparity(3, 3)
                .with_bias(true)
                .with_bn(true);
            let bank = KernelBank::seeded(spec, 5).unwrap();
            let y = forward(&x, &bank, 1).unwrap();
            let g = backward(&x, &bank, &Volume4::zeros(y.shape()).unwrap(), 1).unwrap();
            assert!(g.input.data().iter().all(|&v| v == 0.0), "{v}");
            assert!(g.bank.trainable().iter().all(|&v| v == 0.0), "{v}");
        }
    }

    #[test]
    fn grad_shape_mismatch_rejected() {
        let x = Volume4::<f64>::seeded(Shape4::new(2, 3, 4, 4).unwrap(), 1).unwrap();
        let bank = KernelBank::seeded(BankSpec::new(VariantKind::Full, 2, 3, Kernel3::cube(3).unwrap()), 5).unwrap();
        let bad = Volume4::zeros(Shape4::new(3, 3, 4, 5).unwrap()).unwrap();
        assert!(backward(&x, &bank, &bad, 1).is_err());
    }
}
