//! Weight bundles: a JSON sidecar naming the variant and extents, plus a
//! payload file holding one SV3D container per tensor in sidecar order.
//!
//! ```json
//! {
//!   "format": "sv3d-bank", "version": 1, "variant": "fwsc", "dtype": "f32",
//!   "c_in": 32, "c_out": 32, "kernel": [3, 3, 3], "d_in": 1, "d_out": 1,
//!   "eps": 1e-5, "payload": "layer.sv3d",
//!   "tensors": ["depthwise", "pointwise", "bias"]
//! }
//! ```

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bank::{BatchNorm, KernelBank, Weights, DEFAULT_EPS};
use super::{Kernel3, VariantKind};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Shape4, Volume4};

const FORMAT: &str = "sv3d-bank";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    variant: VariantKind,
    dtype: String,
    c_in: usize,
    c_out: usize,
    kernel: [usize; 3],
    d_in: usize,
    d_out: usize,
    eps: f64,
    payload: String,
    tensors: Vec<String>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn col(n: usize) -> Shape4 {
    Shape4 { c: n, d: 1, h: 1, w: 1 }
}

fn named_tensors<T: Element>(bank: &KernelBank<T>) -> Vec<(String, Shape4, &[T])> {
    let k = bank.kernel();
    let mut v: Vec<(String, Shape4, &[T])> = Vec::new();
    match &bank.weights {
        Weights::Full { c_in, c_out, data, .. } => {
            v.push(("weights".into(), Shape4 { c: c_out * c_in, d: k.kd, h: k.kh, w: k.kw }, data));
        }
        Weights::FwSC { c_in, c_out, depthwise, pointwise, .. } => {
            v.push(("depthwise".into(), Shape4 { c: *c_in, d: k.kd, h: k.kh, w: k.kw }, depthwise));
            v.push(("pointwise".into(), Shape4 { c: *c_out, d: *c_in, h: 1, w: 1 }, pointwise));
        }
        Weights::DwSC { d_in, d_out, depthwise, pointwise, .. } => {
            v.push(("depthwise".into(), Shape4 { c: *d_in, d: k.kd, h: k.kh, w: k.kw }, depthwise));
            v.push(("pointwise".into(), Shape4 { c: *d_out, d: *d_in, h: 1, w: 1 }, pointwise));
        }
        Weights::FDwSC { c_in, c_out, spatial, disparity, pointwise, stage_bn, .. } => {
            v.push(("spatial".into(), Shape4 { c: *c_in, d: 1, h: k.kh, w: k.kw }, spatial));
            v.push(("disparity".into(), Shape4 { c: *c_in, d: k.kd, h: 1, w: 1 }, disparity));
            v.push(("pointwise".into(), Shape4 { c: *c_out, d: *c_in, h: 1, w: 1 }, pointwise));
            if let Some(sb) = stage_bn {
                for (i, bn) in sb.iter().enumerate() {
                    bn_tensors(&mut v, &format!("stage{}", i + 1), bn);
                }
            }
        }
    }
    if let Some(b) = &bank.bias {
        v.push(("bias".into(), col(b.len()), b));
    }
    if let Some(bn) = &bank.bn {
        bn_tensors(&mut v, "bn", bn);
    }
    v
}

fn bn_tensors<'a, T: Element>(v: &mut Vec<(String, Shape4, &'a [T])>, prefix: &str, bn: &'a BatchNorm<T>) {
    for (name, data) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
        v.push((format!("{prefix}.{name}"), col(data.len()), data));
    }
}

fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("sv3d")
}

/// Write `bank` as `<path>` (sidecar) and `<path>` with extension `sv3d`.
pub fn write_bundle<T: Element>(bank: &KernelBank<T>, path: &Path) -> Result<()> {
    bank.validate()?;
    let payload = payload_path(path);
    let tensors = named_tensors(bank);
    let (d_in, d_out) = match &bank.weights {
        Weights::DwSC { d_in, d_out, .. } => (*d_in, *d_out),
        _ => (1, 1),
    };
    let eps = bank.bn.as_ref().map_or(DEFAULT_EPS, |bn| bn.eps);
    let sidecar = Sidecar {
        format: FORMAT.into(),
        version: 1,
        variant: bank.variant(),
        dtype: dtype_name(T::DTYPE).into(),
        c_in: bank.c_in(),
        c_out: bank.c_out(),
        kernel: bank.kernel().dims(),
        d_in,
        d_out,
        eps,
        payload: payload
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::validation(format!("bad bundle path {}", path.display())))?
            .to_string(),
        tensors: tensors.iter().map(|(n, _, _)| n.clone()).collect(),
    };
    let mut bytes = Vec::new();
    for (_, shape, data) in &tensors {
        Volume4::from_vec(*shape, data.to_vec())?.write_sv3d(&mut bytes)?;
    }
    fs::write(&payload, bytes)?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Read a bundle written by [`write_bundle`]. The payload dtype must be `T`.
pub fn read_bundle<T: Element>(path: &Path) -> Result<KernelBank<T>> {
    let text = fs::read_to_string(path)?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: malformed bundle sidecar: {e}", path.display())))?;
    if sc.format != FORMAT || sc.version != 1 {
        return Err(Error::format(format!(
            "{}: unsupported bundle format `{}` version {}",
            path.display(),
            sc.format,
            sc.version
        )));
    }
    if sc.dtype != dtype_name(T::DTYPE) {
        return Err(Error::format(format!(
            "{}: bundle dtype {} does not match expected {}",
            path.display(),
            sc.dtype,
            dtype_name(T::DTYPE)
        )));
    }
    let payload = path.parent().unwrap_or(Path::new(".")).join(&sc.payload);
    let mut reader = BufReader::new(fs::File::open(&payload)?);
    let mut arrays = std::collections::HashMap::new();
    for name in &sc.tensors {
        let v = Volume4::<T>::read_sv3d(&mut reader)
            .map_err(|e| Error::format(format!("{}: tensor `{name}`: {e}", payload.display())))?;
        arrays.insert(name.clone(), v.into_data());
    }
    let mut take = |name: &str| -> Result<Vec<T>> {
        arrays
            .remove(name)
            .ok_or_else(|| Error::format(format!("{}: missing tensor `{name}`", path.display())))
    };
    let kernel = Kernel3::new(sc.kernel[0], sc.kernel[1], sc.kernel[2])
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let take_bn = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Vec<T>>| -> Result<BatchNorm<T>> {
        Ok(BatchNorm {
            gamma: take(&format!("{prefix}.gamma"))?,
            beta: take(&format!("{prefix}.beta"))?,
            mean: take(&format!("{prefix}.mean"))?,
            var: take(&format!("{prefix}.var"))?,
            eps: sc.eps,
        })
    };
    let has = |name: &str| sc.tensors.iter().any(|t| t == name);
    let weights = match sc.variant {
        VariantKind::Full => Weights::Full { c_in: sc.c_in, c_out: sc.c_out, kernel, data: take("weights")? },
        VariantKind::FwSC => Weights::FwSC {
            c_in: sc.c_in,
            c_out: sc.c_out,
            kernel,
            depthwise: take("depthwise")?,
            pointwise: take("pointwise")?,
        },
        VariantKind::DwSC => Weights::DwSC {
            channels: sc.c_in,
            d_in: sc.d_in,
            d_out: sc.d_out,
            kernel,
            depthwise: take("depthwise")?,
            pointwise: take("pointwise")?,
        },
        VariantKind::FDwSC => {
            let spatial = take("spatial")?;
            let disparity = take("disparity")?;
            let pointwise = take("pointwise")?;
            let stage_bn = if has("stage1.gamma") {
                Some(Box::new([take_bn("stage1", &mut take)?, take_bn("stage2", &mut take)?]))
            } else {
                None
            };
            Weights::FDwSC { c_in: sc.c_in, c_out: sc.c_out, kernel, spatial, disparity, pointwise, stage_bn }
        }
    };
    let bias = if has("bias") { Some(take("bias")?) } else { None };
    let bn = if has("bn.gamma") { Some(take_bn("bn", &mut take)?) } else { None };
    let bank = KernelBank { weights, bias, bn };
    bank.validate()
        .map_err(|e| Error::format(format!("{}: inconsistent bundle: {e}", path.display())))?;
    Ok(bank)
}
