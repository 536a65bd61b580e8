//! Exact parameter and MAC counts.
//!
//! Counts follow what the reference kernels execute:
//! - every kernel tap is counted, including taps that land on zero padding;
//! - a bias add is 1 MAC per output element;
//! - inference batch norm is 2 MACs per element (normalize, then scale/shift)
//!   and 2 trainable parameters per channel;
//! - FDwSC layers with batch norm also normalize after the spatial and the
//!   disparity stage;
//! - the FDwSC spatial stage runs at the input disparity extent, because the
//!   disparity stride is applied by the following stage;
//! - transposed convolutions scatter every input site through the whole
//!   kernel, so they are counted at input resolution.
//!
//! Residual additions and activations are not counted.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::config::{FixedCost, LayerKind, LayerSpec, NetworkConfig, Stage};
use crate::conv::{strided_extent, VariantKind};
use crate::error::{ensure, Result};
use crate::tensor::Shape4;

/// Parameter and MAC counts split by contribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub params_weights: u64,
    pub params_bias: u64,
    pub params_bn: u64,
    pub macs_depthwise: u64,
    pub macs_disparity: u64,
    pub macs_pointwise: u64,
    pub macs_core: u64,
    pub macs_bias: u64,
    pub macs_bn: u64,
}

impl CostBreakdown {
    pub fn total_params(&self) -> u64 {
        self.params_weights + self.params_bias + self.params_bn
    }

    pub fn total_macs(&self) -> u64 {
        self.macs_depthwise + self.macs_disparity + self.macs_pointwise + self.macs_core + self.macs_bias + self.macs_bn
    }
}

impl Add for CostBreakdown {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl AddAssign for CostBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.params_weights += o.params_weights;
        self.params_bias += o.params_bias;
        self.params_bn += o.params_bn;
        self.macs_depthwise += o.macs_depthwise;
        self.macs_disparity += o.macs_disparity;
        self.macs_pointwise += o.macs_pointwise;
        self.macs_core += o.macs_core;
        self.macs_bias += o.macs_bias;
        self.macs_bn += o.macs_bn;
    }
}

impl std::iter::Sum for CostBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Closed-form cost of `spec` applied to an input of shape `input`.
pub fn count_layer(spec: &LayerSpec, input: Shape4) -> Result<CostBreakdown> {
    spec.validate()?;
    let id = &spec.id;
    if let Some(c) = spec.in_channels {
        ensure!(c == input.c, "layer `{id}`: expects {c} input channels, got {}", input.c);
    }
    let out = spec.output_shape(input)?;
    let u = |n: usize| n as u64;
    let k = spec.kernel;
    let kv = u(k.volume());
    let (ci, co) = (u(input.c), u(spec.out_channels));
    let [od, oh, ow] = out.spatial().map(u);
    let out_sites = od * oh * ow;
    let mut c = CostBreakdown::default();

    match (spec.kind, spec.variant) {
        (LayerKind::Deconv3d, VariantKind::Full) => {
            c.params_weights = kv * ci * co;
            c.macs_core = u(input.sites()) * kv * ci * co;
        }
        (LayerKind::Deconv3d, v) => {
            return Err(crate::Error::validation(format!("layer `{id}`: deconv3d supports only full, got {v}")));
        }
        (LayerKind::Conv3d, VariantKind::Full) => {
            c.params_weights = kv * ci * co;
            c.macs_core = out_sites * kv * ci * co;
        }
        (LayerKind::Conv3d, VariantKind::FwSC) => {
            c.params_weights = kv * ci + ci * co;
            c.macs_depthwise = out_sites * kv * ci;
            c.macs_pointwise = out_sites * ci * co;
        }
        (LayerKind::Conv3d, VariantKind::DwSC) => {
            ensure!(
                co == ci,
                "layer `{id}`: DwSC preserves channels, so out_channels ({co}) must equal in_channels ({ci})"
            );
            let d_in = u(input.d);
            let d_out = u(strided_extent(input.d, spec.stride));
            c.params_weights = kv * d_in + d_in * d_out;
            c.macs_depthwise = oh * ow * ci * kv * d_in;
            c.macs_pointwise = oh * ow * ci * d_in * d_out;
        }
        (LayerKind::Conv3d, VariantKind::FDwSC) => {
            let (kd, kh, kw) = (u(k.kd), u(k.kh), u(k.kw));
            let stage1_sites = u(input.d) * oh * ow;
            c.params_weights = kh * kw * ci + kd * ci + ci * co;
            c.macs_depthwise = stage1_sites * kh * kw * ci;
            c.macs_disparity = out_sites * kd * ci;
            c.macs_pointwise = out_sites * ci * co;
            if spec.bn {
                c.params_bn += 4 * ci;
                c.macs_bn += 2 * ci * stage1_sites + 2 * ci * out_sites;
            }
        }
    }
    if spec.bias {
        c.params_bias = co;
        c.macs_bias = out_sites * co;
    }
    if spec.bn {
        c.params_bn += 2 * co;
        c.macs_bn += 2 * out_sites * co;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: LayerKind,
    pub variant: VariantKind,
    pub input: String,
    pub output: String,
    #[serde(skip)]
    pub in_shape: Shape4,
    #[serde(skip)]
    pub out_shape: Shape4,
    pub cost: CostBreakdown,
}

/// Per-layer and aggregate counts for a whole config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkCost {
    pub name: String,
    pub layers: Vec<LayerCost>,
    /// Sum over modeled layers.
    pub conv: CostBreakdown,
    pub fixed: Vec<FixedCost>,
}

/// A (params, macs) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
}

impl NetworkCost {
    fn fixed_in(&self, stage: Stage) -> Totals {
        self.fixed.iter().filter(|f| f.stage == stage).fold(Totals::default(), |t, f| Totals {
            params: t.params + f.params,
            macs: t.macs + f.macs,
        })
    }

    /// Modeled layers plus fixed costs tagged `3d`.
    pub fn three_d(&self) -> Totals {
        let f = self.fixed_in(Stage::ThreeD);
        Totals { params: self.conv.total_params() + f.params, macs: self.conv.total_macs() + f.macs }
    }

    pub fn stage(&self, stage: Stage) -> Totals {
        match stage {
            Stage::ThreeD => self.three_d(),
            s => self.fixed_in(s),
        }
    }

    pub fn total(&self) -> Totals {
        let [a, b, c] = [Stage::TwoD, Stage::ThreeD, Stage::Other].map(|s| self.stage(s));
        Totals { params: a.params + b.params + c.params, macs: a.macs + b.macs + c.macs }
    }

    /// Fraction of network operations spent in the 3D part.
    pub fn share_3d_macs(&self) -> f64 {
        let t = self.total().macs;
        if t == 0 {
            0.0
        } else {
            self.three_d().macs as f64 / t as f64
        }
    }
}

pub fn count_network(cfg: &NetworkConfig) -> Result<NetworkCost> {
    let shapes = cfg.infer_shapes()?;
    let mut layers = Vec::with_capacity(shapes.len());
    for (spec, s) in cfg.layers.iter().zip(shapes) {
        let cost = count_layer(spec, s.input)?;
        layers.push(LayerCost {
            id: spec.id.clone(),
            kind: spec.kind,
            variant: spec.variant,
            input: s.input.to_string(),
            output: s.output.to_string(),
            in_shape: s.input,
            out_shape: s.output,
            cost,
        });
    }
    let conv = layers.iter().map(|l| l.cost).sum();
    Ok(NetworkCost { name: cfg.name.clone(), layers, conv, fixed: cfg.fixed_costs.clone() })
}

/// An exact ratio `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        ensure!(den != 0, "reduction factor undefined: variant total is zero");
        Ok(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Value in tenths, rounded half up.
    pub fn tenths(&self) -> u64 {
        let (n, d) = (self.num as u128, self.den as u128);
        ((20 * n + d) / (2 * d)) as u64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tenths();
        write!(f, "{}.{}x", t / 10, t % 10)
    }
}

/// Reduction of a variant relative to a baseline, on 3D totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Reduction {
    pub ops: Ratio,
    pub params: Ratio,
}

pub fn reduction_report(base: &NetworkCost, variant: &NetworkCost) -> Result<Reduction> {
    ensure!(
        base.layers.len() == variant.layers.len()
            && base.layers.iter().zip(&variant.layers).all(|(a, b)| a.id == b.id),
        "reduction needs two counts of the same network skeleton"
    );
    let (b, v) = (base.three_d(), variant.three_d());
    Ok(Reduction { ops: Ratio::new(b.macs, v.macs)?, params: Ratio::new(b.params, v.params)? })
}

/// `value / 10^scale` rounded half up to two decimals, e.g. GMACs or M params.
pub fn fixed2(value: u64, scale: u32) -> String {
    let unit = 10u128.pow(scale);
    let hundredths = (value as u128 * 200 + unit) / (2 * unit);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

pub fn gmacs(macs: u64) -> String {
    fixed2(macs, 9)
}

pub fn mparams(params: u64) -> String {
    fixed2(params, 6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Kernel3;

    fn layer(v: VariantKind, k: usize, co: usize) -> LayerSpec {
        LayerSpec::conv("l", v, k, co).unwrap()
    }

    fn shape(c: usize, d: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(c, d, h, w).unwrap()
    }

    #[test]
    fn small_layer_counts() {
        let s = shape(2, 4, 4, 4);
        let full = count_layer(&layer(VariantKind::Full, 3, 4), s).unwrap();
        assert_eq!((full.macs_core, full.params_weights), (13824, 216));
        let fw = count_layer(&layer(VariantKind::FwSC, 3, 4), s).unwrap();
        assert_eq!((fw.macs_depthwise, fw.macs_pointwise, fw.total_params()), (3456, 512, 62));
        let fd = count_layer(&layer(VariantKind::FDwSC, 3, 4), s).unwrap();
        assert_eq!((fd.macs_depthwise, fd.macs_disparity, fd.macs_pointwise), (1152, 384, 512));
        assert_eq!((fd.total_macs(), fd.total_params()), (2048, 32));
    }

    #[test]
    fn per_site_ratio_at_32_channels() {
        let s = shape(32, 1, 1, 1);
        let full = count_layer(&layer(VariantKind::Full, 3, 32), s).unwrap().total_macs();
        let fw = count_layer(&layer(VariantKind::FwSC, 3, 32), s).unwrap().total_macs();
        assert_eq!((full, fw), (27648, 1888));
        assert_eq!(Ratio::new(full, fw).unwrap().to_string(), "14.6x");
    }

    #[test]
    fn bias_and_bn_terms() {
        let mut l = layer(VariantKind::Full, 1, 3);
        l.bias = true;
        l.bn = true;
        let c = count_layer(&l, shape(2, 2, 2, 2)).unwrap();
        assert_eq!((c.params_bias, c.params_bn, c.macs_bias, c.macs_bn), (3, 6, 24, 48));
    }

    #[test]
    fn deconv_counted_at_input_resolution() {
        let mut l = layer(VariantKind::Full, 3, 4);
        l.kind = LayerKind::Deconv3d;
        l.stride = 2;
        let c = count_layer(&l, shape(2, 3, 3, 3)).unwrap();
        assert_eq!(c.macs_core, 27 * 27 * 2 * 4);
    }

    #[test]
    fn strided_fdwsc_spatial_stage_uses_input_disparity() {
        let mut l = layer(VariantKind::FDwSC, 3, 2);
        l.stride = 2;
        let c = count_layer(&l, shape(1, 5, 4, 4)).unwrap();
        assert_eq!(c.macs_depthwise, 5 * 2 * 2 * 9);
        assert_eq!(c.macs_disparity, 3 * 2 * 2 * 3);
    }

    #[test]
    fn dwsc_requires_matching_channels() {
        assert!(count_layer(&layer(VariantKind::DwSC, 3, 3), shape(2, 4, 4, 4)).is_err());
        let c = count_layer(&layer(VariantKind::DwSC, 3, 2), shape(2, 4, 4, 4)).unwrap();
        assert_eq!(c.macs_depthwise, 4 * 4 * 2 * 27 * 4);
        assert_eq!(c.params_weights, 27 * 4 + 16);
    }

    #[test]
    fn anisotropic_kernel_volume() {
        let mut l = layer(VariantKind::Full, 1, 1);
        l.kernel = Kernel3::new(3, 4, 4).unwrap();
        assert_eq!(count_layer(&l, shape(1, 1, 1, 1)).unwrap().params_weights, 48);
    }

    #[test]
    fn ratio_formatting() {
        assert_eq!(Ratio::new(21744, 4305).unwrap().to_string(), "5.1x");
        assert_eq!(Ratio::new(35885, 6006).unwrap().to_string(), "6.0x");
        assert_eq!(Ratio::new(7, 7).unwrap().to_string(), "1.0x");
        assert_eq!(Ratio::new(1, 20).unwrap().to_string(), "0.1x");
        assert!(Ratio::new(1, 0).is_err());
    }

    #[test]
    fn decimal_rounding() {
        assert_eq!(gmacs(217_435_000_000), "217.44");
        assert_eq!(gmacs(217_434_999_999), "217.43");
        assert_eq!(mparams(763_104), "0.76");
        assert_eq!(gmacs(0), "0.00");
    }
}
