use super::{Kernel3, VariantKind};
use crate::error::{ensure, Result};
use crate::tensor::{Element, SplitMix64};

/// Inference-mode batch normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// `gamma` and `beta` are trainable; `mean` and `var` are fixed statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: f64,
}

pub const DEFAULT_EPS: f64 = 1e-5;

impl<T: Element> BatchNorm<T> {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![T::from_f64(1.0); c],
            beta: vec![T::default(); c],
            mean: vec![T::default(); c],
            var: vec![T::from_f64(1.0 - DEFAULT_EPS); c],
            eps: DEFAULT_EPS,
        }
    }

    pub(crate) fn seeded(c: usize, rng: &mut SplitMix64) -> Self {
        let mut draw = |lo: f64, hi: f64| -> Vec<T> {
            (0..c).map(|_| T::from_f64(lo + (hi - lo) * rng.next_f64())).collect()
        };
        let gamma = draw(0.5, 1.5);
        let beta = draw(-0.5, 0.5);
        let mean = draw(-0.5, 0.5);
        let var = draw(0.5, 1.5);
        Self { gamma, beta, mean, var, eps: DEFAULT_EPS }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, c: usize, what: &str) -> Result<()> {
        for (name, v) in [("gamma", &self.gamma), ("beta", &self.beta), ("mean", &self.mean), ("var", &self.var)] {
            ensure!(v.len() == c, "{what} {name} has {} entries, expected {c}", v.len());
        }
        ensure!(
            self.var.iter().all(|v| v.to_f64() + self.eps > 0.0),
            "{what} variance plus eps must be positive"
        );
        Ok(())
    }
}

/// Layer weights in one of the four variant layouts. All arrays are flat and
/// row-major in the index order given on each field.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights<T> {
    Full {
        c_in: usize,
        c_out: usize,
        kernel: Kernel3,
        /// `[c_out][c_in][kd][kh][kw]`
        data: Vec<T>,
    },
    FwSC {
        c_in: usize,
        c_out: usize,
        kernel: Kernel3,
        /// `[c_in][kd][kh][kw]`
        depthwise: Vec<T>,
        /// `[c_out][c_in]`
        pointwise: Vec<T>,
    },
    DwSC {
        channels: usize,
        d_in: usize,
        d_out: usize,
        kernel: Kernel3,
        /// `[d_in][kd][kh][kw]`, `kd` running along channels.
        depthwise: Vec<T>,
        /// `[d_out][d_in]`
        pointwise: Vec<T>,
    },
    FDwSC {
        c_in: usize,
        c_out: usize,
        kernel: Kernel3,
        /// `[c_in][kh][kw]`
        spatial: Vec<T>,
        /// `[c_in][kd]`
        disparity: Vec<T>,
        /// `[c_out][c_in]`
        pointwise: Vec<T>,
        /// Normalization after the spatial and the disparity stage.
        stage_bn: Option<Box<[BatchNorm<T>; 2]>>,
    },
}

/// Learnable state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    pub weights: Weights<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BatchNorm<T>>,
}

/// Extents and flags needed to allocate a [`KernelBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankSpec {
    pub variant: VariantKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Kernel3,
    /// DwSC only: disparity extents mixed by the pointwise stage.
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub bn: bool,
}

impl BankSpec {
    pub fn new(variant: VariantKind, c_in: usize, c_out: usize, kernel: Kernel3) -> Self {
        Self { variant, c_in, c_out, kernel, d_in: 1, d_out: 1, bias: false, bn: false }
    }

    pub fn with_disparity(mut self, d_in: usize, d_out: usize) -> Self {
        self.d_in = d_in;
        self.d_out = d_out;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_bn(mut self, bn: bool) -> Self {
        self.bn = bn;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.c_in >= 1 && self.c_out >= 1, "channel counts must be >= 1");
        if self.variant == VariantKind::DwSC {
            ensure!(
                self.c_out == self.c_in,
                "DwSC preserves channels: c_out ({}) must equal c_in ({})",
                self.c_out,
                self.c_in
            );
            ensure!(self.d_in >= 1 && self.d_out >= 1, "DwSC disparity extents must be >= 1");
        }
        Ok(())
    }
}

impl<T: Element> KernelBank<T> {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in))` per stage, with
    /// random normalization statistics when `bn` is set.
    pub fn seeded(spec: BankSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::from_f64(bound * (2.0 * rng.next_f64() - 1.0))).collect()
        };
        let BankSpec { variant, c_in, c_out, kernel: k, d_in, d_out, .. } = spec;
        let kv = k.volume();
        let weights = match variant {
            VariantKind::Full => Weights::Full {
                c_in,
                c_out,
                kernel: k,
                data: uniform(c_out * c_in * kv, c_in * kv),
            },
            VariantKind::FwSC => Weights::FwSC {
                c_in,
                c_out,
                kernel: k,
                depthwise: uniform(c_in * kv, kv),
                pointwise: uniform(c_out * c_in, c_in),
            },
            VariantKind::DwSC => Weights::DwSC {
                channels: c_in,
                d_in,
                d_out,
                kernel: k,
                depthwise: uniform(d_in * kv, kv),
                pointwise: uniform(d_out * d_in, d_in),
            },
            VariantKind::FDwSC => Weights::FDwSC {
                c_in,
                c_out,
                kernel: k,
                spatial: uniform(c_in * k.kh * k.kw, k.kh * k.kw),
                disparity: uniform(c_in * k.kd, k.kd),
                pointwise: uniform(c_out * c_in, c_in),
                stage_bn: None,
            },
        };
        let fan_in = weights.fan_in();
        let bias = spec.bias.then(|| uniform(c_out, fan_in));
        let mut bank = Self { weights, bias, bn: None };
        if spec.bn {
            bank.bn = Some(BatchNorm::seeded(c_out, &mut rng));
            if let Weights::FDwSC { stage_bn, .. } = &mut bank.weights {
                *stage_bn = Some(Box::new([
                    BatchNorm::seeded(c_in, &mut rng),
                    BatchNorm::seeded(c_in, &mut rng),
                ]));
            }
        }
        Ok(bank)
    }

    /// Bank built from explicit weights with no bias or normalization.
    pub fn from_weights(weights: Weights<T>) -> Result<Self> {
        let bank = Self { weights, bias: None, bn: None };
        bank.validate()?;
        Ok(bank)
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bn(mut self, bn: BatchNorm<T>) -> Result<Self> {
        self.bn = Some(bn);
        self.validate()?;
        Ok(self)
    }

    /// Convert every array to element type `U`.
    pub fn cast<U: Element>(&self) -> KernelBank<U> {
        fn v<T: Element, U: Element>(x: &[T]) -> Vec<U> {
            x.iter().map(|e| U::from_f64(e.to_f64())).collect()
        }
        fn bn<T: Element, U: Element>(b: &BatchNorm<T>) -> BatchNorm<U> {
            BatchNorm { gamma: v(&b.gamma), beta: v(&b.beta), mean: v(&b.mean), var: v(&b.var), eps: b.eps }
        }
        let weights = match &self.weights {
            Weights::Full { c_in, c_out, kernel, data } => {
                Weights::Full { c_in: *c_in, c_out: *c_out, kernel: *kernel, data: v(data) }
            }
            Weights::FwSC { c_in, c_out, kernel, depthwise, pointwise } => Weights::FwSC {
                c_in: *c_in,
                c_out: *c_out,
                kernel: *kernel,
                depthwise: v(depthwise),
                pointwise: v(pointwise),
            },
            Weights::DwSC { channels, d_in, d_out, kernel, depthwise, pointwise } => Weights::DwSC {
                channels: *channels,
                d_in: *d_in,
                d_out: *d_out,
                kernel: *kernel,
                depthwise: v(depthwise),
                pointwise: v(pointwise),
            },
            Weights::FDwSC { c_in, c_out, kernel, spatial, disparity, pointwise, stage_bn } => Weights::FDwSC {
                c_in: *c_in,
                c_out: *c_out,
                kernel: *kernel,
                spatial: v(spatial),
                disparity: v(disparity),
                pointwise: v(pointwise),
                stage_bn: stage_bn.as_ref().map(|sb| Box::new([bn(&sb[0]), bn(&sb[1])])),
            },
        };
        KernelBank { weights, bias: self.bias.as_deref().map(v), bn: self.bn.as_ref().map(bn) }
    }

    pub fn variant(&self) -> VariantKind {
        self.weights.variant()
    }

    pub fn kernel(&self) -> Kernel3 {
        self.weights.kernel()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.weights.c_out()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let c_out = self.c_out();
        if let Some(b) = &self.bias {
            ensure!(b.len() == c_out, "bias has {} entries, expected c_out = {c_out}", b.len());
        }
        if let Some(bn) = &self.bn {
            bn.validate(c_out, "batch norm")?;
        }
        Ok(())
    }

    /// Number of trainable scalars: weights, bias, and BN scale/shift.
    pub fn param_count(&self) -> usize {
        self.trainable_layout().iter().map(|(_, n)| n).sum()
    }

    fn trainable_layout(&self) -> Vec<(&'static str, usize)> {
        let mut parts = self.weights.trainable_layout();
        if let Some(b) = &self.bias {
            parts.push(("bias", b.len()));
        }
        if let Some(bn) = &self.bn {
            parts.push(("bn.gamma", bn.channels()));
            parts.push(("bn.beta", bn.channels()));
        }
        parts
    }

    /// All trainable scalars in a fixed order: weight arrays as listed on
    /// [`Weights`], FDwSC stage scale/shift, then bias, then BN scale/shift.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let mut push = |v: &[T]| out.extend(v.iter().map(|x| x.to_f64()));
        match &self.weights {
            Weights::Full { data, .. } => push(data),
            Weights::FwSC { depthwise, pointwise, .. } | Weights::DwSC { depthwise, pointwise, .. } => {
                push(depthwise);
                push(pointwise);
            }
            Weights::FDwSC { spatial, disparity, pointwise, stage_bn, .. } => {
                push(spatial);
                push(disparity);
                push(pointwise);
                if let Some(sb) = stage_bn {
                    for bn in sb.iter() {
                        push(&bn.gamma);
                        push(&bn.beta);
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            push(b);
        }
        if let Some(bn) = &self.bn {
            push(&bn.gamma);
            push(&bn.beta);
        }
        out
    }

    /// Copy of this bank with trainable scalars replaced from `values`
    /// (same order as [`trainable`](Self::trainable)).
    pub fn with_trainable(&self, values: &[f64]) -> Result<Self> {
        ensure!(
            values.len() == self.param_count(),
            "expected {} trainable values, got {}",
            self.param_count(),
            values.len()
        );
        let mut it = values.iter().map(|&v| T::from_f64(v));
        let mut fill = |dst: &mut Vec<T>| {
            for x in dst.iter_mut() {
                *x = it.next().expect("length checked");
            }
        };
        let mut bank = self.clone();
        match &mut bank.weights {
            Weights::Full { data, .. } => fill(data),
            Weights::FwSC { depthwise, pointwise, .. } | Weights::DwSC { depthwise, pointwise, .. } => {
                fill(depthwise);
                fill(pointwise);
            }
            Weights::FDwSC { spatial, disparity, pointwise, stage_bn, .. } => {
                fill(spatial);
                fill(disparity);
                fill(pointwise);
                if let Some(sb) = stage_bn {
                    for bn in sb.iter_mut() {
                        fill(&mut bn.gamma);
                        fill(&mut bn.beta);
                    }
                }
            }
        }
        if let Some(b) = &mut bank.bias {
            fill(b);
        }
        if let Some(bn) = &mut bank.bn {
            fill(&mut bn.gamma);
            fill(&mut bn.beta);
        }
        Ok(bank)
    }
}

impl<T: Element> Weights<T> {
    pub fn variant(&self) -> VariantKind {
        match self {
            Weights::Full { .. } => VariantKind::Full,
            Weights::FwSC { .. } => VariantKind::FwSC,
            Weights::DwSC { .. } => VariantKind::DwSC,
            Weights::FDwSC { .. } => VariantKind::FDwSC,
        }
    }

    pub fn kernel(&self) -> Kernel3 {
        match self {
            Weights::Full { kernel, .. }
            | Weights::FwSC { kernel, .. }
            | Weights::DwSC { kernel, .. }
            | Weights::FDwSC { kernel, .. } => *kernel,
        }
    }

    pub fn c_in(&self) -> usize {
        match self {
            Weights::Full { c_in, .. } | Weights::FwSC { c_in, .. } | Weights::FDwSC { c_in, .. } => *c_in,
            Weights::DwSC { channels, .. } => *channels,
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Weights::Full { c_out, .. } | Weights::FwSC { c_out, .. } | Weights::FDwSC { c_out, .. } => *c_out,
            Weights::DwSC { channels, .. } => *channels,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Weights::Full { c_in, kernel, .. } => c_in * kernel.volume(),
            Weights::FwSC { c_in, .. } | Weights::FDwSC { c_in, .. } => *c_in,
            Weights::DwSC { d_in, .. } => *d_in,
        }
    }

    fn trainable_layout(&self) -> Vec<(&'static str, usize)> {
        match self {
            Weights::Full { data, .. } => vec![("weights", data.len())],
            Weights::FwSC { depthwise, pointwise, .. } | Weights::DwSC { depthwise, pointwise, .. } => {
                vec![("depthwise", depthwise.len()), ("pointwise", pointwise.len())]
            }
            Weights::FDwSC { spatial, disparity, pointwise, stage_bn, .. } => {
                let mut v = vec![
                    ("spatial", spatial.len()),
                    ("disparity", disparity.len()),
                    ("pointwise", pointwise.len()),
                ];
                if let Some(sb) = stage_bn {
                    v.push(("stage1.gamma", sb[0].channels()));
                    v.push(("stage1.beta", sb[0].channels()));
                    v.push(("stage2.gamma", sb[1].channels()));
                    v.push(("stage2.beta", sb[1].channels()));
                }
                v
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, got: usize, want: usize| -> Result<()> {
            ensure!(got == want, "{name} has {got} entries, expected {want}");
            Ok(())
        };
        let kernel = self.kernel();
        let kv = kernel.volume();
        ensure!(self.c_in() >= 1 && self.c_out() >= 1, "channel counts must be >= 1");
        match self {
            Weights::Full { c_in, c_out, data, .. } => check("weights", data.len(), c_out * c_in * kv),
            Weights::FwSC { c_in, c_out, depthwise, pointwise, .. } => {
                check("depthwise", depthwise.len(), c_in * kv)?;
                check("pointwise", pointwise.len(), c_out * c_in)
            }
            Weights::DwSC { d_in, d_out, depthwise, pointwise, .. } => {
                ensure!(*d_in >= 1 && *d_out >= 1, "DwSC disparity extents must be >= 1");
                check("depthwise", depthwise.len(), d_in * kv)?;
                check("pointwise", pointwise.len(), d_out * d_in)
            }
            Weights::FDwSC { c_in, c_out, spatial, disparity, pointwise, stage_bn, .. } => {
                check("spatial", spatial.len(), c_in * kernel.kh * kernel.kw)?;
                check("disparity", disparity.len(), c_in * kernel.kd)?;
                check("pointwise", pointwise.len(), c_out * c_in)?;
                if let Some(sb) = stage_bn {
                    sb[0].validate(*c_in, "stage-1 batch norm")?;
                    sb[1].validate(*c_in, "stage-2 batch norm")?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> Kernel3 {
        Kernel3::cube(3).unwrap()
    }

    #[test]
    fn param_counts_match_layouts() {
        let full = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::Full, 2, 4, k3()), 1).unwrap();
        assert_eq!(full.param_count(), 216);
        let fw = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::FwSC, 2, 4, k3()), 1).unwrap();
        assert_eq!(fw.param_count(), 62);
        let fd = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::FDwSC, 2, 4, k3()), 1).unwrap();
        assert_eq!(fd.param_count(), 32);
        let dw = KernelBank::<f32>::seeded(
            BankSpec::new(VariantKind::DwSC, 2, 2, k3()).with_disparity(4, 4),
            1,
        )
        .unwrap();
        assert_eq!(dw.param_count(), 27 * 4 + 16);
    }

    #[test]
    fn bias_and_bn_add_trainables() {
        let spec = BankSpec::new(VariantKind::FDwSC, 3, 5, k3()).with_bias(true).with_bn(true);
        let b = KernelBank::<f64>::seeded(spec, 7).unwrap();
        // weights + bias + output BN + two stage BNs
        assert_eq!(b.param_count(), (9 * 3 + 3 * 3 + 15) + 5 + 10 + 4 * 3);
        assert_eq!(b.trainable().len(), b.param_count());
    }

    #[test]
    fn trainable_roundtrip() {
        let spec = BankSpec::new(VariantKind::FDwSC, 2, 3, k3()).with_bias(true).with_bn(true);
        let b = KernelBank::<f64>::seeded(spec, 3).unwrap();
        let t = b.trainable();
        assert_eq!(b.with_trainable(&t).unwrap(), b);
        let zeros = b.with_trainable(&vec![0.0; t.len()]).unwrap();
        assert!(zeros.trainable().iter().all(|&v| v == 0.0));
        assert_eq!(zeros.bn.as_ref().unwrap().var, b.bn.as_ref().unwrap().var);
    }

    #[test]
    fn dwsc_requires_equal_channels() {
        let err = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::DwSC, 2, 3, k3()), 0).unwrap_err();
        assert!(err.to_string().contains("DwSC"), "{err}");
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let b = KernelBank::<f64>::seeded(BankSpec::new(VariantKind::Full, 4, 2, k3()), 11).unwrap();
        let bound = 1.0 / (4.0 * 27.0f64).sqrt();
        assert!(b.trainable().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn inconsistent_extents_rejected() {
        let w = Weights::Full { c_in: 2, c_out: 2, kernel: k3(), data: vec![0.0f32; 10] };
        assert!(KernelBank::from_weights(w).is_err());
    }
}
