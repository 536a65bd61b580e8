//! Full 3D convolution and its separable variants.
//!
//! Every variant uses same padding (`floor((k-1)/2)` before, `ceil((k-1)/2)`
//! after) and produces `ceil(n / s)` outputs per strided axis. Sums are
//! accumulated in f64 in a fixed tap order, so results do not depend on the
//! number of worker threads.

mod backward;
mod bank;
mod bundle;
mod forward;
mod kernels;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use backward::{backward, Gradients};
pub use bank::{BankSpec, BatchNorm, KernelBank, Weights};
pub use bundle::{read_bundle, write_bundle};
pub use forward::{
    conv3d_full, deconv3d, deconv_extent, depthwise, dwsc, fdwsc, forward, fwsc, output_shape,
    pointwise, scale_shift,
};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Full,
    FwSC,
    DwSC,
    FDwSC,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] =
        [VariantKind::Full, VariantKind::FwSC, VariantKind::DwSC, VariantKind::FDwSC];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::FwSC => "fwsc",
            VariantKind::DwSC => "dwsc",
            VariantKind::FDwSC => "fdwsc",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(VariantKind::Full),
            "fwsc" => Ok(VariantKind::FwSC),
            "dwsc" => Ok(VariantKind::DwSC),
            "fdwsc" => Ok(VariantKind::FDwSC),
            _ => Err(Error::validation(format!(
                "unknown variant `{s}` (expected full, fwsc, dwsc or fdwsc)"
            ))),
        }
    }
}

/// Kernel extents along (d, h, w).
///
/// For DwSC the first extent runs along the channel axis, which plays the
/// role of depth once disparity becomes the separable axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Kernel3 {
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Kernel3 {
    pub fn new(kd: usize, kh: usize, kw: usize) -> Result<Self> {
        ensure!(kd >= 1 && kh >= 1 && kw >= 1, "kernel extents must be >= 1, got {kd}x{kh}x{kw}");
        Ok(Self { kd, kh, kw })
    }

    pub fn cube(k: usize) -> Result<Self> {
        Self::new(k, k, k)
    }

    pub fn volume(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.kd, self.kh, self.kw]
    }

    pub fn is_cube(&self) -> bool {
        self.kd == self.kh && self.kh == self.kw
    }
}

impl fmt::Display for Kernel3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_cube() {
            write!(f, "{}", self.kd)
        } else {
            write!(f, "{}x{}x{}", self.kd, self.kh, self.kw)
        }
    }
}

/// `ceil(n / s)`.
pub fn strided_extent(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}
