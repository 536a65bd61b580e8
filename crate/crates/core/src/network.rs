//! Executes a [`NetworkConfig`] on real volumes with seeded weights.
//!
//! This is how shape inference and the cost model are checked end to end: the
//! executed output shapes must match [`NetworkConfig::infer_shapes`], and in
//! counted mode the summed loop counts must match the closed-form total.

use std::collections::HashMap;

use crate::config::{LayerKind, NetworkConfig, INPUT_ID};
use crate::conv::{deconv3d, forward, KernelBank};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Volume4};
use crate::verify::{counted_deconv, counted_forward};

/// How layers are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Production kernels.
    Fast,
    /// Instrumented reference loops, with MAC counts.
    Counted,
}

#[derive(Clone, Debug)]
pub struct LayerRun<T> {
    pub id: String,
    pub output: Volume4<T>,
    /// MACs executed by the instrumented loops; 0 in fast mode.
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct NetworkRun<T> {
    pub layers: Vec<LayerRun<T>>,
}

impl<T> NetworkRun<T> {
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn output(&self) -> &Volume4<T> {
        &self.layers.last().expect("configs have at least one layer").output
    }
}

/// Channel-wise concatenation; spatial extents must agree.
pub fn concat<T: Element>(a: &Volume4<T>, b: &Volume4<T>) -> Result<Volume4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    ensure!(sa.spatial() == sb.spatial(), "cannot concatenate {sa} with {sb}");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Volume4::from_vec(crate::tensor::Shape4 { c: sa.c + sb.c, ..sa }, data)
}

/// Element-wise sum of two volumes of identical shape.
pub fn add<T: Element>(a: &Volume4<T>, b: &Volume4<T>) -> Result<Volume4<T>> {
    ensure!(a.shape() == b.shape(), "cannot add {} and {}", a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64())).collect();
    Volume4::from_vec(a.shape(), data)
}

/// Run every layer of `cfg` on `input`. Layer `i` gets weights seeded from
/// `seed + i`.
pub fn run_network<T: Element>(
    cfg: &NetworkConfig,
    input: &Volume4<T>,
    seed: u64,
    mode: Mode,
) -> Result<NetworkRun<T>> {
    cfg.validate()?;
    ensure!(
        input.shape() == cfg.input,
        "network `{}` expects input {}, got {}",
        cfg.name,
        cfg.input,
        input.shape()
    );
    let mut outputs: HashMap<&str, Volume4<T>> = HashMap::new();
    outputs.insert(INPUT_ID, input.clone());
    let mut prev = INPUT_ID;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, l) in cfg.layers.iter().enumerate() {
        let get = |r: &str| outputs.get(r).ok_or_else(|| Error::validation(format!("layer `{}`: unknown `{r}`", l.id)));
        let mut x = get(l.input_from.as_deref().unwrap_or(prev))?.clone();
        if let Some(r) = &l.concat_from {
            x = concat(&x, get(r)?)?;
        }
        let bank = KernelBank::<T>::seeded(l.bank_spec(x.shape()), seed.wrapping_add(i as u64))?;
        let (mut y, macs) = match (l.kind, mode) {
            (LayerKind::Conv3d, Mode::Fast) => (forward(&x, &bank, l.stride)?, 0),
            (LayerKind::Conv3d, Mode::Counted) => counted_forward(&x, &bank, l.stride)?,
            (LayerKind::Deconv3d, Mode::Fast) => (deconv3d(&x, &bank, l.stride, l.output_padding)?, 0),
            (LayerKind::Deconv3d, Mode::Counted) => counted_deconv(&x, &bank, l.stride, l.output_padding)?,
        };
        if let Some(r) = &l.adds_from {
            y = add(&y, get(r)?)?;
        }
        outputs.insert(&l.id, y.clone());
        prev = &l.id;
        layers.push(LayerRun { id: l.id.clone(), output: y, macs });
    }
    Ok(NetworkRun { layers })
}
