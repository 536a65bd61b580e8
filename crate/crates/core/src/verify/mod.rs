//! Independent oracles.
//!
//! - [`counted_forward`] / [`counted_deconv`]: naive loop nests that count
//!   every multiply-accumulate, checked against the closed-form cost model;
//! - [`finite_diff_grad`]: central differences of the output sum;
//! - [`composition_check`]: identities between variants (for example FwSC
//!   with a single input channel is a full convolution with rank-one weights);
//! - [`run_catalog`]: everything above as named, seeded cases.
//!
//! Two error measures are used. Composition cases compare whole volumes, so
//! their relative error is norm-wise: `max|a - e| / max|e|`. Gradient cases
//! compare element by element with `|a - f| / max(|a|, |f|, 1e-3)`; the floor
//! keeps gradients that are zero up to roundoff from dominating.

mod catalog;
mod counted;

use serde::Serialize;

use crate::conv::{forward, KernelBank};
use crate::error::{ensure, Result};
use crate::tensor::{DType, Element, Volume4};

pub use catalog::{composition_check, run_catalog, CheckOptions, ClosedForm, CASES, COMPOSITION_CASES};
pub use counted::{counted_deconv, counted_forward};

/// Outcome of one oracle case, aggregated over its trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub case: String,
    pub detail: String,
    /// What the case requires, or the expected value of the first failing trial.
    pub expected: String,
    /// What was observed, or the actual value of the first failing trial.
    pub actual: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Relative tolerance; 0 for exact cases.
    pub tolerance: f64,
    pub pass: bool,
    pub trials: usize,
    pub failures: usize,
}

/// Norm-wise error of `actual` against `expected`: `(max_abs, max_abs / max|expected|)`.
pub fn normwise_error(expected: &[f64], actual: &[f64]) -> (f64, f64) {
    assert_eq!(expected.len(), actual.len(), "compared volumes differ in length");
    let abs = expected.iter().zip(actual).map(|(e, a)| (e - a).abs()).fold(0.0, f64::max);
    let scale = expected.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let rel = if scale > 0.0 { abs / scale } else { abs };
    (abs, rel)
}

/// Floor used by [`elementwise_error`].
pub const GRAD_REL_FLOOR: f64 = 1e-3;

/// Element-wise error: `(max |a - f|, max |a - f| / max(|a|, |f|, floor))`.
pub fn elementwise_error(a: &[f64], f: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), f.len(), "compared gradients differ in length");
    a.iter().zip(f).fold((0.0, 0.0), |(ma, mr), (&a, &f)| {
        let d = (a - f).abs();
        (ma.max(d), mr.max(d / a.abs().max(f.abs()).max(GRAD_REL_FLOOR)))
    })
}

/// Central-difference gradients of `sum(forward(input))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiff {
    /// One entry per input element, in storage order.
    pub input: Vec<f64>,
    /// One entry per trainable scalar, in [`KernelBank::trainable`] order.
    pub params: Vec<f64>,
}

/// Finite-difference gradient with respect to every input element and every
/// trainable scalar. Only f64 volumes are accepted.
pub fn finite_diff_grad<T: Element>(
    input: &Volume4<T>,
    bank: &KernelBank<T>,
    stride: usize,
    step: f64,
) -> Result<FiniteDiff> {
    ensure!(T::DTYPE == DType::F64, "finite differences need f64 volumes, got {:?}", T::DTYPE);
    ensure!((1e-7..=1e-3).contains(&step), "finite-difference step {step} is outside [1e-7, 1e-3]");
    let x: Volume4<f64> = input.cast();
    let b: KernelBank<f64> = bank.cast();
    let loss = |x: &Volume4<f64>, b: &KernelBank<f64>| -> Result<f64> {
        Ok(forward(x, b, stride)?.data().iter().sum())
    };
    loss(&x, &b)?;

    let shape = x.shape();
    let mut xs = x.into_data();
    let mut d_input = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let hi = loss(&Volume4::from_vec(shape, xs.clone())?, &b)?;
        xs[i] = orig - step;
        let lo = loss(&Volume4::from_vec(shape, xs.clone())?, &b)?;
        xs[i] = orig;
        d_input.push((hi - lo) / (2.0 * step));
    }
    let x = Volume4::from_vec(shape, xs)?;

    let mut theta = b.trainable();
    let mut d_params = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let hi = loss(&x, &b.with_trainable(&theta)?)?;
        theta[i] = orig - step;
        let lo = loss(&x, &b.with_trainable(&theta)?)?;
        theta[i] = orig;
        d_params.push((hi - lo) / (2.0 * step));
    }
    Ok(FiniteDiff { input: d_input, params: d_params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{backward, BankSpec, Kernel3, VariantKind, Weights};
    use crate::cost::count_layer;
    use crate::config::LayerSpec;
    use crate::tensor::{Fill, Shape4};

    fn scalar_bank(w: f64) -> KernelBank<f64> {
        KernelBank::from_weights(Weights::Full {
            c_in: 1,
            c_out: 1,
            kernel: Kernel3::cube(1).unwrap(),
            data: vec![w],
        })
        .unwrap()
    }

    #[test]
    fn full_k3_count_matches_hand_value() {
        let x = Volume4::<f64>::seeded(Shape4::new(2, 4, 4, 4).unwrap(), 1).unwrap();
        let bank = KernelBank::seeded(BankSpec::new(VariantKind::Full, 2, 4, Kernel3::cube(3).unwrap()), 2).unwrap();
        let (out, macs) = counted_forward(&x, &bank, 1).unwrap();
        assert_eq!(macs, 13824);
        assert!(out.bits_eq(&forward(&x, &bank, 1).unwrap()));
        let spec = LayerSpec::conv("l", VariantKind::Full, 3, 4).unwrap();
        assert_eq!(count_layer(&spec, x.shape()).unwrap().total_macs(), 13824);
    }

    #[test]
    fn one_mac_per_output_for_unit_kernel() {
        let x = Volume4::<f32>::new(Shape4::new(1, 2, 2, 2).unwrap(), Fill::Constant(1.5)).unwrap();
        let bank = scalar_bank(2.0).cast::<f32>();
        let (out, macs) = counted_forward(&x, &bank, 1).unwrap();
        assert_eq!(macs, 8);
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn bias_adds_one_mac_per_output_element() {
        let x = Volume4::<f64>::seeded(Shape4::new(3, 5, 4, 6).unwrap(), 3).unwrap();
        let spec = BankSpec::new(VariantKind::FwSC, 3, 2, Kernel3::cube(3).unwrap());
        let plain = KernelBank::<f64>::seeded(spec, 4).unwrap();
        let biased = plain.clone().with_bias(vec![0.25, -0.5]).unwrap();
        let (_, a) = counted_forward(&x, &plain, 1).unwrap();
        let (_, b) = counted_forward(&x, &biased, 1).unwrap();
        assert_eq!(b - a, 5 * 4 * 6 * 2);
    }

    #[test]
    fn scalar_finite_difference_is_exact() {
        let x = Volume4::from_vec(Shape4::new(1, 1, 1, 1).unwrap(), vec![2.0]).unwrap();
        let fd = finite_diff_grad(&x, &scalar_bank(3.0), 1, 1e-5).unwrap();
        assert!((fd.params[0] - 2.0).abs() < 1e-9);
        assert!((fd.input[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_rejects_f32_and_bad_steps() {
        let x = Volume4::<f32>::seeded(Shape4::new(1, 1, 1, 1).unwrap(), 1).unwrap();
        assert!(finite_diff_grad(&x, &scalar_bank(1.0).cast::<f32>(), 1, 1e-5).is_err());
        let x: Volume4<f64> = x.cast();
        assert!(finite_diff_grad(&x, &scalar_bank(1.0), 1, 1e-2).is_err());
        assert!(finite_diff_grad(&x, &scalar_bank(1.0), 1, 1e-8).is_err());
    }

    #[test]
    fn zero_input_and_weights_give_zero_weight_gradients() {
        for v in VariantKind::ALL {
            let spec = BankSpec::new(v, 2, 2, Kernel3::cube(3).unwrap()).with_disparity(3, 3);
            let bank = KernelBank::<f64>::seeded(spec, 5).unwrap();
            let bank = bank.with_trainable(&vec![0.0; bank.param_count()]).unwrap();
            let x = Volume4::<f64>::zeros(Shape4::new(2, 3, 3, 3).unwrap()).unwrap();
            let fd = finite_diff_grad(&x, &bank, 1, 1e-5).unwrap();
            assert!(fd.params.iter().all(|&g| g == 0.0), "{v}");
        }
    }

    #[test]
    fn finite_differences_agree_with_backward() {
        let x = Volume4::<f64>::seeded(Shape4::new(2, 3, 4, 3).unwrap(), 9).unwrap();
        let spec = BankSpec::new(VariantKind::FDwSC, 2, 3, Kernel3::cube(3).unwrap()).with_bias(true).with_bn(true);
        let bank = KernelBank::<f64>::seeded(spec, 10).unwrap();
        let fd = finite_diff_grad(&x, &bank, 2, 1e-5).unwrap();
        let ones = Volume4::new(crate::conv::output_shape(&bank, x.shape(), 2).unwrap(), Fill::Constant(1.0)).unwrap();
        let g = backward(&x, &bank, &ones, 2).unwrap();
        assert!(elementwise_error(g.input.data(), &fd.input).1 < 1e-6);
        assert!(elementwise_error(&g.bank.trainable(), &fd.params).1 < 1e-6);
    }

    #[test]
    fn error_measures() {
        assert_eq!(normwise_error(&[2.0, -4.0], &[2.0, -3.0]), (1.0, 0.25));
        assert_eq!(normwise_error(&[0.0], &[0.0]), (0.0, 0.0));
        let (a, r) = elementwise_error(&[1.0, 0.0], &[1.5, 1e-6]);
        assert_eq!(a, 0.5);
        assert!((r - 0.5 / 1.5).abs() < 1e-15);
    }
}
