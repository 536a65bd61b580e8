//! Named, seeded oracle cases.

use super::{counted_deconv, counted_forward, elementwise_error, finite_diff_grad, normwise_error, OracleReport};
use crate::config::{LayerKind, LayerSpec};
use crate::conv::{
    backward, deconv3d, depthwise, forward, output_shape, pointwise, BankSpec, BatchNorm, Kernel3, KernelBank,
    VariantKind, Weights,
};
use crate::cost::{count_layer, CostBreakdown};
use crate::error::{Error, Result};
use crate::tensor::{Element, Fill, Shape4, SplitMix64, Volume4};

/// Closed-form layer cost under test, normally [`count_layer`].
pub type ClosedForm = fn(&LayerSpec, Shape4) -> Result<CostBreakdown>;

pub const COMPOSITION_CASES: [&str; 5] =
    ["fwsc-vs-stages", "fdwsc-rank1-vs-fwsc", "fwsc-c1-vs-full", "dwsc-d1-vs-cube-conv", "k1-collapse"];

/// Every case in [`run_catalog`] order.
pub const CASES: [&str; 15] = [
    "compose/fwsc-vs-stages",
    "compose/fdwsc-rank1-vs-fwsc",
    "compose/fwsc-c1-vs-full",
    "compose/dwsc-d1-vs-cube-conv",
    "compose/k1-collapse",
    "cost-oracle/full",
    "cost-oracle/fwsc",
    "cost-oracle/dwsc",
    "cost-oracle/fdwsc",
    "cost-oracle/deconv",
    "reduction-law",
    "grad/full",
    "grad/fwsc",
    "grad/dwsc",
    "grad/fdwsc",
];

const COMPOSE_TRIALS: usize = 60;
const COST_TRIALS: usize = 30;
const REDUCTION_TRIALS: usize = 40;
const GRAD_TRIALS: usize = 20;
const COMPOSE_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;

pub struct CheckOptions {
    /// Run only cases whose name contains this substring.
    pub filter: Option<String>,
    pub seed: u64,
    pub closed_form: ClosedForm,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { filter: None, seed: 42, closed_form: count_layer }
    }
}

/// Run every selected case. An empty selection is an error.
pub fn run_catalog(opts: &CheckOptions) -> Result<Vec<OracleReport>> {
    let selected: Vec<&str> =
        CASES.iter().copied().filter(|c| opts.filter.as_deref().map_or(true, |f| c.contains(f))).collect();
    if selected.is_empty() {
        return Err(Error::validation(format!(
            "filter `{}` matches no case; cases are: {}",
            opts.filter.as_deref().unwrap_or(""),
            CASES.join(", ")
        )));
    }
    selected.into_iter().map(|c| run_case(c, opts)).collect()
}

fn run_case(name: &str, opts: &CheckOptions) -> Result<OracleReport> {
    let rng = SplitMix64::new(opts.seed ^ fnv1a(name));
    let (group, rest) = name.split_once('/').unwrap_or((name, ""));
    match group {
        "compose" => compose(rest, rng, COMPOSE_TRIALS),
        "cost-oracle" if rest == "deconv" => cost_oracle_deconv(rng, opts.closed_form),
        "cost-oracle" => cost_oracle(rest.parse()?, rng, opts.closed_form),
        "reduction-law" => reduction_law(rng),
        "grad" => grad(rest.parse()?, rng),
        _ => Err(Error::validation(format!("unknown oracle case `{name}`"))),
    }
}

/// One composition identity over `trials` seeded draws.
pub fn composition_check(case: &str, seed: u64, trials: usize) -> Result<OracleReport> {
    let name = format!("compose/{case}");
    compose(case, SplitMix64::new(seed ^ fnv1a(&name)), trials)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Accumulates per-trial outcomes into an [`OracleReport`].
struct Tally {
    report: OracleReport,
}

impl Tally {
    fn new(case: &str, detail: &str, requirement: &str, tolerance: f64) -> Self {
        Self {
            report: OracleReport {
                case: case.into(),
                detail: detail.into(),
                expected: requirement.into(),
                actual: String::new(),
                max_abs_err: 0.0,
                max_rel_err: 0.0,
                tolerance,
                pass: true,
                trials: 0,
                failures: 0,
            },
        }
    }

    /// Record one trial; the strings are only built for the first failure.
    fn record(&mut self, ok: bool, abs: f64, rel: f64, describe: impl FnOnce() -> (String, String)) {
        let r = &mut self.report;
        r.trials += 1;
        r.max_abs_err = r.max_abs_err.max(abs);
        r.max_rel_err = r.max_rel_err.max(rel);
        if !ok {
            if r.failures == 0 {
                let (e, a) = describe();
                r.expected = e;
                r.actual = a;
            }
            r.failures += 1;
            r.pass = false;
        }
    }

    /// Trial within the relative tolerance.
    fn within(&mut self, abs: f64, rel: f64, what: impl FnOnce() -> String) {
        let tol = self.report.tolerance;
        self.record(rel <= tol, abs, rel, || (format!("rel err <= {tol:e}"), format!("{}: rel err {rel:e}", what())));
    }

    fn finish(mut self) -> OracleReport {
        if self.report.pass {
            self.report.actual = format!(
                "{} trials ok, max rel err {:.2e}",
                self.report.trials, self.report.max_rel_err
            );
        }
        self.report
    }
}

/// Channels drawn from `1..=max_c`, spatial extents from `1..=max`.
fn rand_shape(rng: &mut SplitMix64, max_c: usize, max: usize) -> Shape4 {
    Shape4 { c: rng.range(1, max_c), d: rng.range(1, max), h: rng.range(1, max), w: rng.range(1, max) }
}

fn rand_kernel(rng: &mut SplitMix64) -> Kernel3 {
    if rng.range(0, 3) == 0 {
        Kernel3 { kd: rng.range(1, 4), kh: rng.range(1, 4), kw: rng.range(1, 4) }
    } else {
        Kernel3::cube(*rng.pick(&[1, 2, 3, 5])).expect("positive")
    }
}

fn rand_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::uniform(rng)).collect()
}

/// Optional bias and BN drawn for both sides of a composition.
fn rand_epilogue(rng: &mut SplitMix64, c: usize) -> (Option<Vec<f64>>, Option<BatchNorm<f64>>) {
    let bias = rng.coin().then(|| rand_vec(rng, c));
    let bn = rng.coin().then(|| BatchNorm::seeded(c, rng));
    (bias, bn)
}

fn bank(weights: Weights<f64>, epi: &(Option<Vec<f64>>, Option<BatchNorm<f64>>)) -> Result<KernelBank<f64>> {
    let b = KernelBank { weights, bias: epi.0.clone(), bn: epi.1.clone() };
    b.validate()?;
    Ok(b)
}

fn compose(case: &str, mut rng: SplitMix64, trials: usize) -> Result<OracleReport> {
    let name = format!("compose/{case}");
    match case {
        "fwsc-vs-stages" => {
            let mut t = Tally::new(&name, "fwsc == pointwise(depthwise(x)), f32", "bit-identical", 0.0);
            for _ in 0..trials {
                let x = Volume4::<f32>::seeded(rand_shape(&mut rng, 6, 8), rng.next_u64())?;
                let c_out = rng.range(1, 6);
                let k = rand_kernel(&mut rng);
                let s = rng.range(1, 3);
                let b = KernelBank::<f32>::seeded(BankSpec::new(VariantKind::FwSC, x.shape().c, c_out, k), rng.next_u64())?;
                let Weights::FwSC { depthwise: dw, pointwise: pw, .. } = &b.weights else { unreachable!() };
                let staged = pointwise(&depthwise(&x, dw, k, [s; 3])?, pw, c_out)?;
                let fused = forward(&x, &b, s)?;
                let (abs, rel) = normwise_error(&staged.to_f64_vec(), &fused.to_f64_vec());
                let shape = x.shape();
                t.record(staged.bits_eq(&fused), abs, rel, || {
                    ("bit-identical".into(), format!("input {shape}, k {k}, s {s}: max abs err {abs:e}"))
                });
            }
            Ok(t.finish())
        }
        "fdwsc-rank1-vs-fwsc" => {
            let mut t = Tally::new(&name, "fdwsc(S, D) == fwsc(S outer D), f64", "", COMPOSE_TOL);
            for _ in 0..trials {
                let x = Volume4::<f64>::seeded(rand_shape(&mut rng, 5, 8), rng.next_u64())?;
                let (c_in, c_out) = (x.shape().c, rng.range(1, 5));
                let k = rand_kernel(&mut rng);
                let s = rng.range(1, 2);
                let spatial = rand_vec(&mut rng, c_in * k.kh * k.kw);
                let disparity = rand_vec(&mut rng, c_in * k.kd);
                let pw = rand_vec(&mut rng, c_out * c_in);
                let mut dw = Vec::with_capacity(c_in * k.volume());
                for c in 0..c_in {
                    for a in 0..k.kd {
                        for hw in 0..k.kh * k.kw {
                            dw.push(disparity[c * k.kd + a] * spatial[c * k.kh * k.kw + hw]);
                        }
                    }
                }
                let epi = rand_epilogue(&mut rng, c_out);
                let f = bank(
                    Weights::FDwSC { c_in, c_out, kernel: k, spatial, disparity, pointwise: pw.clone(), stage_bn: None },
                    &epi,
                )?;
                let w = bank(Weights::FwSC { c_in, c_out, kernel: k, depthwise: dw, pointwise: pw }, &epi)?;
                let (abs, rel) = normwise_error(&forward(&x, &w, s)?.to_f64_vec(), &forward(&x, &f, s)?.to_f64_vec());
                t.within(abs, rel, || format!("input {}, k {k}, s {s}", x.shape()));
            }
            Ok(t.finish())
        }
        "fwsc-c1-vs-full" => {
            let mut t = Tally::new(&name, "fwsc with c_in = 1 == full with w[o] = p[o] * dw, f64", "", COMPOSE_TOL);
            for _ in 0..trials {
                let x = Volume4::<f64>::seeded(rand_shape(&mut rng, 1, 8), rng.next_u64())?;
                let c_out = rng.range(1, 6);
                let k = rand_kernel(&mut rng);
                let s = rng.range(1, 3);
                let dw = rand_vec(&mut rng, k.volume());
                let pw = rand_vec(&mut rng, c_out);
                let data = pw.iter().flat_map(|p| dw.iter().map(move |w| p * w)).collect();
                let epi = rand_epilogue(&mut rng, c_out);
                let sep = bank(Weights::FwSC { c_in: 1, c_out, kernel: k, depthwise: dw, pointwise: pw }, &epi)?;
                let full = bank(Weights::Full { c_in: 1, c_out, kernel: k, data }, &epi)?;
                let (abs, rel) =
                    normwise_error(&forward(&x, &full, s)?.to_f64_vec(), &forward(&x, &sep, s)?.to_f64_vec());
                t.within(abs, rel, || format!("input {}, k {k}, s {s}", x.shape()));
            }
            Ok(t.finish())
        }
        "dwsc-d1-vs-cube-conv" => {
            let mut t = Tally::new(
                &name,
                "dwsc on (c,1,h,w) == single-channel k^3 conv on (1,c,h,w), stride 1, f64",
                "",
                COMPOSE_TOL,
            );
            for _ in 0..trials {
                let shape = Shape4 { c: rng.range(1, 8), d: 1, h: rng.range(1, 8), w: rng.range(1, 8) };
                let x = Volume4::<f64>::seeded(shape, rng.next_u64())?;
                let k = Kernel3::cube(*rng.pick(&[1, 2, 3, 5]))?;
                let dw = rand_vec(&mut rng, k.volume());
                let p = f64::uniform(&mut rng);
                let data = dw.iter().map(|w| p * w).collect();
                let none = (None, None);
                let sep = bank(
                    Weights::DwSC { channels: shape.c, d_in: 1, d_out: 1, kernel: k, depthwise: dw, pointwise: vec![p] },
                    &none,
                )?;
                let cube = bank(Weights::Full { c_in: 1, c_out: 1, kernel: k, data }, &none)?;
                let moved = Volume4::from_vec(Shape4 { c: 1, d: shape.c, ..shape }, x.data().to_vec())?;
                let (abs, rel) =
                    normwise_error(&forward(&moved, &cube, 1)?.to_f64_vec(), &forward(&x, &sep, 1)?.to_f64_vec());
                t.within(abs, rel, || format!("input {shape}, k {k}"));
            }
            Ok(t.finish())
        }
        "k1-collapse" => {
            let mut t = Tally::new(&name, "every variant with a 1x1x1 kernel == a full 1x1x1 conv, f64", "", COMPOSE_TOL);
            let k = Kernel3::cube(1)?;
            for _ in 0..trials {
                let x = Volume4::<f64>::seeded(rand_shape(&mut rng, 5, 7), rng.next_u64())?;
                let (c_in, c_out) = (x.shape().c, rng.range(1, 5));
                let s = rng.range(1, 2);
                let epi = rand_epilogue(&mut rng, c_out);
                let pw = rand_vec(&mut rng, c_out * c_in);
                let dw = rand_vec(&mut rng, c_in);
                let st = rand_vec(&mut rng, c_in);
                let mix = |scale: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    (0..c_out * c_in).map(|j| pw[j] * scale(j % c_in)).collect()
                };
                let fw = bank(Weights::FwSC { c_in, c_out, kernel: k, depthwise: dw.clone(), pointwise: pw.clone() }, &epi)?;
                let fw_ref = bank(Weights::Full { c_in, c_out, kernel: k, data: mix(&|i| dw[i]) }, &epi)?;
                let fd = bank(
                    Weights::FDwSC {
                        c_in,
                        c_out,
                        kernel: k,
                        spatial: dw.clone(),
                        disparity: st.clone(),
                        pointwise: pw.clone(),
                        stage_bn: None,
                    },
                    &epi,
                )?;
                let fd_ref = bank(Weights::Full { c_in, c_out, kernel: k, data: mix(&|i| dw[i] * st[i]) }, &epi)?;
                let mut worst = (0.0f64, 0.0f64);
                for (a, b) in [(&fw_ref, &fw), (&fd_ref, &fd)] {
                    let (abs, rel) = normwise_error(&forward(&x, a, s)?.to_f64_vec(), &forward(&x, b, s)?.to_f64_vec());
                    worst = (worst.0.max(abs), worst.1.max(rel));
                }
                // DwSC mixes disparities, so its reference runs on the swapped volume.
                let d = x.shape().d;
                let d_out = rng.range(1, 4);
                let dpw = rand_vec(&mut rng, d_out * d);
                let ddw = rand_vec(&mut rng, d);
                let dw_bank = bank(
                    Weights::DwSC { channels: c_in, d_in: d, d_out, kernel: k, depthwise: ddw.clone(), pointwise: dpw.clone() },
                    &(None, None),
                )?;
                let dw_ref = bank(
                    Weights::Full {
                        c_in: d,
                        c_out: d_out,
                        kernel: k,
                        data: (0..d_out * d).map(|j| dpw[j] * ddw[j % d]).collect(),
                    },
                    &(None, None),
                )?;
                use crate::tensor::Axis::{C, D, H, W};
                let swapped = x.permute([D, C, H, W])?;
                let expect = forward(&swapped, &dw_ref, 1)?.permute([D, C, H, W])?;
                let (abs, rel) = normwise_error(&expect.to_f64_vec(), &forward(&x, &dw_bank, 1)?.to_f64_vec());
                worst = (worst.0.max(abs), worst.1.max(rel));
                t.within(worst.0, worst.1, || format!("input {}, c_out {c_out}, s {s}", x.shape()));
            }
            Ok(t.finish())
        }
        _ => Err(Error::validation(format!(
            "unknown composition case `{case}`; cases are: {}",
            COMPOSITION_CASES.join(", ")
        ))),
    }
}

/// A random conv3d layer of `variant` and the input it is applied to.
fn rand_layer(rng: &mut SplitMix64, variant: VariantKind) -> Result<(LayerSpec, Shape4)> {
    let x = rand_shape(rng, 4, 7);
    let c_out = if variant == VariantKind::DwSC { x.c } else { rng.range(1, 4) };
    let mut spec = LayerSpec::conv("oracle", variant, *rng.pick(&[1, 3, 5]), c_out)?;
    spec.stride = rng.range(1, 2);
    spec.bias = rng.coin();
    spec.bn = rng.coin();
    Ok((spec, x))
}

fn describe(spec: &LayerSpec, x: Shape4) -> String {
    format!(
        "{} k {} s {} bias {} bn {} on {x}",
        spec.variant, spec.kernel, spec.stride, spec.bias, spec.bn
    )
}

fn cost_oracle(variant: VariantKind, mut rng: SplitMix64, closed: ClosedForm) -> Result<OracleReport> {
    let name = format!("cost-oracle/{}", variant.name().to_lowercase());
    let mut t = Tally::new(
        &name,
        "closed-form MACs and params == instrumented loops; loop output bit-identical to forward, f32",
        "exact",
        0.0,
    );
    for _ in 0..COST_TRIALS {
        let (spec, shape) = rand_layer(&mut rng, variant)?;
        let x = Volume4::<f32>::seeded(shape, rng.next_u64())?;
        let b = KernelBank::<f32>::seeded(spec.bank_spec(shape), rng.next_u64())?;
        let (out, macs) = counted_forward(&x, &b, spec.stride)?;
        let fwd = forward(&x, &b, spec.stride)?;
        let cf = closed(&spec, shape)?;
        let params = b.param_count() as u64;
        let ok = cf.total_macs() == macs && cf.total_params() == params && out.bits_eq(&fwd);
        let diff = cf.total_macs().abs_diff(macs) as f64;
        t.record(ok, diff, diff / macs.max(1) as f64, || {
            (
                format!("{} MACs, {} params (closed form)", cf.total_macs(), cf.total_params()),
                format!(
                    "{} MACs, {} params, output identical: {} ({})",
                    macs,
                    params,
                    out.bits_eq(&fwd),
                    describe(&spec, shape)
                ),
            )
        });
    }
    Ok(t.finish())
}

fn cost_oracle_deconv(mut rng: SplitMix64, closed: ClosedForm) -> Result<OracleReport> {
    let mut t = Tally::new(
        "cost-oracle/deconv",
        "transposed conv: closed form == scatter loops counting every tap; output bit-identical, f32",
        "exact",
        0.0,
    );
    for _ in 0..COST_TRIALS {
        let shape = rand_shape(&mut rng, 4, 5);
        let mut spec = LayerSpec::conv("oracle", VariantKind::Full, 1, rng.range(1, 4))?;
        spec.kind = LayerKind::Deconv3d;
        spec.kernel = Kernel3 { kd: rng.range(1, 4), kh: rng.range(1, 4), kw: rng.range(1, 4) };
        spec.stride = rng.range(1, 2);
        spec.output_padding = if rng.coin() { Some(rng.range(0, spec.stride - 1)) } else { None };
        spec.bias = rng.coin();
        spec.bn = rng.coin();
        let x = Volume4::<f32>::seeded(shape, rng.next_u64())?;
        let b = KernelBank::<f32>::seeded(spec.bank_spec(shape), rng.next_u64())?;
        let (out, macs) = counted_deconv(&x, &b, spec.stride, spec.output_padding)?;
        let fwd = deconv3d(&x, &b, spec.stride, spec.output_padding)?;
        let cf = closed(&spec, shape)?;
        let ok = cf.total_macs() == macs && cf.total_params() == b.param_count() as u64 && out.bits_eq(&fwd);
        let diff = cf.total_macs().abs_diff(macs) as f64;
        t.record(ok, diff, diff / macs.max(1) as f64, || {
            (
                format!("{} MACs (closed form)", cf.total_macs()),
                format!("{macs} MACs, output identical: {} ({})", out.bits_eq(&fwd), describe(&spec, shape)),
            )
        });
    }
    Ok(t.finish())
}

fn reduction_law(mut rng: SplitMix64) -> Result<OracleReport> {
    let mut t = Tally::new(
        "reduction-law",
        "counted Full/FwSC MACs == k^3 c_o / (k^3 + c_o) as rationals, stride 1, no bias/BN",
        "exact",
        0.0,
    );
    for _ in 0..REDUCTION_TRIALS {
        let shape = rand_shape(&mut rng, 4, 6);
        let k = *rng.pick(&[1usize, 3, 5]);
        let c_out = rng.range(1, 8);
        let x = Volume4::<f32>::seeded(shape, rng.next_u64())?;
        let kern = Kernel3::cube(k)?;
        let mut count = |v| -> Result<u64> {
            let b = KernelBank::<f32>::seeded(BankSpec::new(v, shape.c, c_out, kern), rng.next_u64())?;
            Ok(counted_forward(&x, &b, 1)?.1)
        };
        let full = count(VariantKind::Full)? as u128;
        let sep = count(VariantKind::FwSC)? as u128;
        let k3 = (k * k * k) as u128;
        let co = c_out as u128;
        let ok = full * (k3 + co) == sep * k3 * co;
        let rel = ((full as f64 / sep as f64) / (k3 as f64 * co as f64 / (k3 + co) as f64) - 1.0).abs();
        t.record(ok, 0.0, rel, || {
            (
                format!("{}/{}", k3 * co, k3 + co),
                format!("{full}/{sep} (input {shape}, k {k}, c_o {c_out})"),
            )
        });
    }
    Ok(t.finish())
}

fn grad(variant: VariantKind, mut rng: SplitMix64) -> Result<OracleReport> {
    let name = format!("grad/{}", variant.name().to_lowercase());
    let mut t = Tally::new(
        &name,
        "analytic backward vs central differences (step 1e-5) of sum(output), inputs and every trainable, f64",
        "",
        GRAD_TOL,
    );
    for _ in 0..GRAD_TRIALS {
        let shape = rand_shape(&mut rng, 3, 4);
        let c_out = if variant == VariantKind::DwSC { shape.c } else { rng.range(1, 3) };
        let mut spec = LayerSpec::conv("grad", variant, *rng.pick(&[1, 3]), c_out)?;
        spec.stride = rng.range(1, 2);
        spec.bias = rng.coin();
        spec.bn = rng.coin();
        let x = Volume4::<f64>::seeded(shape, rng.next_u64())?;
        let b = KernelBank::<f64>::seeded(spec.bank_spec(shape), rng.next_u64())?;
        let ones = Volume4::new(output_shape(&b, shape, spec.stride)?, Fill::Constant(1.0))?;
        let g = backward(&x, &b, &ones, spec.stride)?;
        let fd = finite_diff_grad(&x, &b, spec.stride, GRAD_STEP)?;
        let (ai, ri) = elementwise_error(g.input.data(), &fd.input);
        let (ap, rp) = elementwise_error(&g.bank.trainable(), &fd.params);
        t.within(ai.max(ap), ri.max(rp), || describe(&spec, shape));
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_macs(_: &LayerSpec, _: Shape4) -> Result<CostBreakdown> {
        Ok(CostBreakdown::default())
    }

    #[test]
    fn composition_cases_pass() {
        for c in COMPOSITION_CASES {
            let r = composition_check(c, 7, 50).unwrap();
            assert!(r.pass, "{r:?}");
            assert_eq!(r.trials, 50);
        }
        assert!(composition_check("nope", 1, 1).is_err());
    }

    #[test]
    fn cost_oracle_catches_a_wrong_closed_form() {
        let opts = CheckOptions { filter: Some("cost-oracle/fwsc".into()), seed: 1, closed_form: no_macs };
        let r = run_catalog(&opts).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r[0].pass);
        let opts = CheckOptions { closed_form: count_layer, ..opts };
        assert!(run_catalog(&opts).unwrap()[0].pass);
    }

    #[test]
    fn whole_catalog_passes() {
        let reports = run_catalog(&CheckOptions::default()).unwrap();
        assert_eq!(reports.len(), CASES.len());
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let opts = CheckOptions { filter: Some("grad".into()), ..Default::default() };
        let names: Vec<_> = CASES.iter().filter(|c| c.contains("grad")).collect();
        assert_eq!(names.len(), 4);
        let opts = CheckOptions { filter: Some("zzz".into()), ..opts };
        assert!(run_catalog(&opts).is_err());
    }
}
