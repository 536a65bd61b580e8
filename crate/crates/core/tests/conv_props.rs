use proptest::prelude::*;
use sepconv3d::config::{LayerKind, LayerSpec};
use sepconv3d::conv::{deconv3d, forward, BankSpec, Kernel3, KernelBank, VariantKind};
use sepconv3d::cost::count_layer;
use sepconv3d::tensor::{Shape4, Volume4};
use sepconv3d::verify::{counted_deconv, counted_forward, normwise_error};

fn variants() -> impl Strategy<Value = VariantKind> {
    prop::sample::select(VariantKind::ALL.to_vec())
}

fn shapes(max_c: usize, max: usize) -> impl Strategy<Value = Shape4> {
    (1..=max_c, 1..=max, 1..=max, 1..=max).prop_map(|(c, d, h, w)| Shape4 { c, d, h, w })
}

#[derive(Debug, Clone)]
struct Case {
    spec: LayerSpec,
    input: Shape4,
}

fn layers() -> impl Strategy<Value = Case> {
    (variants(), shapes(4, 6), prop::sample::select(vec![1usize, 3, 5]), 1usize..=2, 1usize..=4, any::<bool>(), any::<bool>())
        .prop_map(|(v, input, k, stride, co, bias, bn)| {
            let co = if v == VariantKind::DwSC { input.c } else { co };
            let mut spec = LayerSpec::conv("p", v, k, co).unwrap();
            spec.stride = stride;
            spec.bias = bias;
            spec.bn = bn;
            Case { spec, input }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instrumented_count_equals_closed_form(case in layers(), seed in any::<u64>()) {
        let x = Volume4::<f32>::seeded(case.input, seed).unwrap();
        let bank = KernelBank::<f32>::seeded(case.spec.bank_spec(case.input), seed ^ 1).unwrap();
        let (out, macs) = counted_forward(&x, &bank, case.spec.stride).unwrap();
        let closed = count_layer(&case.spec, case.input).unwrap();
        prop_assert_eq!(macs, closed.total_macs());
        prop_assert_eq!(bank.param_count() as u64, closed.total_params());
        prop_assert!(out.bits_eq(&forward(&x, &bank, case.spec.stride).unwrap()));
    }

    #[test]
    fn deconv_count_equals_closed_form(
        input in shapes(3, 4),
        k in prop::array::uniform3(1usize..=4),
        stride in 1usize..=3,
        co in 1usize..=3,
        op in prop::option::of(0usize..3),
        seed in any::<u64>(),
    ) {
        let mut spec = LayerSpec::conv("d", VariantKind::Full, 1, co).unwrap();
        spec.kind = LayerKind::Deconv3d;
        spec.kernel = Kernel3::new(k[0], k[1], k[2]).unwrap();
        spec.stride = stride;
        spec.output_padding = op.map(|o| o % stride);
        let x = Volume4::<f64>::seeded(input, seed).unwrap();
        let bank = KernelBank::<f64>::seeded(spec.bank_spec(input), seed ^ 2).unwrap();
        let (out, macs) = counted_deconv(&x, &bank, stride, spec.output_padding).unwrap();
        prop_assert_eq!(macs, count_layer(&spec, input).unwrap().total_macs());
        prop_assert!(out.bits_eq(&deconv3d(&x, &bank, stride, spec.output_padding).unwrap()));
        prop_assert_eq!(out.shape(), spec.output_shape(input).unwrap());
    }

    #[test]
    fn forward_is_linear_without_epilogue(
        v in variants(),
        input in shapes(3, 5),
        k in prop::sample::select(vec![1usize, 2, 3]),
        stride in 1usize..=2,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let co = if v == VariantKind::DwSC { input.c } else { 2 };
        let spec = BankSpec::new(v, input.c, co, Kernel3::cube(k).unwrap()).with_disparity(input.d, input.d.div_ceil(stride));
        let bank = KernelBank::<f64>::seeded(spec, seed).unwrap();
        let x = Volume4::<f64>::seeded(input, seed ^ 3).unwrap();
        let y = Volume4::<f64>::seeded(input, seed ^ 4).unwrap();
        let mix = Volume4::from_vec(input, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (fx, fy) = (forward(&x, &bank, stride).unwrap(), forward(&y, &bank, stride).unwrap());
        let expect: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
        let got = forward(&mix, &bank, stride).unwrap();
        let (abs, _) = normwise_error(&expect, got.data());
        prop_assert!(abs <= 1e-12 * (1.0 + expect.iter().fold(0.0f64, |m, e| m.max(e.abs()))));
    }

    #[test]
    fn cost_is_monotone(case in layers()) {
        let base = count_layer(&case.spec, case.input).unwrap().total_macs();
        if case.spec.variant != VariantKind::DwSC {
            let mut wider = case.spec.clone();
            wider.out_channels += 1;
            prop_assert!(count_layer(&wider, case.input).unwrap().total_macs() > base);
        }
        let bigger = Shape4 { w: case.input.w + case.spec.stride, ..case.input };
        prop_assert!(count_layer(&case.spec, bigger).unwrap().total_macs() > base);
        let mut strided = case.spec.clone();
        strided.stride += 1;
        prop_assert!(count_layer(&strided, case.input).unwrap().total_macs() <= base);
        let mut larger_k = case.spec.clone();
        larger_k.kernel = Kernel3::cube(larger_k.kernel.kd + 2).unwrap();
        prop_assert!(count_layer(&larger_k, case.input).unwrap().total_macs() > base);
    }

    #[test]
    fn separable_variants_never_cost_more_than_full_at_k3(input in shapes(8, 6), co in 2usize..=16, stride in 1usize..=2) {
        let mut full = LayerSpec::conv("f", VariantKind::Full, 3, co).unwrap();
        full.stride = stride;
        let f = count_layer(&full, input).unwrap();
        for v in [VariantKind::FwSC, VariantKind::FDwSC] {
            let s = count_layer(&LayerSpec { variant: v, ..full.clone() }, input).unwrap();
            prop_assert!(s.total_params() < f.total_params());
            prop_assert!(s.total_macs() < f.total_macs());
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let x = Volume4::<f32>::seeded(Shape4::new(8, 8, 16, 16).unwrap(), 5).unwrap();
    for v in VariantKind::ALL {
        let spec = BankSpec::new(v, 8, 8, Kernel3::cube(3).unwrap()).with_disparity(8, 8).with_bias(true).with_bn(true);
        let bank = KernelBank::<f32>::seeded(spec, 6).unwrap();
        let one = sepconv3d::with_threads(1, || forward(&x, &bank, 1)).unwrap().unwrap();
        let many = sepconv3d::with_threads(4, || forward(&x, &bank, 1)).unwrap().unwrap();
        let again = sepconv3d::with_threads(4, || forward(&x, &bank, 1)).unwrap().unwrap();
        assert!(one.bits_eq(&many), "{v}");
        assert!(many.bits_eq(&again), "{v}");
    }
}
