use proptest::prelude::*;
use sepconv3d::tensor::{Axis, Shape4, Volume4};

fn shapes(max: usize) -> impl Strategy<Value = Shape4> {
    (1..=max, 1..=max, 1..=max, 1..=max).prop_map(|(c, d, h, w)| Shape4 { c, d, h, w })
}

fn all_orders() -> Vec<[Axis; 4]> {
    let mut out = Vec::new();
    for a in Axis::ALL {
        for b in Axis::ALL {
            for c in Axis::ALL {
                for d in Axis::ALL {
                    let o = [a, b, c, d];
                    if (0..4).all(|i| (0..i).all(|j| o[i] != o[j])) {
                        out.push(o);
                    }
                }
            }
        }
    }
    out
}

fn pos(a: Axis) -> usize {
    Axis::ALL.iter().position(|&x| x == a).unwrap()
}

#[test]
fn there_are_24_axis_orders() {
    assert_eq!(all_orders().len(), 24);
}

proptest! {
    #[test]
    fn permute_moves_every_element(shape in shapes(4), seed in any::<u64>(), which in 0usize..24) {
        let order = all_orders()[which];
        let v = Volume4::<f32>::seeded(shape, seed).unwrap();
        let p = v.permute(order).unwrap();
        let dims = shape.dims();
        prop_assert_eq!(p.shape().dims(), order.map(|a| dims[pos(a)]));
        for c in 0..shape.c {
            for d in 0..shape.d {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        let idx = [c, d, h, w];
                        let o = order.map(|a| idx[pos(a)]);
                        prop_assert_eq!(p.get(o[0], o[1], o[2], o[3]), v.get(c, d, h, w));
                    }
                }
            }
        }
        let mut inverse = [Axis::C; 4];
        for (i, a) in order.iter().enumerate() {
            inverse[pos(*a)] = Axis::ALL[i];
        }
        prop_assert!(p.permute(inverse).unwrap().bits_eq(&v));
    }

    #[test]
    fn repeated_axis_is_rejected(shape in shapes(3)) {
        let v = Volume4::<f32>::zeros(shape).unwrap();
        prop_assert!(v.permute([Axis::C, Axis::C, Axis::H, Axis::W]).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity(
        shape in shapes(5),
        seed in any::<u64>(),
        lo in prop::array::uniform3(0usize..3),
        hi in prop::array::uniform3(0usize..3),
    ) {
        let v = Volume4::<f64>::seeded(shape, seed).unwrap();
        let p = v.pad(lo, hi);
        let sp = shape.spatial();
        prop_assert_eq!(p.shape().spatial(), [0, 1, 2].map(|i| sp[i] + lo[i] + hi[i]));
        prop_assert!(p.crop(lo, sp).unwrap().bits_eq(&v));
        // Everything outside the original block is zero.
        let total: f64 = p.data().iter().map(|x| x.abs()).sum();
        let inner: f64 = v.data().iter().map(|x| x.abs()).sum();
        prop_assert_eq!(total, inner);
    }

    #[test]
    fn same_padding_keeps_unit_stride_extent(shape in shapes(5), k in 1usize..7) {
        let v = Volume4::<f32>::zeros(shape).unwrap();
        let p = v.pad_same(k, &[Axis::D, Axis::H, Axis::W]).unwrap();
        let sp = shape.spatial();
        prop_assert_eq!(p.shape().spatial(), sp.map(|n| n + k - 1));
    }

    #[test]
    fn crop_outside_is_rejected(shape in shapes(4)) {
        let v = Volume4::<f32>::zeros(shape).unwrap();
        prop_assert!(v.crop([1, 0, 0], shape.spatial()).is_err());
    }

    #[test]
    fn row_major_index_law(shape in shapes(6)) {
        let mut next = 0;
        for c in 0..shape.c {
            for d in 0..shape.d {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        prop_assert_eq!(shape.index(c, d, h, w), next);
                        next += 1;
                    }
                }
            }
        }
        prop_assert_eq!(next, shape.len());
    }

    #[test]
    fn sv3d_roundtrip_is_bit_exact_f32(shape in shapes(4), bits in prop::collection::vec(any::<u32>(), 256)) {
        let data: Vec<f32> = (0..shape.len()).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
        let v = Volume4::from_vec(shape, data).unwrap();
        let back = Volume4::<f32>::from_sv3d_bytes(&v.to_sv3d_bytes()).unwrap();
        prop_assert!(back.bits_eq(&v));
    }

    #[test]
    fn sv3d_roundtrip_is_bit_exact_f64(shape in shapes(4), bits in prop::collection::vec(any::<u64>(), 256)) {
        let data: Vec<f64> = (0..shape.len()).map(|i| f64::from_bits(bits[i % bits.len()])).collect();
        let v = Volume4::from_vec(shape, data).unwrap();
        let back = Volume4::<f64>::from_sv3d_bytes(&v.to_sv3d_bytes()).unwrap();
        prop_assert!(back.bits_eq(&v));
    }

    #[test]
    fn truncated_sv3d_is_a_format_error(shape in shapes(3), cut in 1usize..40) {
        let bytes = Volume4::<f32>::zeros(shape).unwrap().to_sv3d_bytes();
        let cut = cut.min(bytes.len());
        let err = Volume4::<f32>::from_sv3d_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert!(err.is_io());
    }

    #[test]
    fn shape_text_roundtrip(shape in shapes(500)) {
        prop_assert_eq!(shape.to_string().parse::<Shape4>().unwrap(), shape);
    }
}

#[test]
fn wrong_dtype_is_a_format_error() {
    let bytes = Volume4::<f64>::zeros(Shape4::new(1, 2, 2, 2).unwrap()).unwrap().to_sv3d_bytes();
    assert!(Volume4::<f32>::from_sv3d_bytes(&bytes).unwrap_err().is_io());
}
