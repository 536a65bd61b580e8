//! Dense 4D volumes laid out as (channel, disparity, height, width).
//!
//! Storage is row-major with `w` fastest, then `h`, `d`, `c`:
//! `flat = ((c * D + d) * H + h) * W + w`.

mod io;
mod rng;

use std::fmt;
use std::str::FromStr;

pub use io::{AnyVolume, DType, MAGIC, VERSION};
pub use rng::SplitMix64;

use crate::error::{ensure, Error, Result};

/// Scalar types a volume can hold.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    /// Map one generator draw to a uniform sample in [-1, 1).
    fn uniform(rng: &mut SplitMix64) -> Self;
    fn to_bits_u64(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn uniform(rng: &mut SplitMix64) -> Self {
        // 24 bits: exact in f32, so the upper bound stays open.
        let u = (rng.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
        2.0 * u - 1.0
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn uniform(rng: &mut SplitMix64) -> Self {
        2.0 * rng.next_f64() - 1.0
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Extents of a volume. Every component is at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(c: usize, d: usize, h: usize, w: usize) -> Result<Self> {
        let s = Self { c, d, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.c >= 1 && self.d >= 1 && self.h >= 1 && self.w >= 1,
            "zero-sized dimension in shape {self}"
        );
        ensure!(
            self.checked_len().is_some(),
            "shape {self} overflows the addressable size"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn checked_len(&self) -> Option<usize> {
        self.c
            .checked_mul(self.d)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    /// Spatial extents `[d, h, w]`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn sites(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn with_spatial(c: usize, s: [usize; 3]) -> Self {
        Self { c, d: s[0], h: s[1], w: s[2] }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.d, self.h, self.w]
    }

    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.d + d) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.d, self.h, self.w)
    }
}

impl FromStr for Shape4 {
    type Err = Error;

    /// Parses `CxDxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        ensure!(parts.len() == 4, "expected CxDxHxW, got `{s}`");
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad extent `{p}` in `{s}`")))?;
        }
        Shape4::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    C,
    D,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::C, Axis::D, Axis::H, Axis::W];

    fn pos(self) -> usize {
        self as usize
    }
}

/// Initial contents for [`Volume4::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Uniform in [-1, 1) from SplitMix64 with the given seed.
    SeededRandom(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Element> Volume4<T> {
    pub fn new(shape: Shape4, fill: Fill) -> Result<Self> {
        shape.validate()?;
        let n = shape.len();
        let data = match fill {
            Fill::Zeros => vec![T::default(); n],
            Fill::Constant(v) => vec![T::from_f64(v); n],
            Fill::SeededRandom(seed) => {
                let mut rng = SplitMix64::new(seed);
                (0..n).map(|_| T::uniform(&mut rng)).collect()
            }
        };
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::new(shape, Fill::Zeros)
    }

    pub fn seeded(shape: Shape4, seed: u64) -> Result<Self> {
        Self::new(shape, Fill::SeededRandom(seed))
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        ensure!(
            data.len() == shape.len(),
            "data length {} does not match shape {} ({} elements)",
            data.len(),
            shape,
            shape.len()
        );
        Ok(Self { shape, data })
    }

    pub(crate) fn from_f64_vec(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data: data.into_iter().map(T::from_f64).collect() }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(c, d, h, w)]
    }

    /// Contiguous `d * h * w` block of one channel.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.sites();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Volume4<U> {
        Volume4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Equality on the raw bit patterns (distinguishes `-0.0` from `0.0`).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Materialize a transposition: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: [Axis; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for a in order {
            ensure!(!seen[a.pos()], "invalid permutation {order:?}: axis {a:?} repeated");
            seen[a.pos()] = true;
        }
        let in_dims = self.shape.dims();
        let out_dims = order.map(|a| in_dims[a.pos()]);
        let out_shape = Shape4::new(out_dims[0], out_dims[1], out_dims[2], out_dims[3])?;

        // Input strides, reordered to follow the output axes.
        let in_strides = [
            in_dims[1] * in_dims[2] * in_dims[3],
            in_dims[2] * in_dims[3],
            in_dims[3],
            1,
        ];
        let st = order.map(|a| in_strides[a.pos()]);

        let mut data = Vec::with_capacity(self.data.len());
        for i0 in 0..out_dims[0] {
            for i1 in 0..out_dims[1] {
                for i2 in 0..out_dims[2] {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    data.extend((0..out_dims[3]).map(|i3| self.data[base + i3 * st[3]]));
                }
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Zero padding that keeps stride-1 outputs the same size for a kernel of
    /// extent `k`: `floor((k-1)/2)` before and `ceil((k-1)/2)` after, on each
    /// listed spatial axis.
    pub fn pad_same(&self, k: usize, axes: &[Axis]) -> Result<Self> {
        ensure!(k >= 1, "kernel size must be >= 1");
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for &a in axes {
            ensure!(a != Axis::C, "pad_same only pads spatial axes (d, h, w)");
            lo[a.pos() - 1] = (k - 1) / 2;
            hi[a.pos() - 1] = k / 2;
        }
        Ok(self.pad(lo, hi))
    }

    /// Zero padding with explicit per-axis amounts on `[d, h, w]`.
    pub fn pad(&self, lo: [usize; 3], hi: [usize; 3]) -> Self {
        let s = self.shape;
        let out = Shape4 {
            c: s.c,
            d: s.d + lo[0] + hi[0],
            h: s.h + lo[1] + hi[1],
            w: s.w + lo[2] + hi[2],
        };
        let mut data = vec![T::default(); out.len()];
        for c in 0..s.c {
            for d in 0..s.d {
                for h in 0..s.h {
                    let src = s.index(c, d, h, 0);
                    let dst = out.index(c, d + lo[0], h + lo[1], lo[2]);
                    data[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
                }
            }
        }
        Self { shape: out, data }
    }

    /// Spatial sub-block starting at `start` with extents `extent` (all channels).
    pub fn crop(&self, start: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        let s = self.shape;
        for (i, dim) in s.spatial().iter().enumerate() {
            ensure!(
                start[i] + extent[i] <= *dim,
                "crop window {start:?}+{extent:?} exceeds volume {s}"
            );
        }
        let out = Shape4::with_spatial(s.c, extent);
        out.validate()?;
        let mut data = Vec::with_capacity(out.len());
        for c in 0..s.c {
            for d in 0..extent[0] {
                for h in 0..extent[1] {
                    let src = s.index(c, start[0] + d, start[1] + h, start[2]);
                    data.extend_from_slice(&self.data[src..src + extent[2]]);
                }
            }
        }
        Ok(Self { shape: out, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c: usize, d: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(c, d, h, w).unwrap()
    }

    #[test]
    fn constant_and_zero_fill() {
        let v = Volume4::<f32>::new(shape(1, 1, 1, 1), Fill::Constant(2.0)).unwrap();
        assert_eq!(v.data(), &[2.0]);
        let z = Volume4::<f32>::zeros(shape(2, 3, 3, 3)).unwrap();
        assert_eq!(z.len(), 54);
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_sized_dimension_rejected() {
        assert!(matches!(Shape4::new(1, 0, 2, 2), Err(Error::Validation(_))));
        let bad = Shape4 { c: 2, d: 2, h: 0, w: 2 };
        assert!(Volume4::<f32>::zeros(bad).is_err());
    }

    #[test]
    fn seeded_fill_is_reproducible_and_bounded() {
        let a = Volume4::<f32>::seeded(shape(2, 4, 4, 4), 42).unwrap();
        let b = Volume4::<f32>::seeded(shape(2, 4, 4, 4), 42).unwrap();
        assert!(a.bits_eq(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let c = Volume4::<f32>::seeded(shape(2, 4, 4, 4), 43).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn swap_h_w_transposes_matrix() {
        let v = Volume4::<f32>::from_vec(shape(1, 1, 2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = v.permute([Axis::C, Axis::D, Axis::W, Axis::H]).unwrap();
        assert_eq!(t.shape(), shape(1, 1, 3, 2));
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_rejects_repeated_axis() {
        let v = Volume4::<f32>::zeros(shape(1, 1, 2, 3)).unwrap();
        assert!(v.permute([Axis::C, Axis::C, Axis::H, Axis::W]).is_err());
    }

    #[test]
    fn channel_disparity_swap_preserves_values() {
        let v = Volume4::<f32>::seeded(shape(2, 4, 4, 4), 9).unwrap();
        let p = v.permute([Axis::D, Axis::C, Axis::H, Axis::W]).unwrap();
        assert_eq!(p.shape(), shape(4, 2, 4, 4));
        let mut a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let mut b: Vec<u32> = p.data().iter().map(|x| x.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(p.get(3, 1, 2, 0), v.get(1, 3, 2, 0));
    }

    #[test]
    fn pad_same_centers_values() {
        let v = Volume4::<f32>::seeded(shape(1, 2, 2, 2), 1).unwrap();
        let p = v.pad_same(3, &[Axis::D, Axis::H, Axis::W]).unwrap();
        assert_eq!(p.shape(), shape(1, 4, 4, 4));
        assert_eq!(p.get(0, 1, 1, 1), v.get(0, 0, 0, 0));
        assert_eq!(p.get(0, 2, 2, 2), v.get(0, 1, 1, 1));
        assert_eq!(p.get(0, 0, 0, 0), 0.0);
        assert_eq!(p.get(0, 3, 3, 3), 0.0);
    }

    #[test]
    fn pad_same_k1_is_identity() {
        let v = Volume4::<f32>::seeded(shape(2, 3, 2, 5), 4).unwrap();
        let p = v.pad_same(1, &[Axis::D, Axis::H, Axis::W]).unwrap();
        assert!(p.bits_eq(&v));
    }

    #[test]
    fn pad_same_even_kernel_splits_floor_ceil() {
        let v = Volume4::<f32>::new(shape(1, 1, 1, 5), Fill::Constant(1.0)).unwrap();
        let p = v.pad_same(4, &[Axis::W]).unwrap();
        assert_eq!(p.shape().w, 8);
        assert_eq!(p.data(), &[0., 1., 1., 1., 1., 1., 0., 0.]);
    }

    #[test]
    fn pad_same_rejects_channel_axis() {
        let v = Volume4::<f32>::zeros(shape(1, 1, 1, 1)).unwrap();
        assert!(v.pad_same(3, &[Axis::C]).is_err());
    }

    #[test]
    fn shape_parse() {
        assert_eq!("32x48x60x132".parse::<Shape4>().unwrap(), shape(32, 48, 60, 132));
        assert!("32x48x60".parse::<Shape4>().is_err());
        assert!("0x1x1x1".parse::<Shape4>().is_err());
    }
}
