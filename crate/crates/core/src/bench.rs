//! Wall-clock timing of single layers, summarized by median and median
//! absolute deviation.

use std::time::Instant;

use serde::Serialize;

use crate::config::LayerSpec;
use crate::conv::{forward, KernelBank, VariantKind};
use crate::cost::count_layer;
use crate::error::{ensure, Result};
use crate::tensor::{Shape4, Volume4};

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

/// One benchmarked layer.
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub op: VariantKind,
    pub input: Shape4,
    pub k: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BenchCase {
    pub fn layer(&self) -> Result<LayerSpec> {
        let mut l = LayerSpec::conv("bench", self.op, self.k, self.out_channels)?;
        l.stride = self.stride;
        Ok(l)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub op: String,
    pub input: String,
    pub k: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub threads: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub macs: u64,
    pub params: u64,
    /// Timed samples in seconds, warmup excluded.
    pub samples: Vec<f64>,
    pub median_s: f64,
    pub mad_s: f64,
    /// Median of the first op in a comparison divided by this median.
    pub speedup: Option<f64>,
}

/// Time `iterations` forward passes after `warmup` untimed ones. Inputs and
/// weights are seeded; the kernels run on whatever thread pool is current.
pub fn bench_layer(case: &BenchCase, iterations: usize, warmup: usize, seed: u64) -> Result<BenchResult> {
    ensure!(iterations >= 1, "iterations must be >= 1");
    let layer = case.layer()?;
    let cost = count_layer(&layer, case.input)?;
    let x = Volume4::<f32>::seeded(case.input, seed)?;
    let bank = KernelBank::<f32>::seeded(layer.bank_spec(case.input), seed.wrapping_add(1))?;
    for _ in 0..warmup {
        std::hint::black_box(forward(&x, &bank, case.stride)?);
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(forward(std::hint::black_box(&x), &bank, case.stride)?);
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchResult {
        op: case.op.name().to_lowercase(),
        input: case.input.to_string(),
        k: case.k,
        out_channels: case.out_channels,
        stride: case.stride,
        threads: crate::current_threads(),
        iterations,
        warmup,
        macs: cost.total_macs(),
        params: cost.total_params(),
        median_s: median(&samples),
        mad_s: mad(&samples),
        samples,
        speedup: None,
    })
}

/// Benchmark each case in turn and fill in speedups relative to the first.
pub fn bench_compare(cases: &[BenchCase], iterations: usize, warmup: usize, seed: u64) -> Result<Vec<BenchResult>> {
    let mut out = cases.iter().map(|c| bench_layer(c, iterations, warmup, seed)).collect::<Result<Vec<_>>>()?;
    if out.len() > 1 {
        let base = out[0].median_s;
        for r in &mut out {
            r.speedup = Some(base / r.median_s);
        }
    }
    Ok(out)
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(
        "op,input,k,out_channels,stride,threads,iterations,warmup,macs,params,median_s,mad_s,speedup,samples\n",
    );
    for r in results {
        let samples: Vec<String> = r.samples.iter().map(|x| format!("{x:.9}")).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{},{}\n",
            r.op,
            r.input,
            r.k,
            r.out_channels,
            r.stride,
            r.threads,
            r.iterations,
            r.warmup,
            r.macs,
            r.params,
            r.median_s,
            r.mad_s,
            r.speedup.map_or(String::new(), |x| format!("{x:.3}")),
            samples.join(";")
        ));
    }
    s
}

pub fn to_json(results: &[BenchResult]) -> String {
    serde_json::to_string_pretty(results).expect("bench results serialize") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    #[test]
    fn sample_count_and_cost_columns() {
        let case = BenchCase {
            op: VariantKind::FwSC,
            input: Shape4::new(2, 3, 4, 5).unwrap(),
            k: 3,
            out_channels: 4,
            stride: 1,
        };
        let a = bench_compare(&[case.clone(), case.clone()], 3, 1, 9).unwrap();
        assert_eq!(a[0].samples.len(), 3);
        assert_eq!(a[0].macs, a[1].macs);
        assert_eq!(a[0].speedup, Some(1.0));
        let csv = to_csv(&a);
        assert_eq!(csv.lines().count(), 3);
        assert!(bench_layer(&case, 0, 1, 9).is_err());
    }

    #[test]
    fn dwsc_needs_matching_channels() {
        let case = BenchCase { op: VariantKind::DwSC, input: Shape4::new(2, 3, 4, 5).unwrap(), k: 3, out_channels: 4, stride: 1 };
        assert!(bench_layer(&case, 1, 0, 1).is_err());
    }
}
