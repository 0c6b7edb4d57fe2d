//! Wall-clock benchmarks: hash-grid radius search against brute force, and
//! the folded FIG convolution against the direct 3D convolution.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::figconv::{fig_conv, fig_conv_macs, fig_conv_naive};
use crate::spatial::{brute_force_radius, neighbors, NeighborSpec, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusBench {
    pub n: usize,
    pub radius: f64,
    pub runs: usize,
    pub mean_neighbors: f64,
    pub hash_median_s: f64,
    pub brute_median_s: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBench {
    /// `[rank, H, W]` with the rank axis first.
    pub resolution: [usize; 3],
    pub channels: usize,
    pub kernel_size: usize,
    pub runs: usize,
    pub macs: u64,
    pub reparam_median_s: f64,
    /// Fastest run; scheduling noise only ever adds time.
    pub reparam_min_s: f64,
    pub naive_median_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub radius: Vec<RadiusBench>,
    pub conv: Vec<ConvBench>,
    /// Reparameterized time ratio between consecutive conv sizes.
    pub conv_time_ratios: Vec<f64>,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time<R>(f: impl FnOnce() -> R) -> (f64, R) {
    let t = Instant::now();
    let r = f();
    (t.elapsed().as_secs_f64(), r)
}

/// `n` points and `n` queries uniform in the unit cube, with the radius
/// chosen for about 16 neighbors per query.
pub fn bench_radius(n: usize, runs: usize, seed: u64) -> Result<RadiusBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let qs: Vec<Point3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let radius = (16.0 * 3.0 / (4.0 * std::f64::consts::PI * n.max(1) as f64)).cbrt();
    let spec = NeighborSpec::sphere(radius)?;
    let mut hash = Vec::with_capacity(runs);
    let mut brute = Vec::with_capacity(runs);
    let mut edges = 0;
    for _ in 0..runs {
        let (t, nb) = time(|| neighbors(&pts, &qs, &spec));
        let nb = nb?;
        edges = nb.num_edges();
        hash.push(t);
        let (t, bf) = time(|| brute_force_radius(&pts, &qs, &spec));
        std::hint::black_box(bf);
        brute.push(t);
    }
    let (h, b) = (median(hash), median(brute));
    Ok(RadiusBench {
        n,
        radius,
        runs,
        mean_neighbors: edges as f64 / n.max(1) as f64,
        hash_median_s: h,
        brute_median_s: b,
        speedup: b / h,
    })
}

/// One FIG convolution of a `[1, C, r, H, H]` grid with a `C → C` kernel.
pub fn bench_conv(h: usize, rank: usize, channels: usize, k: usize, runs: usize, seed: u64) -> Result<ConvBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = [1, channels, rank, h, h];
    let ks = [channels, channels, k, k, k];
    let x = Tensor::<f32>::from_fn(&xs, |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f32>::from_fn(&ks, |_| rng.random_range(-0.1..0.1));
    let mut fast = Vec::with_capacity(runs);
    let mut slow = Vec::with_capacity(runs);
    for _ in 0..runs {
        let (t, y) = time(|| fig_conv(&x, &w, 0, 1));
        std::hint::black_box(y?);
        fast.push(t);
        let (t, y) = time(|| fig_conv_naive(&x, &w, 0, 1));
        std::hint::black_box(y?);
        slow.push(t);
    }
    Ok(ConvBench {
        resolution: [rank, h, h],
        channels,
        kernel_size: k,
        runs,
        macs: fig_conv_macs(&xs, &ks, 0, 1)?,
        reparam_min_s: fast.iter().copied().fold(f64::INFINITY, f64::min),
        reparam_median_s: median(fast),
        naive_median_s: median(slow),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub radius_sizes: Vec<usize>,
    /// High-resolution extents of the conv benchmark.
    pub conv_sizes: Vec<usize>,
    pub rank: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            radius_sizes: vec![1_000, 10_000, 50_000],
            conv_sizes: vec![32, 64, 128],
            rank: 4,
            channels: 8,
            kernel_size: 3,
            runs: 5,
            seed: 0,
        }
    }
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    let radius = opts
        .radius_sizes
        .iter()
        .map(|&n| bench_radius(n, opts.runs, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let conv = opts
        .conv_sizes
        .iter()
        .map(|&h| bench_conv(h, opts.rank, opts.channels, opts.kernel_size, opts.runs, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let conv_time_ratios = conv
        .windows(2)
        .map(|w| w[1].reparam_min_s / w[0].reparam_min_s)
        .collect();
    Ok(BenchReport {
        radius,
        conv,
        conv_time_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn report_round_trips_through_json() {
        let opts = BenchOptions {
            radius_sizes: vec![200],
            conv_sizes: vec![4, 8],
            channels: 2,
            runs: 1,
            ..Default::default()
        };
        let report = run_bench(&opts).unwrap();
        assert_eq!(report.conv_time_ratios.len(), 1);
        assert_eq!(report.conv[1].macs, 4 * report.conv[0].macs);
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: BenchReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
