use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::Executor;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, TensorShape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    /// Half-width of the 95% confidence interval of the mean.
    pub ci95_ms: f64,
    pub throughput_fps: u64,
    pub warmup_iters: usize,
    pub measure_iters: usize,
}

impl LatencyStats {
    /// Summarises per-iteration timings (milliseconds).
    pub fn from_samples(samples_ms: &[f64], warmup_iters: usize) -> Self {
        let n = samples_ms.len();
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let ci95_ms = if n > 1 {
            let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("degrees of freedom >= 1")
                .inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        } else {
            0.0
        };
        LatencyStats {
            mean_ms: mean,
            ci95_ms,
            throughput_fps: throughput_fps(mean),
            warmup_iters,
            measure_iters: n,
        }
    }
}

/// Frames per second for a given mean latency, rounded down.
pub fn throughput_fps(mean_ms: f64) -> u64 {
    if mean_ms <= 0.0 {
        return 0;
    }
    (1000.0 / mean_ms).floor() as u64
}

/// Bench results plus a description of the host they were measured on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    #[serde(flatten)]
    pub stats: LatencyStats,
    pub input: TensorShape,
    pub host: String,
}

impl BenchReport {
    pub fn new(stats: LatencyStats, input: TensorShape) -> Self {
        let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        BenchReport {
            schema: "segprune.bench/v1".into(),
            stats,
            input,
            host: format!(
                "{}-{} threads={threads} exec=single-thread",
                std::env::consts::OS,
                std::env::consts::ARCH
            ),
        }
    }
}

/// Fixed stimulus used by [`bench`]: a unit-batch random tensor.
pub fn bench_input(input: TensorShape, seed: u64) -> Tensor {
    Tensor::random(input.with_batch(1), seed)
}

/// Unit-batch latency: `warmup` untimed passes, then `iters` timed ones.
pub fn bench(graph: &ModelGraph, input: TensorShape, warmup: usize, iters: usize, seed: u64) -> Result<LatencyStats> {
    if warmup < 1 || iters < 10 {
        return Err(Error::InvalidArgument(format!(
            "bench needs warmup >= 1 and iters >= 10, got {warmup} and {iters}"
        )));
    }
    let x = bench_input(input, seed);
    let mut exec = Executor::new();
    for _ in 0..warmup {
        exec.forward(graph, &x, None)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let y = exec.forward(graph, &x, None)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    Ok(LatencyStats::from_samples(&samples, warmup))
}
