//! Single-threaded CPU benchmark harness.
//!
//! Each layer runs in two mutually exclusive modes: a counting pass with the
//! [`OpCount`] tally, whose total must equal the closed-form count, and timed
//! passes with counting compiled out.

pub mod kernels;

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::calibration::{write_dataset, DatasetError, TimingRecord};
use crate::layer::{
    conv_flops, dense_flops, DenseDescriptor, LayerDescriptor, LayerError, OpCount,
};
use kernels::{ConvGeometry, NoTally, Tally};

/// Device label written for harness measurements.
pub const CPU_DEVICE: &str = "cpu-singlethread";

/// Environment variable overriding the default memory cap, in MiB.
pub const MEMCAP_ENV: &str = "ALPHAFLOPS_BENCH_MEMCAP_MB";
const DEFAULT_MEMCAP_MB: u64 = 2048;

/// Largest layer, in formula FLOPs, that [`count_ops`] accepts.
pub const COUNT_GUARD_FLOPS: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("layer has {flops} FLOPs, above the counting guard of {limit}")]
    SizeGuard { flops: u64, limit: u64 },
    #[error("layer needs ~{needed_mb} MiB, above the {cap_mb} MiB cap ({MEMCAP_ENV})")]
    MemoryCap { needed_mb: u64, cap_mb: u64 },
    #[error("instrumented tally {counted} differs from formula count {formula} for `{layer}`")]
    CountMismatch {
        layer: LayerDescriptor,
        counted: u64,
        formula: u64,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelVariant {
    NaiveDirect,
    Im2colGemm,
}

impl std::str::FromStr for KernelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" | "direct" => Ok(KernelVariant::NaiveDirect),
            "im2col" => Ok(KernelVariant::Im2colGemm),
            other => Err(format!(
                "unknown kernel variant `{other}` (expected naive|im2col)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub warmup_runs: u32,
    pub timed_runs: u32,
    pub seed: u64,
    pub kernel_variant: KernelVariant,
    pub memory_cap_mb: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let memory_cap_mb = std::env::var(MEMCAP_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(DEFAULT_MEMCAP_MB);
        Self {
            warmup_runs: 3,
            timed_runs: 30,
            seed: 0,
            kernel_variant: KernelVariant::NaiveDirect,
            memory_cap_mb,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub layer: LayerDescriptor,
    pub op_count: OpCount,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Sum of the kernel output in double precision, from the last timed run.
    pub checksum: f64,
}

/// Closed-form count the instrumented kernels must reproduce: the exact dense
/// count (bias included) or the convolution count.
pub fn formula_count(layer: &LayerDescriptor) -> Result<u64, LayerError> {
    match layer {
        LayerDescriptor::Dense(d) => dense_flops(d, true),
        LayerDescriptor::Conv2D(c) => conv_flops(c),
    }
}

/// Working set of one run in bytes (all buffers, f32).
pub fn memory_estimate(layer: &LayerDescriptor, variant: KernelVariant) -> Result<u64, LayerError> {
    let floats: u128 = match layer {
        LayerDescriptor::Dense(d) => {
            d.validate()?;
            let (i, o) = (u128::from(d.d_in), u128::from(d.d_out));
            i * o + i + 2 * o
        }
        LayerDescriptor::Conv2D(c) => {
            let g = ConvGeometry::new(c)?;
            let (rows, cols) = g.columns_shape();
            let columns = match variant {
                KernelVariant::NaiveDirect => 0,
                KernelVariant::Im2colGemm => rows as u128 * cols as u128,
            };
            g.input_len() as u128
                + g.padded_len() as u128
                + g.weight_len() as u128
                + g.output_len() as u128
                + columns
        }
    };
    u64::try_from(floats * 4).map_err(|_| LayerError::Overflow)
}

/// Buffers for one layer, filled from a seed.
enum Workload {
    Dense {
        d: DenseDescriptor,
        weights: Vec<f32>,
        bias: Vec<f32>,
        x: Vec<f32>,
        out: Vec<f32>,
    },
    Conv {
        g: ConvGeometry,
        padded: Vec<f32>,
        weights: Vec<f32>,
        columns: Vec<f32>,
        out: Vec<f32>,
    },
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

impl Workload {
    fn new(layer: &LayerDescriptor, variant: KernelVariant, seed: u64) -> Result<Self, LayerError> {
        layer.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match layer {
            LayerDescriptor::Dense(d) => {
                let (i, o) = (d.d_in as usize, d.d_out as usize);
                let mut weights = random_vec(&mut rng, i * o);
                if variant == KernelVariant::Im2colGemm {
                    // GEMM path multiplies by the `[d_in][d_out]` transpose.
                    weights = (0..i * o)
                        .map(|idx| weights[(idx % o) * i + idx / o])
                        .collect();
                }
                Workload::Dense {
                    d: *d,
                    weights,
                    bias: random_vec(&mut rng, o),
                    x: random_vec(&mut rng, i),
                    out: vec![0.0; o],
                }
            }
            LayerDescriptor::Conv2D(c) => {
                let g = ConvGeometry::new(c)?;
                let input = random_vec(&mut rng, g.input_len());
                let weights = random_vec(&mut rng, g.weight_len());
                let (rows, cols) = g.columns_shape();
                let columns = match variant {
                    KernelVariant::NaiveDirect => Vec::new(),
                    KernelVariant::Im2colGemm => vec![0.0; rows * cols],
                };
                Workload::Conv {
                    padded: g.pad(&input),
                    g,
                    weights,
                    columns,
                    out: vec![0.0; g.output_len()],
                }
            }
        })
    }

    fn run<T: Tally>(&mut self, variant: KernelVariant, t: &mut T) {
        match self {
            Workload::Dense {
                d,
                weights,
                bias,
                x,
                out,
            } => match variant {
                KernelVariant::NaiveDirect => kernels::dense_forward(d, weights, bias, x, out, t),
                KernelVariant::Im2colGemm => {
                    kernels::dense_forward_gemm(d, weights, bias, x, out, t)
                }
            },
            Workload::Conv {
                g,
                padded,
                weights,
                columns,
                out,
            } => match variant {
                KernelVariant::NaiveDirect => kernels::conv2d_direct(g, padded, weights, out, t),
                KernelVariant::Im2colGemm => {
                    kernels::conv2d_im2col(g, padded, weights, columns, out, t)
                }
            },
        }
    }

    fn checksum(&self) -> f64 {
        let out = match self {
            Workload::Dense { out, .. } | Workload::Conv { out, .. } => out,
        };
        out.iter().map(|&v| f64::from(v)).sum()
    }
}

fn counting_pass(
    layer: &LayerDescriptor,
    variant: KernelVariant,
    seed: u64,
) -> Result<OpCount, BenchError> {
    let mut work = Workload::new(layer, variant, seed)?;
    let mut count = OpCount::default();
    work.run(variant, &mut count);
    Ok(count)
}

/// Runs the instrumented kernel once with counting enabled.
pub fn count_ops(layer: &LayerDescriptor, variant: KernelVariant) -> Result<OpCount, BenchError> {
    let flops = formula_count(layer)?;
    if flops > COUNT_GUARD_FLOPS {
        return Err(BenchError::SizeGuard {
            flops,
            limit: COUNT_GUARD_FLOPS,
        });
    }
    counting_pass(layer, variant, 0)
}

/// A layer that passed the memory and count checks and is warmed up.
struct Prepared {
    layer: LayerDescriptor,
    op_count: OpCount,
    work: Workload,
    bytes: u64,
    samples: Vec<f64>,
    checksum: f64,
}

impl Prepared {
    fn new(layer: &LayerDescriptor, config: &BenchConfig) -> Result<Self, BenchError> {
        let variant = config.kernel_variant;
        let bytes = memory_estimate(layer, variant)?;
        let cap = config.memory_cap_mb.saturating_mul(1 << 20);
        if bytes > cap {
            return Err(BenchError::MemoryCap {
                needed_mb: bytes.div_ceil(1 << 20),
                cap_mb: config.memory_cap_mb,
            });
        }

        let formula = formula_count(layer)?;
        let op_count = counting_pass(layer, variant, config.seed)?;
        if op_count.total() != formula {
            return Err(BenchError::CountMismatch {
                layer: *layer,
                counted: op_count.total(),
                formula,
            });
        }

        let mut work = Workload::new(layer, variant, config.seed)?;
        for _ in 0..config.warmup_runs {
            work.run(variant, &mut NoTally);
            black_box(work.checksum());
        }
        Ok(Self {
            layer: *layer,
            op_count,
            work,
            bytes,
            samples: Vec::with_capacity(config.timed_runs as usize),
            checksum: 0.0,
        })
    }

    fn time_once(&mut self, variant: KernelVariant) {
        let start = Instant::now();
        self.work.run(variant, &mut NoTally);
        let elapsed = start.elapsed();
        self.checksum = black_box(self.work.checksum());
        // Instant has nanosecond granularity; keep strictly positive times.
        self.samples.push(elapsed.as_secs_f64().max(1e-9) * 1e3);
    }

    fn finish(self) -> BenchResult {
        let stats = SampleStats::from_samples(&self.samples);
        BenchResult {
            layer: self.layer,
            op_count: self.op_count,
            median_ms: stats.median,
            mean_ms: stats.mean,
            std_ms: stats.std,
            checksum: self.checksum,
        }
    }
}

/// Counts, then times, one layer on the calling thread.
pub fn time_layer(
    layer: &LayerDescriptor,
    config: &BenchConfig,
) -> Result<BenchResult, BenchError> {
    assert!(config.timed_runs >= 1, "timed_runs must be at least 1");
    let mut prepared = Prepared::new(layer, config)?;
    for _ in 0..config.timed_runs {
        prepared.time_once(config.kernel_variant);
    }
    Ok(prepared.finish())
}

/// Median, mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

impl SampleStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty());
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { median, mean, std }
    }

    /// `std / mean`.
    pub fn coefficient_of_variation(&self) -> f64 {
        self.std / self.mean
    }
}

/// Outcome of a sweep benchmark. Layers over the memory cap are skipped, not fatal.
#[derive(Debug)]
pub struct SweepBenchReport {
    pub records: Vec<TimingRecord>,
    pub results: Vec<BenchResult>,
    pub skipped: Vec<(LayerDescriptor, BenchError)>,
}

impl SweepBenchReport {
    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty()
    }
}

/// Times every layer and writes a timing CSV labelled [`CPU_DEVICE`]. An
/// empty sweep yields a header-only file.
///
/// Consecutive layers whose buffers fit together under the memory cap are
/// timed round-robin, one run of each per round, so slow drift in machine
/// speed is shared across the group instead of landing on single layers.
/// Timed runs are still strictly serial.
pub fn run_sweep_bench(
    sweep: &[LayerDescriptor],
    config: &BenchConfig,
    out_path: impl AsRef<Path>,
) -> Result<SweepBenchReport, BenchError> {
    assert!(config.timed_runs >= 1, "timed_runs must be at least 1");
    let cap = config.memory_cap_mb.saturating_mul(1 << 20);
    let mut report = SweepBenchReport {
        records: Vec::new(),
        results: Vec::new(),
        skipped: Vec::new(),
    };
    let mut group: Vec<Prepared> = Vec::new();
    let flush = |group: &mut Vec<Prepared>, report: &mut SweepBenchReport| {
        for _ in 0..config.timed_runs {
            for p in group.iter_mut() {
                p.time_once(config.kernel_variant);
            }
        }
        for p in group.drain(..) {
            let result = p.finish();
            report.records.push(TimingRecord {
                layer: result.layer,
                device: CPU_DEVICE.to_owned(),
                time_ms: result.median_ms,
                runs: config.timed_runs,
                time_std_ms: Some(result.std_ms),
            });
            report.results.push(result);
        }
    };
    for layer in sweep {
        let needed = memory_estimate(layer, config.kernel_variant)?;
        let held: u64 = group.iter().map(|p| p.bytes).sum();
        if held.saturating_add(needed) > cap {
            flush(&mut group, &mut report);
        }
        match Prepared::new(layer, config) {
            Ok(p) => group.push(p),
            Err(err @ BenchError::MemoryCap { .. }) => report.skipped.push((*layer, err)),
            Err(err) => return Err(err),
        }
    }
    flush(&mut group, &mut report);
    let file = std::fs::File::create(out_path).map_err(DatasetError::from)?;
    write_dataset(std::io::BufWriter::new(file), &report.records)?;
    Ok(report)
}
