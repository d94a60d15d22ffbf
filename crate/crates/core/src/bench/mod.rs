//! Timing harness for the scan engines and the superpixel compression.
//!
//! Wall times are the median of `trials` runs after `warmups` discarded runs,
//! executed inside a dedicated rayon pool (one thread unless asked otherwise).
//! FLOP columns come from the closed-form counters, never from timing.

use std::time::Instant;

use crate::error::{invalid, Result};
use crate::params::WeightTree;
use crate::pass::{Ctx, Mode};
use crate::spssm::{self, SpSsmConfig};
use crate::ssm::{scan_flops, scan_parallel, scan_recurrent, SsmParams};
use crate::{Rng, Scalar, Tape, Tensor};

pub const CSV_HEADER: &str = "label,length,time_ns_median,flops,ratio";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub length: usize,
    pub time_ns_median: u64,
    pub flops: u64,
    /// Rough traffic of the scanned lanes, in bytes.
    pub bytes: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.label, r.length, r.time_ns_median, r.flops, r.ratio));
        }
        out
    }

    pub fn with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a BenchRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub trials: usize,
    pub warmups: usize,
    pub threads: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            trials: 9,
            warmups: 3,
            threads: 1,
        }
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Median wall time of `f` in nanoseconds, clamped to at least 1.
pub fn time_median(timing: &Timing, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    if timing.trials == 0 {
        return Err(invalid("bench", "need at least one trial"));
    }
    for _ in 0..timing.warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(timing.trials);
    for _ in 0..timing.trials {
        let t0 = Instant::now();
        f()?;
        samples.push((t0.elapsed().as_nanos() as u64).max(1));
    }
    Ok(median(samples))
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| invalid("bench", e.to_string()))?;
    Ok(pool.install(f))
}

/// Operation count of the Blelloch engine on `len` tokens: every lane is
/// padded to a power of two, swept up and down with 3-flop affine combines,
/// then applied to its input with one multiply-add.
pub fn parallel_scan_flops(len: usize, channels: usize, d_state: usize) -> u64 {
    let base = scan_flops(len, channels, d_state);
    let lanes = (channels * d_state) as u64;
    let n = len.next_power_of_two() as u64;
    let sweep = if len == 0 { 0 } else { lanes * (6 * (n - 1) + 2 * len as u64) };
    base.projections + base.discretize + sweep + base.readout
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanBench {
    pub lengths: Vec<usize>,
    pub d_state: usize,
    pub channels: usize,
    pub timing: Timing,
    pub seed: u64,
}

impl Default for ScanBench {
    fn default() -> Self {
        ScanBench {
            lengths: vec![256, 1024, 4096, 16384],
            d_state: 16,
            channels: 16,
            timing: Timing::default(),
            seed: 0,
        }
    }
}

/// One `recurrent` and one `parallel` row per length. `ratio` is the row's
/// FLOPs over the recurrent FLOPs at the first length.
pub fn bench_scan<T: Scalar>(cfg: &ScanBench) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) {
        return Err(invalid("bench-scan", "lengths must be non-empty and positive"));
    }
    let mut rng = Rng::new(cfg.seed);
    let params = SsmParams::<T>::init(cfg.channels, cfg.d_state, &mut rng);
    let reference = scan_flops(cfg.lengths[0], cfg.channels, cfg.d_state).total() as f64;
    let elem = std::mem::size_of::<T>() as u64;
    let mut report = BenchReport::default();
    for &len in &cfg.lengths {
        let x = Tensor::<T>::from_fn(&[len, cfg.channels], |_| T::lit(rng.normal()));
        // a, u and h for every lane and token
        let bytes = 3 * (len * cfg.channels * cfg.d_state) as u64 * elem;
        let rec = in_pool(cfg.timing.threads, || {
            time_median(&cfg.timing, || scan_recurrent(&params, &x).map(drop))
        })??;
        let flops = scan_flops(len, cfg.channels, cfg.d_state).total();
        report.rows.push(BenchRow {
            label: "recurrent".into(),
            length: len,
            time_ns_median: rec,
            flops,
            bytes,
            ratio: flops as f64 / reference,
        });
        let par = in_pool(cfg.timing.threads, || {
            time_median(&cfg.timing, || scan_parallel(&params, &x).map(drop))
        })??;
        let flops = parallel_scan_flops(len, cfg.channels, cfg.d_state);
        report.rows.push(BenchRow {
            label: "parallel".into(),
            length: len,
            time_ns_median: par,
            flops,
            bytes,
            ratio: flops as f64 / reference,
        });
    }
    Ok(report)
}

/// Least-squares line through `(ln x, ln y)`: `(slope, r²)`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("fit", "need at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(invalid("fit", "log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit", "all x values coincide"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, r2))
}

/// Slope and r² of the recurrent rows' time against length.
pub fn recurrent_scaling(report: &BenchReport) -> Result<(f64, f64)> {
    let rows: Vec<&BenchRow> = report.with_label("recurrent").collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.time_ns_median as f64).collect();
    loglog_fit(&xs, &ys)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpSsmBench {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub block: SpSsmConfig,
    pub timing: Timing,
    pub seed: u64,
}

impl SpSsmBench {
    pub fn new(h: usize, w: usize, scale: usize, superpixels: usize) -> Self {
        SpSsmBench {
            h,
            w,
            channels: 16,
            block: SpSsmConfig {
                scale,
                superpixels,
                ..Default::default()
            },
            timing: Timing::default(),
            seed: 0,
        }
    }
}

/// Rows `superpixel` (scan over `M` tokens), `dense` (scan over every pooled
/// pixel) and `block` (the whole inference-mode block). The `superpixel`
/// ratio is dense over superpixel scan FLOPs; the others carry 1.
pub fn bench_spssm<T: Scalar>(cfg: &SpSsmBench) -> Result<BenchReport> {
    let b = &cfg.block;
    b.validate()?;
    let counts = spssm::flops(b, cfg.channels, cfg.h, cfg.w)?;
    let mut rng = Rng::new(cfg.seed);
    let params = SsmParams::<T>::init(cfg.channels, b.ssm.d_state, &mut rng);
    let elem = std::mem::size_of::<T>() as u64;
    let lane_bytes = |len: usize| 3 * (len * cfg.channels * b.ssm.d_state) as u64 * elem;
    let scan_time = |len: usize, rng: &mut Rng| -> Result<u64> {
        let x = Tensor::<T>::from_fn(&[len, cfg.channels], |_| T::lit(rng.normal()));
        in_pool(cfg.timing.threads, || time_median(&cfg.timing, || scan_recurrent(&params, &x).map(drop)))?
    };
    let mut report = BenchReport::default();
    report.rows.push(BenchRow {
        label: "superpixel".into(),
        length: counts.scan_tokens,
        time_ns_median: scan_time(counts.scan_tokens, &mut rng)?,
        flops: counts.scan_flops,
        bytes: lane_bytes(counts.scan_tokens),
        ratio: counts.ratio(),
    });
    report.rows.push(BenchRow {
        label: "dense".into(),
        length: counts.dense_tokens,
        time_ns_median: scan_time(counts.dense_tokens, &mut rng)?,
        flops: counts.dense_flops,
        bytes: lane_bytes(counts.dense_tokens),
        ratio: 1.0,
    });

    let mut tree = WeightTree::<T>::new();
    spssm::init(&mut tree, "sp", cfg.channels, b, &mut rng)?;
    let x = Tensor::<T>::from_fn(&[1, cfg.channels, cfg.h, cfg.w], |_| T::lit(rng.normal()));
    let block_time = in_pool(cfg.timing.threads, || {
        time_median(&cfg.timing, || {
            let tape = Tape::no_grad();
            let bound = tree.bind(&tape, false);
            let mut ctx = Ctx::new(Mode::Infer, 0);
            spssm::sp_ssm_forward(&tape.constant(x.clone()), b, &bound.root().sub("sp"), &mut ctx).map(drop)
        })
    })??;
    report.rows.push(BenchRow {
        label: "block".into(),
        length: counts.scan_tokens,
        time_ns_median: block_time,
        flops: 2 * spssm::macs(b, cfg.channels, cfg.h, cfg.w),
        bytes: (cfg.channels * cfg.h * cfg.w) as u64 * elem * 2,
        ratio: 1.0,
    });
    Ok(report)
}

#[cfg(test)]
mod tests;
