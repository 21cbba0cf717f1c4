//! Explanation latency and peak tracked memory as a function of output
//! length, gradient replay versus the proxy head.

use std::time::Instant;

pub use crate::alloc::track_allocations;
use crate::error::{Error, Result};
use crate::fastrm::FastRm;
use crate::relevancy::{compute_relevancy, extract_vision};
use crate::toy::generate::{DecodeOptions, GenerationTrace};
use crate::toy::model::ModelInput;
use crate::toy::ToyModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    Baseline,
    FastRm,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Baseline => "baseline",
            BenchMethod::FastRm => "fastrm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: BenchMethod,
    pub n_tokens: usize,
    pub run_idx: usize,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub sweep: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sweep: (1..=10).map(|k| 10 * k).collect(),
            repeats: 5,
        }
    }
}

/// Parses `start:end:step`.
pub fn parse_sweep(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad sweep {s:?}"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, step] if step > 0 && a > 0 && a <= b => Ok((a..=b).step_by(step).collect()),
        _ => Err(Error::Config(format!("sweep {s:?} is not start:end:step"))),
    }
}

/// Every per-token vision map of `trace` by gradient replay.
pub fn explain_baseline(model: &ToyModel, trace: &GenerationTrace) -> Result<Vec<Vec<f64>>> {
    (0..trace.n_out())
        .map(|i| extract_vision(&compute_relevancy(model, trace, i)?, trace.n_patches))
        .collect()
}

/// Every per-token vision map of `trace` from the proxy head.
pub fn explain_fastrm(head: &FastRm, trace: &GenerationTrace) -> Result<Vec<Vec<f64>>> {
    (0..trace.n_out())
        .map(|i| head.forward_at(&trace.hidden, trace.n_in() + i, trace.n_patches))
        .collect()
}

fn measure(f: impl Fn() -> Result<Vec<Vec<f64>>>) -> Result<(f64, usize)> {
    let start = Instant::now();
    let (maps, peak) = track_allocations(&f)?;
    let seconds = start.elapsed().as_secs_f64();
    maps?;
    Ok((seconds, peak))
}

/// Generates exactly `n` tokens for each sweep point, then times the
/// explanation of all of them by both methods. One discarded warm-up run
/// precedes the recorded repeats.
pub fn run_bench(model: &ToyModel, head: &FastRm, prompt: &ModelInput, config: &BenchConfig) -> Result<Vec<BenchRecord>> {
    crate::alloc::tune_malloc();
    let mut records = Vec::new();
    for &n in &config.sweep {
        let trace = model.generate_input(
            prompt,
            DecodeOptions {
                forced_len: Some(n),
                ..Default::default()
            },
        )?;
        for method in [BenchMethod::Baseline, BenchMethod::FastRm] {
            let run = || match method {
                BenchMethod::Baseline => measure(|| explain_baseline(model, &trace)),
                BenchMethod::FastRm => measure(|| explain_fastrm(head, &trace)),
            };
            run()?;
            for run_idx in 0..config.repeats {
                let (seconds, peak_bytes) = run()?;
                records.push(BenchRecord {
                    method,
                    n_tokens: n,
                    run_idx,
                    seconds,
                    peak_bytes,
                });
            }
        }
    }
    Ok(records)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per sweep point: `(n_tokens, median seconds, peak bytes)`.
pub fn summarize(records: &[BenchRecord], method: BenchMethod) -> Vec<(usize, f64, usize)> {
    let mut ns: Vec<usize> = records.iter().filter(|r| r.method == method).map(|r| r.n_tokens).collect();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let runs: Vec<&BenchRecord> = records.iter().filter(|r| r.method == method && r.n_tokens == n).collect();
            let mut secs: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
            let peak = runs.iter().map(|r| r.peak_bytes).max().unwrap_or(0);
            (n, median(&mut secs), peak)
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: points.len() });
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Data("log-log fit needs positive coordinates".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("method,n_tokens,run_idx,seconds,peak_bytes\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.9},{}\n",
            r.method.name(),
            r.n_tokens,
            r.run_idx,
            r.seconds,
            r.peak_bytes
        ));
    }
    out
}
