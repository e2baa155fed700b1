use std::io::Write;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::Serialize;
use yoloface::head::PostprocessOpts;

use crate::args::BenchArgs;
use crate::detect::build_detector;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchStats {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub images_per_s: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn stats(samples_ms: Vec<f64>) -> BenchStats {
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    BenchStats {
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        images_per_s: if mean > 0.0 { 1000.0 / mean } else { f64::INFINITY },
        mean_ms: mean,
        samples_ms,
    }
}

/// Deterministic textured input of the bench size.
fn synthetic(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        Rgb([(x * 7 + y * 3) as u8, ((x * 13) ^ (y * 5)) as u8, (x + y * 11) as u8])
    })
}

pub fn run(args: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.iters == 0 {
        return Err(CliError::usage("--iters must be >= 1"));
    }
    let m = &args.model;
    let detector = build_detector(&m.config, m.weights.as_deref(), m.seed, m.size, PostprocessOpts::detect())?;
    let img = synthetic(detector.size as u32);
    for _ in 0..args.warmup {
        detector.detect(&img)?;
    }
    let mut samples = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let t = Instant::now();
        detector.detect(&img)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let json = serde_json::to_string(&stats(samples))? + "\n";
    crate::emit(args.output.as_deref(), out, &json)
}
