use std::time::Instant;

use super::sweep::{Localizer, LocalizerContext};
use crate::dataset::{generate_example, DatasetParams};
use crate::error::{Error, Result};
use crate::forward::{LeadFieldMatrix, Snr, SourceSpace};
use crate::par::Exec;
use crate::rng;
use crate::signal::Correlation;

/// Warm-up continues until both bounds are met, so fast localizers reach a
/// steady cache state before measurement.
const WARMUP_MIN_RUNS: usize = 2;
const WARMUP_MIN_SECONDS: f64 = 0.25;
pub const MIN_REPEATS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub algorithm: String,
    pub n_sources: usize,
    pub n_samples: usize,
    pub median_ms: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn median_ms(&self, algorithm: &str, n_sources: usize, n_samples: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.algorithm == algorithm && r.n_sources == n_sources && r.n_samples == n_samples
            })
            .map(|r| r.median_ms)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median single-thread wall-clock time per localization, with repeats
/// interleaved across rows after a per-row warm-up. For every
/// (Q, N) pair all applicable localizers see the same recording; models
/// whose input or output shape does not fit the pair are skipped.
pub fn run_timing_benchmark(
    localizers: &[Localizer],
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    q_values: &[usize],
    n_samples_values: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<TimingReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::invalid(format!(
            "timing needs at least {MIN_REPEATS} repeats"
        )));
    }
    // one cell per (Q, N, localizer) row, in report order
    let mut cells = Vec::new();
    for &q in q_values {
        for &n in n_samples_values {
            let params = DatasetParams {
                n_sources: q,
                count: 1,
                snr: Snr::Db(10.0),
                correlation: Correlation::Fixed(0.0),
                n_samples: n,
                amplitude: 1.0,
                seed: rng::derive_seed(seed, &[q as u64, n as u64]),
            };
            let ex = generate_example(lead_field, space, &params, 0)?;
            for loc in localizers {
                if loc.check_shape(lead_field.n_sensors(), n, q).is_ok() {
                    cells.push((loc, q, n, ex.measurement.clone()));
                }
            }
        }
    }
    let contexts: Vec<_> = cells
        .iter()
        .map(|(loc, ..)| LocalizerContext::new(loc, lead_field, space, Exec::Serial))
        .collect();
    for (ctx, (_, q, _, y)) in contexts.iter().zip(&cells) {
        let warm = Instant::now();
        let mut runs = 0;
        while runs < WARMUP_MIN_RUNS || warm.elapsed().as_secs_f64() < WARMUP_MIN_SECONDS {
            ctx.localize(y, *q)?;
            runs += 1;
        }
    }
    // Repeats cycle through all rows, so slow drift in machine load hits
    // every row alike instead of whichever row was running at the time.
    let mut times = vec![Vec::with_capacity(repeats); cells.len()];
    for _ in 0..repeats {
        for ((ctx, (_, q, _, y)), t) in contexts.iter().zip(&cells).zip(&mut times) {
            let start = Instant::now();
            let out = ctx.localize(y, *q)?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    let rows = cells
        .iter()
        .zip(&mut times)
        .map(|((loc, q, n, _), t)| TimingRow {
            algorithm: loc.name().to_string(),
            n_sources: *q,
            n_samples: *n,
            median_ms: median(t),
            repeats,
        })
        .collect();
    Ok(TimingReport { rows })
}
