// SPDX-License-Identifier: Apache-2.0

//! Latency statistics: nearest-rank percentiles, sample standard deviation
//! and the empirical CDF.

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum StatsError {
    #[error("need at least {needed} samples, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
}

fn require(samples: &[f64], needed: usize) -> Result<(), StatsError> {
    if samples.len() < needed {
        return Err(StatsError::InsufficientSamples {
            needed,
            have: samples.len(),
        });
    }
    Ok(())
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// The `ceil(pct/100 * n)`-th smallest sample (1-based), for integer `pct`
/// in 1..=100.
pub fn percentile_nearest_rank(samples: &[f64], pct: u32) -> Result<f64, StatsError> {
    require(samples, 1)?;
    assert!((1..=100).contains(&pct), "percentile {pct} outside 1..=100");
    let n = samples.len();
    let rank = (pct as usize * n).div_ceil(100);
    Ok(sorted(samples)[rank.max(1) - 1])
}

pub fn p95(samples: &[f64]) -> Result<f64, StatsError> {
    percentile_nearest_rank(samples, 95)
}

pub fn mean(samples: &[f64]) -> Result<f64, StatsError> {
    require(samples, 1)?;
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

pub fn median(samples: &[f64]) -> Result<f64, StatsError> {
    percentile_nearest_rank(samples, 50)
}

/// Sample standard deviation (n - 1 denominator), two-pass.
pub fn sample_stddev(samples: &[f64]) -> Result<f64, StatsError> {
    require(samples, 2)?;
    let m = mean(samples)?;
    let ss: f64 = samples.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((ss / (samples.len() - 1) as f64).sqrt())
}

/// Distinct sample values with the fraction of samples at or below each.
pub fn empirical_cdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in s.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub p95: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl Stats {
    pub fn compute(samples: &[f64]) -> Result<Stats, StatsError> {
        Ok(Stats {
            n: samples.len(),
            p95: p95(samples)?,
            mean: mean(samples)?,
            stddev: sample_stddev(samples)?,
        })
    }
}

/// Boot durations of one setup, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub label: String,
    pub samples_ms: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, samples_ms: Vec<f64>) -> Self {
        SampleSet {
            label: label.into(),
            samples_ms,
        }
    }

    pub fn stats(&self) -> Result<Stats, StatsError> {
        Stats::compute(&self.samples_ms)
    }

    pub fn p95(&self) -> Result<f64, StatsError> {
        p95(&self.samples_ms)
    }

    pub fn median(&self) -> Result<f64, StatsError> {
        median(&self.samples_ms)
    }

    pub fn cdf(&self) -> Vec<(f64, f64)> {
        empirical_cdf(&self.samples_ms)
    }
}
