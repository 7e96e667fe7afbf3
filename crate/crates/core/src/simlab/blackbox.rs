//! Fixed-length black-box simulators and their sample sets.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::rng;

/// Anything that draws a whole series of fixed length on `t = 1..T`.
pub trait BlackBoxSimulator: Sync {
    fn series_length(&self) -> usize;

    /// One series plus an opaque record of the parameters behind it.
    fn simulate(&self, rng: &mut rng::Rng) -> (Vec<f64>, serde_json::Value);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSample {
    pub series: Vec<f64>,
    pub seed: u64,
    pub params: serde_json::Value,
}

/// Rejection rule on the original scale: accept a log-scale series only if
/// `exp(y_t)` exceeds `threshold` somewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakRule {
    pub threshold: f64,
    pub log_scale: bool,
}

impl Default for PeakRule {
    fn default() -> Self {
        Self {
            threshold: 100.0,
            log_scale: true,
        }
    }
}

impl PeakRule {
    pub fn accepts(&self, series: &[f64]) -> bool {
        series
            .iter()
            .any(|&y| if self.log_scale { y.exp() } else { y } > self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxRun {
    pub samples: Vec<SimulatorSample>,
    pub attempts: usize,
}

impl BlackBoxRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.attempts.max(1) as f64
    }
}

pub const MIN_ACCEPTANCE: f64 = 1e-3;
pub const ACCEPTANCE_WINDOW: usize = 100_000;

/// Draws `count` accepted series. Attempt `a` uses seed `split(seed, a)`,
/// which is recorded with the sample.
pub fn simulate_blackbox(
    generator: &dyn BlackBoxSimulator,
    count: usize,
    seed: u64,
    rule: Option<&PeakRule>,
) -> Result<BlackBoxRun> {
    let t = generator.series_length();
    let mut samples = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while samples.len() < count {
        if attempts >= ACCEPTANCE_WINDOW && (samples.len() as f64) < MIN_ACCEPTANCE * attempts as f64 {
            return Err(Error::numerical(
                "black-box simulation",
                format!(
                    "acceptance rate {} after {attempts} attempts",
                    samples.len() as f64 / attempts as f64
                ),
            ));
        }
        let s = rng::split(seed, attempts as u64);
        attempts += 1;
        let (series, params) = generator.simulate(&mut rng::seeded(s));
        if series.len() != t {
            return Err(Error::contract(format!(
                "simulator returned {} values, expected {t}",
                series.len()
            )));
        }
        if rule.is_none_or(|r| r.accepts(&series)) {
            samples.push(SimulatorSample {
                series,
                seed: s,
                params,
            });
        }
    }
    Ok(BlackBoxRun { samples, attempts })
}

/// Seasonal sinusoid times a random log-linear trend with log-normal noise,
/// returned on the log scale. Stands in for an epidemic simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySeasonal {
    pub length: usize,
    pub period: f64,
    pub level_mean: f64,
    pub level_sd: f64,
    pub trend_sd: f64,
    pub amplitude: (f64, f64),
    pub noise_sd: f64,
}

impl Default for ToySeasonal {
    fn default() -> Self {
        Self {
            length: 128,
            period: 12.0,
            level_mean: 4.0,
            level_sd: 0.5,
            trend_sd: 0.5,
            amplitude: (0.2, 0.8),
            noise_sd: 0.1,
        }
    }
}

impl BlackBoxSimulator for ToySeasonal {
    fn series_length(&self) -> usize {
        self.length
    }

    fn simulate(&self, rng: &mut rng::Rng) -> (Vec<f64>, serde_json::Value) {
        let level = self.level_mean + self.level_sd * rng.sample::<f64, _>(StandardNormal);
        let trend = self.trend_sd * rng.sample::<f64, _>(StandardNormal);
        let amp = rng.random_range(self.amplitude.0..self.amplitude.1);
        let phase = rng.random_range(0.0..2.0 * PI);
        let n = self.length as f64;
        let series = (1..=self.length)
            .map(|t| {
                let t = t as f64;
                let season = (1.0 + amp * (2.0 * PI * t / self.period + phase).sin()).ln();
                level + trend * t / n + season + self.noise_sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let params = serde_json::json!({ "level": level, "trend": trend, "amplitude": amp, "phase": phase });
        (series, params)
    }
}

/// Series as subjects on `t = 1..T`; points after `prefix` become held out.
pub fn samples_to_dataset(samples: &[SimulatorSample], prefix: Option<usize>) -> Result<LongitudinalDataset> {
    let subjects = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cut = prefix.unwrap_or(s.series.len()).min(s.series.len());
            let times: Vec<f64> = (1..=s.series.len()).map(|t| t as f64).collect();
            let mut sub = Subject::new(format!("s{i}"), times[..cut].to_vec(), s.series[..cut].to_vec());
            sub.holdout_times = times[cut..].to_vec();
            sub.holdout_values = s.series[cut..].to_vec();
            sub
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seeds: Vec<u64>,
    params: Vec<serde_json::Value>,
}

/// Writes the series as a CSV matrix (one row per sample, columns
/// `y1..yT`) and a JSON sidecar of seeds and parameters.
pub fn write_samples(
    samples: &[SimulatorSample],
    csv_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let t = samples.first().map_or(0, |s| s.series.len());
    w.write_record((1..=t).map(|j| format!("y{j}")))?;
    for s in samples {
        w.write_record(s.series.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    let side = Sidecar {
        seeds: samples.iter().map(|s| s.seed).collect(),
        params: samples.iter().map(|s| s.params.clone()).collect(),
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_samples(csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<Vec<SimulatorSample>> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let series = rec
            .iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let (seed, params) = match (side.seeds.get(i), side.params.get(i)) {
            (Some(&s), Some(p)) => (s, p.clone()),
            _ => return Err(Error::contract("sidecar has fewer entries than the sample matrix")),
        };
        out.push(SimulatorSample { series, seed, params });
    }
    Ok(out)
}
