//! Prediction metrics: log-RMSE, negative log-score, pointwise and
//! elliptical (HDR) coverage.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::predict::{self, PluginParams, PredictiveResult};
use crate::rng;
use crate::simlab::abc::AbcPredictive;

/// What `evaluate` needs from a predictive distribution over held-out points.
pub trait Predictive {
    fn mean(&self) -> Vec<f64>;
    fn band(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>)>;
    fn neg_log_score(&self, y: &[f64]) -> Result<f64>;
    fn hdr_covered(&self, y: &[f64], levels: &[f64], n_draws: usize, seed: u64) -> Result<Vec<bool>>;
}

impl Predictive for PredictiveResult<f64> {
    fn mean(&self) -> Vec<f64> {
        PredictiveResult::mean(self).iter().copied().collect()
    }

    fn band(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        predict::pointwise_band(self, level)
    }

    fn neg_log_score(&self, y: &[f64]) -> Result<f64> {
        predict::neg_log_score(self, y)
    }

    fn hdr_covered(&self, y: &[f64], levels: &[f64], n_draws: usize, seed: u64) -> Result<Vec<bool>> {
        predict::elliptical_coverage_curve(self, y, levels, n_draws, seed)
    }
}

impl Predictive for AbcPredictive {
    fn mean(&self) -> Vec<f64> {
        AbcPredictive::mean(self)
    }

    fn band(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        AbcPredictive::band(self, level)
    }

    fn neg_log_score(&self, y: &[f64]) -> Result<f64> {
        Ok(-self.log_density(y)?)
    }

    fn hdr_covered(&self, y: &[f64], levels: &[f64], _n_draws: usize, _seed: u64) -> Result<Vec<bool>> {
        AbcPredictive::hdr_covered(self, y, levels)
    }
}

/// One subject's held-out prediction problem.
#[derive(Debug, Clone)]
pub struct Case<P> {
    pub key: String,
    pub prediction: P,
    /// Held-out observations, scored by the log-score and coverage.
    pub truth: Vec<f64>,
    /// Values the RMSE is measured against (the noise-free signal when
    /// known, otherwise `truth`).
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub levels: Vec<f64>,
    pub elliptical_levels: Vec<f64>,
    pub hdr_draws: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            levels: vec![0.05, 0.5, 0.95],
            elliptical_levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            hdr_draws: predict::HDR_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub level: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub rmse: f64,
    pub log_rmse: f64,
    /// Mean over subjects of `−log p(ỹ_i | y_i)`.
    pub neg_log_score: f64,
    pub n_subjects: usize,
    pub n_points: usize,
    pub pointwise: Vec<LevelCoverage>,
    pub elliptical: Vec<LevelCoverage>,
}

/// FNV-1a; keys the per-subject HDR stream by id so results do not depend
/// on subject order.
fn key_hash(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Pooled RMSE over all held-out points, mean per-subject log-score, and
/// coverage rates. Cases are processed in key order.
pub fn evaluate<P: Predictive>(cases: &[Case<P>], opts: &EvalOptions) -> Result<ReplicateMetrics> {
    if cases.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].key.cmp(&cases[b].key));
    let mut sq = 0.0;
    let mut points = 0usize;
    let mut nls = 0.0;
    let mut inside = vec![0usize; opts.levels.len()];
    let mut hdr = vec![0usize; opts.elliptical_levels.len()];
    for &c in &order {
        let case = &cases[c];
        let mean = case.prediction.mean();
        if mean.len() != case.truth.len() || mean.len() != case.target.len() {
            return Err(Error::contract(format!("case {} has misaligned dimensions", case.key)));
        }
        sq += mean
            .iter()
            .zip(&case.target)
            .map(|(m, y)| (m - y) * (m - y))
            .sum::<f64>();
        points += mean.len();
        nls += case.prediction.neg_log_score(&case.truth)?;
        for (hit, &level) in inside.iter_mut().zip(&opts.levels) {
            let (lo, hi) = case.prediction.band(level)?;
            *hit += case
                .truth
                .iter()
                .enumerate()
                .filter(|&(j, y)| lo[j] <= *y && *y <= hi[j])
                .count();
        }
        if !opts.elliptical_levels.is_empty() {
            let seed = rng::split(opts.seed, key_hash(&case.key));
            let cov = case
                .prediction
                .hdr_covered(&case.truth, &opts.elliptical_levels, opts.hdr_draws, seed)?;
            for (h, c) in hdr.iter_mut().zip(cov) {
                *h += c as usize;
            }
        }
    }
    let rmse = (sq / points as f64).sqrt();
    let n = cases.len();
    Ok(ReplicateMetrics {
        rmse,
        log_rmse: rmse.ln(),
        neg_log_score: nls / n as f64,
        n_subjects: n,
        n_points: points,
        pointwise: opts
            .levels
            .iter()
            .zip(&inside)
            .map(|(&level, &h)| LevelCoverage {
                level,
                coverage: h as f64 / points as f64,
            })
            .collect(),
        elliptical: opts
            .elliptical_levels
            .iter()
            .zip(&hdr)
            .map(|(&level, &h)| LevelCoverage {
                level,
                coverage: h as f64 / n as f64,
            })
            .collect(),
    })
}

/// Plug-in predictives for every subject with held-out points. `signal`
/// replaces the held-out values as the RMSE target when given.
pub fn dmlmm_cases(
    plugin: &PluginParams<f64>,
    data: &LongitudinalDataset,
    signal: Option<&[Vec<f64>]>,
) -> Result<Vec<Case<PredictiveResult<f64>>>> {
    let mut out = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        if s.holdout_times.is_empty() {
            continue;
        }
        let mut idx: Vec<usize> = (0..s.holdout_times.len()).collect();
        idx.sort_by(|&a, &b| s.holdout_times[a].total_cmp(&s.holdout_times[b]));
        let grid: Vec<f64> = idx.iter().map(|&j| s.holdout_times[j]).collect();
        let truth: Vec<f64> = idx.iter().map(|&j| s.holdout_values[j]).collect();
        let target = match signal {
            Some(sig) => {
                let row = sig
                    .get(i)
                    .filter(|r| r.len() == idx.len())
                    .ok_or_else(|| Error::contract(format!("signal missing for subject {}", s.id)))?;
                idx.iter().map(|&j| row[j]).collect()
            }
            None => truth.clone(),
        };
        let prediction = predict::predictive(plugin, &s.times, &s.values, &grid, &s.id)?;
        out.push(Case {
            key: s.id.clone(),
            prediction,
            truth,
            target,
        });
    }
    if out.is_empty() {
        return Err(Error::contract("dataset has no held-out points"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single replicate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd =
            (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub replicates: Vec<ReplicateMetrics>,
    /// Metric name to summary, in a fixed order.
    pub summary: Vec<(String, Summary)>,
}

impl MetricsReport {
    pub fn new(replicates: Vec<ReplicateMetrics>) -> Result<Self> {
        if replicates.is_empty() {
            return Err(Error::contract("no replicates"));
        }
        let mut summary = Vec::new();
        let col = |f: &dyn Fn(&ReplicateMetrics) -> f64| -> Vec<f64> { replicates.iter().map(f).collect() };
        summary.push(("log_rmse".to_string(), Summary::of(&col(&|r| r.log_rmse))));
        summary.push(("neg_log_score".to_string(), Summary::of(&col(&|r| r.neg_log_score))));
        for (i, lc) in replicates[0].pointwise.iter().enumerate() {
            summary.push((
                format!("pointwise_{}", lc.level),
                Summary::of(&col(&|r| r.pointwise[i].coverage)),
            ));
        }
        for (i, lc) in replicates[0].elliptical.iter().enumerate() {
            summary.push((
                format!("elliptical_{}", lc.level),
                Summary::of(&col(&|r| r.elliptical[i].coverage)),
            ));
        }
        Ok(Self { replicates, summary })
    }

    pub fn get(&self, name: &str) -> Option<Summary> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    /// Flat `metric,mean[,sd]` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_sd = self.replicates.len() > 1;
        let mut w = csv::Writer::from_writer(writer);
        if with_sd {
            w.write_record(["metric", "mean", "sd"])?;
        } else {
            w.write_record(["metric", "mean"])?;
        }
        for (name, s) in &self.summary {
            let mut row = vec![name.clone(), fmt_f64(s.mean)];
            if let Some(sd) = s.sd {
                row.push(fmt_f64(sd));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract("labelings must be nonempty and of equal length"));
    }
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |n: f64| n * (n - 1.0) / 2.0;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let total = c2(a.len() as f64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-300 {
        // both labelings trivial
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Dense indices for string labels, in first-appearance order.
pub fn label_indices(labels: &[String]) -> Vec<usize> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = seen.len();
            *seen.entry(l.as_str()).or_insert(next)
        })
        .collect()
}
