//! Nearest-neighbour ABC predictive: suffixes of the training series whose
//! prefixes lie closest to the observed prefix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::simlab::blackbox::SimulatorSample;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Equally weighted ensemble of `k` suffixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcPredictive {
    /// `k × (T − t)`; row `m` is the suffix of `neighbors[m]`.
    pub members: DMatrix<f64>,
    pub neighbors: Vec<usize>,
    pub distances: Vec<f64>,
}

pub const DEFAULT_NEIGHBORS: usize = 100;

/// Ranks training series by Euclidean prefix distance (ties by index) and
/// keeps the suffixes of the `k` nearest.
pub fn abc_predict(train: &[SimulatorSample], prefix: &[f64], k: usize) -> Result<AbcPredictive> {
    if train.is_empty() {
        return Err(Error::contract("ABC needs a nonempty training set"));
    }
    let t_len = train[0].series.len();
    let t = prefix.len();
    if t == 0 || t >= t_len {
        return Err(Error::contract(format!("prefix length must satisfy 1 <= t < {t_len}")));
    }
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!("k must lie in 1..={}", train.len())));
    }
    if train.iter().any(|s| s.series.len() != t_len) {
        return Err(Error::contract("training series differ in length"));
    }
    let mut ranked: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d2: f64 = s.series[..t].iter().zip(prefix).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(k);
    let members = DMatrix::from_fn(k, t_len - t, |m, j| train[ranked[m].1].series[t + j]);
    Ok(AbcPredictive {
        members,
        neighbors: ranked.iter().map(|r| r.1).collect(),
        distances: ranked.iter().map(|r| r.0).collect(),
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl AbcPredictive {
    pub fn k(&self) -> usize {
        self.members.nrows()
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.members.column(j).mean()).collect()
    }

    /// Central ensemble quantile band.
    pub fn band(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::contract("level must lie in (0, 1)"));
        }
        let a = (1.0 - level) / 2.0;
        let mut lower = Vec::with_capacity(self.dim());
        let mut upper = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let mut col: Vec<f64> = self.members.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            lower.push(quantile(&col, a));
            upper.push(quantile(&col, 1.0 - a));
        }
        Ok((lower, upper))
    }

    /// Per-coordinate Silverman bandwidths
    /// `h_j = σ_j (4 / ((d + 2) k))^(1 / (d + 4))`, floored at 1e-6.
    pub fn bandwidths(&self) -> Vec<f64> {
        let (k, d) = (self.k() as f64, self.dim() as f64);
        let factor = (4.0 / ((d + 2.0) * k)).powf(1.0 / (d + 4.0));
        (0..self.dim())
            .map(|j| {
                let col = self.members.column(j);
                let sd = if self.k() > 1 {
                    col.variance().sqrt() * (k / (k - 1.0)).sqrt()
                } else {
                    0.0
                };
                (sd * factor).max(1e-6)
            })
            .collect()
    }

    fn kernel_log_density(&self, y: &[f64], h: &[f64], skip: Option<usize>) -> f64 {
        let norm: f64 = h.iter().map(|hj| -0.5 * LN_2PI - hj.ln()).sum();
        let terms: Vec<f64> = (0..self.k())
            .filter(|&m| Some(m) != skip)
            .map(|m| {
                let q: f64 = (0..self.dim())
                    .map(|j| {
                        let z = (y[j] - self.members[(m, j)]) / h[j];
                        z * z
                    })
                    .sum();
                norm - 0.5 * q
            })
            .collect();
        log_sum_exp(&terms) - (terms.len() as f64).ln()
    }

    /// Gaussian-kernel mixture density over the ensemble.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::contract("truth has the wrong dimension"));
        }
        Ok(self.kernel_log_density(y, &self.bandwidths(), None))
    }

    /// HDR membership under the kernel density; thresholds are quantiles of
    /// the leave-one-out density at the members.
    pub fn hdr_covered(&self, y: &[f64], levels: &[f64]) -> Result<Vec<bool>> {
        if self.k() < 2 {
            return Err(Error::contract("HDR needs at least two ensemble members"));
        }
        let h = self.bandwidths();
        let mut dens: Vec<f64> = (0..self.k())
            .map(|m| {
                let row: Vec<f64> = self.members.row(m).iter().copied().collect();
                self.kernel_log_density(&row, &h, Some(m))
            })
            .collect();
        dens.sort_by(f64::total_cmp);
        let d = self.log_density(y)?;
        Ok(levels.iter().map(|&l| d >= quantile(&dens, 1.0 - l)).collect())
    }
}
