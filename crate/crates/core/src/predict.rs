//! Plug-in predictive distributions over unobserved time points.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::gmm::{kl_mc, GaussianMixture, LinearObservationMap};
use crate::rng;
use crate::scalar::Scalar;

/// Point estimate `η̂`: mixture prior over `β`, noise variance, basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PluginParams<T: Scalar> {
    pub beta_prior: GaussianMixture<T>,
    pub sigma2: T,
    pub basis: BasisSpec,
}

impl<T: Scalar> PluginParams<T> {
    pub fn new(beta_prior: GaussianMixture<T>, sigma2: T, basis: BasisSpec) -> Result<Self> {
        if beta_prior.dim() != basis.dimension() {
            return Err(Error::contract(format!(
                "mixture dimension {} differs from basis dimension {}",
                beta_prior.dim(),
                basis.dimension()
            )));
        }
        if !(sigma2 > T::zero()) || !sigma2.is_finite() {
            return Err(Error::contract("sigma2 must be positive"));
        }
        Ok(Self {
            beta_prior,
            sigma2,
            basis,
        })
    }

    fn design(&self, times: &[T]) -> Result<DMatrix<T>> {
        Ok(self.basis.eval(times)?.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PredictiveResult<T: Scalar> {
    pub mixture: GaussianMixture<T>,
    pub grid: Vec<T>,
    pub tilde_weights: DVector<T>,
    /// Subject id, or `"marginal"` when nothing was observed.
    pub provenance: String,
}

impl<T: Scalar> PredictiveResult<T> {
    pub fn mean(&self) -> DVector<T> {
        self.mixture.moments().0
    }
}

fn check_grid<T: Scalar>(grid: &[T]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::contract("prediction grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract("prediction grid must be strictly increasing"));
    }
    Ok(())
}

/// `p(ỹ | y_obs, η̂)` on `t_grid`; falls back to the marginal when `t_obs` is empty.
pub fn predictive<T: Scalar>(
    plugin: &PluginParams<T>,
    t_obs: &[T],
    y_obs: &[T],
    t_grid: &[T],
    provenance: &str,
) -> Result<PredictiveResult<T>> {
    if t_obs.len() != y_obs.len() {
        return Err(Error::contract("observation times and values differ in length"));
    }
    if t_obs.is_empty() {
        return marginal_predictive(plugin, t_grid);
    }
    check_grid(t_grid)?;
    let map = LinearObservationMap::new(plugin.design(t_obs)?, plugin.design(t_grid)?, plugin.sigma2)?;
    let y = DVector::from_column_slice(y_obs);
    let mixture = plugin.beta_prior.condition(&map, &y)?;
    Ok(PredictiveResult {
        tilde_weights: mixture.weights().clone(),
        mixture,
        grid: t_grid.to_vec(),
        provenance: provenance.to_string(),
    })
}

/// Components `(w_k, B μ_k, B Σ_k Bᵀ + σ̂² I)` on `t_grid`.
pub fn marginal_predictive<T: Scalar>(plugin: &PluginParams<T>, t_grid: &[T]) -> Result<PredictiveResult<T>> {
    check_grid(t_grid)?;
    let mixture = plugin.beta_prior.pushforward(&plugin.design(t_grid)?, plugin.sigma2)?;
    Ok(PredictiveResult {
        tilde_weights: mixture.weights().clone(),
        mixture,
        grid: t_grid.to_vec(),
        provenance: "marginal".into(),
    })
}

/// Quantile of the scalar marginal at grid index `i` by bisection on its CDF.
pub fn marginal_quantile<T: Scalar>(result: &PredictiveResult<T>, i: usize, p: f64) -> Result<T> {
    let m = result.mixture.marginal(i)?;
    let (mean, var) = m.moments();
    let (mu, sd) = (mean[0].as_f64(), var[(0, 0)].as_f64().max(0.0).sqrt());
    let cdf = |x: f64| -> Result<f64> { Ok(m.cdf_scalar(T::lit(x))?.as_f64()) };
    let mut half = 12.0 * sd.max(1e-12);
    let (mut lo, mut hi) = (mu - half, mu + half);
    let mut tries = 0;
    while !(cdf(lo)? <= p && cdf(hi)? >= p) {
        tries += 1;
        if tries > 60 {
            return Err(Error::numerical(
                "pointwise band",
                format!("could not bracket quantile {p}"),
            ));
        }
        half *= 2.0;
        lo = mu - half;
        hi = mu + half;
    }
    for _ in 0..300 {
        if hi - lo <= 1e-8 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if cdf(mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(T::lit(0.5 * (lo + hi)))
}

/// Central `level` interval of each scalar marginal.
pub fn pointwise_band<T: Scalar>(result: &PredictiveResult<T>, level: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::contract("level must lie in (0, 1)"));
    }
    let alpha = 1.0 - level;
    let t = result.mixture.dim();
    let mut lower = Vec::with_capacity(t);
    let mut upper = Vec::with_capacity(t);
    for i in 0..t {
        lower.push(marginal_quantile(result, i, alpha / 2.0)?);
        upper.push(marginal_quantile(result, i, 1.0 - alpha / 2.0)?);
    }
    Ok((lower, upper))
}

/// `P(ỹ_i ≤ threshold)`.
pub fn threshold_risk<T: Scalar>(result: &PredictiveResult<T>, grid_index: usize, threshold: T) -> Result<T> {
    if grid_index >= result.mixture.dim() {
        return Err(Error::contract(format!("grid index {grid_index} out of range")));
    }
    result.mixture.marginal(grid_index)?.cdf_scalar(threshold)
}

/// Posterior component probabilities of a subject and the most probable
/// component (lowest index on ties).
pub fn cluster_assign<T: Scalar>(plugin: &PluginParams<T>, t_obs: &[T], y_obs: &[T]) -> Result<(usize, DVector<T>)> {
    if t_obs.is_empty() || t_obs.len() != y_obs.len() {
        return Err(Error::contract("cluster assignment needs at least one observation"));
    }
    let w = plugin.beta_prior.posterior_weights(
        &plugin.design(t_obs)?,
        plugin.sigma2,
        &DVector::from_column_slice(y_obs),
    )?;
    let mut best = 0;
    for k in 1..w.len() {
        if w[k] > w[best] {
            best = k;
        }
    }
    Ok((best, w))
}

pub const HDR_DRAWS: usize = 100_000;

/// Log-density thresholds of the highest-density regions at `levels`,
/// estimated from `n_draws` mixture samples.
pub fn hdr_thresholds<T: Scalar>(
    mixture: &GaussianMixture<T>,
    levels: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::contract("levels must lie in (0, 1)"));
    }
    if n_draws == 0 {
        return Err(Error::contract("need at least one draw"));
    }
    let xs = mixture.sample(n_draws, seed)?;
    let prepared = mixture.prepare()?;
    let mut dens: Vec<f64> = prepared.log_pdf_rows(&xs).into_iter().map(|v| v.as_f64()).collect();
    dens.sort_by(f64::total_cmp);
    Ok(levels
        .iter()
        .map(|&level| {
            // the (1 - level) empirical quantile of log density
            let pos = ((1.0 - level) * n_draws as f64).floor() as usize;
            dens[pos.min(n_draws - 1)]
        })
        .collect())
}

/// Whether `y_true` lies in the level-`level` HDR of the predictive mixture.
pub fn elliptical_coverage<T: Scalar>(
    result: &PredictiveResult<T>,
    y_true: &[T],
    level: f64,
    seed: u64,
) -> Result<bool> {
    elliptical_coverage_with(result, y_true, level, HDR_DRAWS, seed)
}

pub fn elliptical_coverage_with<T: Scalar>(
    result: &PredictiveResult<T>,
    y_true: &[T],
    level: f64,
    n_draws: usize,
    seed: u64,
) -> Result<bool> {
    Ok(elliptical_coverage_curve(result, y_true, &[level], n_draws, seed)?[0])
}

/// Membership at several levels from one set of draws.
pub fn elliptical_coverage_curve<T: Scalar>(
    result: &PredictiveResult<T>,
    y_true: &[T],
    levels: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<bool>> {
    if y_true.len() != result.mixture.dim() {
        return Err(Error::contract("truth has the wrong dimension"));
    }
    let thresholds = hdr_thresholds(&result.mixture, levels, n_draws, seed)?;
    let d = result.mixture.log_pdf(&DVector::from_column_slice(y_true))?.as_f64();
    Ok(thresholds.iter().map(|&th| d >= th).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictResult {
    pub p: f64,
    #[serde(rename = "G_observed")]
    pub g_observed: f64,
    pub n_prior_draws: usize,
    pub kl_se: f64,
}

fn conflict_statistic<T: Scalar>(
    plugin: &PluginParams<T>,
    prefix_map: &LinearObservationMap<T>,
    marginal: &GaussianMixture<T>,
    prefix: &DVector<T>,
    n_kl_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cond = plugin.beta_prior.condition(prefix_map, prefix)?;
    let kl = kl_mc(&cond, marginal, n_kl_samples, seed)?;
    Ok((kl.estimate, kl.std_error))
}

/// Tail probability of the prior-to-posterior KL of the suffix after
/// observing the first `split` points, against prefixes drawn from the
/// marginal prior predictive.
pub fn conflict_tail_probability<T: Scalar>(
    plugin: &PluginParams<T>,
    t_obs: &[T],
    y_obs: &[T],
    split: usize,
    n_prior_draws: usize,
    n_kl_samples: usize,
    seed: u64,
) -> Result<ConflictResult> {
    let n = t_obs.len();
    if y_obs.len() != n {
        return Err(Error::contract("observation times and values differ in length"));
    }
    if split < 1 || split >= n {
        return Err(Error::contract(format!("split index must satisfy 1 <= t < {n}")));
    }
    if n_prior_draws < 100 {
        return Err(Error::contract("at least 100 prior draws are required"));
    }
    let b_all = plugin.design(t_obs)?;
    let b_pre = b_all.rows(0, split).into_owned();
    let b_suf = b_all.rows(split, n - split).into_owned();
    let map = LinearObservationMap::new(b_pre, b_suf.clone(), plugin.sigma2)?;
    let marginal = plugin.beta_prior.pushforward(&b_suf, plugin.sigma2)?;
    let full = plugin.beta_prior.pushforward(&b_all, plugin.sigma2)?;
    let kl_seed = rng::split(seed, 0);
    let observed = DVector::from_column_slice(&y_obs[..split]);
    let (g_obs, se) = conflict_statistic(plugin, &map, &marginal, &observed, n_kl_samples, kl_seed)?;
    let stats = (0..n_prior_draws)
        .into_par_iter()
        .map(|r| {
            let draw = full.sample(1, rng::split(seed, r as u64 + 1))?;
            let prefix = DVector::from_iterator(split, draw.row(0).iter().take(split).copied());
            conflict_statistic(plugin, &map, &marginal, &prefix, n_kl_samples, kl_seed).map(|v| v.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let exceed = stats.iter().filter(|&&g| g >= g_obs).count();
    Ok(ConflictResult {
        p: exceed as f64 / n_prior_draws as f64,
        g_observed: g_obs,
        n_prior_draws,
        kl_se: se,
    })
}

/// Negative log predictive density of `y` under a result's mixture.
pub fn neg_log_score<T: Scalar>(result: &PredictiveResult<T>, y: &[T]) -> Result<f64> {
    Ok(-result.mixture.log_pdf(&DVector::from_column_slice(y))?.as_f64())
}

/// Mixture log density as a plain scalar; used by the evaluation harness.
pub fn log_density<T: Scalar>(mixture: &GaussianMixture<T>, y: &[T]) -> Result<f64> {
    Ok(mixture.log_pdf(&DVector::from_column_slice(y))?.as_f64())
}
