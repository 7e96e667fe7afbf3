//! Gaussian mixtures: densities, CDFs, moments, linear-Gaussian conditioning,
//! sampling and Monte Carlo KL estimation.
//!
//! Every predictive quantity in the crate reduces to operations on a
//! [`GaussianMixture`]. Densities are evaluated in log space, and all
//! quadratic forms go through Cholesky factors (see [`crate::linalg`]).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ln_2pi};
use crate::rng;
use crate::scalar::Scalar;

/// Weights at or below this value are treated as exactly zero.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Default floor for `log q(x)` in [`kl_mc`]: the log of the smallest
/// positive normal `f64`, i.e. where a raw density would underflow.
pub const DEFAULT_LOG_FLOOR: f64 = -708.396_418_532_264_1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T: Scalar> {
    weights: DVector<T>,
    means: Vec<DVector<T>>,
    covariances: Vec<DMatrix<T>>,
}

/// `y = obs_matrix β + ε`, `ỹ = pred_matrix β + ε̃` with iid noise of
/// variance `noise_variance` on both blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservationMap<T: Scalar> {
    obs_matrix: DMatrix<T>,
    pred_matrix: DMatrix<T>,
    noise_variance: T,
}

impl<T: Scalar> LinearObservationMap<T> {
    pub fn new(obs_matrix: DMatrix<T>, pred_matrix: DMatrix<T>, noise_variance: T) -> Result<Self> {
        if obs_matrix.ncols() != pred_matrix.ncols() {
            return Err(Error::contract(format!(
                "observation map column mismatch: obs has {}, pred has {}",
                obs_matrix.ncols(),
                pred_matrix.ncols()
            )));
        }
        if !(noise_variance > T::zero()) || !noise_variance.is_finite() {
            return Err(Error::contract("noise variance must be positive and finite"));
        }
        Ok(Self {
            obs_matrix,
            pred_matrix,
            noise_variance,
        })
    }

    pub fn obs_matrix(&self) -> &DMatrix<T> {
        &self.obs_matrix
    }

    pub fn pred_matrix(&self) -> &DMatrix<T> {
        &self.pred_matrix
    }

    pub fn noise_variance(&self) -> T {
        self.noise_variance
    }

    /// Column count shared by both design blocks.
    pub fn dim(&self) -> usize {
        self.obs_matrix.ncols()
    }
}

/// Monte Carlo estimate of `KL(p ‖ q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// Number of draws whose `log q` was clamped at the floor.
    pub n_floored: usize,
}

impl KlEstimate {
    pub fn floored(&self) -> bool {
        self.n_floored > 0
    }
}

impl<T: Scalar> GaussianMixture<T> {
    /// Builds a mixture after checking every invariant: weights form a
    /// probability vector, dimensions agree, and each covariance is
    /// symmetric and factorizable under the jitter policy.
    pub fn new(weights: DVector<T>, means: Vec<DVector<T>>, covariances: Vec<DMatrix<T>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::contract("mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::contract(format!(
                "mixture has {} weights, {} means, {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        let mut total = T::zero();
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::contract(format!("weight {i} is negative or not finite")));
            }
            total += w;
        }
        if (total - T::one()).abs() > T::normalization_tolerance() {
            return Err(Error::contract(format!(
                "weights sum to {} instead of 1",
                total.as_f64()
            )));
        }
        let sym_tol = T::lit(1e-10);
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::contract(format!("component {i} has inconsistent dimension")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("component {i} mean is not finite")));
            }
            let scale = c.amax().max(T::one());
            for r in 0..d {
                for s in (r + 1)..d {
                    if (c[(r, s)] - c[(s, r)]).abs() > sym_tol * scale {
                        return Err(Error::contract(format!("covariance {i} is not symmetric")));
                    }
                }
            }
            if linalg::try_cholesky(c).is_none() {
                return Err(Error::numerical(
                    format!("mixture component {i}"),
                    "covariance is not positive semidefinite",
                ));
            }
        }
        let weights = weights.map(|w| if w.as_f64() <= WEIGHT_FLOOR { T::zero() } else { w });
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    /// Single Gaussian component.
    pub fn gaussian(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self> {
        Self::new(DVector::from_element(1, T::one()), vec![mean], vec![covariance])
    }

    /// Builds a mixture from unnormalized log weights.
    pub fn from_log_weights(log_weights: &[T], means: Vec<DVector<T>>, covariances: Vec<DMatrix<T>>) -> Result<Self> {
        let weights = normalize_log_weights(log_weights)?;
        Self::new(weights, means, covariances)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<T>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<T>] {
        &self.covariances
    }

    /// Factorizes every component once for repeated density evaluation.
    pub fn prepare(&self) -> Result<PreparedMixture<T>> {
        let d = T::lit(self.dim() as f64);
        let mut comps = Vec::with_capacity(self.n_components());
        for (k, c) in self.covariances.iter().enumerate() {
            let chol = linalg::cholesky(c, &format!("mixture component {k}"))?;
            let log_norm = -T::lit(0.5) * (d * ln_2pi::<T>() + linalg::log_det(&chol));
            let w = self.weights[k];
            let log_weight = if w > T::zero() {
                w.ln()
            } else {
                T::lit(f64::NEG_INFINITY)
            };
            comps.push(PreparedComponent {
                log_weight,
                log_norm,
                chol,
            });
        }
        Ok(PreparedMixture {
            comps,
            means: self.means.clone(),
        })
    }

    /// `log Σ_k w_k φ(x; μ_k, Σ_k)`.
    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        self.check_dim(x.len())?;
        Ok(self.prepare()?.log_pdf(x))
    }

    /// Mixture CDF `Σ_k w_k Φ((x − μ_k)/σ_k)` for a one-dimensional mixture.
    pub fn cdf_scalar(&self, x: T) -> Result<T> {
        if self.dim() != 1 {
            return Err(Error::contract(format!(
                "cdf_scalar needs a 1-dimensional mixture, got {}",
                self.dim()
            )));
        }
        let mut acc = T::zero();
        for k in 0..self.n_components() {
            let w = self.weights[k];
            if w == T::zero() {
                continue;
            }
            acc += w * normal_cdf(x, self.means[k][0], self.covariances[k][(0, 0)]);
        }
        Ok(acc.min(T::one()).max(T::zero()))
    }

    /// Mixture mean and covariance (law of total variance).
    pub fn moments(&self) -> (DVector<T>, DMatrix<T>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (w, m) in self.weights.iter().zip(&self.means) {
            mean.axpy(*w, m, T::one());
        }
        let mut cov = DMatrix::zeros(d, d);
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let dev = m - &mean;
            cov += (c + &dev * dev.transpose()) * *w;
        }
        linalg::symmetrize(&mut cov);
        (mean, cov)
    }

    /// Marginal of the coordinate `index`.
    pub fn marginal(&self, index: usize) -> Result<GaussianMixture<T>> {
        if index >= self.dim() {
            return Err(Error::contract(format!("marginal index {index} out of range")));
        }
        let means = self.means.iter().map(|m| DVector::from_element(1, m[index])).collect();
        let covs = self
            .covariances
            .iter()
            .map(|c| DMatrix::from_element(1, 1, c[(index, index)]))
            .collect();
        Ok(Self {
            weights: self.weights.clone(),
            means,
            covariances: covs,
        })
    }

    /// Image under `x ↦ A x + ε`, `ε ~ N(0, noise I)`.
    pub fn pushforward(&self, a: &DMatrix<T>, noise: T) -> Result<GaussianMixture<T>> {
        self.check_dim(a.ncols())?;
        let means = self.means.iter().map(|m| a * m).collect();
        let covs = self
            .covariances
            .iter()
            .map(|c| {
                let mut s = a * c * a.transpose();
                for i in 0..s.nrows() {
                    s[(i, i)] += noise;
                }
                linalg::symmetrize(&mut s);
                s
            })
            .collect();
        Ok(Self {
            weights: self.weights.clone(),
            means,
            covariances: covs,
        })
    }

    /// Posterior component weights after observing `y_obs = obs β + ε`:
    /// `w̃_k ∝ w_k φ(y; obs μ_k, obs Σ_k obsᵀ + σ² I)`.
    pub fn posterior_weights(&self, obs: &DMatrix<T>, noise: T, y_obs: &DVector<T>) -> Result<DVector<T>> {
        if obs.nrows() != y_obs.len() {
            return Err(Error::contract(format!(
                "observation matrix has {} rows but {} values were given",
                obs.nrows(),
                y_obs.len()
            )));
        }
        self.check_dim(obs.ncols())?;
        if obs.nrows() == 0 {
            return Ok(self.weights.clone());
        }
        let mut logw = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let (lw, _) = self.observed_block(k, obs, noise, y_obs)?;
            logw.push(lw);
        }
        normalize_log_weights(&logw)
    }

    /// Log weight contribution and Cholesky of the observed block for `k`.
    fn observed_block(
        &self,
        k: usize,
        obs: &DMatrix<T>,
        noise: T,
        y_obs: &DVector<T>,
    ) -> Result<(T, Cholesky<T, Dyn>)> {
        let n = obs.nrows();
        let mut s_obs = obs * &self.covariances[k] * obs.transpose();
        for i in 0..n {
            s_obs[(i, i)] += noise;
        }
        linalg::symmetrize(&mut s_obs);
        let chol = linalg::cholesky(&s_obs, &format!("observation covariance of component {k}"))?;
        let resid = y_obs - obs * &self.means[k];
        let w = self.weights[k];
        let lw = if w > T::zero() {
            w.ln()
                - T::lit(0.5)
                    * (T::lit(n as f64) * ln_2pi::<T>()
                        + linalg::log_det(&chol)
                        + linalg::mahalanobis_sq(&chol, &resid))
        } else {
            T::lit(f64::NEG_INFINITY)
        };
        Ok((lw, chol))
    }

    /// Conditional mixture of `ỹ` given `y_obs` under the joint
    /// `(y, ỹ)` structure induced by `map`. With no observations the result
    /// is the pushforward through the prediction block.
    pub fn condition(&self, map: &LinearObservationMap<T>, y_obs: &DVector<T>) -> Result<GaussianMixture<T>> {
        self.check_dim(map.dim())?;
        let obs = map.obs_matrix();
        let pred = map.pred_matrix();
        let noise = map.noise_variance();
        if obs.nrows() != y_obs.len() {
            return Err(Error::contract(format!(
                "observation matrix has {} rows but {} values were given",
                obs.nrows(),
                y_obs.len()
            )));
        }
        if obs.nrows() == 0 {
            return self.pushforward(pred, noise);
        }
        let t = pred.nrows();
        let mut logw = Vec::with_capacity(self.n_components());
        let mut means = Vec::with_capacity(self.n_components());
        let mut covs = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let (lw, chol) = self.observed_block(k, obs, noise, y_obs)?;
            let sigma = &self.covariances[k];
            let mu = &self.means[k];
            // cross = pred Σ obsᵀ (T × n)
            let cross = pred * sigma * obs.transpose();
            let gain_t = chol.solve(&cross.transpose()); // S_obs⁻¹ crossᵀ, n × T
            let resid = y_obs - obs * mu;
            let mean = pred * mu + gain_t.transpose() * resid;
            let mut cov = pred * sigma * pred.transpose() - &cross * &gain_t;
            for i in 0..t {
                cov[(i, i)] += noise;
            }
            linalg::symmetrize(&mut cov);
            logw.push(lw);
            means.push(mean);
            covs.push(cov);
        }
        let weights = normalize_log_weights(&logw)?;
        Self::new(weights, means, covs)
    }

    /// Ancestral draws: component by weight, then a Gaussian draw. Rows are
    /// samples.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<T>> {
        Ok(self.sample_with_components(count, seed)?.0)
    }

    /// Like [`sample`](Self::sample) but also returns the component index of
    /// each draw.
    pub fn sample_with_components(&self, count: usize, seed: u64) -> Result<(DMatrix<T>, Vec<usize>)> {
        if count == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        let chols = self
            .covariances
            .iter()
            .enumerate()
            .map(|(k, c)| linalg::cholesky(c, &format!("mixture component {k}")))
            .collect::<Result<Vec<_>>>()?;
        let cum = cumulative(&self.weights);
        let d = self.dim();
        let mut rng = rng::seeded(seed);
        let mut out = DMatrix::zeros(count, d);
        let mut labels = Vec::with_capacity(count);
        let mut z = DVector::zeros(d);
        for row in 0..count {
            let k = pick(&cum, rng.random::<f64>());
            for v in z.iter_mut() {
                let s: f64 = rng.sample(StandardNormal);
                *v = T::lit(s);
            }
            let x = linalg::lower_mul(&chols[k], &z) + &self.means[k];
            out.set_row(row, &x.transpose());
            labels.push(k);
        }
        Ok((out, labels))
    }

    /// Drops components whose mask entry is false and rescales the rest.
    pub fn renormalize(&self, keep: &[bool]) -> Result<GaussianMixture<T>> {
        if keep.len() != self.n_components() {
            return Err(Error::contract("keep mask length differs from component count"));
        }
        let idx: Vec<usize> = (0..keep.len()).filter(|&k| keep[k]).collect();
        if idx.is_empty() {
            return Err(Error::contract("renormalize requires at least one kept component"));
        }
        let mass: T = idx.iter().fold(T::zero(), |a, &k| a + self.weights[k]);
        if !(mass > T::zero()) {
            return Err(Error::contract("kept components carry zero weight"));
        }
        let weights = DVector::from_iterator(idx.len(), idx.iter().map(|&k| self.weights[k] / mass));
        Ok(Self {
            weights,
            means: idx.iter().map(|&k| self.means[k].clone()).collect(),
            covariances: idx.iter().map(|&k| self.covariances[k].clone()).collect(),
        })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::contract(format!(
                "dimension mismatch: mixture has {}, argument has {}",
                self.dim(),
                d
            )));
        }
        Ok(())
    }
}

struct PreparedComponent<T: Scalar> {
    log_weight: T,
    log_norm: T,
    chol: Cholesky<T, Dyn>,
}

/// A mixture with cached factorizations; cheap repeated `log_pdf`.
pub struct PreparedMixture<T: Scalar> {
    comps: Vec<PreparedComponent<T>>,
    means: Vec<DVector<T>>,
}

impl<T: Scalar> PreparedMixture<T> {
    pub fn log_pdf(&self, x: &DVector<T>) -> T {
        let mut terms = Vec::with_capacity(self.comps.len());
        for (c, m) in self.comps.iter().zip(&self.means) {
            if !c.log_weight.is_finite() {
                continue;
            }
            let dev = x - m;
            terms.push(c.log_weight + c.log_norm - T::lit(0.5) * linalg::mahalanobis_sq(&c.chol, &dev));
        }
        linalg::log_sum_exp(&terms)
    }

    /// Log density of each row of `xs`.
    pub fn log_pdf_rows(&self, xs: &DMatrix<T>) -> Vec<T> {
        (0..xs.nrows()).map(|r| self.log_pdf(&xs.row(r).transpose())).collect()
    }
}

/// `KL(p ‖ q) ≈ (1/n) Σ [log p(x_i) − log q(x_i)]`, `x_i ~ p`.
pub fn kl_mc<T: Scalar>(
    p: &GaussianMixture<T>,
    q: &GaussianMixture<T>,
    n_samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    kl_mc_with_floor(p, q, n_samples, seed, DEFAULT_LOG_FLOOR)
}

pub fn kl_mc_with_floor<T: Scalar>(
    p: &GaussianMixture<T>,
    q: &GaussianMixture<T>,
    n_samples: usize,
    seed: u64,
    log_floor: f64,
) -> Result<KlEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::contract("kl_mc dimension mismatch"));
    }
    if n_samples < 1000 {
        return Err(Error::contract("kl_mc needs at least 1000 samples"));
    }
    let xs = p.sample(n_samples, seed)?;
    let pp = p.prepare()?;
    let qp = q.prepare()?;
    let mut n_floored = 0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..n_samples {
        let x = xs.row(r).transpose();
        let lp = pp.log_pdf(&x).as_f64();
        let mut lq = qp.log_pdf(&x).as_f64();
        if !(lq >= log_floor) {
            lq = log_floor;
            n_floored += 1;
        }
        let v = lp - lq;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(KlEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        n_samples,
        n_floored,
    })
}

/// `Φ((x − μ)/√v)`; a zero variance gives a unit step at `μ`.
pub fn normal_cdf<T: Scalar>(x: T, mean: T, var: T) -> T {
    if var <= T::zero() {
        return if x >= mean { T::one() } else { T::zero() };
    }
    let z = (x - mean).as_f64() / var.as_f64().sqrt();
    T::lit(0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2))
}

fn normalize_log_weights<T: Scalar>(logw: &[T]) -> Result<DVector<T>> {
    let lse = linalg::log_sum_exp(logw);
    if !lse.is_finite() {
        return Err(Error::numerical(
            "mixture weights",
            "all component log weights are non-finite",
        ));
    }
    let mut w = DVector::from_iterator(logw.len(), logw.iter().map(|&l| (l - lse).exp()));
    for v in w.iter_mut() {
        if v.as_f64() <= WEIGHT_FLOOR {
            *v = T::zero();
        }
    }
    let s = w.sum();
    Ok(w / s)
}

pub(crate) fn cumulative<T: Scalar>(w: &DVector<T>) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v.as_f64();
            acc
        })
        .collect()
}

pub(crate) fn pick(cum: &[f64], u: f64) -> usize {
    let total = *cum.last().unwrap_or(&1.0);
    let target = u * total;
    for (k, &c) in cum.iter().enumerate() {
        if target < c {
            return k;
        }
    }
    // u * total can round up to the final boundary
    cum.iter().rposition(|&c| c > 0.0).unwrap_or(cum.len() - 1)
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "GaussianMixture")]
struct MixtureRepr<T> {
    weights: Vec<T>,
    means: Vec<Vec<T>>,
    covariances: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Serialize for GaussianMixture<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim();
        MixtureRepr {
            weights: self.weights.iter().copied().collect(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| (0..d).map(|r| c.row(r).iter().copied().collect()).collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for GaussianMixture<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MixtureRepr::<T>::deserialize(d)?;
        let means: Vec<DVector<T>> = repr.means.into_iter().map(DVector::from_vec).collect();
        let mut covs = Vec::with_capacity(repr.covariances.len());
        for rows in repr.covariances {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(serde::de::Error::custom("covariance must be square"));
            }
            let flat: Vec<T> = rows.into_iter().flatten().collect();
            covs.push(DMatrix::from_row_slice(n, n, &flat));
        }
        GaussianMixture::new(DVector::from_vec(repr.weights), means, covs).map_err(serde::de::Error::custom)
    }
}
