//! Mean-field variational inference for the deep mixture of linear mixed
//! models, with stochastic natural-gradient steps on the global factors.
//!
//! Local factors per subject `i`: `q(β_i)` (diagonal Gaussian), a path
//! responsibility vector `r_i`, and for every path `k` a full-covariance
//! Gaussian `q(z_i^(l) | k)` per layer. Global factors: a joint Gaussian per
//! loading row over `(μ_kj, b_kj)`, inverse-gamma factors for every scale and
//! auxiliary scale, one Dirichlet per layer, and `q(σ²)`, `q(ψ)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::basis::{infer_domain, BasisSpec};
use crate::data::LongitudinalDataset;
use crate::dmfa::{mask_lower, DmfaArchitecture, DmfaLayer, DmfaParams, FactorComponent, PriorHyper};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::linalg;
use crate::predict::PluginParams;
use crate::rng;

/// Positivity floor for variances, shapes and rates.
pub const FLOOR: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InvGamma {
    pub fn new(shape: f64, rate: f64) -> Self {
        Self {
            shape: shape.max(FLOOR),
            rate: rate.max(FLOOR),
        }
    }

    pub fn mean_inv(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn mean_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }

    pub fn entropy(&self) -> f64 {
        self.shape + self.rate.ln() + ln_gamma(self.shape) - (1.0 + self.shape) * digamma(self.shape)
    }

    /// Posterior mean when it exists, otherwise the mode.
    pub fn point(&self) -> f64 {
        if self.shape > 1.0 {
            self.rate / (self.shape - 1.0)
        } else {
            self.rate / (self.shape + 1.0)
        }
    }

    fn blend(&self, target: InvGamma, a: f64) -> Self {
        if a == 1.0 {
            return target;
        }
        Self::new(
            (1.0 - a) * self.shape + a * target.shape,
            (1.0 - a) * self.rate + a * target.rate,
        )
    }
}

/// `E_q[log IG(x; a0, b0)]` for random `b0` with mean `eb` and log-mean `elb`.
fn expected_log_ig(q: &InvGamma, a0: f64, eb: f64, elb: f64) -> f64 {
    a0 * elb - ln_gamma(a0) - (a0 + 1.0) * q.mean_log() - eb * q.mean_inv()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussFactor {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussFactor {
    fn from_natural(prec: &DMatrix<f64>, h: &DVector<f64>, context: &str) -> Result<Self> {
        let chol = linalg::cholesky(prec, context)?;
        let mean = chol.solve(h);
        let mut cov = chol.inverse();
        linalg::symmetrize(&mut cov);
        for i in 0..cov.nrows() {
            cov[(i, i)] = cov[(i, i)].max(FLOOR);
        }
        Ok(Self { mean, cov })
    }

    fn entropy(&self) -> f64 {
        let d = self.mean.len() as f64;
        let logdet = match linalg::try_cholesky(&self.cov) {
            Some(c) => linalg::log_det(&c),
            None => f64::NEG_INFINITY,
        };
        0.5 * d * (1.0 + LN_2PI) + 0.5 * logdet
    }

    fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }

    fn blend(&self, prec: DMatrix<f64>, h: DVector<f64>, a: f64, context: &str) -> Result<Self> {
        if a == 1.0 {
            return Self::from_natural(&prec, &h, context);
        }
        if a == 0.0 {
            return Ok(self.clone());
        }
        let chol = linalg::cholesky(&self.cov, context)?;
        let old_prec = chol.inverse();
        let old_h = &old_prec * &self.mean;
        let mut p = old_prec * (1.0 - a) + prec * a;
        linalg::symmetrize(&mut p);
        Self::from_natural(&p, &(old_h * (1.0 - a) + h * a), context)
    }
}

/// Variational factors of one layer component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFactors {
    /// Row `j`: joint Gaussian over `(μ_j, b_j1, …, b_jf)` with `f = min(j+1, D^(l))`.
    pub rows: Vec<GaussFactor>,
    pub noise: Vec<InvGamma>,
    pub noise_mix: Vec<InvGamma>,
    /// Scale-mixture variance of each mean entry (Cauchy prior).
    pub mean_scale: Vec<InvGamma>,
    pub local: Vec<Vec<InvGamma>>,
    pub local_mix: Vec<Vec<InvGamma>>,
    pub global: InvGamma,
    pub global_mix: InvGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFactors {
    pub dirichlet: Vec<f64>,
    pub components: Vec<ComponentFactors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFactors {
    pub layers: Vec<LayerFactors>,
    pub sigma2: InvGamma,
    pub sigma2_mix: InvGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFactors {
    pub beta_mean: DVector<f64>,
    pub beta_var: DVector<f64>,
    /// `z[path][l]` is `q(z^(l+1) | path)`.
    pub z: Vec<Vec<GaussFactor>>,
    pub resp: DVector<f64>,
}

impl LocalFactors {
    /// Entropy of the diagonal Gaussian `q(β_i)`.
    pub fn beta_entropy(&self) -> f64 {
        self.beta_var.iter().map(|&s| 0.5 * (1.0 + LN_2PI + s.ln())).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub arch: DmfaArchitecture,
    pub hyper: PriorHyper,
    pub global: GlobalFactors,
    pub local: Vec<LocalFactors>,
    /// Completed global steps.
    pub iteration: usize,
    pub elbo_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `a_m = scale · (m + delay)^(-power)`.
    Decay {
        scale: f64,
        delay: f64,
        power: f64,
    },
    Constant {
        value: f64,
    },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Decay {
            scale: 1.0,
            delay: 10.0,
            power: 0.75,
        }
    }
}

impl StepSchedule {
    /// Step for the 1-based iteration `m`, clipped to [0, 1].
    pub fn step(&self, m: usize) -> f64 {
        let a = match *self {
            StepSchedule::Decay { scale, delay, power } => scale * (m as f64 + delay).powf(-power),
            StepSchedule::Constant { value } => value,
        };
        a.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Defaults to `min(n, 64)`.
    pub minibatch_size: Option<usize>,
    pub max_iterations: usize,
    pub step: StepSchedule,
    pub local_tolerance: f64,
    pub local_max_sweeps: usize,
    pub seed: u64,
    pub prune_threshold: f64,
    pub hyper: PriorHyper,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            minibatch_size: None,
            max_iterations: 1000,
            step: StepSchedule::default(),
            local_tolerance: 1e-6,
            local_max_sweeps: 50,
            seed: 0,
            prune_threshold: 1e-3,
            hyper: PriorHyper::default(),
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn batch_size(&self, n: usize) -> usize {
        self.minibatch_size.unwrap_or(64).min(n)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(b) = self.minibatch_size {
            if b == 0 || b > n {
                return Err(Error::contract(format!("minibatch size {b} must lie in 1..={n}")));
            }
        }
        if !(self.local_tolerance >= 0.0) {
            return Err(Error::contract("local tolerance must be nonnegative"));
        }
        if self.local_max_sweeps == 0 {
            return Err(Error::contract("local_max_sweeps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::contract("prune threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-subject sufficient statistics of the regression layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStats {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub ysum: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub dim: usize,
    pub subjects: Vec<SubjectStats>,
}

impl Problem {
    pub fn from_designs(designs: &[(DMatrix<f64>, DVector<f64>)]) -> Result<Self> {
        let first = designs
            .first()
            .ok_or_else(|| Error::contract("dataset has no subjects"))?;
        let dim = first.0.ncols();
        let mut subjects = Vec::with_capacity(designs.len());
        for (i, (x, y)) in designs.iter().enumerate() {
            if x.ncols() != dim || x.nrows() != y.len() || y.is_empty() {
                return Err(Error::contract(format!("subject {i} has an invalid design")));
            }
            subjects.push(SubjectStats {
                xtx: x.transpose() * x,
                xty: x.transpose() * y,
                yty: y.dot(y),
                ysum: y.sum(),
                n_obs: y.len(),
            });
        }
        Ok(Self { dim, subjects })
    }

    /// Evaluates `basis` on each subject's observed times.
    pub fn new(data: &LongitudinalDataset, basis: &BasisSpec) -> Result<Self> {
        data.validate()?;
        let designs = data
            .subjects
            .iter()
            .map(|s| Ok((basis.eval(&s.times)?.values, DVector::from_vec(s.values.clone()))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_designs(&designs)
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }
}

/// Fills a missing basis domain from the dataset's times.
pub fn resolve_basis(data: &LongitudinalDataset, basis: &BasisSpec) -> Result<BasisSpec> {
    if basis.needs_domain() {
        Ok(basis.with_domain(infer_domain(data.all_times())?))
    } else {
        Ok(basis.clone())
    }
}

// ---------------------------------------------------------------------------
// expectations under the global factors

struct RowEx {
    mean: DVector<f64>,
    second: DMatrix<f64>,
}

struct CompEx {
    rows: Vec<RowEx>,
    inv_noise: DVector<f64>,
    log_noise: DVector<f64>,
    mu: DVector<f64>,
    b: DMatrix<f64>,
}

struct Ex {
    layers: Vec<Vec<CompEx>>,
    log_w: Vec<Vec<f64>>,
    inv_sigma2: f64,
    log_sigma2: f64,
    paths: Vec<Vec<usize>>,
    dims: Vec<usize>,
}

fn free(dims: &[usize], l: usize, j: usize) -> usize {
    (j + 1).min(dims[l + 1])
}

fn dirichlet_log_means(alpha: &[f64]) -> Vec<f64> {
    let total = digamma(alpha.iter().sum());
    alpha.iter().map(|&a| digamma(a) - total).collect()
}

impl Ex {
    fn new(state: &VariationalState) -> Self {
        let dims = state.arch.latent_dims.clone();
        let layers = state
            .global
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                layer
                    .components
                    .iter()
                    .map(|c| {
                        let (r, q) = (dims[l], dims[l + 1]);
                        let mut mu = DVector::zeros(r);
                        let mut b = DMatrix::zeros(r, q);
                        let rows = c
                            .rows
                            .iter()
                            .enumerate()
                            .map(|(j, row)| {
                                mu[j] = row.mean[0];
                                for e in 0..free(&dims, l, j) {
                                    b[(j, e)] = row.mean[e + 1];
                                }
                                RowEx {
                                    mean: row.mean.clone(),
                                    second: row.second_moment(),
                                }
                            })
                            .collect();
                        CompEx {
                            rows,
                            inv_noise: DVector::from_iterator(r, c.noise.iter().map(InvGamma::mean_inv)),
                            log_noise: DVector::from_iterator(r, c.noise.iter().map(InvGamma::mean_log)),
                            mu,
                            b,
                        }
                    })
                    .collect()
            })
            .collect();
        let log_w = state
            .global
            .layers
            .iter()
            .map(|l| dirichlet_log_means(&l.dirichlet))
            .collect();
        Self {
            layers,
            log_w,
            inv_sigma2: state.global.sigma2.mean_inv(),
            log_sigma2: state.global.sigma2.mean_log(),
            paths: state.arch.enumerate_paths(),
            dims,
        }
    }
}

/// `E[u uᵀ]` for `u = (1, z_1..z_f)`.
fn u_second(z: &GaussFactor, f: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(f + 1, f + 1);
    u[(0, 0)] = 1.0;
    for a in 0..f {
        u[(0, a + 1)] = z.mean[a];
        u[(a + 1, 0)] = z.mean[a];
        for b in 0..f {
            u[(a + 1, b + 1)] = z.cov[(a, b)] + z.mean[a] * z.mean[b];
        }
    }
    u
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// First and second moments of the layer input `z^(l)` on `path` (`β` for l = 0).
fn lower_moments(local: &LocalFactors, path: usize, l: usize) -> (DVector<f64>, DVector<f64>) {
    if l == 0 {
        let m2 = local.beta_mean.component_mul(&local.beta_mean) + &local.beta_var;
        (local.beta_mean.clone(), m2)
    } else {
        let z = &local.z[path][l - 1];
        let m2 = DVector::from_fn(z.mean.len(), |j, _| z.mean[j] * z.mean[j] + z.cov[(j, j)]);
        (z.mean.clone(), m2)
    }
}

/// `E (x_j − rowᵀu)²` with `u = (1, z_1..z_f)`; `zz = E[z zᵀ]`.
fn row_quad(row: &RowEx, zm: &[f64], zz: &DMatrix<f64>, f: usize, xm: f64, x2: f64) -> f64 {
    let m = row.mean.as_slice();
    let (s, ns) = (row.second.as_slice(), row.second.nrows());
    let (zz, nz) = (zz.as_slice(), zz.nrows());
    let mut lin = m[0];
    let mut sec = s[0];
    for a in 0..f {
        lin += m[a + 1] * zm[a];
        sec += 2.0 * s[(a + 1) * ns] * zm[a];
    }
    for b in 0..f {
        let (col, zcol) = (&s[(b + 1) * ns + 1..(b + 1) * ns + 1 + f], &zz[b * nz..b * nz + f]);
        sec += col.iter().zip(zcol).map(|(x, y)| x * y).sum::<f64>();
    }
    x2 - 2.0 * xm * lin + sec
}

/// `E log p(z^(l) | z^(l+1), c)` summed over rows.
fn layer_term(ex: &Ex, ce: &CompEx, l: usize, xm: &DVector<f64>, x2: &DVector<f64>, z: &GaussFactor) -> f64 {
    let zz = &z.cov + &z.mean * z.mean.transpose();
    let zm = z.mean.as_slice();
    let mut total = 0.0;
    for (j, row) in ce.rows.iter().enumerate() {
        let q = row_quad(row, zm, &zz, free(&ex.dims, l, j), xm[j], x2[j]);
        total += -0.5 * (LN_2PI + ce.log_noise[j] + ce.inv_noise[j] * q);
    }
    total
}

fn top_term(z: &GaussFactor) -> f64 {
    let d = z.mean.len() as f64;
    -0.5 * (d * LN_2PI + z.mean.norm_squared() + z.cov.trace())
}

fn sse(stats: &SubjectStats, local: &LocalFactors) -> f64 {
    let m = &local.beta_mean;
    let quad = (m.transpose() * &stats.xtx * m)[(0, 0)];
    let var: f64 = (0..m.len()).map(|j| stats.xtx[(j, j)] * local.beta_var[j]).sum();
    (stats.yty - 2.0 * m.dot(&stats.xty) + quad + var).max(0.0)
}

fn path_scores(ex: &Ex, local: &LocalFactors) -> Vec<f64> {
    let n_layers = ex.layers.len();
    ex.paths
        .iter()
        .enumerate()
        .map(|(p, path)| {
            let mut s = 0.0;
            for (l, &k) in path.iter().enumerate() {
                let ce = &ex.layers[l][k];
                let (xm, x2) = lower_moments(local, p, l);
                s += ex.log_w[l][k];
                s += layer_term(ex, ce, l, &xm, &x2, &local.z[p][l]);
                s += local.z[p][l].entropy();
            }
            s + top_term(&local.z[p][n_layers - 1])
        })
        .collect()
}

fn resp_term(resp: &DVector<f64>, scores: &[f64]) -> f64 {
    resp.iter()
        .zip(scores)
        .map(|(&r, &s)| if r > 0.0 { r * (s - r.ln()) } else { 0.0 })
        .sum()
}

struct LocalTerms {
    likelihood: f64,
    beta_entropy: f64,
    paths: f64,
}

fn local_terms(ex: &Ex, stats: &SubjectStats, local: &LocalFactors) -> LocalTerms {
    let n = stats.n_obs as f64;
    let likelihood = -0.5 * n * (LN_2PI + ex.log_sigma2) - 0.5 * ex.inv_sigma2 * sse(stats, local);
    let beta_entropy = local.beta_entropy();
    let paths = resp_term(&local.resp, &path_scores(ex, local));
    LocalTerms {
        likelihood,
        beta_entropy,
        paths,
    }
}

fn local_elbo(ex: &Ex, stats: &SubjectStats, local: &LocalFactors) -> f64 {
    let t = local_terms(ex, stats, local);
    t.likelihood + t.beta_entropy + t.paths
}

fn update_z(ex: &Ex, local: &mut LocalFactors) -> Result<()> {
    let n_layers = ex.layers.len();
    for (p, path) in ex.paths.iter().enumerate() {
        for l in 0..n_layers {
            let q = ex.dims[l + 1];
            let ce = &ex.layers[l][path[l]];
            let (xm, _) = lower_moments(local, p, l);
            let mut prec = DMatrix::zeros(q, q);
            let mut h = DVector::zeros(q);
            for (j, row) in ce.rows.iter().enumerate() {
                let f = free(&ex.dims, l, j);
                let w = ce.inv_noise[j];
                for a in 0..f {
                    h[a] += w * (xm[j] * row.mean[a + 1] - row.second[(0, a + 1)]);
                    for b in 0..f {
                        prec[(a, b)] += w * row.second[(a + 1, b + 1)];
                    }
                }
            }
            if l + 1 < n_layers {
                let up = &ex.layers[l + 1][path[l + 1]];
                let pred = &up.mu + &up.b * &local.z[p][l + 1].mean;
                for a in 0..q {
                    prec[(a, a)] += up.inv_noise[a];
                    h[a] += up.inv_noise[a] * pred[a];
                }
            } else {
                for a in 0..q {
                    prec[(a, a)] += 1.0;
                }
            }
            local.z[p][l] = GaussFactor::from_natural(&prec, &h, "latent factor update")?;
        }
    }
    Ok(())
}

/// Softmax of the path scores; returns the scores.
fn update_resp(ex: &Ex, local: &mut LocalFactors) -> Vec<f64> {
    let scores = path_scores(ex, local);
    let lse = linalg::log_sum_exp(&scores);
    let mut r = DVector::from_iterator(scores.len(), scores.iter().map(|s| (s - lse).exp()));
    let total = r.sum();
    r /= total;
    local.resp = r;
    scores
}

fn update_beta(ex: &Ex, stats: &SubjectStats, local: &mut LocalFactors) -> Result<()> {
    let d = stats.xty.len();
    let mut prec = &stats.xtx * ex.inv_sigma2;
    let mut h = &stats.xty * ex.inv_sigma2;
    for (p, path) in ex.paths.iter().enumerate() {
        let r = local.resp[p];
        if r == 0.0 {
            continue;
        }
        let ce = &ex.layers[0][path[0]];
        let z = &local.z[p][0];
        for j in 0..d {
            let f = free(&ex.dims, 0, j);
            let w = r * ce.inv_noise[j];
            prec[(j, j)] += w;
            let m = &ce.rows[j].mean;
            h[j] += w * (m[0] + (0..f).map(|a| m[a + 1] * z.mean[a]).sum::<f64>());
        }
    }
    let chol = linalg::cholesky(&prec, "random-effect update")?;
    local.beta_mean = chol.solve(&h);
    local.beta_var = DVector::from_fn(d, |j, _| (1.0 / prec[(j, j)]).max(FLOOR));
    Ok(())
}

fn sweep_subject(ex: &Ex, stats: &SubjectStats, local: &mut LocalFactors, config: &FitConfig) -> Result<usize> {
    let mut prev = local_elbo(ex, stats, local);
    for sweep in 1..=config.local_max_sweeps {
        update_z(ex, local)?;
        update_resp(ex, local);
        update_beta(ex, stats, local)?;
        let cur = local_elbo(ex, stats, local);
        if !cur.is_finite() {
            return Err(Error::numerical("local sweep", "non-finite subject ELBO"));
        }
        if cur - prev < config.local_tolerance {
            return Ok(sweep);
        }
        prev = cur;
    }
    Ok(config.local_max_sweeps)
}

/// Coordinate ascent over the local factors of `indices`.
pub fn optimize_local(
    state: &mut VariationalState,
    problem: &Problem,
    indices: &[usize],
    config: &FitConfig,
) -> Result<()> {
    let ex = Ex::new(state);
    for &i in indices {
        if i >= problem.n() {
            return Err(Error::contract(format!("subject index {i} out of range")));
        }
    }
    let mut work: Vec<(usize, LocalFactors)> = indices.iter().map(|&i| (i, state.local[i].clone())).collect();
    let run =
        |(i, local): &mut (usize, LocalFactors)| sweep_subject(&ex, &problem.subjects[*i], local, config).map(|_| ());
    if config.threads > 1 {
        work.par_iter_mut().map(run).collect::<Result<Vec<_>>>()?;
    } else {
        work.iter_mut().try_for_each(run)?;
    }
    for (i, local) in work {
        state.local[i] = local;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// global factors

struct RowStats {
    suu: DMatrix<f64>,
    sxu: DVector<f64>,
    sxx: f64,
}

struct CompStats {
    count: f64,
    rows: Vec<RowStats>,
}

struct Stats {
    layers: Vec<Vec<CompStats>>,
    n_obs: f64,
    sse: f64,
}

impl Stats {
    fn zeros(arch: &DmfaArchitecture) -> Self {
        let dims = &arch.latent_dims;
        let layers = (0..arch.n_layers())
            .map(|l| {
                (0..arch.components[l])
                    .map(|_| CompStats {
                        count: 0.0,
                        rows: (0..dims[l])
                            .map(|j| {
                                let f = free(dims, l, j);
                                RowStats {
                                    suu: DMatrix::zeros(f + 1, f + 1),
                                    sxu: DVector::zeros(f + 1),
                                    sxx: 0.0,
                                }
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        Self {
            layers,
            n_obs: 0.0,
            sse: 0.0,
        }
    }

    fn accumulate(&mut self, ex: &Ex, stats: &SubjectStats, local: &LocalFactors, weight: f64) {
        self.n_obs += weight * stats.n_obs as f64;
        self.sse += weight * sse(stats, local);
        for (p, path) in ex.paths.iter().enumerate() {
            let r = weight * local.resp[p];
            if r == 0.0 {
                continue;
            }
            for (l, &c) in path.iter().enumerate() {
                let (xm, x2) = lower_moments(local, p, l);
                let z = &local.z[p][l];
                let cs = &mut self.layers[l][c];
                cs.count += r;
                let f_max = free(&ex.dims, l, cs.rows.len() - 1);
                let u2 = u_second(z, f_max);
                for (j, rs) in cs.rows.iter_mut().enumerate() {
                    let f = free(&ex.dims, l, j);
                    rs.suu += u2.view((0, 0), (f + 1, f + 1)) * r;
                    let w = r * xm[j];
                    rs.sxu[0] += w;
                    for a in 0..f {
                        rs.sxu[a + 1] += w * z.mean[a];
                    }
                    rs.sxx += r * x2[j];
                }
            }
        }
    }
}

fn collect_stats(state: &VariationalState, problem: &Problem, indices: &[usize]) -> Stats {
    let ex = Ex::new(state);
    let mut st = Stats::zeros(&state.arch);
    let weight = problem.n() as f64 / indices.len() as f64;
    for &i in indices {
        st.accumulate(&ex, &problem.subjects[i], &state.local[i], weight);
    }
    st
}

fn update_component(
    comp: &mut ComponentFactors,
    cs: &CompStats,
    hyper: &PriorHyper,
    dims: &[usize],
    l: usize,
    a: f64,
) -> Result<()> {
    let inv_a2 = 1.0 / hyper.scale_halfcauchy_a.powi(2);
    let inv_g2 = 1.0 / hyper.horseshoe_global_scale.powi(2);
    let s2 = hyper.mean_cauchy_scale.powi(2);
    let inv_tau = comp.global.mean_inv();
    for (j, rs) in cs.rows.iter().enumerate() {
        let f = free(dims, l, j);
        let w = comp.noise[j].mean_inv();
        let mut prec = &rs.suu * w;
        prec[(0, 0)] += comp.mean_scale[j].mean_inv();
        for e in 0..f {
            prec[(e + 1, e + 1)] += comp.local[j][e].mean_inv() * inv_tau;
        }
        linalg::symmetrize(&mut prec);
        comp.rows[j] = comp.rows[j].blend(prec, &rs.sxu * w, a, "loading row update")?;
    }
    for (j, rs) in cs.rows.iter().enumerate() {
        let row = &comp.rows[j];
        let q = (rs.sxx - 2.0 * row.mean.dot(&rs.sxu) + frob(&row.second_moment(), &rs.suu)).max(0.0);
        let target = InvGamma::new(0.5 + 0.5 * cs.count, comp.noise_mix[j].mean_inv() + 0.5 * q);
        comp.noise[j] = comp.noise[j].blend(target, a);
    }
    for j in 0..comp.rows.len() {
        let target = InvGamma::new(1.0, comp.noise[j].mean_inv() + inv_a2);
        comp.noise_mix[j] = comp.noise_mix[j].blend(target, a);
        let mu2 = comp.rows[j].mean[0].powi(2) + comp.rows[j].cov[(0, 0)];
        comp.mean_scale[j] = comp.mean_scale[j].blend(InvGamma::new(1.0, 0.5 * (s2 + mu2)), a);
    }
    for j in 0..comp.rows.len() {
        for e in 0..comp.local[j].len() {
            let b2 = comp.rows[j].mean[e + 1].powi(2) + comp.rows[j].cov[(e + 1, e + 1)];
            let t = InvGamma::new(1.0, comp.local_mix[j][e].mean_inv() + 0.5 * b2 * inv_tau);
            comp.local[j][e] = comp.local[j][e].blend(t, a);
            let t = InvGamma::new(1.0, comp.local[j][e].mean_inv() + 1.0);
            comp.local_mix[j][e] = comp.local_mix[j][e].blend(t, a);
        }
    }
    let mut p = 0.0;
    let mut ss = 0.0;
    for j in 0..comp.rows.len() {
        for e in 0..comp.local[j].len() {
            let b2 = comp.rows[j].mean[e + 1].powi(2) + comp.rows[j].cov[(e + 1, e + 1)];
            ss += b2 * comp.local[j][e].mean_inv();
            p += 1.0;
        }
    }
    let t = InvGamma::new(0.5 + 0.5 * p, comp.global_mix.mean_inv() + 0.5 * ss);
    comp.global = comp.global.blend(t, a);
    let t = InvGamma::new(1.0, comp.global.mean_inv() + inv_g2);
    comp.global_mix = comp.global_mix.blend(t, a);
    Ok(())
}

/// One natural-gradient step on every global factor from the rescaled
/// minibatch statistics, applied factor by factor.
pub fn step_global(state: &mut VariationalState, problem: &Problem, minibatch: &[usize], step: f64) -> Result<()> {
    if minibatch.is_empty() {
        return Err(Error::contract("minibatch must not be empty"));
    }
    if !(0.0..=1.0).contains(&step) {
        return Err(Error::contract("step size must lie in [0, 1]"));
    }
    if step == 0.0 {
        return Ok(());
    }
    let st = collect_stats(state, problem, minibatch);
    let alpha = state.hyper.concentration(&state.arch)?;
    let dims = state.arch.latent_dims.clone();
    let hyper = state.hyper.clone();
    for (l, layer) in state.global.layers.iter_mut().enumerate() {
        for (c, comp) in layer.components.iter_mut().enumerate() {
            update_component(comp, &st.layers[l][c], &hyper, &dims, l, step)?;
        }
        for (c, d) in layer.dirichlet.iter_mut().enumerate() {
            let target = alpha[l] + st.layers[l][c].count;
            *d = ((1.0 - step) * *d + step * target).max(FLOOR);
        }
    }
    let g = &mut state.global;
    let inv_a2 = 1.0 / hyper.scale_halfcauchy_a.powi(2);
    let t = InvGamma::new(0.5 + 0.5 * st.n_obs, g.sigma2_mix.mean_inv() + 0.5 * st.sse);
    g.sigma2 = g.sigma2.blend(t, step);
    let t = InvGamma::new(1.0, g.sigma2.mean_inv() + inv_a2);
    g.sigma2_mix = g.sigma2_mix.blend(t, step);
    Ok(())
}

fn check(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(format!("elbo term {term}"), format!("value {v}")))
    }
}

fn dirichlet_term(alpha0: f64, q: &[f64]) -> f64 {
    let k = q.len() as f64;
    let elog = dirichlet_log_means(q);
    let prior = ln_gamma(k * alpha0) - k * ln_gamma(alpha0) + (alpha0 - 1.0) * elog.iter().sum::<f64>();
    let total: f64 = q.iter().sum();
    let entropy = -ln_gamma(total) + q.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        - q.iter().zip(&elog).map(|(&a, &e)| (a - 1.0) * e).sum::<f64>();
    prior + entropy
}

fn component_term(comp: &ComponentFactors, hyper: &PriorHyper) -> f64 {
    let inv_a2 = 1.0 / hyper.scale_halfcauchy_a.powi(2);
    let inv_g2 = 1.0 / hyper.horseshoe_global_scale.powi(2);
    let s2h = 0.5 * hyper.mean_cauchy_scale.powi(2);
    let (tau_inv, tau_log) = (comp.global.mean_inv(), comp.global.mean_log());
    let mut t = 0.0;
    for (j, row) in comp.rows.iter().enumerate() {
        let v = &comp.mean_scale[j];
        let mu2 = row.mean[0].powi(2) + row.cov[(0, 0)];
        t += -0.5 * (LN_2PI + v.mean_log() + mu2 * v.mean_inv());
        for (e, lam) in comp.local[j].iter().enumerate() {
            let b2 = row.mean[e + 1].powi(2) + row.cov[(e + 1, e + 1)];
            t += -0.5 * (LN_2PI + lam.mean_log() + tau_log + b2 * lam.mean_inv() * tau_inv);
            let nu = &comp.local_mix[j][e];
            t += expected_log_ig(lam, 0.5, nu.mean_inv(), -nu.mean_log()) + lam.entropy();
            t += expected_log_ig(nu, 0.5, 1.0, 0.0) + nu.entropy();
        }
        t += row.entropy();
        let (d, c) = (&comp.noise[j], &comp.noise_mix[j]);
        t += expected_log_ig(d, 0.5, c.mean_inv(), -c.mean_log()) + d.entropy();
        t += expected_log_ig(c, 0.5, inv_a2, inv_a2.ln()) + c.entropy();
        t += expected_log_ig(v, 0.5, s2h, s2h.ln()) + v.entropy();
    }
    let (tau, xi) = (&comp.global, &comp.global_mix);
    t += expected_log_ig(tau, 0.5, xi.mean_inv(), -xi.mean_log()) + tau.entropy();
    t += expected_log_ig(xi, 0.5, inv_g2, inv_g2.ln()) + xi.entropy();
    t
}

/// Global part of the ELBO: prior expectations plus entropies of the global
/// factors.
fn global_elbo(state: &VariationalState) -> Result<f64> {
    let alpha = state.hyper.concentration(&state.arch)?;
    let mut total = 0.0;
    for (l, layer) in state.global.layers.iter().enumerate() {
        total += check("dirichlet", dirichlet_term(alpha[l], &layer.dirichlet))?;
        for comp in &layer.components {
            total += check("component", component_term(comp, &state.hyper))?;
        }
    }
    let g = &state.global;
    let inv_a2 = 1.0 / state.hyper.scale_halfcauchy_a.powi(2);
    let noise = expected_log_ig(&g.sigma2, 0.5, g.sigma2_mix.mean_inv(), -g.sigma2_mix.mean_log())
        + g.sigma2.entropy()
        + expected_log_ig(&g.sigma2_mix, 0.5, inv_a2, inv_a2.ln())
        + g.sigma2_mix.entropy();
    total += check("observation variance", noise)?;
    Ok(total)
}

/// Closed-form ELBO. With `subset`, per-subject terms are summed over the
/// subset and rescaled by `n / |subset|`.
pub fn elbo(state: &VariationalState, problem: &Problem, subset: Option<&[usize]>) -> Result<f64> {
    let ex = Ex::new(state);
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => {
            if s.is_empty() {
                return Err(Error::contract("subset must not be empty"));
            }
            s
        }
        None => {
            all = (0..problem.n()).collect();
            &all
        }
    };
    let scale = problem.n() as f64 / idx.len() as f64;
    let (mut lik, mut ent, mut paths) = (0.0, 0.0, 0.0);
    for &i in idx {
        let t = local_terms(&ex, &problem.subjects[i], &state.local[i]);
        lik += t.likelihood;
        ent += t.beta_entropy;
        paths += t.paths;
    }
    let local = scale * (check("likelihood", lik)? + check("random-effect entropy", ent)? + check("path", paths)?);
    Ok(local + global_elbo(state)?)
}

/// ELBO contribution of subject `i` given the current globals.
pub fn subject_elbo(state: &VariationalState, problem: &Problem, i: usize) -> f64 {
    local_elbo(&Ex::new(state), &problem.subjects[i], &state.local[i])
}

// ---------------------------------------------------------------------------
// initialization

fn ridge(stats: &SubjectStats) -> Result<DVector<f64>> {
    let d = stats.xty.len();
    let tau = 1e-2 * stats.xtx.trace() / d as f64 + 1e-8;
    let m = &stats.xtx + DMatrix::identity(d, d) * tau;
    Ok(linalg::cholesky(&m, "ridge initialization")?.solve(&stats.xty))
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> Vec<usize> {
    use rand::Rng as _;
    let n = points.len();
    let mut rng = rng::seeded(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let dd = sq_dist(p, ctr);
                if dd < bd {
                    bd = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                *ctr = members.iter().fold(DVector::zeros(ctr.len()), |a, p| a + *p) / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn covariance(points: &[&DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut s = DMatrix::zeros(d, d);
    for p in points {
        let c = *p - mean;
        s += &c * c.transpose();
    }
    s / (points.len().max(2) - 1) as f64
}

/// Rotates `b` so that it is lower triangular without changing `b bᵀ`.
pub fn rotate_lower(b: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = b.transpose().qr();
    let mut out = b * qr.q();
    mask_lower(&mut out);
    out
}

struct FaInit {
    mean: DVector<f64>,
    loading: DMatrix<f64>,
    noise: DVector<f64>,
}

fn fa_init(cov: &DMatrix<f64>, mean: DVector<f64>, q: usize) -> FaInit {
    let d = cov.nrows();
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(1e-8);
    let rest: f64 = order[q..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / (d - q) as f64;
    let mut b = DMatrix::zeros(d, q);
    for (c, &i) in order[..q].iter().enumerate() {
        let s = (eig.eigenvalues[i] - rest).max(1e-6 * top).sqrt();
        b.set_column(c, &(eig.eigenvectors.column(i) * s));
    }
    let b = rotate_lower(&b);
    let bbt = &b * b.transpose();
    let noise = DVector::from_fn(d, |j, _| (cov[(j, j)] - bbt[(j, j)]).max(1e-2 * cov[(j, j)]).max(1e-6));
    FaInit {
        mean,
        loading: b,
        noise,
    }
}

fn fa_scores(fa: &FaInit, x: &DVector<f64>) -> DVector<f64> {
    let q = fa.loading.ncols();
    let bt_dinv = DMatrix::from_fn(q, fa.noise.len(), |a, j| fa.loading[(j, a)] / fa.noise[j]);
    let m = DMatrix::identity(q, q) + &bt_dinv * &fa.loading;
    m.cholesky()
        .map_or(DVector::zeros(q), |c| c.solve(&(&bt_dinv * (x - &fa.mean))))
}

fn init_component(fa: &FaInit, count: f64, hyper: &PriorHyper, dims: &[usize], l: usize) -> ComponentFactors {
    let r = dims[l];
    let inv_a2 = 1.0 / hyper.scale_halfcauchy_a.powi(2);
    let inv_g2 = 1.0 / hyper.horseshoe_global_scale.powi(2);
    let mut rows = Vec::with_capacity(r);
    let mut local = Vec::with_capacity(r);
    let mut local_mix = Vec::with_capacity(r);
    let mut ss = 0.0;
    let mut p = 0.0;
    for j in 0..r {
        let f = free(dims, l, j);
        let mut mean = DVector::zeros(f + 1);
        mean[0] = fa.mean[j];
        for e in 0..f {
            mean[e + 1] = fa.loading[(j, e)];
            ss += fa.loading[(j, e)].powi(2);
            p += 1.0;
        }
        let cov = DMatrix::identity(f + 1, f + 1) * (fa.noise[j] / (count + 1.0));
        rows.push(GaussFactor { mean, cov });
    }
    let global = InvGamma::new(0.5 + 0.5 * p, 1.0 + 0.5 * ss);
    for j in 0..r {
        let f = free(dims, l, j);
        let lam: Vec<InvGamma> = (0..f)
            .map(|e| InvGamma::new(1.0, 1.0 + 0.5 * fa.loading[(j, e)].powi(2) * global.mean_inv()))
            .collect();
        local_mix.push(lam.iter().map(|g| InvGamma::new(1.0, 1.0 + g.mean_inv())).collect());
        local.push(lam);
    }
    let shape = 0.5 + 0.5 * count;
    ComponentFactors {
        rows,
        noise: fa.noise.iter().map(|&d| InvGamma::new(shape, shape * d)).collect(),
        noise_mix: fa.noise.iter().map(|&d| InvGamma::new(1.0, 1.0 / d + inv_a2)).collect(),
        mean_scale: fa
            .mean
            .iter()
            .map(|&m| InvGamma::new(1.0, 0.5 * (hyper.mean_cauchy_scale.powi(2) + m * m)))
            .collect(),
        local,
        local_mix,
        global,
        global_mix: InvGamma::new(1.0, global.mean_inv() + inv_g2),
    }
}

/// Ridge seeds for `q(β_i)`, layerwise k-means with principal-direction
/// loadings for the components, uniform responsibilities.
pub fn init_state(problem: &Problem, arch: &DmfaArchitecture, config: &FitConfig) -> Result<VariationalState> {
    if problem.n() == 0 {
        return Err(Error::contract("dataset has no subjects"));
    }
    let report = arch.validate();
    if !report.is_ok() {
        return Err(Error::contract(format!("invalid architecture: {report}")));
    }
    if arch.data_dim() != problem.dim {
        return Err(Error::contract(format!(
            "architecture has d = {}, basis has {}",
            arch.data_dim(),
            problem.dim
        )));
    }
    let hyper = config.hyper.clone();
    hyper.validate(arch)?;
    config.validate(problem.n())?;
    let alpha = hyper.concentration(arch)?;
    let n = problem.n();
    let dims = &arch.latent_dims;
    let seeds: Vec<DVector<f64>> = problem.subjects.iter().map(ridge).collect::<Result<_>>()?;

    // observation variance from pooled ridge residuals
    let (mut sse_sum, mut df, mut ysum, mut yy, mut nobs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (s, b) in problem.subjects.iter().zip(&seeds) {
        let quad = (b.transpose() * &s.xtx * b)[(0, 0)];
        sse_sum += (s.yty - 2.0 * b.dot(&s.xty) + quad).max(0.0);
        df += s.n_obs.saturating_sub(problem.dim) as f64;
        ysum += s.ysum;
        yy += s.yty;
        nobs += s.n_obs as f64;
    }
    let var_y = (yy / nobs - (ysum / nobs).powi(2)).max(1e-8);
    let sigma0 = if df > 0.0 {
        (sse_sum / df).max(0.05 * var_y)
    } else {
        0.1 * var_y
    };

    let mut points = seeds.clone();
    let mut layers = Vec::with_capacity(arch.n_layers());
    let mut scores_per_layer = Vec::with_capacity(arch.n_layers());
    for l in 0..arch.n_layers() {
        let k = arch.components[l];
        let labels = kmeans(&points, k, rng::split(config.seed, 1_000 + l as u64));
        let all: Vec<&DVector<f64>> = points.iter().collect();
        let overall_mean = all.iter().fold(DVector::zeros(dims[l]), |a, p| a + *p) / n as f64;
        let mut overall_cov = covariance(&all, &overall_mean);
        let ridge_c = 1e-6 * overall_cov.trace().max(1e-8) / dims[l] as f64;
        overall_cov += DMatrix::identity(dims[l], dims[l]) * ridge_c;
        let mut comps = Vec::with_capacity(k);
        let mut fas = Vec::with_capacity(k);
        let mut counts = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<&DVector<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &g)| g == c)
                .map(|(p, _)| p)
                .collect();
            let mean = if members.is_empty() {
                overall_mean.clone()
            } else {
                members.iter().fold(DVector::zeros(dims[l]), |a, p| a + *p) / members.len() as f64
            };
            let cov = if members.len() > dims[l] {
                covariance(&members, &mean) + DMatrix::identity(dims[l], dims[l]) * ridge_c
            } else {
                overall_cov.clone()
            };
            let fa = fa_init(&cov, mean, dims[l + 1]);
            comps.push(init_component(&fa, members.len() as f64, &hyper, dims, l));
            counts.push(members.len() as f64);
            fas.push(fa);
        }
        points = points
            .iter()
            .zip(&labels)
            .map(|(x, &c)| fa_scores(&fas[c], x))
            .collect();
        scores_per_layer.push(points.clone());
        layers.push(LayerFactors {
            dirichlet: counts.iter().map(|&m| alpha[l] + m).collect(),
            components: comps,
        });
    }
    let shape = 0.5 + 0.5 * nobs;
    let inv_a2 = 1.0 / hyper.scale_halfcauchy_a.powi(2);
    let global = GlobalFactors {
        layers,
        sigma2: InvGamma::new(shape, shape * sigma0),
        sigma2_mix: InvGamma::new(1.0, 1.0 / sigma0 + inv_a2),
    };
    let n_paths = arch.n_paths();
    let local = (0..n)
        .map(|i| {
            let s = &problem.subjects[i];
            let beta_var = DVector::from_fn(problem.dim, |j, _| (sigma0 / (s.xtx[(j, j)] + 1e-8)).clamp(FLOOR, 1e6));
            LocalFactors {
                beta_mean: seeds[i].clone(),
                beta_var,
                z: (0..n_paths)
                    .map(|_| {
                        (0..arch.n_layers())
                            .map(|l| GaussFactor {
                                mean: scores_per_layer[l][i].clone(),
                                cov: DMatrix::identity(dims[l + 1], dims[l + 1]),
                            })
                            .collect()
                    })
                    .collect(),
                resp: DVector::from_element(n_paths, 1.0 / n_paths as f64),
            }
        })
        .collect();
    Ok(VariationalState {
        arch: arch.clone(),
        hyper,
        global,
        local,
        iteration: 0,
        elbo_trace: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// fitting, pruning and selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedComponent {
    pub index: usize,
    pub path: Vec<usize>,
    pub weight: f64,
    pub mass: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub n_paths: usize,
    /// Indices (into the path enumeration) of surviving components.
    pub kept: Vec<usize>,
    pub removed: Vec<RemovedComponent>,
    /// Collapsed weight of every path before pruning.
    pub weights: Vec<f64>,
    /// Total responsibility of every path.
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginEstimate {
    pub params: DmfaParams<f64>,
    pub mixture: GaussianMixture<f64>,
    pub sigma2: f64,
    pub report: PruningReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Resumable checkpoint, see [`run`].
    pub state: VariationalState,
    pub elbo_trace: Vec<f64>,
    pub plugin: PluginParams<f64>,
    pub params: DmfaParams<f64>,
    pub report: PruningReport,
    pub iterations: usize,
    #[serde(skip)]
    pub wall_time: std::time::Duration,
}

/// Posterior-mean DMFA parameters.
pub fn posterior_means(state: &VariationalState) -> Result<DmfaParams<f64>> {
    let arch = &state.arch;
    let dims = &arch.latent_dims;
    let layers = state
        .global
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let total: f64 = layer.dirichlet.iter().sum();
            let components = layer
                .components
                .iter()
                .map(|c| {
                    let mut loading = DMatrix::zeros(dims[l], dims[l + 1]);
                    for (j, row) in c.rows.iter().enumerate() {
                        for e in 0..free(dims, l, j) {
                            loading[(j, e)] = row.mean[e + 1];
                        }
                    }
                    FactorComponent {
                        mean: DVector::from_iterator(dims[l], c.rows.iter().map(|r| r.mean[0])),
                        loading,
                        noise: DVector::from_iterator(dims[l], c.noise.iter().map(|g| g.point().max(FLOOR))),
                    }
                })
                .collect();
            DmfaLayer {
                weights: DVector::from_iterator(layer.dirichlet.len(), layer.dirichlet.iter().map(|a| a / total)),
                components,
            }
        })
        .collect();
    DmfaParams::new(arch.clone(), layers)
}

/// Collapses the posterior means, drops empty components and renormalizes.
pub fn prune_and_plugin(state: &VariationalState, config: &FitConfig) -> Result<PluginEstimate> {
    let params = posterior_means(state)?;
    let full = params.collapse()?;
    let n_paths = full.n_components();
    let mut masses = vec![0.0; n_paths];
    for local in &state.local {
        for (m, r) in masses.iter_mut().zip(local.resp.iter()) {
            *m += r;
        }
    }
    let paths = state.arch.enumerate_paths();
    let mut keep = vec![true; n_paths];
    let mut removed = Vec::new();
    for k in 0..n_paths {
        let w = full.weights()[k];
        let reason = if w < config.prune_threshold {
            Some("weight below threshold")
        } else if masses[k] < 1.0 {
            Some("responsibility mass below one subject")
        } else {
            None
        };
        if let Some(reason) = reason {
            keep[k] = false;
            removed.push(RemovedComponent {
                index: k,
                path: paths[k].clone(),
                weight: w,
                mass: masses[k],
                reason: reason.into(),
            });
        }
    }
    if !keep.iter().any(|&k| k) {
        return Err(Error::contract(
            "every component was pruned; the threshold is too aggressive",
        ));
    }
    let mixture = if keep.iter().all(|&k| k) {
        full.clone()
    } else {
        full.renormalize(&keep)?
    };
    Ok(PluginEstimate {
        params,
        mixture,
        sigma2: state.global.sigma2.point(),
        report: PruningReport {
            n_paths,
            kept: (0..n_paths).filter(|&k| keep[k]).collect(),
            removed,
            weights: full.weights().iter().copied().collect(),
            masses,
        },
    })
}

fn minibatch(n: usize, size: usize, seed: u64, m: usize) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut rng = rng::seeded(rng::split(seed, m as u64));
    let mut idx = sample_indices(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs the stochastic natural-gradient loop on a prepared problem, from
/// `resume` when given. The returned state is a checkpoint: resuming it
/// with a larger `max_iterations` reproduces the longer run exactly. Call
/// [`finalize`] before reading responsibilities of every subject.
pub fn run(
    problem: &Problem,
    arch: &DmfaArchitecture,
    config: &FitConfig,
    resume: Option<VariationalState>,
) -> Result<VariationalState> {
    config.validate(problem.n())?;
    let mut state = match resume {
        Some(s) => {
            if &s.arch != arch || s.local.len() != problem.n() {
                return Err(Error::contract("resume state does not match the problem"));
            }
            s
        }
        None => init_state(problem, arch, config)?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let batch = config.batch_size(problem.n());
    let abort = |state: &VariationalState, iteration: usize, term: String| Error::FitAborted {
        iteration,
        term,
        snapshot: Some(Box::new(state.clone())),
    };
    pool.install(|| -> Result<()> {
        while state.iteration < config.max_iterations {
            let m = state.iteration + 1;
            let idx = minibatch(problem.n(), batch, config.seed, m);
            optimize_local(&mut state, problem, &idx, config).map_err(|e| abort(&state, m, e.to_string()))?;
            step_global(&mut state, problem, &idx, config.step.step(m)).map_err(|e| abort(&state, m, e.to_string()))?;
            let value = elbo(&state, problem, Some(&idx)).map_err(|e| abort(&state, m, e.to_string()))?;
            state.elbo_trace.push(value);
            state.iteration = m;
        }
        Ok(())
    })?;
    Ok(state)
}

/// Copy of `state` with the local factors of every subject re-optimized.
pub fn finalize(state: &VariationalState, problem: &Problem, config: &FitConfig) -> Result<VariationalState> {
    let mut out = state.clone();
    let all: Vec<usize> = (0..problem.n()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    pool.install(|| optimize_local(&mut out, problem, &all, config))?;
    Ok(out)
}

/// Fits the model to `data` with basis `basis` (domain inferred if unset).
pub fn fit(
    data: &LongitudinalDataset,
    basis: &BasisSpec,
    arch: &DmfaArchitecture,
    config: &FitConfig,
) -> Result<FitResult> {
    fit_resume(data, basis, arch, config, None)
}

pub fn fit_resume(
    data: &LongitudinalDataset,
    basis: &BasisSpec,
    arch: &DmfaArchitecture,
    config: &FitConfig,
    resume: Option<VariationalState>,
) -> Result<FitResult> {
    let start = Instant::now();
    let basis = resolve_basis(data, basis)?;
    let problem = Problem::new(data, &basis)?;
    let state = run(&problem, arch, config, resume)?;
    let est = prune_and_plugin(&finalize(&state, &problem, config)?, config)?;
    Ok(FitResult {
        elbo_trace: state.elbo_trace.clone(),
        iterations: state.iteration,
        plugin: PluginParams::new(est.mixture, est.sigma2, basis)?,
        params: est.params,
        report: est.report,
        state,
        wall_time: start.elapsed(),
    })
}

/// Mean of the last 10% of a trace (at least one entry).
pub fn smoothed_elbo(trace: &[f64]) -> Option<f64> {
    if trace.is_empty() {
        return None;
    }
    let k = (trace.len() / 10).max(1);
    let tail = &trace[trace.len() - k..];
    Some(tail.iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub architecture: DmfaArchitecture,
    pub smoothed_elbo: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: DmfaArchitecture,
    pub index: usize,
    pub candidates: Vec<CandidateScore>,
}

/// Short runs with a shared seed; highest smoothed ELBO wins, ties go to the
/// earlier candidate.
pub fn select_architecture(
    data: &LongitudinalDataset,
    basis: &BasisSpec,
    candidates: &[DmfaArchitecture],
    short_iters: usize,
    config: &FitConfig,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidate architectures"));
    }
    let basis = resolve_basis(data, basis)?;
    let problem = Problem::new(data, &basis)?;
    let short = FitConfig {
        max_iterations: short_iters,
        ..config.clone()
    };
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, arch) in candidates.iter().enumerate() {
        match run(&problem, arch, &short, None) {
            Ok(state) => {
                let s = smoothed_elbo(&state.elbo_trace);
                if let Some(v) = s {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
                scores.push(CandidateScore {
                    architecture: arch.clone(),
                    smoothed_elbo: s,
                    error: None,
                });
            }
            Err(e) => scores.push(CandidateScore {
                architecture: arch.clone(),
                smoothed_elbo: None,
                error: Some(e.to_string()),
            }),
        }
    }
    if candidates.len() == 1 {
        return Ok(Selection {
            selected: candidates[0].clone(),
            index: 0,
            candidates: scores,
        });
    }
    let (index, _) = best.ok_or_else(|| Error::contract("every candidate architecture failed to fit"))?;
    Ok(Selection {
        selected: candidates[index].clone(),
        index,
        candidates: scores,
    })
}
