//! Deep mixture of factor analyzers: architecture, parameters, ancestral
//! sampling, collapse to a Gaussian mixture and the hierarchical log prior.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmm::{self, GaussianMixture};
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;

/// Layer sizes. `latent_dims[0]` is the random-effect dimension `d`,
/// `components[l]` is the number of components of layer `l + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DmfaArchitecture {
    pub latent_dims: Vec<usize>,
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based layer index; 0 for whole-architecture problems.
    pub layer: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("layer {}: {}", v.layer, v.message))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl DmfaArchitecture {
    /// Validated constructor.
    pub fn new(latent_dims: Vec<usize>, components: Vec<usize>) -> Result<Self> {
        let arch = Self {
            latent_dims,
            components,
        };
        let report = arch.validate();
        if !report.is_ok() {
            return Err(Error::contract(format!("invalid architecture: {report}")));
        }
        Ok(arch)
    }

    pub fn n_layers(&self) -> usize {
        self.components.len()
    }

    pub fn data_dim(&self) -> usize {
        self.latent_dims[0]
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut top = |message: String| violations.push(Violation { layer: 0, message });
        if self.components.is_empty() {
            top("at least one layer is required".into());
        }
        if self.latent_dims.len() != self.components.len() + 1 {
            top(format!(
                "expected {} latent dimensions for {} layers, got {}",
                self.components.len() + 1,
                self.components.len(),
                self.latent_dims.len()
            ));
        }
        if self.latent_dims.first().is_some_and(|&d| d == 0) {
            top("random-effect dimension must be at least 1".into());
        }
        if self
            .components
            .iter()
            .try_fold(1usize, |a, &k| a.checked_mul(k))
            .is_none()
        {
            top("total path count overflows".into());
        }
        for (l, &k) in self.components.iter().enumerate() {
            if k == 0 {
                violations.push(Violation {
                    layer: l + 1,
                    message: "component count must be at least 1".into(),
                });
            }
        }
        for l in 0..self.components.len().min(self.latent_dims.len().saturating_sub(1)) {
            let (lo, hi) = (self.latent_dims[l], self.latent_dims[l + 1]);
            if hi == 0 {
                violations.push(Violation {
                    layer: l + 1,
                    message: "latent dimension must be at least 1".into(),
                });
            } else if 2 * hi + 1 > lo {
                violations.push(Violation {
                    layer: l + 1,
                    message: format!("D = {hi} exceeds ({lo} - 1)/2"),
                });
            }
        }
        ValidationReport { violations }
    }

    pub fn n_paths(&self) -> usize {
        self.components.iter().product()
    }

    /// All paths `(k_1, …, k_L)` in lexicographic order.
    pub fn enumerate_paths(&self) -> Vec<Vec<usize>> {
        (0..self.n_paths()).map(|i| self.path_of(i)).collect()
    }

    /// Position of `path` in [`enumerate_paths`](Self::enumerate_paths).
    pub fn path_index(&self, path: &[usize]) -> usize {
        path.iter().zip(&self.components).fold(0, |acc, (&k, &n)| acc * n + k)
    }

    pub fn path_of(&self, mut index: usize) -> Vec<usize> {
        let mut path = vec![0; self.n_layers()];
        for l in (0..self.n_layers()).rev() {
            path[l] = index % self.components[l];
            index /= self.components[l];
        }
        path
    }
}

/// One factor-analyzer component of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorComponent<T: Scalar> {
    pub mean: DVector<T>,
    /// `D^(l-1) × D^(l)`, lower triangular.
    pub loading: DMatrix<T>,
    /// Diagonal of the noise covariance.
    pub noise: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmfaLayer<T: Scalar> {
    pub weights: DVector<T>,
    pub components: Vec<FactorComponent<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmfaParams<T: Scalar> {
    arch: DmfaArchitecture,
    layers: Vec<DmfaLayer<T>>,
}

/// Zeroes entries above the diagonal.
pub fn mask_lower<T: Scalar>(m: &mut DMatrix<T>) {
    for c in 0..m.ncols() {
        for r in 0..c.min(m.nrows()) {
            m[(r, c)] = T::zero();
        }
    }
}

impl<T: Scalar> DmfaParams<T> {
    /// Checks shapes, weights and noise positivity; masks loadings.
    pub fn new(arch: DmfaArchitecture, mut layers: Vec<DmfaLayer<T>>) -> Result<Self> {
        let report = arch.validate();
        if !report.is_ok() {
            return Err(Error::contract(format!("invalid architecture: {report}")));
        }
        if layers.len() != arch.n_layers() {
            return Err(Error::contract(format!(
                "expected {} layers, got {}",
                arch.n_layers(),
                layers.len()
            )));
        }
        let tol = T::normalization_tolerance();
        for (l, layer) in layers.iter_mut().enumerate() {
            let (rows, cols, k) = (arch.latent_dims[l], arch.latent_dims[l + 1], arch.components[l]);
            if layer.weights.len() != k || layer.components.len() != k {
                return Err(Error::contract(format!("layer {} must have {k} components", l + 1)));
            }
            if layer.weights.iter().any(|w| !(*w >= T::zero())) {
                return Err(Error::contract(format!("layer {} has a negative weight", l + 1)));
            }
            if (layer.weights.sum() - T::one()).abs() > tol {
                return Err(Error::contract(format!("layer {} weights do not sum to 1", l + 1)));
            }
            for (j, c) in layer.components.iter_mut().enumerate() {
                if c.mean.len() != rows || c.noise.len() != rows || c.loading.shape() != (rows, cols) {
                    return Err(Error::contract(format!(
                        "layer {} component {j} has mismatched shapes",
                        l + 1
                    )));
                }
                if c.noise.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "layer {} component {j} has a nonpositive noise scale",
                        l + 1
                    )));
                }
                if c.mean.iter().chain(c.loading.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "layer {} component {j} has non-finite entries",
                        l + 1
                    )));
                }
                mask_lower(&mut c.loading);
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &DmfaArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[DmfaLayer<T>] {
        &self.layers
    }

    /// Writes a loading through the triangular mask.
    pub fn set_loading(&mut self, layer: usize, component: usize, mut loading: DMatrix<T>) -> Result<()> {
        let target = &mut self.layers[layer].components[component].loading;
        if loading.shape() != target.shape() {
            return Err(Error::contract("loading shape mismatch"));
        }
        mask_lower(&mut loading);
        *target = loading;
        Ok(())
    }

    /// Path weight, mean and covariance of the collapsed component for `path`.
    pub fn path_moments(&self, path: &[usize]) -> (T, DVector<T>, DMatrix<T>) {
        let first = &self.layers[0].components[path[0]];
        let mut weight = self.layers[0].weights[path[0]];
        let mut mean = first.mean.clone();
        let mut cov = DMatrix::from_diagonal(&first.noise);
        let mut prod = first.loading.clone();
        for (l, &k) in path.iter().enumerate().skip(1) {
            let c = &self.layers[l].components[k];
            weight *= self.layers[l].weights[k];
            mean += &prod * &c.mean;
            let scaled = DMatrix::from_fn(prod.nrows(), prod.ncols(), |r, j| prod[(r, j)] * c.noise[j]);
            cov += &scaled * prod.transpose();
            prod = &prod * &c.loading;
        }
        cov += &prod * prod.transpose();
        linalg::symmetrize(&mut cov);
        (weight, mean, cov)
    }

    /// The implied mixture over `β`, one component per path in
    /// lexicographic order.
    pub fn collapse(&self) -> Result<GaussianMixture<T>> {
        let n = self.arch.n_paths();
        let mut weights = DVector::zeros(n);
        let mut means = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        for (i, path) in self.arch.enumerate_paths().iter().enumerate() {
            let (w, m, c) = self.path_moments(path);
            weights[i] = w;
            means.push(m);
            covs.push(c);
        }
        let s = weights.sum();
        GaussianMixture::new(weights / s, means, covs)
    }

    /// Top-down ancestral draws of `β` (rows) and the path index of each.
    pub fn sample_beta(&self, count: usize, seed: u64) -> Result<(DMatrix<T>, Vec<usize>)> {
        if count == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        let mut rng = rng::seeded(seed);
        let cums: Vec<Vec<f64>> = self.layers.iter().map(|l| gmm::cumulative(&l.weights)).collect();
        let top = *self.arch.latent_dims.last().unwrap_or(&0);
        let mut out = DMatrix::zeros(count, self.arch.data_dim());
        let mut paths = Vec::with_capacity(count);
        let mut path = vec![0; self.arch.n_layers()];
        for row in 0..count {
            let mut z = DVector::from_fn(top, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
            for l in (0..self.arch.n_layers()).rev() {
                let k = gmm::pick(&cums[l], rng.random::<f64>());
                path[l] = k;
                let c = &self.layers[l].components[k];
                let mut next = &c.mean + &c.loading * &z;
                for (v, s) in next.iter_mut().zip(c.noise.iter()) {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += s.sqrt() * T::lit(e);
                }
                z = next;
            }
            out.set_row(row, &z.transpose());
            paths.push(self.arch.path_index(&path));
        }
        Ok((out, paths))
    }

    /// Number of free (unmasked) loading entries in row `r` of layer `l`.
    pub fn free_in_row(&self, layer: usize, r: usize) -> usize {
        (r + 1).min(self.arch.latent_dims[layer + 1])
    }
}

/// Hyperprior scales. `dirichlet_concentration` defaults to `1/K^(l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorHyper {
    pub mean_cauchy_scale: f64,
    pub scale_halfcauchy_a: f64,
    pub horseshoe_global_scale: f64,
    pub dirichlet_concentration: Option<Vec<f64>>,
}

impl Default for PriorHyper {
    fn default() -> Self {
        Self {
            mean_cauchy_scale: 1.0,
            scale_halfcauchy_a: 1.0,
            horseshoe_global_scale: 1.0,
            dirichlet_concentration: None,
        }
    }
}

impl PriorHyper {
    pub fn concentration(&self, arch: &DmfaArchitecture) -> Result<Vec<f64>> {
        match &self.dirichlet_concentration {
            Some(c) if c.len() != arch.n_layers() => Err(Error::contract(format!(
                "dirichlet concentration has {} entries for {} layers",
                c.len(),
                arch.n_layers()
            ))),
            Some(c) => Ok(c.clone()),
            None => Ok(arch.components.iter().map(|&k| 1.0 / k as f64).collect()),
        }
    }

    pub fn validate(&self, arch: &DmfaArchitecture) -> Result<()> {
        let scales = [
            ("mean_cauchy_scale", self.mean_cauchy_scale),
            ("scale_halfcauchy_a", self.scale_halfcauchy_a),
            ("horseshoe_global_scale", self.horseshoe_global_scale),
        ];
        for (name, v) in scales {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.concentration(arch)?.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::contract("dirichlet concentration must be positive"));
        }
        Ok(())
    }
}

/// Auxiliary scales of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentAux {
    /// Mixing variable `c_j` of each noise scale, `δ_j | c_j ~ IG(1/2, 1/c_j)`.
    pub noise_mix: Vec<f64>,
    /// Local horseshoe variances `λ²`, row-major, masked entries ignored.
    pub local: Vec<Vec<f64>>,
    /// Mixing variables `ν` of the local variances.
    pub local_mix: Vec<Vec<f64>>,
    /// Global variance `τ²` shared by the loading matrix.
    pub global: f64,
    pub global_mix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAuxiliaries {
    /// Indexed by layer, then component.
    pub components: Vec<Vec<ComponentAux>>,
}

impl PriorAuxiliaries {
    /// All auxiliaries equal to one.
    pub fn unit(arch: &DmfaArchitecture) -> Self {
        let components = (0..arch.n_layers())
            .map(|l| {
                let (r, c) = (arch.latent_dims[l], arch.latent_dims[l + 1]);
                (0..arch.components[l])
                    .map(|_| ComponentAux {
                        noise_mix: vec![1.0; r],
                        local: vec![vec![1.0; c]; r],
                        local_mix: vec![vec![1.0; c]; r],
                        global: 1.0,
                        global_mix: 1.0,
                    })
                    .collect()
            })
            .collect();
        Self { components }
    }
}

/// `log IG(x; a, b)` with density `b^a / Γ(a) x^{-a-1} e^{-b/x}`.
pub fn ln_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

pub fn ln_normal(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

pub fn ln_cauchy(x: f64, scale: f64) -> f64 {
    -(std::f64::consts::PI * scale).ln() - (1.0 + (x / scale).powi(2)).ln()
}

pub fn ln_dirichlet(w: &[f64], alpha: f64) -> f64 {
    let k = w.len() as f64;
    let mut s = ln_gamma(k * alpha) - k * ln_gamma(alpha);
    if alpha != 1.0 {
        s += w.iter().map(|&v| (alpha - 1.0) * v.ln()).sum::<f64>();
    }
    s
}

/// Half-Cauchy(A) on the square root of `var`, written as the chain
/// `var | c ~ IG(1/2, 1/c)`, `c ~ IG(1/2, 1/A²)`.
pub fn ln_half_cauchy_chain(var: f64, mix: f64, a: f64) -> f64 {
    ln_inv_gamma(var, 0.5, 1.0 / mix) + ln_inv_gamma(mix, 0.5, 1.0 / (a * a))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::contract(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Joint log density of the parameters and auxiliaries under the prior.
pub fn log_prior<T: Scalar>(params: &DmfaParams<T>, hyper: &PriorHyper, aux: &PriorAuxiliaries) -> Result<f64> {
    let arch = params.architecture();
    hyper.validate(arch)?;
    let alpha = hyper.concentration(arch)?;
    if aux.components.len() != arch.n_layers() {
        return Err(Error::contract("auxiliaries do not match the layer count"));
    }
    let a = hyper.scale_halfcauchy_a;
    let g = hyper.horseshoe_global_scale;
    let mut total = 0.0;
    for (l, layer) in params.layers().iter().enumerate() {
        let w: Vec<f64> = layer.weights.iter().map(|v| v.as_f64()).collect();
        total += ln_dirichlet(&w, alpha[l]);
        if aux.components[l].len() != layer.components.len() {
            return Err(Error::contract(format!("auxiliaries missing for layer {}", l + 1)));
        }
        for (c, ax) in layer.components.iter().zip(&aux.components[l]) {
            let rows = c.mean.len();
            let cols = c.loading.ncols();
            if ax.noise_mix.len() != rows
                || ax.local.len() != rows
                || ax.local_mix.len() != rows
                || ax.local.iter().chain(&ax.local_mix).any(|r| r.len() != cols)
            {
                return Err(Error::contract("auxiliary shapes do not match the parameters"));
            }
            for v in c.mean.iter() {
                total += ln_cauchy(v.as_f64(), hyper.mean_cauchy_scale);
            }
            for (d, &m) in c.noise.iter().zip(&ax.noise_mix) {
                check_positive("noise mixing variable", m)?;
                total += ln_half_cauchy_chain(d.as_f64(), m, a);
            }
            check_positive("global horseshoe variance", ax.global)?;
            check_positive("global horseshoe mixing variable", ax.global_mix)?;
            total +=
                ln_inv_gamma(ax.global, 0.5, 1.0 / ax.global_mix) + ln_inv_gamma(ax.global_mix, 0.5, 1.0 / (g * g));
            for r in 0..rows {
                for j in 0..=r.min(cols.saturating_sub(1)) {
                    if j >= cols {
                        break;
                    }
                    let (lam, nu) = (ax.local[r][j], ax.local_mix[r][j]);
                    check_positive("local horseshoe variance", lam)?;
                    check_positive("local horseshoe mixing variable", nu)?;
                    total += ln_normal(c.loading[(r, j)].as_f64(), lam * ax.global);
                    total += ln_inv_gamma(lam, 0.5, 1.0 / nu) + ln_inv_gamma(nu, 0.5, 1.0);
                }
            }
        }
    }
    Ok(total)
}

/// Prior term of the observation variance, on the same half-Cauchy chain.
pub fn log_prior_noise(sigma2: f64, mix: f64, hyper: &PriorHyper) -> Result<f64> {
    check_positive("observation variance", sigma2)?;
    check_positive("observation variance mixing variable", mix)?;
    Ok(ln_half_cauchy_chain(sigma2, mix, hyper.scale_halfcauchy_a))
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "FactorComponent")]
struct ComponentRepr<T> {
    mean: Vec<T>,
    loading: Vec<Vec<T>>,
    noise: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "DmfaLayer")]
struct LayerRepr<T> {
    weights: Vec<T>,
    components: Vec<ComponentRepr<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "DmfaParams")]
struct ParamsRepr<T> {
    architecture: DmfaArchitecture,
    layers: Vec<LayerRepr<T>>,
}

impl<T: Scalar> Serialize for DmfaParams<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsRepr {
            architecture: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRepr {
                    weights: l.weights.iter().copied().collect(),
                    components: l
                        .components
                        .iter()
                        .map(|c| ComponentRepr {
                            mean: c.mean.iter().copied().collect(),
                            loading: linalg::to_rows(&c.loading),
                            noise: c.noise.iter().copied().collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for DmfaParams<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ParamsRepr::<T>::deserialize(d)?;
        let mut layers = Vec::with_capacity(repr.layers.len());
        for (l, layer) in repr.layers.into_iter().enumerate() {
            let cols = repr.architecture.latent_dims.get(l + 1).copied().unwrap_or(0);
            let components = layer
                .components
                .into_iter()
                .map(|c| {
                    Ok(FactorComponent {
                        mean: DVector::from_vec(c.mean),
                        loading: linalg::from_rows(&c.loading, cols)?,
                        noise: DVector::from_vec(c.noise),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(D::Error::custom)?;
            layers.push(DmfaLayer {
                weights: DVector::from_vec(layer.weights),
                components,
            });
        }
        DmfaParams::new(repr.architecture, layers).map_err(D::Error::custom)
    }
}

/// Random valid parameters, for tests and simulation.
pub fn random_params(
    arch: &DmfaArchitecture,
    seed: u64,
    loading_scale: f64,
    noise_range: (f64, f64),
) -> Result<DmfaParams<f64>> {
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::with_capacity(arch.n_layers());
    for l in 0..arch.n_layers() {
        let (r, c, k) = (arch.latent_dims[l], arch.latent_dims[l + 1], arch.components[l]);
        let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let components = (0..k)
            .map(|_| FactorComponent {
                mean: DVector::from_fn(r, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)),
                loading: DMatrix::from_fn(r, c, |_, _| loading_scale * rng.sample::<f64, _>(StandardNormal)),
                noise: DVector::from_fn(r, |_, _| {
                    noise_range.0 + (noise_range.1 - noise_range.0) * rng.random::<f64>()
                }),
            })
            .collect();
        layers.push(DmfaLayer {
            weights: DVector::from_iterator(k, raw.iter().map(|v| v / s)),
            components,
        });
    }
    DmfaParams::new(arch.clone(), layers)
}
