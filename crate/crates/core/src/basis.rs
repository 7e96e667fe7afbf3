//! Design matrices `B(t)` for irregular time grids.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const DOMAIN_TOL: f64 = 1e-9;

fn default_degree() -> usize {
    3
}

/// Basis family and its parameters. Serializes as a tagged table,
/// e.g. `{family = "bspline", dimension = 10, domain = [0.0, 1.0]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BasisSpec {
    /// Legendre polynomials of degree `0..dimension` on `domain` mapped to [-1, 1].
    Legendre {
        dimension: usize,
        #[serde(default)]
        domain: Option<(f64, f64)>,
    },
    /// Clamped B-splines. Without explicit `knots`, interior knots are uniform.
    Bspline {
        dimension: usize,
        #[serde(default)]
        domain: Option<(f64, f64)>,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default)]
        knots: Option<Vec<f64>>,
    },
    /// Cyclic B-splines of period `period` on uniform knots.
    SeasonalBspline {
        dimension: usize,
        period: f64,
        #[serde(default = "default_degree")]
        degree: usize,
    },
    /// Horizontal concatenation of sub-bases in order.
    Composite { dimension: usize, parts: Vec<BasisSpec> },
}

/// Rows are `B(t_j)ᵀ` for the corresponding entry of `times`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T: Scalar> {
    pub values: DMatrix<T>,
    pub times: Vec<T>,
}

impl BasisSpec {
    pub fn legendre(dimension: usize, domain: (f64, f64)) -> Self {
        BasisSpec::Legendre {
            dimension,
            domain: Some(domain),
        }
    }

    pub fn bspline(dimension: usize, domain: (f64, f64)) -> Self {
        BasisSpec::Bspline {
            dimension,
            domain: Some(domain),
            degree: 3,
            knots: None,
        }
    }

    pub fn seasonal(dimension: usize, period: f64) -> Self {
        BasisSpec::SeasonalBspline {
            dimension,
            period,
            degree: 3,
        }
    }

    pub fn composite(parts: Vec<BasisSpec>) -> Self {
        let dimension = parts.iter().map(BasisSpec::dimension).sum();
        BasisSpec::Composite { dimension, parts }
    }

    pub fn dimension(&self) -> usize {
        match self {
            BasisSpec::Legendre { dimension, .. }
            | BasisSpec::Bspline { dimension, .. }
            | BasisSpec::SeasonalBspline { dimension, .. }
            | BasisSpec::Composite { dimension, .. } => *dimension,
        }
    }

    /// Fills every missing domain with `domain` (recursively for composites).
    pub fn with_domain(&self, domain: (f64, f64)) -> Self {
        match self {
            BasisSpec::Legendre {
                dimension,
                domain: None,
            } => BasisSpec::Legendre {
                dimension: *dimension,
                domain: Some(domain),
            },
            BasisSpec::Bspline {
                dimension,
                domain: None,
                degree,
                knots,
            } => BasisSpec::Bspline {
                dimension: *dimension,
                domain: Some(domain),
                degree: *degree,
                knots: knots.clone(),
            },
            BasisSpec::Composite { dimension, parts } => BasisSpec::Composite {
                dimension: *dimension,
                parts: parts.iter().map(|p| p.with_domain(domain)).collect(),
            },
            other => other.clone(),
        }
    }

    pub fn needs_domain(&self) -> bool {
        match self {
            BasisSpec::Legendre { domain, .. } | BasisSpec::Bspline { domain, .. } => domain.is_none(),
            BasisSpec::SeasonalBspline { .. } => false,
            BasisSpec::Composite { parts, .. } => parts.iter().any(BasisSpec::needs_domain),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension() == 0 {
            return Err(Error::contract("basis dimension must be at least 1"));
        }
        match self {
            BasisSpec::Legendre { domain, .. } => check_domain(domain).map(|_| ()),
            BasisSpec::Bspline {
                dimension,
                domain,
                degree,
                ..
            } => {
                let dom = check_domain(domain)?;
                check_knots(&self.knot_vector()?, *dimension, *degree, dom)
            }
            BasisSpec::SeasonalBspline {
                dimension,
                period,
                degree,
            } => {
                if !(*period > 0.0) || !period.is_finite() {
                    return Err(Error::contract("seasonal period must be positive"));
                }
                if *dimension < degree + 1 {
                    return Err(Error::contract(format!(
                        "seasonal basis needs at least degree+1 = {} columns",
                        degree + 1
                    )));
                }
                Ok(())
            }
            BasisSpec::Composite { dimension, parts } => {
                if parts.is_empty() {
                    return Err(Error::contract("composite basis needs at least one part"));
                }
                let sum: usize = parts.iter().map(BasisSpec::dimension).sum();
                if sum != *dimension {
                    return Err(Error::contract(format!(
                        "composite parts have total dimension {sum}, expected {dimension}"
                    )));
                }
                parts.iter().try_for_each(BasisSpec::validate)
            }
        }
    }

    /// Full clamped knot vector of a B-spline spec (length `d + degree + 1`).
    pub fn knot_vector(&self) -> Result<Vec<f64>> {
        match self {
            BasisSpec::Bspline {
                dimension,
                domain,
                degree,
                knots,
            } => match knots {
                Some(k) => Ok(k.clone()),
                None => {
                    let (a, b) = check_domain(domain)?;
                    uniform_clamped_knots(*dimension, *degree, a, b)
                }
            },
            _ => Err(Error::contract("knot vector is only defined for bspline bases")),
        }
    }

    /// Evaluates the basis at `times` (any order, repeats allowed).
    pub fn eval<T: Scalar>(&self, times: &[T]) -> Result<DesignMatrix<T>> {
        match self {
            BasisSpec::Legendre { .. } => eval_legendre(self, times),
            BasisSpec::Bspline { .. } => eval_bspline(self, times),
            BasisSpec::SeasonalBspline { .. } => eval_seasonal(self, times),
            BasisSpec::Composite { .. } => eval_composite(self, times),
        }
    }
}

/// `[min t, max t]` widened by a relative margin of `1e-6`.
pub fn infer_domain(times: impl IntoIterator<Item = f64>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in times {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::contract("cannot infer a basis domain from no times"));
    }
    let width = (hi - lo).max(lo.abs().max(hi.abs())).max(1.0);
    let margin = 1e-6 * width;
    Ok((lo - margin, hi + margin))
}

fn check_domain(domain: &Option<(f64, f64)>) -> Result<(f64, f64)> {
    let (a, b) = domain.ok_or_else(|| Error::contract("basis domain is not set"))?;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::contract(format!("degenerate basis domain ({a}, {b})")));
    }
    Ok((a, b))
}

fn check_times<T: Scalar>(times: &[T], (a, b): (f64, f64)) -> Result<()> {
    let tol = DOMAIN_TOL * (b - a).max(1.0);
    for (i, t) in times.iter().enumerate() {
        let t = t.as_f64();
        if !(t >= a - tol && t <= b + tol) {
            return Err(Error::contract(format!(
                "time at index {i} ({t}) lies outside the basis domain [{a}, {b}]"
            )));
        }
    }
    Ok(())
}

fn uniform_clamped_knots(d: usize, p: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    if d < p + 1 {
        return Err(Error::contract(format!(
            "bspline of degree {p} needs dimension at least {}",
            p + 1
        )));
    }
    let interior = d - p - 1;
    let mut knots = vec![a; p + 1];
    for i in 1..=interior {
        knots.push(a + (b - a) * i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(b, p + 1));
    Ok(knots)
}

fn check_knots(knots: &[f64], d: usize, p: usize, (a, b): (f64, f64)) -> Result<()> {
    if knots.len() != d + p + 1 {
        return Err(Error::contract(format!(
            "knot vector has length {}, expected {}",
            knots.len(),
            d + p + 1
        )));
    }
    if knots.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::contract("knot vector must be nondecreasing"));
    }
    let left = &knots[..=p];
    let right = &knots[d..];
    if left.iter().any(|&k| k != a) || right.iter().any(|&k| k != b) {
        return Err(Error::contract(
            "knot vector must repeat the domain endpoints degree+1 times",
        ));
    }
    for i in 0..d {
        if knots[i + p + 1] <= knots[i] {
            return Err(Error::contract(format!("basis function {i} has empty support")));
        }
    }
    Ok(())
}

/// Legendre columns via Bonnet's recurrence on the affinely mapped time.
pub fn eval_legendre<T: Scalar>(spec: &BasisSpec, times: &[T]) -> Result<DesignMatrix<T>> {
    let (d, dom) = match spec {
        BasisSpec::Legendre { dimension, domain } => (*dimension, check_domain(domain)?),
        _ => return Err(Error::contract("eval_legendre needs a legendre spec")),
    };
    spec.validate()?;
    check_times(times, dom)?;
    let (a, b) = (T::lit(dom.0), T::lit(dom.1));
    let two = T::lit(2.0);
    let mut values = DMatrix::zeros(times.len(), d);
    for (r, &t) in times.iter().enumerate() {
        let x = (two * (t - a) / (b - a) - T::one()).max(-T::one()).min(T::one());
        let mut prev = T::one();
        let mut cur = x;
        values[(r, 0)] = prev;
        if d > 1 {
            values[(r, 1)] = cur;
        }
        for n in 1..d.saturating_sub(1) {
            let nf = T::lit(n as f64);
            let next = ((two * nf + T::one()) * x * cur - nf * prev) / (nf + T::one());
            prev = cur;
            cur = next;
            values[(r, n + 1)] = cur;
        }
    }
    Ok(DesignMatrix {
        values,
        times: times.to_vec(),
    })
}

/// Clamped B-spline columns by the triangular Cox–de Boor scheme.
pub fn eval_bspline<T: Scalar>(spec: &BasisSpec, times: &[T]) -> Result<DesignMatrix<T>> {
    let (d, p, dom) = match spec {
        BasisSpec::Bspline {
            dimension,
            degree,
            domain,
            ..
        } => (*dimension, *degree, check_domain(domain)?),
        _ => return Err(Error::contract("eval_bspline needs a bspline spec")),
    };
    spec.validate()?;
    check_times(times, dom)?;
    let knots: Vec<T> = spec.knot_vector()?.into_iter().map(T::lit).collect();
    let mut values = DMatrix::zeros(times.len(), d);
    let mut basis = vec![T::zero(); p + 1];
    for (r, &t) in times.iter().enumerate() {
        let t = t.max(knots[p]).min(knots[d]);
        let span = find_span(&knots, d, p, t);
        basis_functions(&knots, span, p, t, &mut basis);
        for (j, &v) in basis.iter().enumerate() {
            values[(r, span - p + j)] = v;
        }
    }
    Ok(DesignMatrix {
        values,
        times: times.to_vec(),
    })
}

/// Index `i` with `knots[i] <= t < knots[i+1]`, using the last nonempty span
/// at the right endpoint.
fn find_span<T: Scalar>(knots: &[T], d: usize, p: usize, t: T) -> usize {
    if t >= knots[d] {
        let mut i = d - 1;
        while i > p && knots[i] == knots[i + 1] {
            i -= 1;
        }
        return i;
    }
    let (mut lo, mut hi) = (p, d);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

fn basis_functions<T: Scalar>(knots: &[T], span: usize, p: usize, t: T, out: &mut [T]) {
    let mut left = vec![T::zero(); p + 1];
    let mut right = vec![T::zero(); p + 1];
    out[0] = T::one();
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = T::zero();
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom > T::zero() { out[r] / denom } else { T::zero() };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Uniform cardinal B-spline of degree `p` supported on `[0, p+1)`.
fn cardinal_bspline<T: Scalar>(x: T, p: usize) -> T {
    let upper = T::lit((p + 1) as f64);
    if x < T::zero() || x >= upper {
        return T::zero();
    }
    // values N_0(x - i) for i = 0..=p, raised degree by degree
    let mut n: Vec<T> = (0..=p)
        .map(|i| {
            let xi = x - T::lit(i as f64);
            if xi >= T::zero() && xi < T::one() {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    for k in 1..=p {
        let kf = T::lit(k as f64);
        for i in 0..=(p - k) {
            let xi = x - T::lit(i as f64);
            n[i] = (xi * n[i] + (kf + T::one() - xi) * n[i + 1]) / kf;
        }
    }
    n[0]
}

/// Cyclic B-splines: each column sums the wrapped copies of a uniform
/// B-spline, so rows are exactly periodic in `t`.
pub fn eval_seasonal<T: Scalar>(spec: &BasisSpec, times: &[T]) -> Result<DesignMatrix<T>> {
    let (m, period, p) = match spec {
        BasisSpec::SeasonalBspline {
            dimension,
            period,
            degree,
        } => (*dimension, *period, *degree),
        _ => return Err(Error::contract("eval_seasonal needs a seasonal_bspline spec")),
    };
    spec.validate()?;
    let per = T::lit(period);
    let h = per / T::lit(m as f64);
    let mut values = DMatrix::zeros(times.len(), m);
    for (r, &t) in times.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::contract(format!("time at index {r} is not finite")));
        }
        let mut u = t % per;
        if u < T::zero() {
            u += per;
        }
        if u >= per {
            u = T::zero();
        }
        let x = u / h; // in [0, m)
        for j in 0..m {
            let mut v = T::zero();
            // the support [j, j+p+1) may wrap past m
            let mut shift = x - T::lit(j as f64);
            if shift < T::zero() {
                shift += T::lit(m as f64);
            }
            let mut s = shift;
            while s < T::lit((p + 1) as f64) {
                v += cardinal_bspline(s, p);
                s += T::lit(m as f64);
            }
            values[(r, j)] = v;
        }
    }
    Ok(DesignMatrix {
        values,
        times: times.to_vec(),
    })
}

pub fn eval_composite<T: Scalar>(spec: &BasisSpec, times: &[T]) -> Result<DesignMatrix<T>> {
    let parts = match spec {
        BasisSpec::Composite { parts, .. } => parts,
        _ => return Err(Error::contract("eval_composite needs a composite spec")),
    };
    spec.validate()?;
    let blocks = parts.iter().map(|p| p.eval(times)).collect::<Result<Vec<_>>>()?;
    let mut values = DMatrix::zeros(times.len(), spec.dimension());
    let mut col = 0;
    for b in blocks {
        let w = b.values.ncols();
        values.view_mut((0, col), (times.len(), w)).copy_from(&b.values);
        col += w;
    }
    Ok(DesignMatrix {
        values,
        times: times.to_vec(),
    })
}
