//! Synthetic longitudinal generators.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Subject};
use crate::rng;

/// A generated dataset plus the noise-free signal at every held-out time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub data: LongitudinalDataset,
    /// `holdout_signal[i][j]` pairs with `data.subjects[i].holdout_times[j]`.
    pub holdout_signal: Vec<Vec<f64>>,
    /// Subjects redrawn after a numerical blow-up.
    #[serde(default)]
    pub resampled: usize,
}

fn normal(rng: &mut rng::Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn sorted_uniform(rng: &mut rng::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    t.sort_by(f64::total_cmp);
    t
}

/// Uniform draws on `[lo, hi)` avoiding every time in `taken`.
fn fresh_times(rng: &mut rng::Rng, n: usize, lo: f64, hi: f64, taken: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let t = rng.random_range(lo..hi);
        if !taken.contains(&t) && !out.contains(&t) {
            out.push(t);
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dgp1Options {
    pub n_subjects: usize,
    pub n_obs: usize,
    /// Extra time points per subject moved to the held-out set.
    pub n_holdout: usize,
    pub noise_sd: f64,
    /// Shared observation times instead of uniform draws.
    pub fixed_times: Option<Vec<f64>>,
}

impl Default for Dgp1Options {
    fn default() -> Self {
        Self {
            n_subjects: 600,
            n_obs: 10,
            n_holdout: 0,
            noise_sd: 0.3,
            fixed_times: None,
        }
    }
}

const DGP1_XI_SD: [f64; 4] = [0.1, 0.045, 0.01, 0.001];

/// Two groups with means `±sin(4πt)` plus a four-term functional error.
pub fn gen_dgp1(n_subjects: usize, seed: u64) -> LongitudinalDataset {
    gen_dgp1_with(
        &Dgp1Options {
            n_subjects,
            ..Dgp1Options::default()
        },
        seed,
    )
    .data
}

pub fn gen_dgp1_with(opts: &Dgp1Options, seed: u64) -> SimulatedDataset {
    let mut subjects = Vec::with_capacity(opts.n_subjects);
    let mut signal = Vec::with_capacity(opts.n_subjects);
    for i in 0..opts.n_subjects {
        let mut rng = rng::seeded(rng::split(seed, i as u64));
        let g = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let xi: Vec<f64> = DGP1_XI_SD.iter().map(|sd| sd * normal(&mut rng)).collect();
        let f = |t: f64| {
            let err: f64 = xi
                .iter()
                .enumerate()
                .map(|(k, x)| x * ((k + 1) as f64 * PI * t).sin())
                .sum();
            g * (4.0 * PI * t).sin() + 2f64.sqrt() * err
        };
        let times = match &opts.fixed_times {
            Some(t) => t.clone(),
            None => sorted_uniform(&mut rng, opts.n_obs, 0.0, 1.0),
        };
        let values = times.iter().map(|&t| f(t) + opts.noise_sd * normal(&mut rng)).collect();
        let mut s = Subject::new(format!("s{i}"), times, values);
        s.holdout_times = fresh_times(&mut rng, opts.n_holdout, 0.0, 1.0, &s.times);
        let truth: Vec<f64> = s.holdout_times.iter().map(|&t| f(t)).collect();
        s.holdout_values = truth.iter().map(|v| v + opts.noise_sd * normal(&mut rng)).collect();
        s.label = Some(if g > 0.0 { "1" } else { "-1" }.into());
        subjects.push(s);
        signal.push(truth);
    }
    SimulatedDataset {
        data: LongitudinalDataset { subjects },
        holdout_signal: signal,
        resampled: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dgp2Options {
    pub n_subjects: usize,
    pub n_holdout: usize,
    pub diffusion: f64,
    pub dt: f64,
}

impl Default for Dgp2Options {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            n_holdout: 0,
            diffusion: 0.5,
            dt: 1e-3,
        }
    }
}

pub const DGP2_END: f64 = 20.0;
const DGP2_BLOWUP: f64 = 1e6;

/// Euler–Maruyama path of the stochastic Van der Pol system on
/// `[0, t_end]` from `f(0) = 1`, `g(0) = 0.1`; `None` on blow-up.
pub fn van_der_pol_path(theta: f64, diffusion: f64, dt: f64, t_end: f64, rng: &mut rng::Rng) -> Option<Vec<f64>> {
    let steps = (t_end / dt).round() as usize;
    let sq = dt.sqrt();
    let (mut f, mut g) = (1.0f64, 0.1f64);
    let mut path = Vec::with_capacity(steps + 1);
    path.push(f);
    for _ in 0..steps {
        let (wf, wg) = if diffusion > 0.0 {
            (diffusion * sq * normal(rng), diffusion * sq * normal(rng))
        } else {
            (0.0, 0.0)
        };
        let df = g * dt + wf;
        let dg = (theta * (1.0 - f * f) * g - f) * dt + wg;
        f += df;
        g += dg;
        if !(f.abs() <= DGP2_BLOWUP) || !g.is_finite() {
            return None;
        }
        path.push(f);
    }
    Some(path)
}

/// Linear interpolation of a path stored on the step grid.
pub fn interpolate(path: &[f64], dt: f64, t: f64) -> f64 {
    let x = t / dt;
    let i = (x.floor() as usize).min(path.len() - 2);
    let w = x - i as f64;
    path[i] * (1.0 - w) + path[i + 1] * w
}

/// Noise-free observations of a stochastic Van der Pol oscillator with
/// `log θ ~ U(1, 5)`, sampled on `[10, 20]`.
pub fn gen_dgp2(n_subjects: usize, seed: u64) -> LongitudinalDataset {
    gen_dgp2_with(
        &Dgp2Options {
            n_subjects,
            ..Dgp2Options::default()
        },
        seed,
    )
    .data
}

pub fn gen_dgp2_with(opts: &Dgp2Options, seed: u64) -> SimulatedDataset {
    let mut subjects = Vec::with_capacity(opts.n_subjects);
    let mut signal = Vec::with_capacity(opts.n_subjects);
    let mut resampled = 0;
    for i in 0..opts.n_subjects {
        let mut rng = rng::seeded(rng::split(seed, i as u64));
        let path = loop {
            let theta = rng.random_range(1.0..5.0f64).exp();
            match van_der_pol_path(theta, opts.diffusion, opts.dt, DGP2_END, &mut rng) {
                Some(p) => break p,
                None => resampled += 1,
            }
        };
        let n = rng.random_range(15..=25);
        let times = sorted_uniform(&mut rng, n, 10.0, DGP2_END);
        let values = times.iter().map(|&t| interpolate(&path, opts.dt, t)).collect();
        let mut s = Subject::new(format!("s{i}"), times, values);
        s.holdout_times = fresh_times(&mut rng, opts.n_holdout, 10.0, DGP2_END, &s.times);
        s.holdout_values = s
            .holdout_times
            .iter()
            .map(|&t| interpolate(&path, opts.dt, t))
            .collect();
        signal.push(s.holdout_values.clone());
        subjects.push(s);
    }
    SimulatedDataset {
        data: LongitudinalDataset { subjects },
        holdout_signal: signal,
        resampled,
    }
}

const DGP3_LEN: usize = 40;
const DGP3_NOISE_SD: f64 = 0.1;

/// Cosine/sine mixtures on `t = 1..40` with 36 parameter combinations and
/// 15 to 20 held-out points per row.
pub fn gen_dgp3(n_rows: usize, seed: u64) -> LongitudinalDataset {
    gen_dgp3_with(n_rows, seed).data
}

pub fn gen_dgp3_with(n_rows: usize, seed: u64) -> SimulatedDataset {
    let mut subjects = Vec::with_capacity(n_rows);
    let mut signal = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let mut rng = rng::seeded(rng::split(seed, i as u64));
        let pick = |rng: &mut rng::Rng, v: &[f64]| v[rng.random_range(0..v.len())];
        let b1 = pick(&mut rng, &[1.0, 0.1]);
        let b2 = pick(&mut rng, &[1.0, 0.1]);
        let w1 = pick(&mut rng, &[1.0, 2.0, 3.0]);
        let w2 = pick(&mut rng, &[7.0, 8.0, 9.0]);
        let f = |t: f64| {
            let u = PI * (t - 1.0) / 39.0;
            b1 * (w1 * u).cos() + b2 * (w2 * u).sin()
        };
        let h = rng.random_range(15..=20);
        let mut held = [false; DGP3_LEN];
        for j in sample_indices(&mut rng, DGP3_LEN, h) {
            held[j] = true;
        }
        let mut s = Subject::new(format!("s{i}"), Vec::new(), Vec::new());
        let mut truth = Vec::new();
        for (j, &is_held) in held.iter().enumerate() {
            let t = (j + 1) as f64;
            let y = f(t) + DGP3_NOISE_SD * normal(&mut rng);
            if is_held {
                s.holdout_times.push(t);
                s.holdout_values.push(y);
                truth.push(f(t));
            } else {
                s.times.push(t);
                s.values.push(y);
            }
        }
        s.label = Some(format!("{b1},{b2},{w1},{w2}"));
        subjects.push(s);
        signal.push(truth);
    }
    SimulatedDataset {
        data: LongitudinalDataset { subjects },
        holdout_signal: signal,
        resampled: 0,
    }
}
