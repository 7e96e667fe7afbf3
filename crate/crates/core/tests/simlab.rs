use std::f64::consts::PI;

use dmlmm::gmm::GaussianMixture;
use dmlmm::predict::PredictiveResult;
use dmlmm::simlab::blackbox::{read_samples, samples_to_dataset, write_samples};
use dmlmm::simlab::dgp::van_der_pol_path;
use dmlmm::simlab::metrics::label_indices;
use dmlmm::simlab::*;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn dgp1_shapes_and_determinism() {
    let d = gen_dgp1(600, 7);
    assert_eq!(d.len(), 600);
    assert!(d
        .subjects
        .iter()
        .all(|s| s.n_obs() == 10 && s.times.iter().all(|t| (0.0..=1.0).contains(t))));
    assert!(d.subjects.iter().all(|s| s.times.windows(2).all(|w| w[0] <= w[1])));
    assert_eq!(d, gen_dgp1(600, 7));
    assert_ne!(d, gen_dgp1(600, 8));
    let labels = d.labels().unwrap();
    assert!(labels.iter().all(|l| l == "1" || l == "-1"));
    let with = gen_dgp1_with(
        &Dgp1Options {
            n_subjects: 5,
            n_holdout: 10,
            ..Dgp1Options::default()
        },
        1,
    );
    with.data.validate().unwrap();
    assert!(with.data.subjects.iter().all(|s| s.holdout_times.len() == 10));
    assert_eq!(with.holdout_signal[0].len(), 10);
}

#[test]
fn dgp1_large_sample_moments() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let n = 100_000;
    let noisy = gen_dgp1_with(
        &Dgp1Options {
            n_subjects: n,
            fixed_times: Some(vec![0.125]),
            ..Dgp1Options::default()
        },
        3,
    );
    let ys: Vec<f64> = noisy
        .data
        .subjects
        .iter()
        .filter(|s| s.label.as_deref() == Some("1"))
        .map(|s| s.values[0])
        .collect();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64).sqrt();
    assert!((m - 1.0).abs() < 4.0 * sd / (ys.len() as f64).sqrt(), "{m}");

    let clean = gen_dgp1_with(
        &Dgp1Options {
            n_subjects: n,
            noise_sd: 0.0,
            fixed_times: Some(grid.clone()),
            ..Dgp1Options::default()
        },
        4,
    );
    // functional error at t = 0.5 has variance 2 Σ var(ξ_k) sin²(kπ/2)
    let sds = [0.1f64, 0.045, 0.01, 0.001];
    let expect: f64 = 2.0
        * sds
            .iter()
            .enumerate()
            .map(|(k, s)| s * s * ((k + 1) as f64 * PI / 2.0).sin().powi(2))
            .sum::<f64>();
    let e: Vec<f64> = clean
        .data
        .subjects
        .iter()
        .map(|s| {
            let g: f64 = s.label.as_deref().unwrap().parse().unwrap();
            s.values[5] - g * (4.0 * PI * 0.5).sin()
        })
        .collect();
    let var = e.iter().map(|v| v * v).sum::<f64>() / n as f64;
    // the standard error of a normal variance estimate is var·sqrt(2/n)
    assert!(
        (var - expect).abs() < 4.0 * expect * (2.0 / n as f64).sqrt(),
        "{var} vs {expect}"
    );

    for (label, sign) in [("1", 1.0), ("-1", -1.0)] {
        let group: Vec<_> = clean
            .data
            .subjects
            .iter()
            .filter(|s| s.label.as_deref() == Some(label))
            .collect();
        for (j, &t) in grid.iter().enumerate() {
            let mean = group.iter().map(|s| s.values[j]).sum::<f64>() / group.len() as f64;
            assert!((mean - sign * (4.0 * PI * t).sin()).abs() < 0.05);
        }
    }
}

fn rk4_van_der_pol(theta: f64, dt: f64, t_end: f64) -> f64 {
    let rhs = |f: f64, g: f64| (g, theta * (1.0 - f * f) * g - f);
    let (mut f, mut g) = (1.0, 0.1);
    for _ in 0..(t_end / dt).round() as usize {
        let (a1, b1) = rhs(f, g);
        let (a2, b2) = rhs(f + 0.5 * dt * a1, g + 0.5 * dt * b1);
        let (a3, b3) = rhs(f + 0.5 * dt * a2, g + 0.5 * dt * b2);
        let (a4, b4) = rhs(f + dt * a3, g + dt * b3);
        f += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        g += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    }
    f
}

#[test]
fn dgp2_deterministic_path_converges_to_the_ode() {
    // Euler is first order: the error against a fine RK4 solution at t = 10
    // shrinks tenfold per tenfold step refinement
    let theta = 1f64.exp();
    let oracle = rk4_van_der_pol(theta, 1e-5, 10.0);
    let err = |dt: f64| {
        let mut rng = dmlmm::rng::seeded(0);
        (van_der_pol_path(theta, 0.0, dt, 10.0, &mut rng)
            .unwrap()
            .last()
            .unwrap()
            - oracle)
            .abs()
    };
    let (e3, e4, e5) = (err(1e-3), err(1e-4), err(1e-5));
    assert!(e5 < 1e-2, "{e5}");
    assert!(e4 / e3 > 0.05 && e4 / e3 < 0.2, "{e3} {e4}");
    assert!(e5 < e4 && e4 < e3);
}

#[test]
fn dgp2_sizes_and_determinism() {
    let d = gen_dgp2(100, 5);
    assert_eq!(d.len(), 100);
    for s in &d.subjects {
        assert!((15..=25).contains(&s.n_obs()));
        assert!(s.times.iter().all(|t| (10.0..=20.0).contains(t)));
    }
    assert_eq!(d, gen_dgp2(100, 5));
}

#[test]
fn dgp2_step_refinement_preserves_the_law() {
    let n = 10_000;
    let draw = |dt: f64, seed: u64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut rng = dmlmm::rng::seeded(dmlmm::rng::split(seed, i));
                loop {
                    let theta = rng.random_range(1.0..5.0f64).exp();
                    if let Some(p) = van_der_pol_path(theta, 0.5, dt, 15.0, &mut rng) {
                        break *p.last().unwrap();
                    }
                }
            })
            .collect()
    };
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let (m1, v1) = stats(&draw(1e-3, 1));
    let (m2, v2) = stats(&draw(5e-4, 2));
    let se = ((v1 + v2) / n as f64).sqrt();
    assert!((m1 - m2).abs() < 2.0 * se, "{m1} vs {m2} (se {se})");
}

#[test]
fn dgp3_structure() {
    let d = gen_dgp3(120, 9);
    assert_eq!(d.len(), 120);
    for s in &d.subjects {
        assert!((15..=20).contains(&s.holdout_times.len()));
        assert_eq!(s.n_obs() + s.holdout_times.len(), 40);
    }
    d.validate().unwrap();
    let many = gen_dgp3(3000, 1);
    let mut labels = many.labels().unwrap();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 36);
}

struct Constant;

impl BlackBoxSimulator for Constant {
    fn series_length(&self) -> usize {
        4
    }

    fn simulate(&self, _rng: &mut dmlmm::rng::Rng) -> (Vec<f64>, serde_json::Value) {
        (vec![1.0; 4], serde_json::Value::Null)
    }
}

#[test]
fn blackbox_runs() {
    let run = simulate_blackbox(&Constant, 5, 1, None).unwrap();
    assert!(run.samples.iter().all(|s| s.series == vec![1.0; 4]));
    assert_eq!(run.acceptance_rate(), 1.0);
    let lenient = PeakRule {
        threshold: -1.0,
        log_scale: false,
    };
    assert_eq!(
        simulate_blackbox(&Constant, 5, 1, Some(&lenient))
            .unwrap()
            .acceptance_rate(),
        1.0
    );
    let never = PeakRule {
        threshold: 10.0,
        log_scale: false,
    };
    assert!(simulate_blackbox(&Constant, 1, 1, Some(&never)).is_err());

    let toy = ToySeasonal::default();
    let run = simulate_blackbox(&toy, 7500, 3, Some(&PeakRule::default())).unwrap();
    assert_eq!(run.samples.len(), 7500);
    assert!(run.acceptance_rate() > 0.1 && run.acceptance_rate() <= 1.0);
    let (train, test) = run.samples.split_at(5000);
    assert_eq!((train.len(), test.len()), (5000, 2500));
    assert!(run
        .samples
        .iter()
        .all(|s| s.series.len() == 128 && PeakRule::default().accepts(&s.series)));
    let again = simulate_blackbox(&toy, 10, 3, Some(&PeakRule::default())).unwrap();
    assert_eq!(again.samples[..], run.samples[..10]);
    // a recorded seed regenerates its series
    let s = &run.samples[17];
    assert_eq!(toy.simulate(&mut dmlmm::rng::seeded(s.seed)).0, s.series);
}

#[test]
fn sample_files_round_trip() {
    let run = simulate_blackbox(&ToySeasonal::default(), 20, 4, None).unwrap();
    let dir = std::env::temp_dir().join(format!("dmlmm-samples-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (c, j) = (dir.join("s.csv"), dir.join("s.json"));
    write_samples(&run.samples, &c, &j).unwrap();
    assert_eq!(read_samples(&c, &j).unwrap(), run.samples);
    let data = samples_to_dataset(&run.samples, Some(80)).unwrap();
    assert!(data
        .subjects
        .iter()
        .all(|s| s.n_obs() == 80 && s.holdout_times.len() == 48));
    std::fs::remove_dir_all(dir).unwrap();
}

fn sample(series: Vec<f64>) -> SimulatorSample {
    SimulatorSample {
        series,
        seed: 0,
        params: serde_json::Value::Null,
    }
}

#[test]
fn abc_identities() {
    let mut rng = dmlmm::rng::seeded(2);
    let train: Vec<SimulatorSample> = (0..50)
        .map(|_| sample((0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect();
    let prefix = train[13].series[..4].to_vec();
    let p = abc_predict(&train, &prefix, 1).unwrap();
    assert_eq!(p.neighbors, vec![13]);
    assert_eq!(
        p.members.row(0).iter().copied().collect::<Vec<_>>(),
        train[13].series[4..].to_vec()
    );

    let all = abc_predict(&train, &prefix, 50).unwrap();
    let mut shuffled = train.clone();
    shuffled.shuffle(&mut rng);
    let all2 = abc_predict(&shuffled, &prefix, 50).unwrap();
    let sorted_rows = |m: &DMatrix<f64>| {
        let mut rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    };
    let expect: Vec<Vec<f64>> = {
        let mut v: Vec<Vec<f64>> = train.iter().map(|s| s.series[4..].to_vec()).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    assert_eq!(sorted_rows(&all.members), expect);
    assert_eq!(sorted_rows(&all2.members), expect);
    for (a, b) in all.mean().iter().zip(all2.mean()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(abc_predict(&[], &prefix, 1).is_err());
}

#[test]
fn abc_approaches_the_optimal_predictor() {
    // suffix = prefix mean + N(0, 0.5²); the best predictor has RMSE 0.5
    let make = |rng: &mut dmlmm::rng::Rng| {
        let mu: f64 = rng.sample(StandardNormal);
        let a = mu + rng.sample::<f64, _>(StandardNormal);
        let b = mu + rng.sample::<f64, _>(StandardNormal);
        let c = 0.5 * (a + b) + 0.5 * rng.sample::<f64, _>(StandardNormal);
        vec![a, b, c]
    };
    let mut rng = dmlmm::rng::seeded(5);
    let train: Vec<SimulatorSample> = (0..5000).map(|_| sample(make(&mut rng))).collect();
    let test: Vec<Vec<f64>> = (0..1000).map(|_| make(&mut rng)).collect();
    let optimal = (test.iter().map(|s| (s[2] - 0.5 * (s[0] + s[1])).powi(2)).sum::<f64>() / test.len() as f64).sqrt();
    let best = [10, 25, 50, 100, 200]
        .iter()
        .map(|&k| {
            let se: f64 = test
                .iter()
                .map(|s| (abc_predict(&train, &s[..2], k).unwrap().mean()[0] - s[2]).powi(2))
                .sum();
            (se / test.len() as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    assert!(best <= 1.1 * optimal, "{best} vs {optimal}");
}

fn standard_normal_result(t: usize) -> PredictiveResult<f64> {
    let mixture = GaussianMixture::gaussian(DVector::zeros(t), DMatrix::identity(t, t)).unwrap();
    PredictiveResult {
        tilde_weights: mixture.weights().clone(),
        mixture,
        grid: (0..t).map(|i| i as f64).collect(),
        provenance: "test".into(),
    }
}

#[test]
fn evaluation_identities() {
    let opts = EvalOptions {
        hdr_draws: 5000,
        ..EvalOptions::default()
    };
    let cases = vec![Case {
        key: "a".into(),
        prediction: standard_normal_result(3),
        truth: vec![0.0; 3],
        target: vec![0.0; 3],
    }];
    let m = evaluate(&cases, &opts).unwrap();
    assert_eq!(m.rmse, 0.0);
    assert!((m.neg_log_score - 3.0 * 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    assert!(m.pointwise.iter().all(|c| (0.0..=1.0).contains(&c.coverage)));

    let mut rng = dmlmm::rng::seeded(8);
    let mut many: Vec<Case<PredictiveResult<f64>>> = (0..30)
        .map(|i| {
            let y: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Case {
                key: format!("s{i}"),
                prediction: standard_normal_result(3),
                truth: y.clone(),
                target: y,
            }
        })
        .collect();
    let a = evaluate(&many, &opts).unwrap();
    many.shuffle(&mut rng);
    let b = evaluate(&many, &opts).unwrap();
    assert_eq!(a, b);

    let one = MetricsReport::new(vec![a.clone()]).unwrap();
    assert!(one.get("log_rmse").unwrap().sd.is_none());
    let mut buf = Vec::new();
    one.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("metric,mean\n"));
    let two = MetricsReport::new(vec![a.clone(), b]).unwrap();
    assert_eq!(two.get("log_rmse").unwrap().sd, Some(0.0));
}

#[test]
fn adjusted_rand_index_values() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
    // classic example: ARI of these two labelings is 0.24242...
    let a = [0, 0, 0, 1, 1, 1];
    let b = [0, 0, 1, 1, 2, 2];
    assert!((adjusted_rand_index(&a, &b).unwrap() - 0.242_424_242_424_242_4).abs() < 1e-12);
    assert_eq!(label_indices(&["x".into(), "y".into(), "x".into()]), vec![0, 1, 0]);
}
