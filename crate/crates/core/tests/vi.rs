use dmlmm::dmfa::DmfaArchitecture;
use dmlmm::vi::{self, FitConfig, Problem, StepSchedule};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_problem(seed: u64) -> Problem {
    let mut rng = dmlmm::rng::seeded(seed);
    let designs: Vec<(DMatrix<f64>, DVector<f64>)> = (0..3)
        .map(|_| {
            let x = DMatrix::from_fn(2, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            (x, y)
        })
        .collect();
    Problem::from_designs(&designs).unwrap()
}

fn tiny_arch() -> DmfaArchitecture {
    DmfaArchitecture::new(vec![3, 1], vec![1]).unwrap()
}

fn full_batch_config() -> FitConfig {
    FitConfig {
        step: StepSchedule::Constant { value: 1.0 },
        local_tolerance: 0.0,
        local_max_sweeps: 200,
        ..FitConfig::default()
    }
}

#[test]
fn full_batch_coordinate_ascent_is_monotone() {
    for seed in 0..5 {
        let p = tiny_problem(seed);
        let cfg = full_batch_config();
        let mut state = vi::init_state(&p, &tiny_arch(), &cfg).unwrap();
        let all: Vec<usize> = (0..p.n()).collect();
        let mut prev = f64::NEG_INFINITY;
        for it in 0..60 {
            vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
            let after_local = vi::elbo(&state, &p, None).unwrap();
            assert!(
                after_local >= prev - 1e-8,
                "seed {seed} it {it} local: {prev} -> {after_local}"
            );
            vi::step_global(&mut state, &p, &all, 1.0).unwrap();
            let after_global = vi::elbo(&state, &p, None).unwrap();
            assert!(
                after_global >= after_local - 1e-8,
                "seed {seed} it {it} global: {after_local} -> {after_global}"
            );
            prev = after_global;
        }
    }
}

#[test]
fn mixture_coordinate_ascent_is_monotone() {
    let mut rng = dmlmm::rng::seeded(4);
    let designs: Vec<(DMatrix<f64>, DVector<f64>)> = (0..20)
        .map(|i| {
            let x = DMatrix::from_fn(6, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
            let shift = if i % 2 == 0 { 2.0 } else { -2.0 };
            let beta = DVector::from_fn(7, |_, _| shift + 0.3 * rng.sample::<f64, _>(StandardNormal));
            let y = &x * beta + DVector::from_fn(6, |_, _| 0.2 * rng.sample::<f64, _>(StandardNormal));
            (x, y)
        })
        .collect();
    let p = Problem::from_designs(&designs).unwrap();
    let arch = DmfaArchitecture::new(vec![7, 3, 1], vec![3, 2]).unwrap();
    let cfg = full_batch_config();
    let mut state = vi::init_state(&p, &arch, &cfg).unwrap();
    let all: Vec<usize> = (0..p.n()).collect();
    let mut prev = f64::NEG_INFINITY;
    for it in 0..40 {
        vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
        let a = vi::elbo(&state, &p, None).unwrap();
        assert!(a >= prev - 1e-7 * prev.abs().max(1.0), "it {it} local: {prev} -> {a}");
        vi::step_global(&mut state, &p, &all, 1.0).unwrap();
        let b = vi::elbo(&state, &p, None).unwrap();
        assert!(b >= a - 1e-7 * a.abs().max(1.0), "it {it} global: {a} -> {b}");
        prev = b;
    }
}

type Perturb = fn(&mut vi::VariationalState, f64);

#[test]
fn converged_state_is_stationary_under_perturbation() {
    let p = tiny_problem(11);
    let cfg = full_batch_config();
    let mut state = vi::init_state(&p, &tiny_arch(), &cfg).unwrap();
    let all: Vec<usize> = (0..p.n()).collect();
    for _ in 0..3000 {
        vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
        vi::step_global(&mut state, &p, &all, 1.0).unwrap();
    }
    vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
    let base = vi::elbo(&state, &p, None).unwrap();
    let cases: Vec<(&str, Perturb)> = vec![
        ("noise rate", |s, f| s.global.layers[0].components[0].noise[1].rate *= f),
        ("noise shape", |s, f| {
            s.global.layers[0].components[0].noise[1].shape *= f
        }),
        ("noise mix rate", |s, f| {
            s.global.layers[0].components[0].noise_mix[0].rate *= f
        }),
        ("mean scale rate", |s, f| {
            s.global.layers[0].components[0].mean_scale[2].rate *= f
        }),
        ("local rate", |s, f| {
            s.global.layers[0].components[0].local[1][0].rate *= f
        }),
        ("local mix rate", |s, f| {
            s.global.layers[0].components[0].local_mix[2][0].rate *= f
        }),
        ("global rate", |s, f| s.global.layers[0].components[0].global.rate *= f),
        ("global shape", |s, f| {
            s.global.layers[0].components[0].global.shape *= f
        }),
        ("global mix rate", |s, f| {
            s.global.layers[0].components[0].global_mix.rate *= f
        }),
        ("row mean", |s, f| {
            s.global.layers[0].components[0].rows[1].mean[0] += f - 1.0
        }),
        ("row loading", |s, f| {
            s.global.layers[0].components[0].rows[2].mean[1] += f - 1.0
        }),
        ("row var", |s, f| {
            s.global.layers[0].components[0].rows[1].cov[(1, 1)] *= f
        }),
        ("sigma2 rate", |s, f| s.global.sigma2.rate *= f),
        ("sigma2 shape", |s, f| s.global.sigma2.shape *= f),
        ("sigma2 mix", |s, f| s.global.sigma2_mix.rate *= f),
        ("beta mean", |s, f| s.local[1].beta_mean[0] += f - 1.0),
        ("beta var", |s, f| s.local[1].beta_var[2] *= f),
        ("z mean", |s, f| s.local[2].z[0][0].mean[0] += f - 1.0),
        ("z var", |s, f| s.local[2].z[0][0].cov[(0, 0)] *= f),
    ];
    for (name, perturb) in cases {
        for f in [0.99, 1.01] {
            let mut s = state.clone();
            perturb(&mut s, f);
            let v = vi::elbo(&s, &p, None).unwrap();
            assert!(v <= base + 1e-9, "{name} x{f}: {base} -> {v}");
        }
    }
}

#[test]
fn two_layer_state_is_stationary_under_perturbation() {
    let mut rng = dmlmm::rng::seeded(9);
    let designs: Vec<(DMatrix<f64>, DVector<f64>)> = (0..12)
        .map(|i| {
            let x = DMatrix::from_fn(7, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
            let shift = if i % 2 == 0 { 1.0 } else { -1.0 };
            let beta = DVector::from_fn(7, |_, _| shift + 0.5 * rng.sample::<f64, _>(StandardNormal));
            let y = &x * beta + DVector::from_fn(7, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            (x, y)
        })
        .collect();
    let p = Problem::from_designs(&designs).unwrap();
    let arch = DmfaArchitecture::new(vec![7, 3, 1], vec![2, 2]).unwrap();
    let cfg = full_batch_config();
    let mut state = vi::init_state(&p, &arch, &cfg).unwrap();
    let all: Vec<usize> = (0..p.n()).collect();
    for _ in 0..1500 {
        vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
        vi::step_global(&mut state, &p, &all, 1.0).unwrap();
    }
    vi::optimize_local(&mut state, &p, &all, &cfg).unwrap();
    let base = vi::elbo(&state, &p, None).unwrap();
    let cases: Vec<(&str, Perturb)> = vec![
        ("layer-2 dirichlet", |s, f| s.global.layers[1].dirichlet[0] *= f),
        ("layer-2 noise", |s, f| {
            s.global.layers[1].components[0].noise[2].rate *= f
        }),
        ("layer-2 loading", |s, f| {
            s.global.layers[1].components[1].rows[1].mean[1] += f - 1.0
        }),
        ("top z mean", |s, f| s.local[5].z[2][1].mean[0] += f - 1.0),
        ("top z var", |s, f| s.local[5].z[2][1].cov[(0, 0)] *= f),
        ("dirichlet", |s, f| s.global.layers[0].dirichlet[1] *= f),
        ("noise rate", |s, f| s.global.layers[0].components[1].noise[3].rate *= f),
        ("loading", |s, f| {
            s.global.layers[0].components[1].rows[3].mean[2] += f - 1.0
        }),
        ("resp", |s, f| {
            let r = &mut s.local[4].resp;
            let e = (f - 1.0) * r[0].min(r[3]);
            r[0] += e;
            r[3] -= e;
        }),
        ("z mean", |s, f| s.local[3].z[1][0].mean[1] += f - 1.0),
        ("z cov", |s, f| s.local[3].z[1][0].cov[(1, 1)] *= f),
    ];
    for (name, perturb) in cases {
        for f in [0.99, 1.01] {
            let mut s = state.clone();
            perturb(&mut s, f);
            let v = vi::elbo(&s, &p, None).unwrap();
            assert!(v <= base + 1e-9, "{name} x{f}: {base} -> {v}");
        }
    }
}
