//! Command implementations. Every numeric output goes through `fmt_f64`
//! or serde_json, both of which round-trip, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dmlmm::data::fmt_f64;
use dmlmm::predict::{self, ConflictResult, PluginParams, PredictiveResult};
use dmlmm::simlab::blackbox::{samples_to_dataset, write_samples};
use dmlmm::simlab::metrics::{dmlmm_cases, label_indices};
use dmlmm::simlab::{self, adjusted_rand_index, evaluate as eval_cases, MetricsReport, SimulatedDataset};
use dmlmm::{vi, FitResult, LongitudinalDataset};
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_GRID_POINTS: usize = 50;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_data(path: &Path) -> Result<LongitudinalDataset> {
    match LongitudinalDataset::read_csv(path) {
        Err(dmlmm::Error::Io(e)) => Err(CliError::input(format!("{}: {e}", path.display()))),
        other => Ok(other?),
    }
}

fn read_bundle(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let config = cfg.fit_config()?;
    let data = read_data(cfg.data_path()?)?;
    let result = vi::fit(&data, &cfg.basis, cfg.architecture()?, &config)?;
    let out = cfg.out_dir()?;
    let bundle = out.join("fit_bundle.json");
    write_json(&bundle, &result)?;
    let trace = out.join("elbo_trace.csv");
    let mut w = csv::Writer::from_path(&trace)?;
    w.write_record(["iteration", "elbo"])?;
    for (i, v) in result.elbo_trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), fmt_f64(*v)])?;
    }
    w.flush()?;
    report(&bundle);
    report(&trace);
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    subject_id: &'a str,
    flag: &'static str,
    prediction: PredictiveResult<f64>,
}

fn default_grid(data: &LongitudinalDataset) -> Vec<f64> {
    let (lo, hi) = data
        .all_times()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !(lo < hi) {
        return vec![lo];
    }
    let step = (hi - lo) / (DEFAULT_GRID_POINTS - 1) as f64;
    (0..DEFAULT_GRID_POINTS)
        .map(|i| {
            if i + 1 == DEFAULT_GRID_POINTS {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect()
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let bundle = read_bundle(cfg.bundle_path()?)?;
    let data = read_data(cfg.data_path()?)?;
    let opts = &cfg.predict;
    let grid = match &opts.grid {
        Some(g) => g.times()?,
        None => default_grid(&data),
    };
    let subjects = match &opts.subjects {
        Some(ids) => ids
            .iter()
            .map(|id| {
                data.find(id)
                    .ok_or_else(|| CliError::input(format!("unknown subject `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => data.subjects.iter().collect(),
    };
    let plugin = &bundle.plugin;
    let records = with_pool(cfg, || {
        subjects
            .iter()
            .map(|s| {
                let keep = opts.retain.unwrap_or(s.n_obs()).min(s.n_obs());
                let prediction = predict::predictive(plugin, &s.times[..keep], &s.values[..keep], &grid, &s.id)?;
                Ok(PredictionRecord {
                    subject_id: &s.id,
                    flag: if keep == 0 { "marginal" } else { "conditional" },
                    prediction,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let out = cfg.out_dir()?;
    let table = out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&table)?;
    let mut header = vec!["subject_id".to_string(), "flag".into(), "t".into(), "mean".into()];
    for l in &opts.levels {
        header.push(format!("lower_{l}"));
        header.push(format!("upper_{l}"));
    }
    if opts.threshold.is_some() {
        header.push("risk".into());
    }
    w.write_record(&header)?;
    for r in &records {
        let mean = r.prediction.mean();
        let bands = opts
            .levels
            .iter()
            .map(|&l| predict::pointwise_band(&r.prediction, l))
            .collect::<dmlmm::Result<Vec<_>>>()?;
        for (j, t) in grid.iter().enumerate() {
            let mut row = vec![
                r.subject_id.to_string(),
                r.flag.to_string(),
                fmt_f64(*t),
                fmt_f64(mean[j]),
            ];
            for (lo, hi) in &bands {
                row.push(fmt_f64(lo[j]));
                row.push(fmt_f64(hi[j]));
            }
            if let Some(th) = opts.threshold {
                row.push(fmt_f64(predict::threshold_risk(&r.prediction, j, th)?));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let mixtures = out.join("predictive.json");
    write_json(&mixtures, &records)?;
    report(&table);
    report(&mixtures);
    Ok(())
}

/// Sidecar of a simulated dataset: enough to regenerate it, plus the truth
/// the CSV cannot carry.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub generator: String,
    /// Seed passed to the generator.
    pub seed: u64,
    pub options: serde_json::Value,
    pub resampled: usize,
    pub labels: BTreeMap<String, String>,
    /// Noise-free signal at each held-out time, as `(t, f(t))` pairs.
    pub holdout_signal: BTreeMap<String, Vec<(f64, f64)>>,
}

impl DatasetSidecar {
    fn new(generator: &str, seed: u64, options: serde_json::Value, sim: &SimulatedDataset) -> Self {
        let data = &sim.data;
        Self {
            generator: generator.into(),
            seed,
            options,
            resampled: sim.resampled,
            labels: data
                .subjects
                .iter()
                .filter_map(|s| s.label.clone().map(|l| (s.id.clone(), l)))
                .collect(),
            holdout_signal: data
                .subjects
                .iter()
                .zip(&sim.holdout_signal)
                .filter(|(s, f)| !s.holdout_times.is_empty() && f.len() == s.holdout_times.len())
                .map(|(s, f)| {
                    (
                        s.id.clone(),
                        s.holdout_times.iter().copied().zip(f.iter().copied()).collect(),
                    )
                })
                .collect(),
        }
    }
}

fn generate(cfg: &RunConfig, seed: u64) -> Result<(SimulatedDataset, serde_json::Value)> {
    let opts = &cfg.simulate;
    Ok(match opts.generator.as_str() {
        "dgp1" => (
            simlab::gen_dgp1_with(&opts.dgp1, seed),
            serde_json::to_value(&opts.dgp1)?,
        ),
        "dgp2" => (
            simlab::gen_dgp2_with(&opts.dgp2, seed),
            serde_json::to_value(opts.dgp2)?,
        ),
        "dgp3" => (
            simlab::gen_dgp3_with(opts.dgp3_rows, seed),
            serde_json::json!({ "n_rows": opts.dgp3_rows }),
        ),
        other => {
            return Err(CliError::input(format!(
                "unknown generator `{other}` (expected dgp1, dgp2, dgp3 or blackbox)"
            )))
        }
    })
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let opts = &cfg.simulate;
    let out = cfg.out_dir()?;
    if opts.generator == "blackbox" {
        if opts.replicates != 1 {
            return Err(CliError::input("the blackbox generator writes a single sample set"));
        }
        let run = with_pool(cfg, || {
            Ok(simlab::simulate_blackbox(
                &opts.blackbox,
                opts.count,
                seed,
                opts.rule.as_ref(),
            )?)
        })?;
        let (csv_path, json_path) = (out.join("samples.csv"), out.join("samples.json"));
        write_samples(&run.samples, &csv_path, &json_path)?;
        let data = samples_to_dataset(&run.samples, opts.prefix)?;
        let sim = SimulatedDataset {
            holdout_signal: vec![Vec::new(); data.len()],
            data,
            resampled: 0,
        };
        let options = serde_json::json!({
            "blackbox": opts.blackbox,
            "count": opts.count,
            "rule": opts.rule,
            "prefix": opts.prefix,
            "attempts": run.attempts,
        });
        write_dataset(
            &out,
            "dataset",
            &sim,
            DatasetSidecar::new("blackbox", seed, options, &sim),
        )?;
        report(&csv_path);
        return Ok(());
    }
    if opts.replicates == 0 {
        return Err(CliError::input("replicates must be at least 1"));
    }
    for r in 0..opts.replicates {
        let (stem, s) = if opts.replicates == 1 {
            ("dataset".to_string(), seed)
        } else {
            (format!("replicate_{r:03}"), simlab::replicate_seed(seed, r))
        };
        let (sim, options) = generate(cfg, s)?;
        write_dataset(
            &out,
            &stem,
            &sim,
            DatasetSidecar::new(&opts.generator, s, options, &sim),
        )?;
    }
    Ok(())
}

fn write_dataset(out: &Path, stem: &str, sim: &SimulatedDataset, sidecar: DatasetSidecar) -> Result<()> {
    let csv_path = out.join(format!("{stem}.csv"));
    sim.data.write_csv(&csv_path)?;
    write_json(&out.join(format!("{stem}.json")), &sidecar)?;
    report(&csv_path);
    Ok(())
}

const LONG_HEADER: &str = "subject_id,t,y,holdout_flag";

/// A single file, or every long-format CSV in a directory in name order.
fn dataset_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&p)?;
            if text.lines().next().is_some_and(|h| h.trim() == LONG_HEADER) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::input(format!("no datasets in {}", path.display())));
    }
    Ok(files)
}

fn read_sidecar(csv_path: &Path) -> Result<Option<DatasetSidecar>> {
    let p = csv_path.with_extension("json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}

/// Held-out signal aligned with each subject's held-out times.
fn aligned_signal(data: &LongitudinalDataset, side: &DatasetSidecar) -> Option<Vec<Vec<f64>>> {
    if side.holdout_signal.is_empty() {
        return None;
    }
    data.subjects
        .iter()
        .map(|s| {
            let pairs = side.holdout_signal.get(&s.id);
            s.holdout_times
                .iter()
                .map(|t| pairs?.iter().find(|(u, _)| u == t).map(|p| p.1))
                .collect::<Option<Vec<f64>>>()
        })
        .collect()
}

fn clustering_ari(
    plugin: &PluginParams<f64>,
    data: &LongitudinalDataset,
    side: &DatasetSidecar,
) -> Result<Option<f64>> {
    let labels: Option<Vec<String>> = data.subjects.iter().map(|s| side.labels.get(&s.id).cloned()).collect();
    let Some(labels) = labels else {
        return Ok(None);
    };
    let assigned = data
        .subjects
        .iter()
        .map(|s| predict::cluster_assign(plugin, &s.times, &s.values).map(|a| a.0))
        .collect::<dmlmm::Result<Vec<usize>>>()?;
    Ok(Some(adjusted_rand_index(&label_indices(&labels), &assigned)?))
}

#[derive(Serialize)]
struct EvaluationOutput {
    datasets: Vec<String>,
    adjusted_rand_index: Vec<Option<f64>>,
    report: MetricsReport,
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let files = dataset_files(cfg.data_path()?)?;
    let fixed = cfg.bundle.as_deref().map(read_bundle).transpose()?;
    let opts = simlab::EvalOptions {
        seed,
        ..cfg.evaluate.clone()
    };
    let mut names = Vec::new();
    let mut aris = Vec::new();
    let mut replicates = Vec::new();
    for file in &files {
        let data = read_data(file)?;
        if !data.has_holdouts() {
            return Err(CliError::input(format!("{} has no held-out points", file.display())));
        }
        let side = read_sidecar(file)?;
        let plugin = match &fixed {
            Some(b) => b.plugin.clone(),
            None => vi::fit(&data, &cfg.basis, cfg.architecture()?, &cfg.fit_config()?)?.plugin,
        };
        let signal = side.as_ref().and_then(|s| aligned_signal(&data, s));
        let metrics = with_pool(cfg, || {
            let cases = dmlmm_cases(&plugin, &data, signal.as_deref())?;
            Ok(eval_cases(&cases, &opts)?)
        })?;
        aris.push(match &side {
            Some(s) => clustering_ari(&plugin, &data, s)?,
            None => None,
        });
        names.push(
            file.file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        );
        replicates.push(metrics);
    }
    let report_all = MetricsReport::new(replicates)?;
    let out = cfg.out_dir()?;
    let json = out.join("metrics.json");
    write_json(
        &json,
        &EvaluationOutput {
            datasets: names,
            adjusted_rand_index: aris,
            report: report_all.clone(),
        },
    )?;
    let table = out.join("metrics.csv");
    report_all.write_csv(std::io::BufWriter::new(std::fs::File::create(&table)?))?;
    report(&json);
    report(&table);
    Ok(())
}

pub fn conflict(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let bundle = read_bundle(cfg.bundle_path()?)?;
    let data = read_data(cfg.data_path()?)?;
    let opts = &cfg.conflict;
    let subject = match &opts.subject {
        Some(id) => data
            .find(id)
            .ok_or_else(|| CliError::input(format!("unknown subject `{id}`")))?,
        None if data.len() == 1 => &data.subjects[0],
        None => {
            return Err(CliError::input(
                "several subjects in the dataset: set conflict.subject or pass --subject",
            ))
        }
    };
    let split = opts
        .split
        .ok_or_else(|| CliError::input("no split index: set conflict.split or pass --split"))?;
    let result: ConflictResult = with_pool(cfg, || {
        Ok(predict::conflict_tail_probability(
            &bundle.plugin,
            &subject.times,
            &subject.values,
            split,
            opts.n_prior_draws,
            opts.n_kl_samples,
            seed,
        )?)
    })?;
    let path = cfg.out_dir()?.join("conflict.json");
    write_json(&path, &result)?;
    report(&path);
    Ok(())
}

pub fn select_arch(cfg: &RunConfig) -> Result<()> {
    let config = cfg.fit_config()?;
    let data = read_data(cfg.data_path()?)?;
    let candidates = &cfg.select.candidates;
    if candidates.is_empty() {
        return Err(CliError::input("no candidates: set [[select.candidates]]"));
    }
    let selection = vi::select_architecture(&data, &cfg.basis, candidates, cfg.select.short_iterations, &config)?;
    let path = cfg.out_dir()?.join("selected_architecture.json");
    write_json(&path, &selection)?;
    report(&path);
    Ok(())
}
