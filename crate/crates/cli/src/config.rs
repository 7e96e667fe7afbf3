//! Run configuration, read from a TOML file and overridden by flags.

use std::path::{Path, PathBuf};

use dmlmm::simlab::{Dgp1Options, Dgp2Options, EvalOptions, PeakRule, ToySeasonal};
use dmlmm::{BasisSpec, DmfaArchitecture, FitConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: usize,
    pub out: Option<PathBuf>,
    /// Dataset CSV; for `evaluate` also a directory of them.
    pub data: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub basis: BasisSpec,
    pub architecture: Option<DmfaArchitecture>,
    pub fit: FitConfig,
    pub predict: PredictOptions,
    pub simulate: SimulateOptions,
    pub evaluate: EvalOptions,
    pub conflict: ConflictOptions,
    pub select: SelectOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: 1,
            out: None,
            data: None,
            bundle: None,
            basis: BasisSpec::Bspline {
                dimension: 10,
                domain: None,
                degree: 3,
                knots: None,
            },
            architecture: None,
            fit: FitConfig::default(),
            predict: PredictOptions::default(),
            simulate: SimulateOptions::default(),
            evaluate: EvalOptions::default(),
            conflict: ConflictOptions::default(),
            select: SelectOptions::default(),
        }
    }
}

/// Either explicit times or `points` equally spaced values on `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Times { times: Vec<f64> },
    Range { start: f64, end: f64, points: usize },
}

impl GridSpec {
    pub fn times(&self) -> Result<Vec<f64>, CliError> {
        match self {
            GridSpec::Times { times } => Ok(times.clone()),
            GridSpec::Range { start, end, points } => {
                if *points < 2 || !(start < end) {
                    return Err(CliError::input("grid range needs start < end and at least two points"));
                }
                let step = (end - start) / (*points - 1) as f64;
                Ok((0..*points)
                    .map(|i| {
                        if i + 1 == *points {
                            *end
                        } else {
                            start + step * i as f64
                        }
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    /// Subjects to predict; all subjects when unset.
    pub subjects: Option<Vec<String>>,
    /// Defaults to 50 points across the observed time range.
    pub grid: Option<GridSpec>,
    pub levels: Vec<f64>,
    /// Adds a `risk` column with `P(ỹ(t) > threshold)`.
    pub threshold: Option<f64>,
    /// Condition on only the first `retain` observations; 0 gives the marginal.
    pub retain: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            subjects: None,
            grid: None,
            levels: vec![0.95],
            threshold: None,
            retain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub generator: String,
    pub replicates: usize,
    pub dgp1: Dgp1Options,
    pub dgp2: Dgp2Options,
    pub dgp3_rows: usize,
    pub blackbox: ToySeasonal,
    pub count: usize,
    pub rule: Option<PeakRule>,
    /// Black-box series become subjects whose points after `prefix` are held out.
    pub prefix: Option<usize>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            generator: "dgp1".into(),
            replicates: 1,
            dgp1: Dgp1Options::default(),
            dgp2: Dgp2Options::default(),
            dgp3_rows: 120,
            blackbox: ToySeasonal::default(),
            count: 7500,
            rule: Some(PeakRule::default()),
            prefix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConflictOptions {
    pub subject: Option<String>,
    pub split: Option<usize>,
    pub n_prior_draws: usize,
    pub n_kl_samples: usize,
}

impl Default for ConflictOptions {
    fn default() -> Self {
        Self {
            subject: None,
            split: None,
            n_prior_draws: 1000,
            n_kl_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectOptions {
    pub candidates: Vec<DmfaArchitecture>,
    pub short_iterations: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            candidates: Vec::new(),
            short_iterations: 200,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    /// Seed shared by every stochastic step; there is no implicit entropy.
    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::input("no seed given: set `seed` in the config or pass --seed"))
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::input("no dataset given: set `data` or pass --data"))
    }

    pub fn bundle_path(&self) -> Result<&Path, CliError> {
        self.bundle
            .as_deref()
            .ok_or_else(|| CliError::input("no bundle given: set `bundle` or pass --bundle"))
    }

    pub fn architecture(&self) -> Result<&DmfaArchitecture, CliError> {
        self.architecture
            .as_ref()
            .ok_or_else(|| CliError::input("no architecture given: set [architecture]"))
    }

    /// Fit settings with the top-level seed and thread count applied.
    pub fn fit_config(&self) -> Result<FitConfig, CliError> {
        Ok(FitConfig {
            seed: self.seed()?,
            threads: self.threads,
            ..self.fit.clone()
        })
    }
}
