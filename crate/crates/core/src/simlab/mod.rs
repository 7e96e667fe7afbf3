//! Simulation harness: DGP generators, black-box simulators, the ABC
//! baseline and evaluation metrics. Double precision only.
//!
//! Replicate `r` of an experiment seeded with `s` uses seed
//! [`replicate_seed`]`(s, r)`, so replicate loops may run in any order.

pub mod abc;
pub mod blackbox;
pub mod dgp;
pub mod metrics;

pub use abc::{abc_predict, AbcPredictive};
pub use blackbox::{simulate_blackbox, BlackBoxRun, BlackBoxSimulator, PeakRule, SimulatorSample, ToySeasonal};
pub use dgp::{
    gen_dgp1, gen_dgp1_with, gen_dgp2, gen_dgp2_with, gen_dgp3, gen_dgp3_with, Dgp1Options, Dgp2Options,
    SimulatedDataset,
};
pub use metrics::{adjusted_rand_index, evaluate, Case, EvalOptions, MetricsReport, Predictive, ReplicateMetrics};

pub fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    crate::rng::split(seed, 0x5EED_0000 + replicate as u64)
}
