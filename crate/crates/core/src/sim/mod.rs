//! Synthetic finite populations and the repeated-sampling experiment.
//!
//! Every repetition draws a fresh population, takes a simple random sample
//! without replacement in each area, runs the requested predictors and scores
//! them against that population's quantiles. Optionally each repetition also
//! runs the parametric bootstrap so that estimated and simulated MSEs can be
//! compared.

mod experiment;
mod population;
mod shadow;

pub use experiment::{
    run_experiment, version_string, ExperimentReport, RatioTable, RunMetadata, ScenarioSpec, DEFAULT_BOOTSTRAP_METHODS,
    MAX_REP_FAILURE_SHARE,
};
pub use population::{
    area_id, draw_sample, gen_population, BinomP, PopArea, Population, PopulationDesign, Scenario, BETA0, NUM_COVARIATES,
};
pub use shadow::shadow_population;
