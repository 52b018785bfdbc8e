//! Config-driven experiment runs: load data, run every (arm, shots, query)
//! cell through retrieve -> manipulate -> serialize -> generate -> score,
//! stream rows to disk and write the aggregate report.

mod config;
mod run;

pub use config::{
    interpolate_env, ArmConfig, DatasetConfig, EmbedderSpec, EmbeddingPaths, ExperimentConfig,
};
pub use run::{
    load_corpus, prepare, run_experiment, run_prepared, Prepared, RunOptions, RunSummary,
    META_FILE, ROWS_FILE,
};
