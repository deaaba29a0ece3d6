//! Desk-scale experiments: identity checks, kernel convergence, sparsity,
//! synthetic tasks, gradient checks and operation counts, plus the CLI that
//! runs them.

pub mod cli;
pub mod complexity;
pub mod config;
pub mod models;
pub mod output;
pub mod suites;
pub mod tasks;

pub use complexity::{verify_complexity, ComplexityReport};
pub use config::ExperimentConfig;
pub use models::{GraphModel, RegressionModel, SeqModel, TaskKind};
pub use suites::{
    gradcheck_variant, run_decomposition_suite, run_kernel_convergence, run_sparsity_sweep,
    run_task, TaskReport,
};
pub use tasks::{SyntheticGraphTask, SyntheticSeqTask, ToyRegressionTask};
