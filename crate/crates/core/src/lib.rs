//! Configuration sweeps over paired physics variants, tree-ensemble surrogates of
//! the resulting generalization gap, and exact Shapley attribution of that gap to
//! algorithm and hyperparameter choices.
//!
//! The crate is organised the way the analysis flows:
//!
//! * [`config_space`] declares the searchable algorithm/hyperparameter spaces and
//!   the normalized feature encoding.
//! * [`envlab`] provides the miniature tasks, each with an `M` and a `P` engine variant.
//! * [`trainers`] holds the four lightweight learning algorithms and policy evaluation.
//! * [`runner`] sweeps configurations and persists one record per trial.
//! * [`surrogate`] fits the random-forest model of the gap.
//! * [`shapley`] computes exact, sampled and pairwise-interaction Shapley values.
//! * [`guidance`] selects configurations, validates them against the sweep, and
//!   estimates physics sensitivity.
//! * [`report`] emits tables, plots and the end-to-end pipeline.

pub mod config_space;
pub mod envlab;
pub mod guidance;
pub mod report;
pub mod runner;
pub mod seed;
pub mod shapley;
pub mod surrogate;
pub mod trainers;

mod numfmt;

pub use config_space::{Configuration, ConfigurationSpace, FeatureVector};
pub use envlab::{Direction, Env, PhysicsParams, Task, Variant};
pub use runner::{ExperimentRecord, ResultStore, RunSpec};
pub use shapley::{Attribution, BackgroundSet, InteractionMatrix, Regressor};
pub use surrogate::{Dataset, ForestModel, ForestParams, ModelArtifact};
