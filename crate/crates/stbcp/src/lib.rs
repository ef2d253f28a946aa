//! Backward conformal prediction under hard size budgets.
//!
//! Instead of fixing a miscoverage level and accepting whatever set size
//! falls out, the pipeline here fixes an upper bound on the prediction-set
//! size, derives the smallest data-dependent miscoverage level that
//! respects it, and estimates the resulting coverage bound with a
//! leave-one-out construction. Non-conformity scores can be reshaped by a
//! data-dependent transformation (the step transform `w * 1(s >= w)` and
//! its relatives) that tightens the Markov-inequality coverage bound while
//! leaving the prediction sets themselves unchanged.
//!
//! Modules:
//! - [`data`]: score tables, feature matrices, splits, seeded rng streams;
//! - [`size_rule`]: constant / feature-entropy / data-driven size budgets;
//! - [`threshold`]: the budget-to-score-cutoff conversion `w(D, X)`;
//! - [`transform`]: the transformation family and the improvement operator;
//! - [`engine`]: e-variables, prediction sets, miscoverage levels, the
//!   leave-one-out and corrected estimators;
//! - [`experiment`]: Monte-Carlo trials and the aggregated metrics;
//! - [`synth`]: synthetic generators with exact label laws;
//! - [`verify`]: the theorem-checking suites.

// negated float comparisons like `!(x > 0.0)` double as NaN guards
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
mod error;
pub mod experiment;
pub mod size_rule;
pub mod synth;
pub mod threshold;
pub mod transform;
pub mod verify;

pub use data::{
    split_sample, trial_rng, CalibrationSplit, FeatureMatrix, LabelDistribution, ScoreTable,
};
pub use engine::{run_stbcp, EngineInputs, Flag, PredictionOutcome, TailProbability};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentSetup, MetricsSummary, TrialReport};
pub use size_rule::{BinningParams, EntropyBounds, SizeRule};
pub use threshold::Threshold;
pub use transform::{improve, objective_j, ScoreTransform, Transform};
pub use synth::{generate, GeneratorSpec, ScoreLaw, SyntheticData};
