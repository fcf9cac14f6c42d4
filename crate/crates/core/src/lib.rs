//! Counterfactual explanations for Local Outlier Factor outliers.
//!
//! Feature space is partitioned into regions where the neighbourhood
//! structure of a query location (its kNN and their kNN) is fixed. Inside a
//! region the LOF of the location is a smooth convex function of it, so the
//! closest location whose LOF falls below the outlier threshold can be found
//! with constrained gradient-based optimization, moving from region to region
//! until the optimum stays where it was computed.
//!
//! Modules, bottom up:
//!
//! * [`dataset`]: CSV ingestion, standardization, synthetic data
//! * [`neighbors`]: exact kNN search
//! * [`lof`]: LOF model, query and relocation scores, thresholds
//! * [`region`]: region keys, frozen-key LOF and its gradient, region maps
//! * [`opt`]: SQP solver for one region
//! * [`explain`]: single and multiple counterfactuals, ablation, baseline
//! * [`bench`]: metrics and the benchmark harness
//! * [`cli`]: command-line front end

pub mod bench;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod lof;
pub mod neighbors;
pub mod opt;
pub mod region;

pub use dataset::{load_csv, sample_gaussian, standardize, Dataset, ScalingParams};
pub use error::{DcfoError, Result};
pub use explain::{
    baseline_nearest_inlier, detect_outliers, explain_full_opt, explain_many, explain_one, CfStatus,
    CounterfactualResult, ExplainConfig, ValidityMode,
};
pub use lof::{build_model, lof_relocated, select_threshold, LofModel, ThresholdPolicy};
pub use opt::{constraint_with_margin, minimize_in_region, OptProblem, OptResult, OptStatus, Tolerances};
pub use region::{grad_lof_region, key_of, lof_region, region_map_grid, NeighborhoodKey};
