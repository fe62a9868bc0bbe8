//! Weighted l1-penalized GLM estimation, multistage adaptive refinement and
//! diagnostics for cone invertibility factors and oracle inequalities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod glm;
pub mod io;
pub mod multistage;
pub mod penalty;
pub(crate) mod serde_vec;
pub mod sim;
pub mod solver;

pub use analysis::{
    ConeSpec, FactorEstimate, FactorMethod, FactorOptions, InvertibilityReport, Phi,
    SelectionReport, SparsityReport,
};
pub use error::{Error, Result};
pub use experiment::{
    run_experiment, ExperimentConfig, ExperimentKind, LambdaChoice, SimulationResult,
};
pub use glm::{Dataset, FamilyKind, GlmFamily, LossEvaluation};
pub use io::{emit_report, ingest_csv, render_report, FitReport, Report, ReportFormat};
pub use multistage::{
    ContractionInputs, ContractionReport, MultistageConfig, StageRecord, StageTrace,
};
pub use penalty::{PenaltyKind, PenaltySpec};
pub use sim::{generate_synthetic, DesignSpec};
pub use solver::{FitConfig, FitResult};
