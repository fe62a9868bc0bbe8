//! Noise functionals, cone invertibility factors, penalty calibration and
//! the selection and sparsity diagnostics.
pub mod cone;
pub mod glm_factors;
pub mod noise;
pub mod report;
pub mod selection;
pub mod sparsity;

pub use cone::{
    compatibility_constant, compatibility_constant_with, f2_factor, f2_factor_with,
    factor_ratio_at, restricted_eigenvalue, restricted_eigenvalue_with, simple_gif,
    simple_gif_with, ConeSpec, FactorEstimate, FactorKind, FactorMethod, FactorOptions, Phi,
};
pub use glm_factors::{
    default_m2, glm_gif_lower_bounds, glm_gif_lower_bounds_with, m3_constant, sigma_star,
    GlmFactorBounds,
};
pub use noise::{
    bregman_bound, event_xi_check, monte_carlo_event_probability, noise_functionals, oracle_bound,
    oracle_bounds, penalty_level, CalibrationMode, DataSummary, EventXi, NoiseFunctionals,
    OracleBounds, PenaltyLevels,
};
pub use report::{invertibility_report, GlmFactorInputs, InvertibilityReport, PhiFactor};
pub use selection::{
    irrepresentable_check, irrepresentable_check_with, EvaluationMode, SelectionEvent,
    SelectionReport, DEFAULT_BALL_SAMPLES,
};
pub use sparsity::{
    default_d_star, dimension_bound, gradient_condition, sparse_eigen_extremes,
    src_and_dimension_bound, src_cardinality, GradientCondition, SparsityReport,
    DEFAULT_SUBSET_CAP, MAX_EXHAUSTIVE_P,
};
