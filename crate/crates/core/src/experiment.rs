//! Experiment configuration and Monte Carlo orchestration.
//!
//! Replicates run on the rayon pool, each with its own response stream, and
//! land in index order, so results depend only on the configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    bregman_bound, default_d_star, default_m2, event_xi_check, f2_factor_with,
    glm_gif_lower_bounds_with, invertibility_report, irrepresentable_check, noise_functionals,
    oracle_bound, penalty_level, sigma_star, simple_gif_with, sparse_eigen_extremes,
    src_and_dimension_bound, CalibrationMode, ConeSpec, DataSummary, EvaluationMode,
    FactorEstimate, FactorMethod, FactorOptions, GlmFactorInputs, InvertibilityReport, Phi,
    SelectionEvent, SelectionReport, SparsityReport, DEFAULT_SUBSET_CAP, MAX_EXHAUSTIVE_P,
};
use crate::error::{Error, Result};
use crate::glm::{bregman_divergence, hessian, negative_gradient, Dataset, FamilyKind, GlmFamily};
use crate::io::tree::Node;
use crate::io::{envelope, Report, ReportFormat};
use crate::multistage::{
    contraction_report, minimal_ell_star, run_recursion, ContractionInputs, ContractionReport,
    MultistageConfig,
};
use crate::penalty::{lipschitz_kappa, rho_derivative, PenaltyKind, PenaltySpec};
use crate::sim::{generate_synthetic, replicate_dataset, DesignSpec};
use crate::solver::{
    fit_weighted_lasso, geometric_lambdas, lambda_max, solution_path, FitConfig, FitResult,
};

/// Relative slack when comparing an observed quantity with its bound.
pub const BOUND_RELATIVE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fit,
    Path,
    Multistage,
    OracleVerify,
    SelectionVerify,
    SparsityVerify,
    Diagnostics,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Fit,
        ExperimentKind::Path,
        ExperimentKind::Multistage,
        ExperimentKind::OracleVerify,
        ExperimentKind::SelectionVerify,
        ExperimentKind::SparsityVerify,
        ExperimentKind::Diagnostics,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Fit => "fit",
            ExperimentKind::Path => "path",
            ExperimentKind::Multistage => "multistage",
            ExperimentKind::OracleVerify => "oracle_verify",
            ExperimentKind::SelectionVerify => "selection_verify",
            ExperimentKind::SparsityVerify => "sparsity_verify",
            ExperimentKind::Diagnostics => "diagnostics",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::domain(format!("unknown experiment `{s}`")))
    }
}

/// `auto` calibrates the level from the design; otherwise a fixed value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum LambdaChoice {
    #[default]
    Auto,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Value(f64),
    Text(String),
}

impl TryFrom<LambdaRepr> for LambdaChoice {
    type Error = String;

    fn try_from(r: LambdaRepr) -> std::result::Result<Self, String> {
        match r {
            LambdaRepr::Value(v) => LambdaChoice::checked(v),
            LambdaRepr::Text(s) => s.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<LambdaChoice> for LambdaRepr {
    fn from(c: LambdaChoice) -> Self {
        match c {
            LambdaChoice::Auto => LambdaRepr::Text("auto".to_string()),
            LambdaChoice::Value(v) => LambdaRepr::Value(v),
        }
    }
}

impl LambdaChoice {
    fn checked(v: f64) -> std::result::Result<Self, String> {
        if v > 0.0 && v.is_finite() {
            Ok(LambdaChoice::Value(v))
        } else {
            Err(format!("lambda must be positive and finite, got {v}"))
        }
    }
}

impl FromStr for LambdaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LambdaChoice::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::domain(format!("lambda must be `auto` or a number, got `{s}`")))?;
        LambdaChoice::checked(v).map_err(Error::Domain)
    }
}

/// Penalties read as `"mcp:3"` strings or `{ kind = "mcp", gamma = 3 }` tables.
mod penalty_repr {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Table(PenaltyKind),
    }

    pub fn serialize<S: Serializer>(
        kind: &PenaltyKind,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&kind.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<PenaltyKind, D::Error> {
        let kind = match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
            Repr::Table(k) => k,
        };
        kind.validate().map_err(serde::de::Error::custom)?;
        Ok(kind)
    }
}

fn default_family() -> FamilyKind {
    FamilyKind::Linear
}
fn default_penalty() -> PenaltyKind {
    PenaltyKind::L1
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_replicates() -> usize {
    100
}
fn default_eps0() -> f64 {
    0.05
}
fn default_stages() -> usize {
    3
}
fn default_a_const() -> f64 {
    3.0
}
fn default_alpha() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    0.05
}
fn default_path_length() -> usize {
    20
}
fn default_path_ratio() -> f64 {
    0.01
}
fn default_restarts() -> usize {
    FactorOptions::default().restarts
}
fn default_enumeration_cap() -> usize {
    FactorOptions::default().enumeration_cap
}
fn default_ball_samples() -> usize {
    crate::analysis::DEFAULT_BALL_SAMPLES
}

/// A declarative experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_family")]
    pub family: FamilyKind,
    /// Noise variance of the linear family; ignored by the others.
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "default_penalty", with = "penalty_repr")]
    pub penalty: PenaltyKind,
    #[serde(default)]
    pub lambda: LambdaChoice,
    /// Multiplies the calibrated level when `lambda = "auto"`.
    #[serde(default = "one")]
    pub lambda_scale: f64,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub s0_size: usize,
    #[serde(default)]
    pub beta_min: f64,
    #[serde(default)]
    pub beta_max: f64,
    #[serde(default)]
    pub design: DesignSpec,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    /// Cone width for the factor computations; experiment-specific default.
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// `A` in `lambda = A lambda0 / (1 - kappa gamma0)`.
    #[serde(default = "default_a_const")]
    pub a_const: f64,
    #[serde(default = "one")]
    pub gamma0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Curvature slack `eta` for the sparsity and selection checks.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_path_length")]
    pub path_length: usize,
    #[serde(default = "default_path_ratio")]
    pub path_ratio: f64,
    #[serde(default = "default_restarts")]
    pub factor_restarts: usize,
    #[serde(default = "default_enumeration_cap")]
    pub enumeration_cap: usize,
    #[serde(default = "default_ball_samples")]
    pub ball_samples: usize,
}

impl ExperimentConfig {
    /// A configuration with every optional field at its default.
    pub fn new(experiment: ExperimentKind, n: usize, p: usize) -> Self {
        ExperimentConfig {
            experiment,
            family: default_family(),
            sigma2: 1.0,
            penalty: default_penalty(),
            lambda: LambdaChoice::Auto,
            lambda_scale: 1.0,
            n,
            p,
            s0_size: 0,
            beta_min: 0.0,
            beta_max: 0.0,
            design: DesignSpec::default(),
            standardize: true,
            replicates: default_replicates(),
            eps0: default_eps0(),
            xi: None,
            seed: 0,
            output: None,
            format: ReportFormat::default(),
            stages: default_stages(),
            a_const: default_a_const(),
            gamma0: 1.0,
            alpha: default_alpha(),
            eta: default_eta(),
            path_length: default_path_length(),
            path_ratio: default_path_ratio(),
            factor_restarts: default_restarts(),
            enumeration_cap: default_enumeration_cap(),
            ball_samples: default_ball_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Domain(msg));
        if self.n == 0 || self.p == 0 {
            return fail(format!(
                "n and p must be positive, got n = {}, p = {}",
                self.n, self.p
            ));
        }
        if self.s0_size > self.p {
            return fail(format!("s0_size = {} exceeds p = {}", self.s0_size, self.p));
        }
        if self.replicates == 0 {
            return fail("replicates must be at least 1".to_string());
        }
        self.design.validate()?;
        self.penalty.validate()?;
        if !(self.eps0 > 0.0 && self.eps0 < 1.0) {
            return fail(format!("eps0 must lie in (0, 1), got {}", self.eps0));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return fail(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return fail("need 0 <= beta_min <= beta_max < inf".to_string());
        }
        if let Some(xi) = self.xi {
            if !(xi >= 1.0 && xi.is_finite()) {
                return fail(format!("xi must be finite and at least 1, got {xi}"));
            }
        }
        if !(self.lambda_scale > 0.0 && self.lambda_scale.is_finite()) {
            return fail(format!(
                "lambda_scale must be positive, got {}",
                self.lambda_scale
            ));
        }
        if !(self.a_const > 1.0) || !(self.gamma0 > 0.0) {
            return fail("need a_const > 1 and gamma0 > 0".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(0.0..1.0).contains(&self.eta) {
            return fail("need alpha in (0, 1] and eta in [0, 1)".to_string());
        }
        if self.stages == 0
            || self.path_length == 0
            || !(self.path_ratio > 0.0 && self.path_ratio < 1.0)
        {
            return fail("need stages >= 1, path_length >= 1 and path_ratio in (0, 1)".to_string());
        }
        if self.factor_restarts == 0 {
            return fail("factor_restarts must be at least 1".to_string());
        }
        Ok(())
    }

    pub fn glm_family(&self) -> Result<GlmFamily> {
        GlmFamily::new(self.family).with_sigma2(self.sigma2)
    }

    pub fn factor_options(&self) -> FactorOptions {
        FactorOptions {
            enumeration_cap: self.enumeration_cap,
            restarts: self.factor_restarts,
            seed: self.seed,
            ..FactorOptions::default()
        }
    }

    fn support(&self) -> Vec<usize> {
        (0..self.s0_size).collect()
    }
}

/// An observed quantity compared with its theoretical bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub bound: f64,
    pub observed: f64,
    /// The events under which the bound is claimed all hold.
    pub in_event: bool,
    /// Every factor entering the bound is a certified lower bound.
    pub certified: bool,
    pub satisfied: bool,
}

impl BoundCheck {
    fn new(
        name: &str,
        bound: f64,
        observed: f64,
        slack: f64,
        in_event: bool,
        certified: bool,
    ) -> Self {
        BoundCheck {
            name: name.to_string(),
            bound,
            observed,
            in_event,
            certified,
            satisfied: observed <= bound + BOUND_RELATIVE_SLACK * bound.abs() + slack,
        }
    }

    pub fn is_violation(&self) -> bool {
        self.in_event && self.certified && !self.satisfied
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub l2_error: f64,
    pub active_set_size: usize,
    /// Oracle bound on the l2 error at this level, when the cone event holds.
    pub bound: Option<f64>,
}

/// Outcome of one replicate. Fields that an experiment does not evaluate
/// stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub error: Option<String>,
    pub lambda: Option<f64>,
    pub converged: Option<bool>,
    pub kkt_residual: Option<f64>,
    pub l2_error: Option<f64>,
    pub l1_error: Option<f64>,
    pub linf_error: Option<f64>,
    pub bregman: Option<f64>,
    pub active_set_size: Option<usize>,
    pub false_positives: Option<usize>,
    pub false_negatives: Option<usize>,
    pub sign_recovery: Option<bool>,
    pub z0: Option<f64>,
    pub z1: Option<f64>,
    pub noise_sup: Option<f64>,
    pub xi_effective: Option<f64>,
    pub noise_event: Option<bool>,
    pub xi_event: Option<bool>,
    pub gradient_event: Option<bool>,
    pub multistage_event: Option<bool>,
    pub stage_l2_errors: Vec<f64>,
    pub bounds: Vec<BoundCheck>,
    pub path: Vec<PathPoint>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, e: &Error) -> Self {
        ReplicateRecord {
            replicate,
            error: Some(e.to_string()),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFactor {
    pub name: String,
    pub estimate: FactorEstimate,
}

/// Design-level quantities shared by all replicates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub lambda: Option<f64>,
    pub lambda0: Option<f64>,
    pub xi: Option<f64>,
    pub support_size: usize,
    pub factors: Vec<NamedFactor>,
    pub invertibility: Option<InvertibilityReport>,
    pub selection: Option<SelectionReport>,
    pub sparsity: Option<SparsityReport>,
    /// Contraction analysis with the noise term set to zero; replicates
    /// re-evaluate it with their own noise.
    pub contraction: Option<ContractionReport>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub name: String,
    pub evaluated: usize,
    pub in_event: usize,
    pub certified: usize,
    pub satisfied_in_event: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub completed: usize,
    pub failed: usize,
    pub mean_l2_error: Option<f64>,
    pub median_l2_error: Option<f64>,
    pub mean_l1_error: Option<f64>,
    pub median_l1_error: Option<f64>,
    pub mean_linf_error: Option<f64>,
    pub mean_bregman: Option<f64>,
    pub median_active_set_size: Option<f64>,
    pub sign_recovery_rate: Option<f64>,
    pub noise_event_rate: Option<f64>,
    pub xi_event_rate: Option<f64>,
    pub gradient_event_rate: Option<f64>,
    pub multistage_event_rate: Option<f64>,
    pub bounds: Vec<BoundSummary>,
    pub stage_median_l2_error: Vec<f64>,
    pub stage_mean_l2_error: Vec<f64>,
    /// Median error of the last stage over the median error of stage 0.
    pub stage_error_ratio: Option<f64>,
    pub total_violations: usize,
    pub setup: ExperimentSetup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub schema_version: String,
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub records: Vec<ReplicateRecord>,
    pub aggregates: Aggregates,
}

impl SimulationResult {
    pub fn violations(&self) -> usize {
        self.aggregates.total_violations
    }

    pub fn bound_summary(&self, name: &str) -> Option<&BoundSummary> {
        self.aggregates.bounds.iter().find(|b| b.name == name)
    }
}

fn node_of<T: Serialize + ?Sized>(value: &T) -> Result<Node> {
    crate::io::tree::to_node(value).map_err(|e| Error::Serialization(e.to_string()))
}

impl Report for SimulationResult {
    fn envelope(&self) -> Result<Node> {
        let records = self
            .records
            .iter()
            .map(node_of)
            .collect::<Result<Vec<_>>>()?;
        Ok(envelope(
            self.experiment.name(),
            node_of(&self.config)?,
            records,
            node_of(&self.aggregates)?,
        ))
    }

    /// One row per replicate; the path experiment emits one row per
    /// replicate and penalty level instead.
    fn rows(&self) -> Result<Vec<Node>> {
        if self.experiment == ExperimentKind::Path {
            let mut rows = Vec::new();
            for r in &self.records {
                for pt in &r.path {
                    let mut node = node_of(pt)?;
                    if let Node::Map(entries) = &mut node {
                        entries
                            .insert(0, ("replicate".to_string(), Node::Int(r.replicate as i128)));
                    }
                    rows.push(node);
                }
            }
            return Ok(rows);
        }
        self.records.iter().map(node_of).collect()
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let v: Vec<bool> = flags.flatten().collect();
    (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
}

fn aggregate(records: &[ReplicateRecord], setup: ExperimentSetup) -> Aggregates {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let col = |f: fn(&ReplicateRecord) -> Option<f64>| {
        ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>()
    };
    let l2 = col(|r| r.l2_error);
    let l1 = col(|r| r.l1_error);
    let active = col(|r| r.active_set_size.map(|a| a as f64));

    let mut bounds: Vec<BoundSummary> = Vec::new();
    for b in ok.iter().flat_map(|r| r.bounds.iter()) {
        let idx = match bounds.iter().position(|s| s.name == b.name) {
            Some(i) => i,
            None => {
                bounds.push(BoundSummary {
                    name: b.name.clone(),
                    evaluated: 0,
                    in_event: 0,
                    certified: 0,
                    satisfied_in_event: 0,
                    violations: 0,
                });
                bounds.len() - 1
            }
        };
        let s = &mut bounds[idx];
        s.evaluated += 1;
        s.in_event += b.in_event as usize;
        s.certified += b.certified as usize;
        s.satisfied_in_event += (b.in_event && b.satisfied) as usize;
        s.violations += b.is_violation() as usize;
    }

    let stages = ok
        .iter()
        .map(|r| r.stage_l2_errors.len())
        .max()
        .unwrap_or(0);
    let stage_col = |k: usize| {
        ok.iter()
            .filter_map(|r| r.stage_l2_errors.get(k).copied())
            .collect::<Vec<f64>>()
    };
    let stage_median_l2_error: Vec<f64> =
        (0..stages).filter_map(|k| median(&stage_col(k))).collect();
    let stage_mean_l2_error: Vec<f64> = (0..stages).filter_map(|k| mean(&stage_col(k))).collect();
    let stage_error_ratio = match (stage_median_l2_error.first(), stage_median_l2_error.last()) {
        (Some(&first), Some(&last)) if stages > 1 && first > 0.0 => Some(last / first),
        _ => None,
    };

    Aggregates {
        count: records.len(),
        completed: ok.len(),
        failed: records.len() - ok.len(),
        mean_l2_error: mean(&l2),
        median_l2_error: median(&l2),
        mean_l1_error: mean(&l1),
        median_l1_error: median(&l1),
        mean_linf_error: mean(&col(|r| r.linf_error)),
        mean_bregman: mean(&col(|r| r.bregman)),
        median_active_set_size: median(&active),
        sign_recovery_rate: rate(ok.iter().map(|r| r.sign_recovery)),
        noise_event_rate: rate(ok.iter().map(|r| r.noise_event)),
        xi_event_rate: rate(ok.iter().map(|r| r.xi_event)),
        gradient_event_rate: rate(ok.iter().map(|r| r.gradient_event)),
        multistage_event_rate: rate(ok.iter().map(|r| r.multistage_event)),
        total_violations: bounds.iter().map(|b| b.violations).sum(),
        bounds,
        stage_median_l2_error,
        stage_mean_l2_error,
        stage_error_ratio,
        setup,
    }
}

/// Shared state of a synthetic experiment.
struct Context {
    config: ExperimentConfig,
    family: GlmFamily,
    data: Dataset,
    beta_star: DVector<f64>,
    support: Vec<usize>,
    unit: DVector<f64>,
}

impl Context {
    fn replicate(&self, k: usize) -> Result<Dataset> {
        replicate_dataset(
            &self.data,
            &self.family,
            &self.beta_star,
            self.config.seed,
            k,
        )
    }

    fn sigma(&self) -> DMatrix<f64> {
        let x = self.data.x();
        x.transpose() * x / self.data.n() as f64
    }

    /// Curvature matrix at the target; the Gram matrix for the linear family.
    fn sigma_star(&self) -> Result<DMatrix<f64>> {
        if self.family.kind == FamilyKind::Linear {
            Ok(self.sigma())
        } else {
            sigma_star(&self.data, &self.family, &self.beta_star)
        }
    }

    fn calibrated_lambda0(&self) -> Result<f64> {
        let summary = DataSummary::from_dataset(&self.data, &self.family);
        match penalty_level(
            &self.family,
            &summary,
            self.config.eps0,
            &CalibrationMode::BoundedCurvature,
        ) {
            Ok(levels) => Ok(levels.lambda0),
            Err(Error::Unsupported(msg)) => {
                Err(Error::Unsupported(format!("{msg}; set lambda explicitly")))
            }
            Err(e) => Err(e),
        }
    }

    /// `(lambda, lambda0)`: the fitting level and the noise level of the
    /// calibrated event, which coincide up to `lambda_scale`.
    fn lambdas(&self) -> Result<(f64, f64)> {
        match self.config.lambda {
            LambdaChoice::Auto => {
                let l0 = self.calibrated_lambda0()?;
                Ok((self.config.lambda_scale * l0, l0))
            }
            LambdaChoice::Value(v) => Ok((v, v)),
        }
    }

    fn cone(&self, xi: f64) -> Result<ConeSpec> {
        ConeSpec::new(xi, self.support.clone(), self.config.p)
    }

    fn require_support(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::domain(format!(
                "the {} experiment needs s0_size >= 1",
                self.config.experiment
            )));
        }
        Ok(())
    }

    fn fit(&self, data: &Dataset, lambda: f64) -> Result<FitResult> {
        fit_weighted_lasso(data, &self.family, &FitConfig::lasso(lambda, self.config.p))
    }

    /// Error and support metrics of `beta` against the target.
    fn metrics(
        &self,
        rec: &mut ReplicateRecord,
        data: &Dataset,
        beta: &DVector<f64>,
    ) -> Result<()> {
        let h = beta - &self.beta_star;
        rec.l2_error = Some(h.norm());
        rec.l1_error = Some(h.lp_norm(1));
        rec.linf_error = Some(h.amax());
        rec.bregman = Some(bregman_divergence(
            data,
            &self.family,
            beta,
            &self.beta_star,
        )?);
        let s = self.config.s0_size;
        rec.active_set_size = Some(beta.iter().filter(|v| **v != 0.0).count());
        rec.false_positives = Some((s..self.config.p).filter(|&j| beta[j] != 0.0).count());
        rec.false_negatives = Some((0..s).filter(|&j| beta[j] == 0.0).count());
        rec.sign_recovery =
            Some((0..self.config.p).all(|j| sign(beta[j]) == sign(self.beta_star[j])));
        Ok(())
    }

    /// Noise functionals and the calibrated noise event.
    fn noise(
        &self,
        rec: &mut ReplicateRecord,
        data: &Dataset,
        lambda0: f64,
    ) -> Result<DVector<f64>> {
        let score = negative_gradient(data, &self.family, &self.beta_star)?;
        let sup = score.amax();
        rec.noise_sup = Some(sup);
        rec.noise_event = Some(sup <= lambda0);
        if !self.support.is_empty() {
            let nf = noise_functionals(
                data,
                &self.family,
                &self.beta_star,
                &self.support,
                &self.unit,
            )?;
            rec.z0 = Some(nf.z0);
            rec.z1 = Some(nf.z1);
        }
        Ok(score)
    }

    fn run<F>(&self, body: F) -> Vec<ReplicateRecord>
    where
        F: Fn(usize, &Dataset, &mut ReplicateRecord) -> Result<()> + Sync,
    {
        (0..self.config.replicates)
            .into_par_iter()
            .map(|k| {
                let mut rec = ReplicateRecord {
                    replicate: k,
                    ..Default::default()
                };
                match self.replicate(k).and_then(|data| body(k, &data, &mut rec)) {
                    Ok(()) => rec,
                    Err(e) => ReplicateRecord::failed(k, &e),
                }
            })
            .collect()
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn fit_fields(rec: &mut ReplicateRecord, fit: &FitResult, lambda: f64) {
    rec.lambda = Some(lambda);
    rec.converged = Some(fit.converged);
    rec.kkt_residual = Some(fit.kkt_residual);
}

fn strip(mut e: FactorEstimate) -> FactorEstimate {
    e.minimizer = None;
    e
}

fn named(name: &str, e: &FactorEstimate) -> NamedFactor {
    NamedFactor {
        name: name.to_string(),
        estimate: strip(e.clone()),
    }
}

/// Smallest `eta` in `[0, 1]` with `eta e^(-eta) >= t`, if any.
fn eta_for(t: f64) -> Option<f64> {
    let g = |e: f64| e * (-e).exp();
    if t <= 0.0 {
        return Some(0.0);
    }
    if t > g(1.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= t {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Runs the configured experiment on synthetic data.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SimulationResult> {
    config.validate()?;
    let family = config.glm_family()?;
    let (data, beta_star) = generate_synthetic(config, config.seed)?;
    data.validate_for(&family)?;
    let ctx = Context {
        config: config.clone(),
        family,
        unit: DVector::from_element(config.p, 1.0),
        support: config.support(),
        data,
        beta_star,
    };
    let (setup, records) = match config.experiment {
        ExperimentKind::Fit => run_fit(&ctx)?,
        ExperimentKind::Path => run_path(&ctx)?,
        ExperimentKind::Multistage => run_multistage(&ctx)?,
        ExperimentKind::OracleVerify => run_oracle(&ctx)?,
        ExperimentKind::SelectionVerify => run_selection(&ctx)?,
        ExperimentKind::SparsityVerify => run_sparsity(&ctx)?,
        ExperimentKind::Diagnostics => run_diagnostics(&ctx)?,
    };
    Ok(SimulationResult {
        schema_version: crate::io::SCHEMA_VERSION.to_string(),
        experiment: config.experiment,
        config: config.clone(),
        aggregates: aggregate(&records, setup),
        records,
    })
}

type Outcome = Result<(ExperimentSetup, Vec<ReplicateRecord>)>;

fn run_fit(ctx: &Context) -> Outcome {
    let (lambda, lambda0) = ctx.lambdas()?;
    let records = ctx.run(|_, data, rec| {
        ctx.noise(rec, data, lambda0)?;
        let fit = ctx.fit(data, lambda)?;
        fit_fields(rec, &fit, lambda);
        ctx.metrics(rec, data, &fit.beta_hat)
    });
    let setup = ExperimentSetup {
        lambda: Some(lambda),
        lambda0: Some(lambda0),
        support_size: ctx.support.len(),
        ..Default::default()
    };
    Ok((setup, records))
}

fn run_path(ctx: &Context) -> Outcome {
    let xi = ctx.config.xi.unwrap_or(3.0);
    let (factor, certified_factor) = if ctx.support.is_empty() {
        (None, false)
    } else {
        let est = simple_gif_with(
            &ctx.sigma_star()?,
            &ctx.cone(xi)?,
            Phi::Q { q: 2.0 },
            &ctx.config.factor_options(),
        )?;
        let certified = est.certified && ctx.family.kind == FamilyKind::Linear;
        (Some(est), certified)
    };
    let s = ctx.support.len();
    let records = ctx.run(|_, data, rec| {
        let lmax = lambda_max(data, &ctx.family, &ctx.unit)?;
        let lambdas = geometric_lambdas(lmax, ctx.config.path_ratio, ctx.config.path_length)?;
        let fits = solution_path(data, &ctx.family, &lambdas, &ctx.unit)?;
        let nf = if s > 0 {
            Some(noise_functionals(
                data,
                &ctx.family,
                &ctx.beta_star,
                &ctx.support,
                &ctx.unit,
            )?)
        } else {
            None
        };
        for (fit, &lambda) in fits.iter().zip(&lambdas) {
            let bound = match (&factor, nf) {
                (Some(f), Some(nf)) if ctx.family.kind == FamilyKind::Linear => {
                    let ev = event_xi_check(1.0, lambda, nf.z0, nf.z1);
                    ev.holds_for(xi)
                        .then(|| oracle_bound(0.0, 1.0, lambda, nf.z0, s, 2.0, f.value))
                }
                _ => None,
            };
            let err = (&fit.beta_hat - &ctx.beta_star).norm();
            if let Some(b) = bound {
                rec.bounds.push(BoundCheck::new(
                    "path_l2",
                    b,
                    err,
                    fit.kkt_residual * (s as f64).sqrt(),
                    true,
                    certified_factor,
                ));
            }
            rec.path.push(PathPoint {
                lambda,
                l2_error: err,
                active_set_size: fit.active_set.len(),
                bound,
            });
        }
        let last = fits.last().expect("nonempty path");
        fit_fields(rec, last, *lambdas.last().expect("nonempty grid"));
        ctx.metrics(rec, data, &last.beta_hat)
    });
    let mut setup = ExperimentSetup {
        xi: Some(xi),
        support_size: s,
        ..Default::default()
    };
    if let Some(f) = &factor {
        setup.factors.push(named("f0_phi2", f));
    }
    if ctx.family.kind != FamilyKind::Linear {
        setup
            .notes
            .push("path bounds are evaluated for the linear family only".to_string());
    }
    Ok((setup, records))
}

fn run_oracle(ctx: &Context) -> Outcome {
    ctx.require_support()?;
    let xi = ctx.config.xi.unwrap_or(3.0);
    let (lambda, lambda0) = ctx.lambdas()?;
    let opts = ctx.config.factor_options();
    let sigma = ctx.sigma_star()?;
    let cone = ctx.cone(xi)?;
    let f_l2 = simple_gif_with(&sigma, &cone, Phi::Q { q: 2.0 }, &opts)?;
    let f_l1 = simple_gif_with(&sigma, &cone, Phi::Q { q: 1.0 }, &opts)?;
    let f_1s = simple_gif_with(&sigma, &cone, Phi::OneS, &opts)?;
    let linear = ctx.family.kind == FamilyKind::Linear;
    let glm = if linear {
        None
    } else {
        let m2 = default_m2(&ctx.data, &ctx.family);
        Some(glm_gif_lower_bounds_with(
            &ctx.data,
            &ctx.family,
            &ctx.beta_star,
            &cone,
            m2,
            &opts,
        )?)
    };
    // A factor that does not depend on the cone width holds at every xi.
    let width_free = |f: &FactorEstimate| f.method == FactorMethod::ScaledIdentity;
    let s = ctx.support.len();

    let records = ctx.run(|_, data, rec| {
        ctx.noise(rec, data, lambda0)?;
        let (z0, z1) = (rec.z0.unwrap_or(0.0), rec.z1.unwrap_or(0.0));
        let ev = event_xi_check(1.0, lambda, z0, z1);
        rec.xi_effective = Some(ev.xi_effective);
        rec.xi_event = Some(ev.holds_for(xi));
        let fit = ctx.fit(data, lambda)?;
        fit_fields(rec, &fit, lambda);
        ctx.metrics(rec, data, &fit.beta_hat)?;

        let a = lambda + z0;
        let eta = match &glm {
            None => Some(0.0),
            Some(g) => eta_for(a / g.f_lower),
        };
        let h = &fit.beta_hat - &ctx.beta_star;
        let h_s1: f64 = ctx.support.iter().map(|&j| h[j].abs()).sum();
        let h_sc1: f64 = (s..ctx.config.p).map(|j| h[j].abs()).sum();
        let delta = rec.bregman.unwrap_or(0.0);
        let kkt = fit.kkt_residual;
        let in_cone =
            |f: &FactorEstimate| ev.xi_effective.is_finite() && (width_free(f) || ev.holds_for(xi));
        let cert = |f: &FactorEstimate| f.certified && linear;

        let basic_lhs = delta + (lambda - z1).max(0.0) * h_sc1;
        rec.bounds.push(BoundCheck::new(
            "basic_inequality",
            a * h_s1,
            basic_lhs,
            kkt * h.lp_norm(1),
            lambda > z1,
            true,
        ));
        if lambda > z1 {
            // h lies in the cone of width xi_eff: |h_Sc|_1 <= xi_eff |h_S|_1.
            rec.bounds.push(BoundCheck::new(
                "cone_membership",
                ev.xi_effective * h_s1,
                h_sc1,
                kkt * h.lp_norm(1) / (lambda - z1),
                true,
                true,
            ));
        }
        if let Some(eta) = eta {
            let l2 = oracle_bound(eta, 1.0, lambda, z0, s, 2.0, f_l2.value);
            let l1 = oracle_bound(eta, 1.0, lambda, z0, s, 1.0, f_l1.value);
            let breg = bregman_bound(eta, 1.0, lambda, z0, s, f_1s.value);
            let slack = kkt * h.lp_norm(1);
            // A solver residual `kkt` moves the solution by about `kkt p / F` in any norm.
            let norm_slack =
                |f: &FactorEstimate| kkt * ctx.config.p as f64 / f.value.max(f64::MIN_POSITIVE);
            rec.bounds.push(BoundCheck::new(
                "l2",
                l2,
                h.norm(),
                norm_slack(&f_l2),
                in_cone(&f_l2),
                cert(&f_l2),
            ));
            rec.bounds.push(BoundCheck::new(
                "l1",
                l1,
                h.lp_norm(1),
                norm_slack(&f_l1),
                in_cone(&f_l1),
                cert(&f_l1),
            ));
            rec.bounds.push(BoundCheck::new(
                "bregman",
                breg,
                basic_lhs,
                slack,
                in_cone(&f_1s),
                cert(&f_1s),
            ));
        }
        Ok(())
    });

    let mut setup = ExperimentSetup {
        lambda: Some(lambda),
        lambda0: Some(lambda0),
        xi: Some(xi),
        support_size: s,
        factors: vec![
            named("f0_phi2", &f_l2),
            named("f0_phi1", &f_l1),
            named("f0_phi1s", &f_1s),
        ],
        ..Default::default()
    };
    setup
        .notes
        .push("l2 and l1 bounds are on |h|_q".to_string());
    if let Some(g) = glm {
        setup.notes.push(format!(
            "nonlinear family: factors use the curvature at the target, eta from F_- = {}; bounds are uncertified",
            g.f_lower
        ));
    }
    Ok((setup, records))
}

fn run_selection(ctx: &Context) -> Outcome {
    ctx.require_support()?;
    let (lambda, lambda0) = ctx.lambdas()?;
    let linear = ctx.family.kind == FamilyKind::Linear;
    let mode = if linear {
        EvaluationMode::AtTargetOnly
    } else {
        EvaluationMode::SampledBall {
            count: ctx.config.ball_samples,
            seed: ctx.config.seed,
        }
    };
    let report = irrepresentable_check(
        &ctx.data,
        &ctx.family,
        &ctx.beta_star,
        &ctx.support,
        &ctx.unit,
        ctx.config.eta,
        mode,
    )?;
    let factor = if linear {
        None
    } else {
        let xi = ctx.config.xi.unwrap_or(3.0);
        let m2 = default_m2(&ctx.data, &ctx.family);
        let g = glm_gif_lower_bounds_with(
            &ctx.data,
            &ctx.family,
            &ctx.beta_star,
            &ctx.cone(xi)?,
            m2,
            &ctx.config.factor_options(),
        )?;
        Some(g.f_lower)
    };
    let p = ctx.config.p;

    let records = ctx.run(|_, data, rec| {
        ctx.noise(rec, data, lambda0)?;
        let event = SelectionEvent {
            lambda,
            z0: rec.z0.unwrap_or(0.0),
            z1: rec.z1.unwrap_or(0.0),
            w_s_inf: 1.0,
            factor,
        };
        let predicted = report.clone().with_event(&event, &ctx.family);
        let fit = ctx.fit(data, lambda)?;
        fit_fields(rec, &fit, lambda);
        ctx.metrics(rec, data, &fit.beta_hat)?;
        let mismatches = (0..p)
            .filter(|&j| sign(fit.beta_hat[j]) != sign(ctx.beta_star[j]))
            .count();
        let certified = predicted.exact_suprema && !predicted.heuristic;
        if let Some(no_fp) = predicted.predicted_no_false_positive {
            let fp = rec.false_positives.unwrap_or(0) as f64;
            rec.bounds.push(BoundCheck::new(
                "no_false_positive",
                0.0,
                fp,
                0.0,
                no_fp,
                certified,
            ));
        }
        if let Some(ok) = predicted.predicted_sign_recovery {
            rec.bounds.push(BoundCheck::new(
                "sign_recovery",
                0.0,
                mismatches as f64,
                0.0,
                ok,
                certified,
            ));
        }
        Ok(())
    });
    let setup = ExperimentSetup {
        lambda: Some(lambda),
        lambda0: Some(lambda0),
        support_size: ctx.support.len(),
        selection: Some(report),
        ..Default::default()
    };
    Ok((setup, records))
}

/// Finds `d*` with observed sparse eigenvalue extremes meeting the SRC
/// cardinality display, growing `d*` until it is self-consistent.
fn self_consistent_src(ctx: &Context) -> Result<Option<(usize, f64, f64)>> {
    // Same matrix as the verification inside `src_and_dimension_bound`.
    let sigma = &hessian(&ctx.data, &ctx.family, &ctx.beta_star)?;
    let (s, p) = (ctx.support.len(), ctx.config.p);
    let mut d = s.max(1);
    loop {
        let (lo, hi, _) = sparse_eigen_extremes(sigma, &ctx.support, d, DEFAULT_SUBSET_CAP)?;
        if !(lo > 0.0) {
            return Ok(None);
        }
        match default_d_star(s, ctx.config.alpha, ctx.config.eta, lo, hi) {
            Some(need) if need <= d => return Ok(Some((d, lo, hi))),
            Some(need) if need <= p => d = need.max(d + 1),
            _ => return Ok(None),
        }
    }
}

fn run_sparsity(ctx: &Context) -> Outcome {
    ctx.require_support()?;
    let p = ctx.config.p;
    if p > MAX_EXHAUSTIVE_P {
        return Err(Error::domain(format!(
            "sparsity_verify needs p <= {MAX_EXHAUSTIVE_P} for the exhaustive SRC check, got {p}"
        )));
    }
    if ctx.family.kind != FamilyKind::Linear {
        return Err(Error::Unsupported(
            "sparsity_verify supports the linear family only".to_string(),
        ));
    }
    let xi = ctx.config.xi.unwrap_or(3.0);
    let (lambda, lambda0) = ctx.lambdas()?;
    let mut setup = ExperimentSetup {
        lambda: Some(lambda),
        lambda0: Some(lambda0),
        xi: Some(xi),
        support_size: ctx.support.len(),
        ..Default::default()
    };
    let report = match self_consistent_src(ctx)? {
        Some((d, lo, hi)) => Some(src_and_dimension_bound(
            &ctx.data,
            &ctx.family,
            &ctx.beta_star,
            &ctx.support,
            lo,
            hi,
            Some(d),
            ctx.config.alpha,
            ctx.config.eta,
            true,
        )?),
        None => {
            setup.notes.push(
                "no self-consistent SRC dimension exists for this design; no replicate is in event"
                    .to_string(),
            );
            None
        }
    };

    let records = ctx.run(|_, data, rec| {
        ctx.noise(rec, data, lambda0)?;
        let (z0, z1) = (rec.z0.unwrap_or(0.0), rec.z1.unwrap_or(0.0));
        let ev = event_xi_check(1.0, lambda, z0, z1);
        rec.xi_effective = Some(ev.xi_effective);
        rec.xi_event = Some(ev.holds_for(xi));
        let fit = ctx.fit(data, lambda)?;
        fit_fields(rec, &fit, lambda);
        ctx.metrics(rec, data, &fit.beta_hat)?;
        if let Some(report) = &report {
            let checked = report.clone().with_gradient_condition(
                data,
                &ctx.family,
                &ctx.beta_star,
                &ctx.support,
                lambda,
            )?;
            let grad = checked.gradient_condition_holds.unwrap_or(false);
            rec.gradient_event = Some(grad);
            let in_event = checked.src_holds && grad && ev.holds_for(xi);
            let fp = rec.false_positives.unwrap_or(0) as f64;
            rec.bounds.push(BoundCheck::new(
                "false_positives",
                checked.d1 as f64,
                fp,
                0.0,
                in_event,
                true,
            ));
        }
        Ok(())
    });
    setup.sparsity = report;
    Ok((setup, records))
}

fn run_multistage(ctx: &Context) -> Outcome {
    ctx.require_support()?;
    let cfg = &ctx.config;
    let probe = PenaltySpec::new(cfg.penalty, 1.0)?;
    let kappa = lipschitz_kappa(&probe);
    let xi = cfg.xi.unwrap_or((cfg.a_const + 1.0) / (cfg.a_const - 1.0));
    let one_minus = 1.0 - kappa * cfg.gamma0;
    if !(one_minus > 0.0) {
        return Err(Error::domain("need kappa gamma0 < 1"));
    }
    let (lambda, lambda0) = match cfg.lambda {
        LambdaChoice::Auto => {
            let l0 = ctx.calibrated_lambda0()? * cfg.lambda_scale;
            (cfg.a_const * l0 / one_minus, l0)
        }
        LambdaChoice::Value(v) => (v, v * one_minus / cfg.a_const),
    };
    let penalty = PenaltySpec::new(cfg.penalty, lambda)?;
    let opts = cfg.factor_options();
    let sigma = ctx.sigma_star()?;
    let cone = ctx.cone(xi)?;
    let f0 = simple_gif_with(&sigma, &cone, Phi::Q { q: 2.0 }, &opts)?;
    let f2 = f2_factor_with(&sigma, &cone, &opts)?;
    let certified = f0.certified && f2.certified && ctx.family.kind == FamilyKind::Linear;
    let eta = if ctx.family.kind == FamilyKind::Linear {
        0.0
    } else {
        cfg.eta
    };
    let s0 = ctx.support.len();
    let rho_s0_norm = ctx
        .support
        .iter()
        .map(|&j| rho_derivative(&penalty, ctx.beta_star[j].abs()).map(|d| d * d))
        .sum::<Result<f64>>()?
        .sqrt();
    let ell_star = minimal_ell_star(eta, kappa, cfg.gamma0, cfg.a_const, s0, f0.value);
    let inputs = ContractionInputs {
        kappa,
        f_star: f2.value,
        f0_phi2: f0.value,
        s0_size: s0,
        eta,
        gamma0: cfg.gamma0,
        a_const: cfg.a_const,
        lambda0,
        rho_s0_norm,
        noise_s0_norm: 0.0,
        ell_star,
        stages: cfg.stages,
        xi: Some(xi),
        f0_phi0: None,
        f2: Some(f2.value),
        sigma: Some(ctx.family.sigma()),
        n: Some(cfg.n),
        eps0: Some(cfg.eps0),
    };
    let template = contraction_report(&inputs)?;
    let mut mconfig = MultistageConfig::new(penalty, cfg.p);
    mconfig.stages = cfg.stages;
    mconfig.track_target = Some(ctx.beta_star.clone());

    let records = ctx.run(|_, data, rec| {
        let score = ctx.noise(rec, data, lambda0)?;
        let noise_s0 = ctx
            .support
            .iter()
            .map(|&j| score[j] * score[j])
            .sum::<f64>()
            .sqrt();
        let report = contraction_report(&ContractionInputs {
            noise_s0_norm: noise_s0,
            ..inputs.clone()
        })?;
        let event = report.event_holds(rec.noise_sup.unwrap_or(f64::INFINITY));
        rec.multistage_event = Some(event);
        let trace = run_recursion(data, &ctx.family, &mconfig)?;
        let last = trace.last();
        rec.lambda = Some(lambda);
        rec.converged = Some(trace.stages.iter().all(|s| s.converged));
        rec.kkt_residual = Some(last.kkt_residual);
        ctx.metrics(rec, data, &last.beta)?;
        for st in &trace.stages {
            let err = (&st.beta - &ctx.beta_star).norm();
            rec.stage_l2_errors.push(err);
            if let Some(r) = report.radius(st.stage) {
                let name = format!("stage_{}_radius", st.stage);
                rec.bounds.push(BoundCheck::new(
                    &name,
                    r,
                    err,
                    st.kkt_residual * (cfg.p as f64).sqrt(),
                    event,
                    certified,
                ));
            }
        }
        Ok(())
    });

    let mut setup = ExperimentSetup {
        lambda: Some(lambda),
        lambda0: Some(lambda0),
        xi: Some(xi),
        support_size: s0,
        factors: vec![named("f0_phi2", &f0), named("f2", &f2)],
        contraction: Some(template),
        ..Default::default()
    };
    setup
        .notes
        .push("F_* is taken as F_2 on the true support".to_string());
    if !certified {
        setup
            .notes
            .push("factors are search values, so stage radii are not certified".to_string());
    }
    Ok((setup, records))
}

fn run_diagnostics(ctx: &Context) -> Outcome {
    ctx.require_support()?;
    let xi = ctx.config.xi.unwrap_or(3.0);
    let (lambda, lambda0) = ctx
        .lambdas()
        .map(|(l, l0)| (Some(l), Some(l0)))
        .unwrap_or((None, None));
    let linear = ctx.family.kind == FamilyKind::Linear;
    let sigma = ctx.sigma_star()?;
    let glm = (!linear).then(|| GlmFactorInputs {
        data: &ctx.data,
        family: &ctx.family,
        beta_star: &ctx.beta_star,
        m2: default_m2(&ctx.data, &ctx.family),
    });
    let phis = [Phi::Q { q: 2.0 }, Phi::Q { q: 1.0 }, Phi::OneS];
    let inv = invertibility_report(
        &sigma,
        &ctx.cone(xi)?,
        &phis,
        &ctx.config.factor_options(),
        glm,
    )?;
    let mode = if linear {
        EvaluationMode::AtTargetOnly
    } else {
        EvaluationMode::SampledBall {
            count: ctx.config.ball_samples,
            seed: ctx.config.seed,
        }
    };
    let mut notes = Vec::new();
    let selection = match irrepresentable_check(
        &ctx.data,
        &ctx.family,
        &ctx.beta_star,
        &ctx.support,
        &ctx.unit,
        ctx.config.eta,
        mode,
    ) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("selection check skipped: {e}"));
            None
        }
    };
    let sparsity = if ctx.config.p <= MAX_EXHAUSTIVE_P && linear {
        match self_consistent_src(ctx)? {
            Some((d, lo, hi)) => Some(src_and_dimension_bound(
                &ctx.data,
                &ctx.family,
                &ctx.beta_star,
                &ctx.support,
                lo,
                hi,
                Some(d),
                ctx.config.alpha,
                ctx.config.eta,
                true,
            )?),
            None => {
                notes.push("no self-consistent SRC dimension exists for this design".to_string());
                None
            }
        }
    } else {
        None
    };
    let setup = ExperimentSetup {
        lambda,
        lambda0,
        xi: Some(xi),
        support_size: ctx.support.len(),
        factors: vec![
            named("kappa_star", &inv.kappa_star),
            named("re2", &inv.re2),
            named("f2", &inv.f2),
        ],
        invertibility: Some(InvertibilityReport {
            kappa_star: strip(inv.kappa_star.clone()),
            re2: strip(inv.re2.clone()),
            f2: strip(inv.f2.clone()),
            f0_by_phi: inv
                .f0_by_phi
                .iter()
                .map(|pf| crate::analysis::PhiFactor {
                    phi: pf.phi,
                    estimate: strip(pf.estimate.clone()),
                })
                .collect(),
            ..inv
        }),
        selection,
        sparsity,
        notes,
        ..Default::default()
    };
    Ok((setup, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_choice_parses() {
        assert_eq!("auto".parse::<LambdaChoice>().unwrap(), LambdaChoice::Auto);
        assert_eq!(
            "0.5".parse::<LambdaChoice>().unwrap(),
            LambdaChoice::Value(0.5)
        );
        assert!("-1".parse::<LambdaChoice>().is_err());
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"experiment":"fit","n":10,"p":3,"lambda":0.2,"penalty":"mcp:2.5"}"#,
        )
        .unwrap();
        assert_eq!(c.lambda, LambdaChoice::Value(0.2));
        assert_eq!(c.penalty, PenaltyKind::Mcp { gamma: 2.5 });
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"experiment":"fit","n":10,"p":3,"lamda":1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut c = ExperimentConfig::new(ExperimentKind::Fit, 10, 3);
        c.s0_size = 4;
        assert!(c.validate().is_err());
        c.s0_size = 1;
        c.replicates = 0;
        assert!(c.validate().is_err());
        c.replicates = 1;
        c.design = DesignSpec::GaussianCorrelated { rho: -1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn eta_inverse() {
        let e = eta_for(0.2).unwrap();
        assert!((e * (-e).exp() - 0.2).abs() < 1e-12);
        assert!(eta_for(0.5).is_none());
    }

    #[test]
    fn fit_experiment_is_reproducible() {
        let mut c = ExperimentConfig::new(ExperimentKind::Fit, 40, 10);
        c.s0_size = 2;
        c.beta_min = 1.0;
        c.beta_max = 2.0;
        c.replicates = 6;
        c.seed = 9;
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aggregates.count, 6);
        assert_eq!(a.aggregates.completed, 6);
    }
}
