//! Adaptive Lasso and the multistage recursion with concave-penalty weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{Dataset, GlmFamily};
use crate::penalty::{weights_from_estimate, PenaltySpec};
use crate::solver::{fit_weighted_lasso, FitConfig, FitResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultistageConfig {
    pub penalty: PenaltySpec,
    pub stages: usize,
    /// Budgets and tolerances for every stage. Coordinates with zero weight
    /// here stay unpenalized at every stage.
    pub base_fit: FitConfig,
    #[serde(with = "crate::serde_vec::opt_dvec")]
    pub track_target: Option<DVector<f64>>,
}

impl MultistageConfig {
    pub fn new(penalty: PenaltySpec, p: usize) -> Self {
        MultistageConfig {
            penalty,
            stages: 3,
            base_fit: FitConfig::lasso(penalty.lambda, p),
            track_target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    #[serde(with = "crate::serde_vec::dvec")]
    pub beta: DVector<f64>,
    #[serde(with = "crate::serde_vec::dvec")]
    pub weights_used: DVector<f64>,
    pub kkt_residual: f64,
    pub converged: bool,
    pub l2_error_to_target: Option<f64>,
    pub active_set_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stages: Vec<StageRecord>,
}

impl StageTrace {
    pub fn last(&self) -> &StageRecord {
        self.stages.last().expect("trace has at least one stage")
    }
}

fn unpenalized_of(base: &FitConfig) -> Vec<usize> {
    (0..base.weights.len())
        .filter(|&j| base.weights[j] == 0.0)
        .collect()
}

fn stage_config(
    base: &FitConfig,
    lambda: f64,
    weights: DVector<f64>,
    warm: Option<DVector<f64>>,
) -> FitConfig {
    let mut cfg = base.clone();
    cfg.lambda = lambda;
    cfg.weights = weights;
    cfg.warm_start = warm;
    cfg
}

/// One adaptive Lasso step with weights `rho'(|beta_tilde_j|)/lambda`,
/// warm-started at `beta_tilde`.
pub fn run_adaptive_step(
    data: &Dataset,
    family: &GlmFamily,
    penalty: &PenaltySpec,
    beta_tilde: &DVector<f64>,
    base_fit: &FitConfig,
) -> Result<FitResult> {
    if beta_tilde.len() != data.p() || base_fit.weights.len() != data.p() {
        return Err(Error::domain(
            "initial estimate and base weights must have length p",
        ));
    }
    let weights = weights_from_estimate(penalty, beta_tilde, &unpenalized_of(base_fit))?;
    let cfg = stage_config(base_fit, penalty.lambda, weights, Some(beta_tilde.clone()));
    fit_weighted_lasso(data, family, &cfg)
}

fn record(
    stage: usize,
    fit: &FitResult,
    weights: DVector<f64>,
    target: Option<&DVector<f64>>,
) -> StageRecord {
    StageRecord {
        stage,
        beta: fit.beta_hat.clone(),
        weights_used: weights,
        kkt_residual: fit.kkt_residual,
        converged: fit.converged,
        l2_error_to_target: target.map(|t| (&fit.beta_hat - t).norm()),
        active_set_size: fit.active_set.len(),
    }
}

/// Unweighted Lasso followed by `stages` adaptive refits.
pub fn run_recursion(
    data: &Dataset,
    family: &GlmFamily,
    config: &MultistageConfig,
) -> Result<StageTrace> {
    if config.stages == 0 {
        return Err(Error::domain("stages must be at least 1"));
    }
    let p = data.p();
    if config.base_fit.weights.len() != p {
        return Err(Error::domain("base weights must have length p"));
    }
    if let Some(t) = &config.track_target {
        if t.len() != p {
            return Err(Error::domain("target must have length p"));
        }
    }
    let target = config.track_target.as_ref();
    let unpenalized = unpenalized_of(&config.base_fit);
    let w0 = crate::penalty::unit_weights(p, &unpenalized);
    let lambda = config.penalty.lambda;
    let cfg0 = stage_config(
        &config.base_fit,
        lambda,
        w0.clone(),
        config.base_fit.warm_start.clone(),
    );
    let mut fit = fit_weighted_lasso(data, family, &cfg0)?;
    let mut stages = vec![record(0, &fit, w0, target)];
    for k in 1..=config.stages {
        let weights = weights_from_estimate(&config.penalty, &fit.beta_hat, &unpenalized)?;
        let cfg = stage_config(
            &config.base_fit,
            lambda,
            weights.clone(),
            Some(fit.beta_hat.clone()),
        );
        fit = fit_weighted_lasso(data, family, &cfg)?;
        stages.push(record(k, &fit, weights, target));
    }
    Ok(StageTrace { stages })
}

/// Inputs to the contraction analysis of the recursion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionInputs {
    pub kappa: f64,
    /// `F_*`, a lower bound for `F_2(xi, S)` over the supersets in play.
    pub f_star: f64,
    /// `F_0(xi, S0; phi_2)`.
    pub f0_phi2: f64,
    pub s0_size: usize,
    pub eta: f64,
    pub gamma0: f64,
    pub a_const: f64,
    pub lambda0: f64,
    /// `|rho'_lambda(|beta*_S0|)|_2`.
    pub rho_s0_norm: f64,
    /// `|(z - psi'(beta*))_S0|_2`.
    pub noise_s0_norm: f64,
    pub ell_star: usize,
    pub stages: usize,
    pub xi: Option<f64>,
    /// `F_0(xi, S; phi_0)` for the first display of the adaptive condition.
    pub f0_phi0: Option<f64>,
    /// `F_2(xi, S)` for the second display of the adaptive condition.
    pub f2: Option<f64>,
    pub sigma: Option<f64>,
    pub n: Option<usize>,
    pub eps0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub inputs: ContractionInputs,
    /// `lambda = A lambda0 / (1 - kappa gamma0)`.
    pub lambda: f64,
    pub r0: f64,
    pub contracts: bool,
    /// `R^(0), ..., R^(stages)`; only `R^(0)` when `r0 >= 1`.
    pub radii: Vec<f64>,
    pub r_infinity: Option<f64>,
    pub adaptive_condition: Option<bool>,
    pub recursive_condition_1: bool,
    pub recursive_condition_2: Option<bool>,
    /// `xi >= (A+1)/(A-1)`, required by the recursion.
    pub xi_meets_recursive_threshold: Option<bool>,
    /// `xi >= (A+1-kappa gamma0)/(A-1)`, enough for a single adaptive step.
    pub xi_meets_adaptive_threshold: Option<bool>,
    /// Stage count after which `R^(l) <= 2 R^(inf)`.
    pub suggested_stages: Option<usize>,
}

impl ContractionReport {
    /// Radius for stage `k`, for any `k`, when the recursion contracts.
    pub fn radius(&self, k: usize) -> Option<f64> {
        let r_inf = self.r_infinity?;
        let rk = self.r0.powi(k as i32);
        Some((1.0 - rk) * r_inf + rk * self.radii[0])
    }

    /// Indicator of the event under which the stage radii hold, given
    /// `|z - psi'(beta*)|_inf`.
    pub fn event_holds(&self, noise_inf: f64) -> bool {
        match self.r_infinity {
            Some(r_inf) => {
                noise_inf <= self.inputs.lambda0
                    && r_inf
                        <= self.inputs.gamma0 * self.lambda * (self.inputs.ell_star as f64).sqrt()
            }
            None => false,
        }
    }
}

/// `(A+1)/(A-1)` and `(A+1-kappa gamma0)/(A-1)`.
pub fn xi_thresholds(a_const: f64, kappa: f64, gamma0: f64) -> (f64, f64) {
    (
        (a_const + 1.0) / (a_const - 1.0),
        (a_const + 1.0 - kappa * gamma0) / (a_const - 1.0),
    )
}

/// Evaluates the contraction factor, stage radii and the sufficient conditions.
pub fn contraction_report(inputs: &ContractionInputs) -> Result<ContractionReport> {
    let ContractionInputs {
        kappa,
        f_star,
        f0_phi2,
        s0_size,
        eta,
        gamma0,
        a_const,
        lambda0,
        rho_s0_norm,
        noise_s0_norm,
        ell_star,
        stages,
        ..
    } = *inputs;
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::domain(format!("eta must lie in [0, 1), got {eta}")));
    }
    if !(kappa >= 0.0) || !(gamma0 > 0.0) || (kappa > 0.0 && kappa * gamma0 >= 1.0) {
        return Err(Error::domain("need kappa >= 0 and 0 < gamma0 < 1/kappa"));
    }
    if !(a_const > 1.0) {
        return Err(Error::domain(format!("A must exceed 1, got {a_const}")));
    }
    if !(f_star > 0.0) || !(f0_phi2 > 0.0) {
        return Err(Error::domain("factors must be positive"));
    }
    if !(lambda0 > 0.0) || s0_size == 0 {
        return Err(Error::domain("need lambda0 > 0 and a nonempty support"));
    }
    let e = eta.exp();
    let one_minus = 1.0 - kappa * gamma0;
    let lambda = a_const * lambda0 / one_minus;
    let r0 = (e / f_star) * (kappa + 1.0 / (gamma0 * a_const) - kappa / a_const);
    let growth = 1.0 + one_minus / a_const;
    let s0 = s0_size as f64;
    let r_zero = e * lambda * growth * s0.sqrt() / f0_phi2;
    let contracts = r0 < 1.0;
    let sqrt_ell = (ell_star as f64).sqrt();

    let (radii, r_infinity, suggested_stages) = if contracts {
        let r_inf = (rho_s0_norm + noise_s0_norm) * e / (f_star * (1.0 - r0));
        let radii = (0..=stages)
            .map(|k| {
                let rk = r0.powi(k as i32);
                (1.0 - rk) * r_inf + rk * r_zero
            })
            .collect();
        let suggested = if r0 == 0.0 || r_zero <= r_inf {
            Some(if r0 == 0.0 { 1 } else { 0 })
        } else {
            let l = (r_zero / r_inf).ln() / r0.ln().abs();
            if l.is_finite() {
                Some(l.ceil() as usize)
            } else {
                None
            }
        };
        (radii, Some(r_inf), suggested)
    } else {
        (vec![r_zero], None, None)
    };

    let adaptive_condition = match (inputs.f0_phi0, inputs.f2) {
        (Some(f0), Some(f2)) => {
            Some(lambda0 * (1.0 + a_const / one_minus) <= f0 * eta * (-eta).exp() && f_star <= f2)
        }
        _ => None,
    };
    let recursive_condition_1 = e * growth * s0.sqrt() / f0_phi2 <= gamma0 * sqrt_ell;
    let recursive_condition_2 = match (inputs.sigma, inputs.n, inputs.eps0, contracts) {
        (Some(sigma), Some(n), Some(eps0), true) => {
            let noise = sigma * (2.0 * s0 * (4.0 * s0 / eps0).ln()).sqrt() / (n as f64).sqrt();
            let lhs = (rho_s0_norm + noise) / ((-eta).exp() * f_star * (1.0 - r0));
            Some(lhs <= gamma0 * a_const * lambda0 * sqrt_ell / one_minus)
        }
        (Some(_), Some(_), Some(_), false) => Some(false),
        _ => None,
    };
    let (strict, loose) = xi_thresholds(a_const, kappa, gamma0);
    Ok(ContractionReport {
        inputs: inputs.clone(),
        lambda,
        r0,
        contracts,
        radii,
        r_infinity,
        adaptive_condition,
        recursive_condition_1,
        recursive_condition_2,
        xi_meets_recursive_threshold: inputs.xi.map(|xi| xi >= strict),
        xi_meets_adaptive_threshold: inputs.xi.map(|xi| xi >= loose),
        suggested_stages,
    })
}

/// Smallest `ell*` satisfying the first recursion condition.
pub fn minimal_ell_star(
    eta: f64,
    kappa: f64,
    gamma0: f64,
    a_const: f64,
    s0_size: usize,
    f0_phi2: f64,
) -> usize {
    let lhs =
        eta.exp() * (1.0 + (1.0 - kappa * gamma0) / a_const) * (s0_size as f64).sqrt() / f0_phi2;
    let ratio = lhs / gamma0;
    let mut ell = (ratio * ratio).ceil().max(0.0) as usize;
    while (ell as f64).sqrt() * gamma0 < lhs {
        ell += 1;
    }
    ell
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn base_inputs() -> ContractionInputs {
        ContractionInputs {
            kappa: 1.0 / 3.0,
            f_star: 1.0,
            f0_phi2: 1.0,
            s0_size: 4,
            eta: 0.0,
            gamma0: 1.0,
            a_const: 2.0,
            lambda0: 0.1,
            rho_s0_norm: 0.0,
            noise_s0_norm: 0.1,
            ell_star: 10,
            stages: 3,
            xi: Some(3.0),
            f0_phi0: None,
            f2: None,
            sigma: None,
            n: None,
            eps0: None,
        }
    }

    #[test]
    fn r0_example() {
        let rep = contraction_report(&base_inputs()).unwrap();
        assert_relative_eq!(rep.r0, 2.0 / 3.0, max_relative = 1e-14);
        assert!(rep.contracts);
        assert_eq!(rep.xi_meets_recursive_threshold, Some(true));
    }

    #[test]
    fn r0_vanishes_for_l1_large_a() {
        let mut inputs = base_inputs();
        inputs.kappa = 0.0;
        inputs.a_const = 1e9;
        assert!(contraction_report(&inputs).unwrap().r0 < 1e-8);
    }

    #[test]
    fn radius_sequence_mixes_geometrically() {
        let mut inputs = base_inputs();
        // r0 = 2/3, R0 = 10, Rinf = 2.
        let growth = 1.0 + (1.0 - 1.0 / 3.0) / 2.0;
        let lambda = 2.0 * 0.1 / (1.0 - 1.0 / 3.0);
        inputs.f0_phi2 = lambda * growth * 2.0 / 10.0;
        inputs.noise_s0_norm = 2.0 * (1.0 - 2.0 / 3.0);
        let rep = contraction_report(&inputs).unwrap();
        assert_relative_eq!(rep.radii[0], 10.0, max_relative = 1e-12);
        assert_relative_eq!(rep.radii[1], 22.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(rep.radii[2], 50.0 / 9.0, max_relative = 1e-12);
        assert_relative_eq!(rep.r_infinity.unwrap(), 2.0, max_relative = 1e-12);
        for w in rep.radii.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let l = rep.suggested_stages.unwrap();
        assert!(rep.radius(l).unwrap() <= 2.0 * 2.0 + 1e-12);
        assert!(rep.radius(l - 1).unwrap() > 4.0);
    }

    #[test]
    fn no_contraction_reports_only_r0() {
        let mut inputs = base_inputs();
        inputs.f_star = 0.5;
        let rep = contraction_report(&inputs).unwrap();
        assert!(!rep.contracts);
        assert_eq!(rep.radii.len(), 1);
        assert!(rep.r_infinity.is_none());
        assert!(!rep.event_holds(0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut inputs = base_inputs();
        inputs.gamma0 = 3.0;
        assert!(contraction_report(&inputs).is_err());
        let mut inputs = base_inputs();
        inputs.a_const = 1.0;
        assert!(contraction_report(&inputs).is_err());
    }

    #[test]
    fn ell_star_is_minimal() {
        let ell = minimal_ell_star(0.0, 1.0 / 3.0, 1.0, 3.0, 5, 0.9);
        let mut inputs = base_inputs();
        inputs.ell_star = ell;
        inputs.s0_size = 5;
        inputs.f0_phi2 = 0.9;
        inputs.a_const = 3.0;
        assert!(contraction_report(&inputs).unwrap().recursive_condition_1);
        inputs.ell_star = ell - 1;
        assert!(!contraction_report(&inputs).unwrap().recursive_condition_1);
    }

    fn orthogonal() -> (Dataset, DVector<f64>) {
        let n = 8;
        let x = DMatrix::identity(n, n) * (n as f64).sqrt();
        let beta_star = DVector::from_row_slice(&[3.0, -2.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let noise = DVector::from_row_slice(&[0.1, -0.2, 0.05, 0.3, -0.1, 0.0, 0.2, -0.3]);
        let y = &x * &beta_star + noise;
        (Dataset::new(x, y).unwrap(), beta_star)
    }

    #[test]
    fn l1_recursion_is_stationary() {
        let (data, target) = orthogonal();
        let mut cfg = MultistageConfig::new(PenaltySpec::l1(0.2).unwrap(), 8);
        cfg.track_target = Some(target);
        let trace = run_recursion(&data, &GlmFamily::linear(), &cfg).unwrap();
        assert_eq!(trace.stages.len(), 4);
        for s in &trace.stages[1..] {
            assert_eq!(s.beta, trace.stages[0].beta);
        }
    }

    #[test]
    fn stage_zero_matches_plain_lasso_and_stage_one_matches_adaptive_step() {
        let (data, _) = orthogonal();
        let fam = GlmFamily::linear();
        let pen = PenaltySpec::mcp(3.0, 0.2).unwrap();
        let mut cfg = MultistageConfig::new(pen, 8);
        cfg.stages = 1;
        let trace = run_recursion(&data, &fam, &cfg).unwrap();
        let lasso = fit_weighted_lasso(&data, &fam, &FitConfig::lasso(0.2, 8)).unwrap();
        assert_eq!(trace.stages[0].beta, lasso.beta_hat);
        let step = run_adaptive_step(&data, &fam, &pen, &lasso.beta_hat, &cfg.base_fit).unwrap();
        assert_eq!(trace.stages[1].beta, step.beta_hat);
    }

    #[test]
    fn mcp_step_removes_bias_on_orthogonal_design() {
        let (data, target) = orthogonal();
        let fam = GlmFamily::linear();
        let lambda = 0.2;
        let pen = PenaltySpec::mcp(3.0, lambda).unwrap();
        let mut cfg = MultistageConfig::new(pen, 8);
        cfg.track_target = Some(target.clone());
        let trace = run_recursion(&data, &fam, &cfg).unwrap();
        // Closed form: X'X/n = I, so stage 0 soft-thresholds z and a flat-region
        // MCP weight leaves z unshrunk.
        let z = data.z();
        for j in 0..2 {
            let soft = z[j].signum() * (z[j].abs() - lambda).max(0.0);
            assert_relative_eq!(trace.stages[0].beta[j], soft, epsilon = 1e-10);
            assert_relative_eq!(trace.stages[1].beta[j], z[j], epsilon = 1e-10);
            assert!(
                (trace.stages[1].beta[j] - target[j]).abs()
                    < (trace.stages[0].beta[j] - target[j]).abs()
            );
            assert_eq!(trace.stages[1].weights_used[j], 0.0);
        }
        assert!(
            trace.last().l2_error_to_target.unwrap() <= trace.stages[0].l2_error_to_target.unwrap()
        );
    }

    #[test]
    fn unpenalized_coordinates_stay_unpenalized() {
        let (data, _) = orthogonal();
        let pen = PenaltySpec::scad(3.7, 0.2).unwrap();
        let mut cfg = MultistageConfig::new(pen, 8);
        cfg.base_fit.weights[5] = 0.0;
        let trace = run_recursion(&data, &GlmFamily::linear(), &cfg).unwrap();
        for s in &trace.stages {
            assert_eq!(s.weights_used[5], 0.0);
        }
        assert_eq!(trace.stages[0].weights_used[4], 1.0);
    }
}
