//! Weighted Lasso `argmin l(beta) + lambda |W beta|_1` and its KKT certificate.
//!
//! The outer loop builds a quadratic model of the loss from the curvature
//! `psi0''(theta_i)` and minimizes model plus penalty by cyclic coordinate
//! descent with soft-thresholding. Steps are accepted by backtracking on the
//! true objective. For the linear family the model is exact.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{
    guard_theta, linear_predictor, loss_value_at, negative_gradient, psi_gradient_at, Dataset,
    FamilyKind, GlmFamily,
};

/// Lower bound applied to per-observation curvature in the quadratic model.
pub const CURVATURE_FLOOR: f64 = 1e-10;

/// Iterates beyond this magnitude are treated as divergence.
const DIVERGENCE_BOUND: f64 = 1e12;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    #[serde(with = "crate::serde_vec::dvec")]
    pub weights: DVector<f64>,
    pub max_outer_iterations: usize,
    pub max_inner_sweeps: usize,
    pub kkt_tolerance: f64,
    pub coordinate_tolerance: f64,
    #[serde(with = "crate::serde_vec::opt_dvec")]
    pub warm_start: Option<DVector<f64>>,
}

impl FitConfig {
    pub fn new(lambda: f64, weights: DVector<f64>) -> Self {
        FitConfig {
            lambda,
            weights,
            max_outer_iterations: 200,
            max_inner_sweeps: 1000,
            kkt_tolerance: 1e-8,
            coordinate_tolerance: 1e-12,
            warm_start: None,
        }
    }

    /// Unweighted Lasso on `p` coordinates.
    pub fn lasso(lambda: f64, p: usize) -> Self {
        Self::new(lambda, DVector::from_element(p, 1.0))
    }

    pub fn with_warm_start(mut self, beta: DVector<f64>) -> Self {
        self.warm_start = Some(beta);
        self
    }

    fn validate(&self, p: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if self.weights.len() != p {
            return Err(Error::domain(format!(
                "weights have length {} but the design has {p} columns",
                self.weights.len()
            )));
        }
        if let Some(j) = self
            .weights
            .iter()
            .position(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::domain(format!(
                "weight {j} must be finite and nonnegative, got {}",
                self.weights[j]
            )));
        }
        if self.max_outer_iterations == 0 || self.max_inner_sweeps == 0 {
            return Err(Error::domain("iteration budgets must be positive"));
        }
        if !(self.kkt_tolerance > 0.0) || !(self.coordinate_tolerance > 0.0) {
            return Err(Error::domain("tolerances must be positive"));
        }
        if let Some(ws) = &self.warm_start {
            if ws.len() != p {
                return Err(Error::domain(format!(
                    "warm start has length {} but p = {p}",
                    ws.len()
                )));
            }
            if ws.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("warm start must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "crate::serde_vec::dvec")]
    pub beta_hat: DVector<f64>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// `g = z - psi'(beta_hat)`.
    #[serde(with = "crate::serde_vec::dvec")]
    pub negative_gradient: DVector<f64>,
    /// Penalized objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
}

#[inline]
fn soft_threshold(a: f64, t: f64) -> f64 {
    if a > t {
        a - t
    } else if a < -t {
        a + t
    } else {
        0.0
    }
}

fn penalty_term(beta: &DVector<f64>, thresholds: &[f64]) -> f64 {
    beta.iter().zip(thresholds).map(|(b, t)| t * b.abs()).sum()
}

/// KKT residual from a precomputed negative gradient `g`.
pub fn kkt_residual_from_gradient(
    beta: &DVector<f64>,
    g: &DVector<f64>,
    lambda: f64,
    weights: &DVector<f64>,
) -> f64 {
    let mut r = 0.0_f64;
    for j in 0..beta.len() {
        let t = lambda * weights[j];
        let v = if beta[j] != 0.0 {
            (g[j] - t * beta[j].signum()).abs()
        } else {
            (g[j].abs() - t).max(0.0)
        };
        r = r.max(v);
    }
    r
}

/// Largest violation of the weighted Lasso optimality conditions at `beta`.
pub fn kkt_certificate(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    lambda: f64,
    weights: &DVector<f64>,
) -> Result<f64> {
    if weights.len() != data.p() {
        return Err(Error::domain("weights length must equal p"));
    }
    if !lambda.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::domain("lambda and weights must be finite"));
    }
    let g = negative_gradient(data, family, beta)?;
    Ok(kkt_residual_from_gradient(beta, &g, lambda, weights))
}

/// Smallest `lambda` at which zero solves the problem with unit-scaled
/// `weights`, ignoring unpenalized coordinates.
pub fn lambda_max(data: &Dataset, family: &GlmFamily, weights: &DVector<f64>) -> Result<f64> {
    let g = negative_gradient(data, family, &DVector::zeros(data.p()))?;
    Ok(g.iter()
        .zip(weights.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(gj, w)| gj.abs() / w)
        .fold(0.0, f64::max))
}

struct Workspace {
    curvature: Vec<f64>,
    hdiag: Vec<f64>,
    residual: Vec<f64>,
}

/// Minimizes `-g'(u - beta) + (1/2n) sum_i d_i (x_i (u - beta))^2 + sum_j t_j |u_j|`
/// by cyclic coordinate descent, leaving `X (u - beta)` in `ws.residual`.
fn solve_model(
    data: &Dataset,
    beta: &DVector<f64>,
    g: &DVector<f64>,
    thresholds: &[f64],
    frozen: &[bool],
    config: &FitConfig,
    ws: &mut Workspace,
) -> DVector<f64> {
    let n = data.n();
    let p = data.p();
    let nf = n as f64;
    for j in 0..p {
        ws.hdiag[j] = if frozen[j] {
            0.0
        } else {
            let col = data.column(j);
            col.iter()
                .zip(&ws.curvature)
                .map(|(x, d)| d * x * x)
                .sum::<f64>()
                / nf
        };
    }
    ws.residual.iter_mut().for_each(|r| *r = 0.0);
    let mut u = beta.clone();

    let update = |j: usize, u: &mut DVector<f64>, ws: &mut Workspace| -> f64 {
        let h = ws.hdiag[j];
        if h <= 0.0 {
            return 0.0;
        }
        let col = data.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += col[i] * ws.curvature[i] * ws.residual[i];
        }
        let q = s / nf - g[j];
        let new = soft_threshold(h * u[j] - q, thresholds[j]) / h;
        let diff = new - u[j];
        if diff != 0.0 {
            for i in 0..n {
                ws.residual[i] += diff * col[i];
            }
            u[j] = new;
        }
        h * diff.abs()
    };

    let mut sweeps = 0;
    'outer: while sweeps < config.max_inner_sweeps {
        let mut change = 0.0_f64;
        for j in 0..p {
            change = change.max(update(j, &mut u, ws));
        }
        sweeps += 1;
        if change <= config.coordinate_tolerance {
            break;
        }
        let active: Vec<usize> = (0..p).filter(|&j| u[j] != 0.0).collect();
        while sweeps < config.max_inner_sweeps {
            let mut change = 0.0_f64;
            for &j in &active {
                change = change.max(update(j, &mut u, ws));
            }
            sweeps += 1;
            if change <= config.coordinate_tolerance {
                continue 'outer;
            }
        }
    }
    u
}

fn check_divergence(beta: &DVector<f64>) -> Result<()> {
    let (j, v) = beta
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |(bj, bv), (j, v)| {
            if v.abs() > bv {
                (j, v.abs())
            } else {
                (bj, bv)
            }
        });
    if v > DIVERGENCE_BOUND {
        return Err(Error::Unbounded { coordinate: j });
    }
    Ok(())
}

/// Computes the weighted Lasso estimator.
pub fn fit_weighted_lasso(
    data: &Dataset,
    family: &GlmFamily,
    config: &FitConfig,
) -> Result<FitResult> {
    data.validate_for(family)?;
    let p = data.p();
    let n = data.n();
    config.validate(p)?;
    let thresholds: Vec<f64> = config.weights.iter().map(|w| config.lambda * w).collect();
    let z = data.z();

    let frozen: Vec<bool> = data.column_norms().iter().map(|&c| c == 0.0).collect();
    for j in 0..p {
        if frozen[j] && z[j].abs() > thresholds[j] {
            return Err(Error::Unbounded { coordinate: j });
        }
    }

    let mut beta = config
        .warm_start
        .clone()
        .unwrap_or_else(|| DVector::zeros(p));
    for j in 0..p {
        if frozen[j] {
            beta[j] = 0.0;
        }
    }
    let mut theta = linear_predictor(data, family, &beta)?;
    let mut objective =
        loss_value_at(data, family, &beta, &theta) + penalty_term(&beta, &thresholds);
    let mut trace = vec![objective];

    let mut ws = Workspace {
        curvature: vec![1.0; n],
        hdiag: vec![0.0; p],
        residual: vec![0.0; n],
    };
    let exact_model = family.kind == FamilyKind::Linear;
    let mut outer = 0;
    let mut converged = false;
    let mut g;
    let mut kkt;

    loop {
        g = z - psi_gradient_at(data, family, &theta);
        kkt = kkt_residual_from_gradient(&beta, &g, config.lambda, &config.weights);
        if kkt <= config.kkt_tolerance {
            converged = true;
            break;
        }
        if outer >= config.max_outer_iterations {
            break;
        }
        outer += 1;

        if !exact_model {
            for (d, &t) in ws.curvature.iter_mut().zip(theta.iter()) {
                *d = family.psi0_ddot(t).max(CURVATURE_FLOOR);
            }
        }
        let u = solve_model(data, &beta, &g, &thresholds, &frozen, config, &mut ws);
        let delta = &u - &beta;

        let accepted = if exact_model {
            Some(u)
        } else {
            let slope =
                -g.dot(&delta) + penalty_term(&u, &thresholds) - penalty_term(&beta, &thresholds);
            let mut step = 1.0;
            let mut found = None;
            for _ in 0..MAX_HALVINGS {
                let trial = &beta + &delta * step;
                let trial_theta = DVector::from_iterator(
                    n,
                    theta.iter().zip(&ws.residual).map(|(t, r)| t + step * r),
                );
                if guard_theta(family, &trial_theta).is_ok() {
                    let f = loss_value_at(data, family, &trial, &trial_theta)
                        + penalty_term(&trial, &thresholds);
                    if f <= objective + ARMIJO * step * slope {
                        found = Some(trial);
                        break;
                    }
                }
                step *= 0.5;
            }
            match found {
                Some(b) => Some(b),
                None if family.c0().is_finite() => {
                    ws.curvature.iter_mut().for_each(|d| *d = family.c0());
                    let u = solve_model(data, &beta, &g, &thresholds, &frozen, config, &mut ws);
                    let trial_theta = &theta + DVector::from_column_slice(&ws.residual);
                    let f = loss_value_at(data, family, &u, &trial_theta)
                        + penalty_term(&u, &thresholds);
                    if f <= objective {
                        Some(u)
                    } else {
                        None
                    }
                }
                None => None,
            }
        };

        let Some(next) = accepted else {
            break;
        };
        check_divergence(&next)?;
        beta = next;
        theta = linear_predictor(data, family, &beta)?;
        objective = loss_value_at(data, family, &beta, &theta) + penalty_term(&beta, &thresholds);
        trace.push(objective);
    }

    let active_set = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(FitResult {
        beta_hat: beta,
        kkt_residual: kkt,
        objective,
        active_set,
        outer_iterations: outer,
        converged,
        negative_gradient: g,
        objective_trace: trace,
    })
}

/// Warm-started fits along a strictly descending sequence of `lambdas`.
pub fn solution_path(
    data: &Dataset,
    family: &GlmFamily,
    lambdas: &[f64],
    weights: &DVector<f64>,
) -> Result<Vec<FitResult>> {
    let base = FitConfig::new(lambdas.first().copied().unwrap_or(1.0), weights.clone());
    solution_path_with(data, family, lambdas, &base)
}

/// As [`solution_path`], taking budgets and tolerances from `base`.
pub fn solution_path_with(
    data: &Dataset,
    family: &GlmFamily,
    lambdas: &[f64],
    base: &FitConfig,
) -> Result<Vec<FitResult>> {
    if lambdas.is_empty() {
        return Err(Error::domain("lambda sequence is empty"));
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::domain("path lambdas must be positive and finite"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::domain("path lambdas must be strictly descending"));
    }
    let mut out: Vec<FitResult> = Vec::with_capacity(lambdas.len());
    let mut warm = base.warm_start.clone();
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        cfg.warm_start = warm;
        let fit = fit_weighted_lasso(data, family, &cfg)?;
        warm = Some(fit.beta_hat.clone());
        out.push(fit);
    }
    Ok(out)
}

/// `lambda_max * ratio^(k/(count-1))` for `k = 0..count`.
pub fn geometric_lambdas(lambda_max: f64, ratio: f64, count: usize) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !(ratio > 0.0 && ratio < 1.0) || count == 0 {
        return Err(Error::domain(
            "geometric grid needs lambda_max > 0, 0 < ratio < 1, count >= 1",
        ));
    }
    if count == 1 {
        return Ok(vec![lambda_max]);
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|k| lambda_max * (step * k as f64).exp())
        .collect())
}
