//! Convex GLM losses `l(beta) = psi(beta) - <beta, z>` with `z = X'y/n`.
//!
//! The loss for a family with cumulant `psi0` is
//! `l(beta) = (1/n) sum_i psi0(x_i beta) - z'beta`; data-only constants
//! such as `log(y_i!)` are dropped because they cancel in every divergence
//! and optimality condition.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors above this value are rejected for the Poisson family.
pub const POISSON_THETA_GUARD: f64 = 700.0;

/// Observed data: design `x` (n x p) and response `y` (length n).
#[derive(Clone, Debug)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    column_norms: Vec<f64>,
    z: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::domain(format!(
                "design must be non-empty, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(Error::domain(format!(
                "response has length {} but the design has {n} rows",
                y.len()
            )));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite design entry at row {}, column {}",
                k % n,
                k / n
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite response at row {i}")));
        }
        let column_norms = (0..p)
            .map(|j| x.column(j).iter().map(|v| v * v).sum())
            .collect();
        let z = x.tr_mul(&y) / n as f64;
        Ok(Dataset {
            x,
            y,
            column_norms,
            z,
        })
    }

    /// Same design with a new response; column norms are reused.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::domain(format!(
                "response has length {} but the design has {} rows",
                y.len(),
                self.n()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite response at row {i}")));
        }
        let z = self.x.tr_mul(&y) / self.n() as f64;
        Ok(Dataset {
            x: self.x.clone(),
            y,
            column_norms: self.column_norms.clone(),
            z,
        })
    }

    /// Checks the response domain required by `family`.
    pub fn validate_for(&self, family: &GlmFamily) -> Result<()> {
        match family.kind {
            FamilyKind::Linear => Ok(()),
            FamilyKind::Logistic => match self.y.iter().position(|&v| v != 0.0 && v != 1.0) {
                Some(i) => Err(Error::domain(format!(
                    "logistic response must be 0 or 1, row {i} has {}",
                    self.y[i]
                ))),
                None => Ok(()),
            },
            FamilyKind::Poisson => match self.y.iter().position(|&v| v < 0.0) {
                Some(i) => Err(Error::domain(format!(
                    "poisson response must be nonnegative, row {i} has {}",
                    self.y[i]
                ))),
                None => Ok(()),
            },
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Squared Euclidean norms `|x_j|_2^2` of the design columns.
    pub fn column_norms(&self) -> &[f64] {
        &self.column_norms
    }

    /// `z = X'y/n`.
    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    /// Contiguous slice of column `j`.
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    /// `max_{i,j} |x_ij|` over the given columns (all columns when `None`).
    pub fn max_abs_entry(&self, columns: Option<&[usize]>) -> f64 {
        let scan = |j: usize| self.column(j).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        match columns {
            Some(cols) => cols.iter().map(|&j| scan(j)).fold(0.0, f64::max),
            None => (0..self.p()).map(scan).fold(0.0, f64::max),
        }
    }

    /// Rescales every nonzero column to `|x_j|_2^2 = n`.
    pub fn standardized(&self) -> Result<Self> {
        let n = self.n() as f64;
        let mut x = self.x.clone();
        for j in 0..self.p() {
            let norm2 = self.column_norms[j];
            if norm2 > 0.0 {
                let scale = (n / norm2).sqrt();
                x.column_mut(j).scale_mut(scale);
            }
        }
        Dataset::new(x, self.y.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Linear,
    Logistic,
    Poisson,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyKind::Linear => "linear",
            FamilyKind::Logistic => "logistic",
            FamilyKind::Poisson => "poisson",
        })
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "gaussian" => Ok(FamilyKind::Linear),
            "logistic" | "binomial" => Ok(FamilyKind::Logistic),
            "poisson" | "log-linear" => Ok(FamilyKind::Poisson),
            other => Err(Error::domain(format!("unknown family `{other}`"))),
        }
    }
}

/// A canonical-link GLM family with dispersion `sigma2`.
///
/// The dispersion enters only penalty calibration, never the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
}

fn default_sigma2() -> f64 {
    1.0
}

impl GlmFamily {
    pub fn new(kind: FamilyKind) -> Self {
        GlmFamily { kind, sigma2: 1.0 }
    }

    pub fn linear() -> Self {
        Self::new(FamilyKind::Linear)
    }

    pub fn logistic() -> Self {
        Self::new(FamilyKind::Logistic)
    }

    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson)
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::domain(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        self.sigma2 = sigma2;
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Lipschitz constant of `log psi0''`.
    pub fn m1(&self) -> f64 {
        match self.kind {
            FamilyKind::Linear => 0.0,
            FamilyKind::Logistic | FamilyKind::Poisson => 1.0,
        }
    }

    /// Range of `M1 |t|` over which the log-curvature bound holds.
    pub fn eta_star(&self) -> f64 {
        f64::INFINITY
    }

    /// `sup_t psi0''(t)`.
    pub fn c0(&self) -> f64 {
        match self.kind {
            FamilyKind::Linear => 1.0,
            FamilyKind::Logistic => 0.25,
            FamilyKind::Poisson => f64::INFINITY,
        }
    }

    #[inline]
    pub fn psi0(&self, t: f64) -> f64 {
        match self.kind {
            FamilyKind::Linear => 0.5 * t * t,
            FamilyKind::Logistic => {
                if t > 0.0 {
                    t + (-t).exp().ln_1p()
                } else {
                    t.exp().ln_1p()
                }
            }
            FamilyKind::Poisson => t.exp(),
        }
    }

    /// Mean function `psi0'(t)`.
    #[inline]
    pub fn psi0_dot(&self, t: f64) -> f64 {
        match self.kind {
            FamilyKind::Linear => t,
            FamilyKind::Logistic => {
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }
            FamilyKind::Poisson => t.exp(),
        }
    }

    /// Variance function `psi0''(t)`.
    #[inline]
    pub fn psi0_ddot(&self, t: f64) -> f64 {
        match self.kind {
            FamilyKind::Linear => 1.0,
            FamilyKind::Logistic => {
                let e = (-t.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            FamilyKind::Poisson => t.exp(),
        }
    }
}

/// Loss value, gradient and per-observation curvature at one `beta`.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub value: f64,
    /// `psi'(beta) - z`.
    pub gradient: DVector<f64>,
    /// `theta = X beta`.
    pub linear_predictor: DVector<f64>,
    /// `psi0''(theta_i)`.
    pub curvature: DVector<f64>,
}

fn check_beta(data: &Dataset, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::domain(format!(
            "coefficient vector has length {} but the design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    if let Some(j) = beta.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "non-finite coefficient at index {j}"
        )));
    }
    Ok(())
}

/// Checks `theta` against the family's overflow guard.
pub(crate) fn guard_theta(family: &GlmFamily, theta: &DVector<f64>) -> Result<()> {
    for (row, &value) in theta.iter().enumerate() {
        let bad = !value.is_finite()
            || (family.kind == FamilyKind::Poisson && value > POISSON_THETA_GUARD);
        if bad {
            return Err(Error::Overflow { row, value });
        }
    }
    Ok(())
}

/// `theta = X beta`, guarded.
pub fn linear_predictor(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_beta(data, beta)?;
    let theta = data.x() * beta;
    guard_theta(family, &theta)?;
    Ok(theta)
}

/// Loss value from a precomputed linear predictor.
pub(crate) fn loss_value_at(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    theta: &DVector<f64>,
) -> f64 {
    let n = data.n() as f64;
    let psi: f64 = theta.iter().map(|&t| family.psi0(t)).sum::<f64>() / n;
    psi - data.z().dot(beta)
}

/// `psi'(beta) = X' psi0'(theta) / n` from a precomputed linear predictor.
pub(crate) fn psi_gradient_at(
    data: &Dataset,
    family: &GlmFamily,
    theta: &DVector<f64>,
) -> DVector<f64> {
    let n = data.n() as f64;
    let mean = theta.map(|t| family.psi0_dot(t));
    data.x().tr_mul(&mean) / n
}

pub fn evaluate_loss(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
) -> Result<LossEvaluation> {
    let theta = linear_predictor(data, family, beta)?;
    let value = loss_value_at(data, family, beta, &theta);
    let gradient = psi_gradient_at(data, family, &theta) - data.z();
    let curvature = theta.map(|t| family.psi0_ddot(t));
    Ok(LossEvaluation {
        value,
        gradient,
        linear_predictor: theta,
        curvature,
    })
}

/// Draws a response vector from the family's model at linear predictor
/// `theta`: Gaussian with variance `sigma2`, Bernoulli, or Poisson.
pub fn sample_response<R: rand::Rng + ?Sized>(
    family: &GlmFamily,
    theta: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    use rand_distr::{Distribution, Poisson, StandardNormal};
    guard_theta(family, theta)?;
    let sigma = family.sigma();
    let mut y = DVector::zeros(theta.len());
    for (i, &t) in theta.iter().enumerate() {
        y[i] = match family.kind {
            FamilyKind::Linear => {
                let e: f64 = StandardNormal.sample(rng);
                t + sigma * e
            }
            FamilyKind::Logistic => (rng.random::<f64>() < family.psi0_dot(t)) as u8 as f64,
            FamilyKind::Poisson => {
                let mean = t.exp();
                if mean <= 0.0 {
                    0.0
                } else {
                    Poisson::new(mean)
                        .map_err(|e| Error::domain(format!("poisson mean {mean}: {e}")))?
                        .sample(rng)
                }
            }
        };
    }
    Ok(y)
}

/// Loss value only.
pub fn loss_value(data: &Dataset, family: &GlmFamily, beta: &DVector<f64>) -> Result<f64> {
    let theta = linear_predictor(data, family, beta)?;
    Ok(loss_value_at(data, family, beta, &theta))
}

/// Negative gradient `z - psi'(beta)`.
pub fn negative_gradient(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let theta = linear_predictor(data, family, beta)?;
    Ok(data.z() - psi_gradient_at(data, family, &theta))
}

/// Hessian `X' diag(psi0''(X beta)) X / n`.
pub fn hessian(data: &Dataset, family: &GlmFamily, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let theta = linear_predictor(data, family, beta)?;
    let curvature = theta.map(|t| family.psi0_ddot(t));
    Ok(weighted_gram(data.x(), &curvature))
}

/// `X' diag(d) X / n`.
pub fn weighted_gram(x: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut scaled = x.clone();
    for (i, &di) in d.iter().enumerate() {
        let s = di.sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let mut gram = scaled.tr_mul(&scaled) / n;
    symmetrize(&mut gram);
    gram
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrized Bregman divergence `<beta - beta*, psi'(beta) - psi'(beta*)>`.
pub fn bregman_divergence(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    beta_star: &DVector<f64>,
) -> Result<f64> {
    check_beta(data, beta_star)?;
    check_beta(data, beta)?;
    let n = data.n() as f64;
    if family.kind == FamilyKind::Linear {
        let xh = data.x() * (beta - beta_star);
        return Ok(xh.norm_squared() / n);
    }
    let theta = linear_predictor(data, family, beta)?;
    let theta_star = linear_predictor(data, family, beta_star)?;
    let sum: f64 = theta
        .iter()
        .zip(theta_star.iter())
        .map(|(&t, &ts)| (t - ts) * (family.psi0_dot(t) - family.psi0_dot(ts)))
        .sum();
    Ok(sum / n)
}

/// One-sided Bregman divergence `l(beta) - l(beta0) - <l'(beta0), beta - beta0>`.
pub fn bregman_one_sided(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    beta0: &DVector<f64>,
) -> Result<f64> {
    let at = evaluate_loss(data, family, beta0)?;
    let value = loss_value(data, family, beta)?;
    Ok(value - at.value - at.gradient.dot(&(beta - beta0)))
}

/// Largest relative error between the analytic gradient and central
/// differences of the loss with the given step.
///
/// Errors are scaled by `max(1, |analytic|, |numeric|)` so that
/// coordinates with near-zero gradient are compared absolutely.
pub fn gradient_check(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::domain(format!("step must be positive, got {step}")));
    }
    let analytic = evaluate_loss(data, family, beta)?.gradient;
    let mut worst = 0.0_f64;
    let mut probe = beta.clone();
    for j in 0..data.p() {
        probe[j] = beta[j] + step;
        let up = loss_value(data, family, &probe)?;
        probe[j] = beta[j] - step;
        let down = loss_value(data, family, &probe)?;
        probe[j] = beta[j];
        let numeric = (up - down) / (2.0 * step);
        let scale = 1.0_f64.max(analytic[j].abs()).max(numeric.abs());
        worst = worst.max((analytic[j] - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity2(y: [f64; 2]) -> Dataset {
        Dataset::new(DMatrix::identity(2, 2), DVector::from_row_slice(&y)).unwrap()
    }

    fn random_data(n: usize, p: usize, family: FamilyKind, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| match family {
            FamilyKind::Linear => rng.random_range(-2.0..2.0),
            FamilyKind::Logistic => f64::from(rng.random_bool(0.5) as u8),
            FamilyKind::Poisson => f64::from(rng.random_range(0..5u8)),
        });
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn linear_gradient_at_zero_is_minus_z() {
        let data = identity2([3.0, 0.0]);
        let eval = evaluate_loss(&data, &GlmFamily::linear(), &DVector::zeros(2)).unwrap();
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.gradient.as_slice(), &[-1.5, 0.0]);
    }

    #[test]
    fn logistic_curvature_at_zero_is_quarter() {
        let data = random_data(7, 3, FamilyKind::Logistic, 1);
        let eval = evaluate_loss(&data, &GlmFamily::logistic(), &DVector::zeros(3)).unwrap();
        assert!(eval.curvature.iter().all(|&c| c == 0.25));
    }

    #[test]
    fn poisson_single_observation() {
        let data = Dataset::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let eval = evaluate_loss(&data, &GlmFamily::poisson(), &DVector::zeros(1)).unwrap();
        assert_eq!(eval.gradient[0], -1.0);
        assert_eq!(eval.curvature[0], 1.0);
    }

    #[test]
    fn poisson_overflow_names_row() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 800.0, 1.0]);
        let data = Dataset::new(x, DVector::zeros(3)).unwrap();
        match evaluate_loss(&data, &GlmFamily::poisson(), &DVector::from_element(1, 1.0)) {
            Err(Error::Overflow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_responses() {
        let x = DMatrix::identity(2, 2);
        let data = Dataset::new(x.clone(), DVector::from_row_slice(&[0.0, 0.5])).unwrap();
        assert!(data.validate_for(&GlmFamily::logistic()).is_err());
        let data = Dataset::new(x, DVector::from_row_slice(&[-1.0, 2.0])).unwrap();
        assert!(data.validate_for(&GlmFamily::poisson()).is_err());
        assert!(data.validate_for(&GlmFamily::linear()).is_ok());
    }

    #[test]
    fn rejects_non_finite_design() {
        let mut x = DMatrix::identity(2, 2);
        x[(1, 0)] = f64::NAN;
        assert!(Dataset::new(x, DVector::zeros(2)).is_err());
    }

    #[test]
    fn column_norms_cached() {
        let data = random_data(13, 4, FamilyKind::Linear, 3);
        for j in 0..4 {
            let direct: f64 = data.x().column(j).norm_squared();
            assert_relative_eq!(data.column_norms()[j], direct, max_relative = 1e-12);
        }
        let std = data.standardized().unwrap();
        for j in 0..4 {
            assert_relative_eq!(std.column_norms()[j], 13.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn bregman_examples() {
        let data = identity2([3.0, 0.0]);
        let fam = GlmFamily::linear();
        let b = DVector::from_row_slice(&[0.3, -0.7]);
        assert_eq!(bregman_divergence(&data, &fam, &b, &b).unwrap(), 0.0);
        let h = DVector::from_row_slice(&[1.0, 2.0]);
        let zero = DVector::zeros(2);
        assert_relative_eq!(bregman_divergence(&data, &fam, &h, &zero).unwrap(), 2.5);
    }

    #[test]
    fn logistic_bregman_matches_symmetric_kl() {
        // n = 1, x = 1, beta* = 0, beta = 1.
        let data = Dataset::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let fam = GlmFamily::logistic();
        let value = bregman_divergence(
            &data,
            &fam,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 0.0),
        )
        .unwrap();
        let pi1 = 1.0 / (1.0 + (-1.0_f64).exp());
        let pi0 = 0.5;
        let kl = |a: f64, b: f64| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        let oracle = kl(pi1, pi0) + kl(pi0, pi1);
        assert_relative_eq!(value, oracle, max_relative = 1e-12);
        assert_relative_eq!(value, pi1 - pi0, max_relative = 1e-12);
    }

    #[test]
    fn gradient_check_small_for_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, kind) in [
            FamilyKind::Linear,
            FamilyKind::Logistic,
            FamilyKind::Poisson,
        ]
        .into_iter()
        .enumerate()
        {
            let data = random_data(20, 5, kind, 100 + k as u64);
            let beta = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let err = gradient_check(&data, &GlmFamily::new(kind), &beta, 1e-5).unwrap();
            assert!(err <= 1e-6, "{kind}: {err}");
        }
        let data = random_data(4, 2, FamilyKind::Linear, 5);
        assert!(gradient_check(&data, &GlmFamily::linear(), &DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn logistic_log_curvature_is_one_lipschitz() {
        let fam = GlmFamily::logistic();
        for i in -40..=40 {
            let theta = i as f64 * 0.25;
            for k in -40..=40 {
                let t = k as f64 * 0.2;
                let ratio = fam.psi0_ddot(theta + t) / fam.psi0_ddot(theta);
                assert!(
                    ratio >= (-t.abs()).exp() * (1.0 - 1e-12),
                    "theta={theta} t={t}"
                );
            }
        }
    }

    #[test]
    fn family_constants() {
        assert_eq!(GlmFamily::linear().m1(), 0.0);
        assert_eq!(GlmFamily::logistic().c0(), 0.25);
        assert!(GlmFamily::poisson().c0().is_infinite());
        assert_eq!(
            "poisson".parse::<FamilyKind>().unwrap(),
            FamilyKind::Poisson
        );
        assert!("probit".parse::<FamilyKind>().is_err());
        assert!(GlmFamily::linear().with_sigma2(0.0).is_err());
    }
}
