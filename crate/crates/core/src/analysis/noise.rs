//! Noise functionals, the cone event, penalty calibration and oracle bounds.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{linear_predictor, negative_gradient, sample_response, Dataset, GlmFamily};

/// Sup-norm functionals of the score `z - psi'(beta*)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFunctionals {
    /// `max_{j in S} |z_j - psi'_j(beta*)|`.
    pub z0: f64,
    /// `max_{j not in S} |z_j - psi'_j(beta*)| / w_j`, zero when `S^c` is empty.
    pub z1: f64,
}

pub(crate) fn support_mask(p: usize, support: &[usize]) -> Result<Vec<bool>> {
    let mut in_s = vec![false; p];
    for &j in support {
        if j >= p {
            return Err(Error::domain(format!(
                "support index {j} out of range for p = {p}"
            )));
        }
        in_s[j] = true;
    }
    Ok(in_s)
}

fn check_target(beta_star: &DVector<f64>, in_s: &[bool], w_bound: &DVector<f64>) -> Result<()> {
    let p = in_s.len();
    if beta_star.len() != p || w_bound.len() != p {
        return Err(Error::domain(format!(
            "target has length {} and weights {} but p = {p}",
            beta_star.len(),
            w_bound.len()
        )));
    }
    for j in 0..p {
        if !in_s[j] {
            if beta_star[j] != 0.0 {
                return Err(Error::domain(format!(
                    "support misses nonzero target coordinate {j}"
                )));
            }
            if !(w_bound[j] > 0.0) {
                return Err(Error::domain(format!(
                    "weight bound {j} must be positive off the support"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn functionals_from_score(
    score: &DVector<f64>,
    in_s: &[bool],
    w_bound: &DVector<f64>,
) -> NoiseFunctionals {
    let (mut z0, mut z1) = (0.0_f64, 0.0_f64);
    for (j, &g) in score.iter().enumerate() {
        if in_s[j] {
            z0 = z0.max(g.abs());
        } else {
            z1 = z1.max(g.abs() / w_bound[j]);
        }
    }
    NoiseFunctionals { z0, z1 }
}

pub fn noise_functionals(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    w_bound: &DVector<f64>,
) -> Result<NoiseFunctionals> {
    let in_s = support_mask(data.p(), support)?;
    check_target(beta_star, &in_s, w_bound)?;
    let score = negative_gradient(data, family, beta_star)?;
    Ok(functionals_from_score(&score, &in_s, w_bound))
}

/// Effective cone width `(|w_S|_inf lambda + z0) / (lambda - z1)` of the
/// noise event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventXi {
    pub xi_effective: f64,
}

impl EventXi {
    pub fn holds_for(&self, xi: f64) -> bool {
        self.xi_effective <= xi
    }
}

pub fn event_xi_check(w_s_inf: f64, lambda: f64, z0: f64, z1: f64) -> EventXi {
    let xi_effective = if lambda > z1 {
        (w_s_inf * lambda + z0) / (lambda - z1)
    } else {
        f64::INFINITY
    };
    EventXi { xi_effective }
}

/// `e^eta (|w_S|_inf lambda + z0) |S|^(1/q) / F_0(xi, S; phi_q)`, the
/// in-event bound on `|h|_q`.
pub fn oracle_bound(
    eta: f64,
    w_s_inf: f64,
    lambda: f64,
    z0: f64,
    s_size: usize,
    q: f64,
    factor: f64,
) -> f64 {
    eta.exp() * (w_s_inf * lambda + z0) * (s_size as f64).powf(1.0 / q) / factor
}

/// `e^eta (|w_S|_inf lambda + z0)^2 |S| / F_0(xi, S; phi_1S)`, bounding
/// `Delta + (lambda - z1) |W h_{S^c}|_1`.
pub fn bregman_bound(
    eta: f64,
    w_s_inf: f64,
    lambda: f64,
    z0: f64,
    s_size: usize,
    factor_phi1s: f64,
) -> f64 {
    let a = w_s_inf * lambda + z0;
    eta.exp() * a * a * s_size as f64 / factor_phi1s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBounds {
    pub lq: f64,
    pub bregman: f64,
}

/// Both bounds at once.
#[allow(clippy::too_many_arguments)]
pub fn oracle_bounds(
    eta: f64,
    w_s_inf: f64,
    lambda: f64,
    z0: f64,
    s_size: usize,
    q: f64,
    factor_phi_q: f64,
    factor_phi1s: f64,
) -> OracleBounds {
    OracleBounds {
        lq: oracle_bound(eta, w_s_inf, lambda, z0, s_size, q, factor_phi_q),
        bregman: bregman_bound(eta, w_s_inf, lambda, z0, s_size, factor_phi1s),
    }
}

/// What penalty calibration needs to know about the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub p: usize,
    /// `|x_j|_2`.
    pub column_norms: Vec<f64>,
    pub sigma: f64,
    /// Diagonal of `Sigma*`, needed by the curvature-free mode.
    pub sigma_star_diag: Option<Vec<f64>>,
}

impl DataSummary {
    pub fn from_dataset(data: &Dataset, family: &GlmFamily) -> Self {
        DataSummary {
            n: data.n(),
            p: data.p(),
            column_norms: data.column_norms().iter().map(|v| v.sqrt()).collect(),
            sigma: family.sigma(),
            sigma_star_diag: None,
        }
    }

    /// Adds `diag(Sigma*)` at `beta_star`.
    pub fn with_sigma_star(
        mut self,
        data: &Dataset,
        family: &GlmFamily,
        beta_star: &DVector<f64>,
    ) -> Result<Self> {
        let theta = linear_predictor(data, family, beta_star)?;
        let n = data.n() as f64;
        let diag = (0..data.p())
            .map(|j| {
                data.column(j)
                    .iter()
                    .zip(theta.iter())
                    .map(|(x, &t)| x * x * family.psi0_ddot(t))
                    .sum::<f64>()
                    / n
            })
            .collect();
        self.sigma_star_diag = Some(diag);
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Uses the curvature bound `c0`.
    BoundedCurvature,
    /// Uses `Sigma*` and the curvature growth constants.
    CurvatureFree {
        eta0: f64,
        m1: f64,
        x_inf_norms: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyLevels {
    pub lambda0: f64,
    pub lambda1: f64,
}

/// Smallest `t` with `f(t) <= target` for decreasing `f`, rounded up.
fn bisect_decreasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let mut hi = 1.0;
    while f(hi) > target {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Penalty level making the noise event hold with probability at least
/// `1 - eps0`, with unit weights so that `lambda0 = lambda1`.
pub fn penalty_level(
    family: &GlmFamily,
    summary: &DataSummary,
    eps0: f64,
    mode: &CalibrationMode,
) -> Result<PenaltyLevels> {
    if !(eps0 > 0.0 && eps0 < 1.0) {
        return Err(Error::domain(format!(
            "eps0 must lie in (0, 1), got {eps0}"
        )));
    }
    let (n, p) = (summary.n as f64, summary.p);
    if summary.n == 0 || p == 0 || summary.column_norms.len() != p {
        return Err(Error::domain("data summary has inconsistent dimensions"));
    }
    let sigma2 = summary.sigma * summary.sigma;
    let target = eps0 / 2.0;
    let t = match mode {
        CalibrationMode::BoundedCurvature => {
            let c0 = family.c0();
            if !c0.is_finite() {
                return Err(Error::Unsupported(format!(
                    "bounded-curvature calibration needs a finite curvature bound; the {} family has none",
                    family.kind
                )));
            }
            let sq: Vec<f64> = summary.column_norms.iter().map(|v| v * v).collect();
            if sq.iter().all(|&v| v == sq[0]) {
                (summary.sigma * (2.0 * c0 * sq[0] * (2.0 * p as f64 / eps0).ln()).sqrt()) / n
            } else {
                bisect_decreasing(
                    |t| {
                        sq.iter()
                            .map(|&m| (-(n * n * t * t) / (2.0 * sigma2 * c0 * m)).exp())
                            .sum()
                    },
                    target,
                )
            }
        }
        CalibrationMode::CurvatureFree {
            eta0,
            m1,
            x_inf_norms,
        } => {
            let diag = summary
                .sigma_star_diag
                .as_ref()
                .ok_or_else(|| Error::domain("curvature-free calibration needs diag(Sigma*)"))?;
            if diag.len() != p || x_inf_norms.len() != p {
                return Err(Error::domain("curvature-free inputs have the wrong length"));
            }
            if diag.iter().any(|&d| !(d > 0.0)) {
                return Err(Error::domain("diag(Sigma*) must be positive"));
            }
            let decay = (-eta0).exp();
            let t_tail = bisect_decreasing(
                |t| {
                    diag.iter()
                        .map(|&d| (-(n * t * t * decay) / (2.0 * sigma2 * d)).exp())
                        .sum()
                },
                target,
            );
            let spread = (0..p)
                .map(|j| x_inf_norms[j] / diag[j])
                .fold(0.0_f64, f64::max);
            let cap = eta0 * eta0.exp();
            if m1 * spread * t_tail > cap {
                return Err(Error::Infeasible(format!(
                    "max-norm display fails: M1 max_j |x_j|_inf t / Sigma*_jj = {} exceeds eta0 e^eta0 = {cap} at the smallest t = {t_tail} meeting the tail display",
                    m1 * spread * t_tail
                )));
            }
            t_tail
        }
    };
    Ok(PenaltyLevels {
        lambda0: t,
        lambda1: t,
    })
}

/// Fraction of simulated responses at `beta_star` for which
/// `z0 <= lambda0` and `z1 <= lambda1`. Replicate `k` uses stream `k` of a
/// ChaCha20 generator seeded with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_event_probability(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    w_bound: &DVector<f64>,
    lambda0: f64,
    lambda1: f64,
    replicates: usize,
    seed: u64,
) -> Result<f64> {
    if replicates == 0 {
        return Err(Error::domain("replicates must be at least 1"));
    }
    let in_s = support_mask(data.p(), support)?;
    check_target(beta_star, &in_s, w_bound)?;
    let theta = linear_predictor(data, family, beta_star)?;
    let hits: Vec<Result<bool>> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let y = sample_response(family, &theta, &mut rng)?;
            let replicate = data.with_response(y)?;
            let score = negative_gradient(&replicate, family, beta_star)?;
            let f = functionals_from_score(&score, &in_s, w_bound);
            Ok(f.z0 <= lambda0 && f.z1 <= lambda1)
        })
        .collect();
    let mut count = 0usize;
    for h in hits {
        count += h? as usize;
    }
    Ok(count as f64 / replicates as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn summary_holds_euclidean_norms() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 2.0]);
        let d = Dataset::new(x, DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let s = DataSummary::from_dataset(&d, &GlmFamily::linear());
        assert_eq!(s.column_norms, vec![5.0, 2.0]);
    }

    #[test]
    fn functionals_by_hand() {
        let data =
            Dataset::new(DMatrix::identity(2, 2), DVector::from_vec(vec![3.0, 0.0])).unwrap();
        let f = noise_functionals(
            &data,
            &GlmFamily::linear(),
            &DVector::from_vec(vec![2.0, 0.0]),
            &[0],
            &DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert_relative_eq!(f.z0, 0.5, epsilon = 1e-15);
        assert_eq!(f.z1, 0.0);
    }

    #[test]
    fn weights_divide_z1() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.1]);
        let data = Dataset::new(x, DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        let b = DVector::from_vec(vec![0.4, 0.0]);
        let w1 = DVector::from_element(2, 1.0);
        let w3 = DVector::from_element(2, 3.0);
        let a = noise_functionals(&data, &GlmFamily::linear(), &b, &[0], &w1).unwrap();
        let c = noise_functionals(&data, &GlmFamily::linear(), &b, &[0], &w3).unwrap();
        assert_relative_eq!(c.z1, a.z1 / 3.0, max_relative = 1e-15);
        assert!(noise_functionals(
            &data,
            &GlmFamily::linear(),
            &DVector::from_vec(vec![0.0, 1.0]),
            &[0],
            &w1
        )
        .is_err());
    }

    #[test]
    fn event_xi_arithmetic() {
        assert_eq!(event_xi_check(1.0, 2.0, 0.0, 0.0).xi_effective, 1.0);
        let e = event_xi_check(1.0, 1.0, 0.5, 0.5);
        assert_relative_eq!(e.xi_effective, 3.0);
        assert!(e.holds_for(3.0) && !e.holds_for(2.9));
        assert!(event_xi_check(1.0, 1.0, 0.0, 1.0)
            .xi_effective
            .is_infinite());
    }

    #[test]
    fn oracle_bound_arithmetic() {
        assert_relative_eq!(oracle_bound(0.0, 1.0, 1.0, 0.5, 1, 2.0, 1.0), 1.5);
        assert_eq!(oracle_bound(0.0, 1.0, 0.0, 0.0, 4, 2.0, 1.0), 0.0);
        assert_relative_eq!(
            oracle_bound(0.0, 1.0, 2.0, 0.0, 4, 2.0, 0.5),
            2.0 * oracle_bound(0.0, 1.0, 1.0, 0.0, 4, 2.0, 0.5)
        );
        assert_relative_eq!(bregman_bound(0.0, 1.0, 1.0, 0.5, 2, 1.0), 4.5);
    }

    #[test]
    fn bounded_curvature_closed_form() {
        let summary = DataSummary {
            n: 100,
            p: 1000,
            column_norms: vec![10.0; 1000],
            sigma: 1.0,
            sigma_star_diag: None,
        };
        let l = penalty_level(
            &GlmFamily::logistic(),
            &summary,
            0.01,
            &CalibrationMode::BoundedCurvature,
        )
        .unwrap();
        assert_relative_eq!(
            l.lambda0,
            (0.005_f64 * 200000f64.ln()).sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(l.lambda0, 0.24705, epsilon = 1e-5);
        assert!(matches!(
            penalty_level(
                &GlmFamily::poisson(),
                &summary,
                0.01,
                &CalibrationMode::BoundedCurvature
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn bisection_matches_closed_form() {
        // Slightly uneven norms force the bisection path.
        let mut norms = vec![10.0; 50];
        norms[0] = 10.0 + 1e-12;
        let s = DataSummary {
            n: 100,
            p: 50,
            column_norms: norms,
            sigma: 1.0,
            sigma_star_diag: None,
        };
        let l = penalty_level(
            &GlmFamily::linear(),
            &s,
            0.05,
            &CalibrationMode::BoundedCurvature,
        )
        .unwrap();
        let closed = (2.0 / 100.0 * (100.0f64 / 0.05).ln()).sqrt();
        assert_relative_eq!(l.lambda0, closed, max_relative = 1e-9);
    }

    #[test]
    fn monotone_in_eps_and_p() {
        let mk = |p: usize| DataSummary {
            n: 100,
            p,
            column_norms: vec![10.0; p],
            sigma: 1.0,
            sigma_star_diag: None,
        };
        let lin = GlmFamily::linear();
        let mut last = f64::INFINITY;
        for eps in [0.01, 0.1, 0.5, 0.99] {
            let l = penalty_level(&lin, &mk(20), eps, &CalibrationMode::BoundedCurvature)
                .unwrap()
                .lambda0;
            assert!(l < last);
            last = l;
        }
        let a = penalty_level(&lin, &mk(1), 0.05, &CalibrationMode::BoundedCurvature)
            .unwrap()
            .lambda0;
        let b = penalty_level(&lin, &mk(100), 0.05, &CalibrationMode::BoundedCurvature)
            .unwrap()
            .lambda0;
        assert_relative_eq!(
            b / a,
            (200.0f64 / 0.05).ln().sqrt() / (2.0f64 / 0.05).ln().sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn curvature_free_mode() {
        let s = DataSummary {
            n: 100,
            p: 10,
            column_norms: vec![10.0; 10],
            sigma: 1.0,
            sigma_star_diag: Some(vec![0.25; 10]),
        };
        let mode = CalibrationMode::CurvatureFree {
            eta0: 0.5,
            m1: 1.0,
            x_inf_norms: vec![0.5; 10],
        };
        let l = penalty_level(&GlmFamily::logistic(), &s, 0.05, &mode).unwrap();
        let tail: f64 = (0..10)
            .map(|_| (-(100.0 * l.lambda0.powi(2) * (-0.5f64).exp()) / (2.0 * 0.25)).exp())
            .sum();
        assert!(tail <= 0.025 * (1.0 + 1e-12));
        let tight = CalibrationMode::CurvatureFree {
            eta0: 0.01,
            m1: 1.0,
            x_inf_norms: vec![50.0; 10],
        };
        assert!(matches!(
            penalty_level(&GlmFamily::logistic(), &s, 0.05, &tight),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn monte_carlo_extremes() {
        let x = DMatrix::from_fn(30, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let data = Dataset::new(x, DVector::zeros(30)).unwrap();
        let b = DVector::from_vec(vec![0.5, 0.0, 0.0]);
        let w = DVector::from_element(3, 1.0);
        let lin = GlmFamily::linear();
        assert_eq!(
            monte_carlo_event_probability(
                &data,
                &lin,
                &b,
                &[0],
                &w,
                f64::INFINITY,
                f64::INFINITY,
                20,
                1
            )
            .unwrap(),
            1.0
        );
        assert_eq!(
            monte_carlo_event_probability(&data, &lin, &b, &[0], &w, 0.0, 0.0, 20, 1).unwrap(),
            0.0
        );
        let a = monte_carlo_event_probability(&data, &lin, &b, &[0], &w, 0.3, 0.3, 50, 9).unwrap();
        let c = monte_carlo_event_probability(&data, &lin, &b, &[0], &w, 0.3, 0.3, 50, 9).unwrap();
        assert_eq!(a, c);
    }
}
