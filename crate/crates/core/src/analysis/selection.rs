//! Irrepresentable-type quantities and selection predictions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glm_factors::default_m2;
use super::noise::support_mask;
use crate::error::{Error, Result};
use crate::glm::{hessian, Dataset, FamilyKind, GlmFamily};

pub const DEFAULT_BALL_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvaluationMode {
    AtTargetOnly,
    SampledBall { count: usize, seed: u64 },
}

/// Noise-event quantities needed for the predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub lambda: f64,
    pub z0: f64,
    pub z1: f64,
    pub w_s_inf: f64,
    /// Lower bound for the invertibility factor in the ball condition;
    /// unused for the linear family, where the Hessian is constant.
    pub factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub kappa0: f64,
    pub kappa1: f64,
    pub m0: f64,
    pub eta_ball: f64,
    pub m2: f64,
    pub evaluation_mode: EvaluationMode,
    /// Suprema are exact (constant Hessian) rather than sampled lower bounds.
    pub exact_suprema: bool,
    pub points_evaluated: usize,
    pub predicted_no_false_positive: Option<bool>,
    pub predicted_sign_recovery: Option<bool>,
    /// `M0 (|w_S|_inf lambda + z0)`, to compare with `min_S |beta*_j|`.
    pub beta_min_threshold: Option<f64>,
    pub min_abs_signal: f64,
    /// Set when predictions rest on sampled suprema.
    pub heuristic: bool,
}

impl SelectionReport {
    /// Fills in the predictions under the given event quantities.
    pub fn with_event(mut self, event: &SelectionEvent, family: &GlmFamily) -> Self {
        let ball_ok = match (family.kind, event.factor) {
            (FamilyKind::Linear, _) => Some(true),
            (_, Some(f)) => {
                let eta = self.eta_ball;
                Some(event.w_s_inf * event.lambda + event.z0 <= eta * (-eta).exp() * f)
            }
            (_, None) => None,
        };
        let no_fp = ball_ok.map(|b| {
            b && self.kappa0 < 1.0
                && self.kappa1 * event.z0 + event.z1 <= (1.0 - self.kappa0) * event.lambda
        });
        let threshold = self.m0 * (event.w_s_inf * event.lambda + event.z0);
        self.beta_min_threshold = Some(threshold);
        self.predicted_sign_recovery = no_fp.map(|ok| ok && threshold < self.min_abs_signal);
        self.predicted_no_false_positive = no_fp;
        self
    }
}

/// `max_i sum_j |m_ij|`.
fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

struct PointValues {
    kappa0: f64,
    kappa1: f64,
    m0: f64,
}

fn evaluate_point(
    data: &Dataset,
    family: &GlmFamily,
    beta: &DVector<f64>,
    s: &[usize],
    sc: &[usize],
    w_bound: &DVector<f64>,
    label: &str,
) -> Result<PointValues> {
    let h = hessian(data, family, beta)?;
    let hs = DMatrix::from_fn(s.len(), s.len(), |a, b| h[(s[a], s[b])]);
    let inv = hs
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| {
            Error::Singular(format!(
                "Hessian block on the support is singular at {label}"
            ))
        })?;
    let cross = DMatrix::from_fn(sc.len(), s.len(), |a, b| h[(sc[a], s[b])] / w_bound[sc[a]]);
    let k1 = &cross * &inv;
    let mut k0 = k1.clone();
    for (b, &j) in s.iter().enumerate() {
        k0.column_mut(b).scale_mut(w_bound[j]);
    }
    Ok(PointValues {
        kappa0: inf_norm(&k0),
        kappa1: inf_norm(&k1),
        m0: inf_norm(&inv),
    })
}

pub fn irrepresentable_check(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    w_bound: &DVector<f64>,
    eta_ball: f64,
    mode: EvaluationMode,
) -> Result<SelectionReport> {
    irrepresentable_check_with(
        data,
        family,
        beta_star,
        support,
        w_bound,
        eta_ball,
        mode,
        default_m2(data, family),
    )
}

/// As [`irrepresentable_check`] with the ball `M2 |beta - beta*|_2 <= eta`
/// given explicitly.
#[allow(clippy::too_many_arguments)]
pub fn irrepresentable_check_with(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    w_bound: &DVector<f64>,
    eta_ball: f64,
    mode: EvaluationMode,
    m2: f64,
) -> Result<SelectionReport> {
    let p = data.p();
    let in_s = support_mask(p, support)?;
    if beta_star.len() != p || w_bound.len() != p {
        return Err(Error::domain("target and weight lengths must equal p"));
    }
    if !(eta_ball >= 0.0 && eta_ball.is_finite()) || !(m2 > 0.0) {
        return Err(Error::domain(
            "ball radius must be finite and nonnegative with M2 > 0",
        ));
    }
    let s: Vec<usize> = (0..p).filter(|&j| in_s[j]).collect();
    let sc: Vec<usize> = (0..p).filter(|&j| !in_s[j]).collect();
    if s.is_empty() {
        return Err(Error::domain("support must be nonempty"));
    }
    if sc.iter().any(|&j| !(w_bound[j] > 0.0)) {
        return Err(Error::domain(
            "weight bound must be positive off the support",
        ));
    }
    let min_abs_signal = s
        .iter()
        .map(|&j| beta_star[j].abs())
        .fold(f64::INFINITY, f64::min);

    let mut full_ball = vec![beta_star.clone()];
    let mut sign_ball = vec![beta_star.clone()];
    if let EvaluationMode::SampledBall { count, seed } = mode {
        let radius = eta_ball / m2;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for k in 0..count {
            rng.set_stream(k as u64);
            let dir: DVector<f64> = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let r = radius * rng.random::<f64>().powf(1.0 / p as f64);
            let n = dir.norm();
            if n > 0.0 {
                full_ball.push(beta_star + dir * (r / n));
            }
            let dir_s: DVector<f64> = DVector::from_fn(p, |j, _| {
                if in_s[j] {
                    StandardNormal.sample(&mut rng)
                } else {
                    0.0
                }
            });
            let r_s = radius * rng.random::<f64>().powf(1.0 / s.len() as f64);
            let ns = dir_s.norm();
            if ns > 0.0 {
                let mut step = dir_s * (r_s / ns);
                for _ in 0..60 {
                    let cand = beta_star + &step;
                    if s.iter()
                        .all(|&j| cand[j].signum() == beta_star[j].signum() && cand[j] != 0.0)
                    {
                        sign_ball.push(cand);
                        break;
                    }
                    step *= 0.5;
                }
            }
        }
    }

    let label = |k: usize| {
        if k == 0 {
            "the target".to_string()
        } else {
            format!("sampled point {k}")
        }
    };
    let full: Vec<Result<PointValues>> = full_ball
        .par_iter()
        .enumerate()
        .map(|(k, b)| evaluate_point(data, family, b, &s, &sc, w_bound, &label(k)))
        .collect();
    let signed: Vec<Result<PointValues>> = sign_ball
        .par_iter()
        .enumerate()
        .map(|(k, b)| evaluate_point(data, family, b, &s, &sc, w_bound, &label(k)))
        .collect();
    let (mut kappa0, mut kappa1, mut m0) = (0.0_f64, 0.0_f64, 0.0_f64);
    for v in full {
        let v = v?;
        kappa0 = kappa0.max(v.kappa0);
        kappa1 = kappa1.max(v.kappa1);
    }
    for v in signed {
        m0 = m0.max(v?.m0);
    }
    let exact_suprema = family.kind == FamilyKind::Linear;
    Ok(SelectionReport {
        kappa0,
        kappa1,
        m0,
        eta_ball,
        m2,
        evaluation_mode: mode,
        exact_suprema,
        points_evaluated: full_ball.len() + sign_ball.len(),
        predicted_no_false_positive: None,
        predicted_sign_recovery: None,
        beta_min_threshold: None,
        min_abs_signal,
        heuristic: !exact_suprema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn orthogonal_design_has_no_cross_terms() {
        let n = 8;
        let x = DMatrix::identity(n, n) * (n as f64).sqrt();
        let data = Dataset::new(x, DVector::zeros(n)).unwrap();
        let mut b = DVector::zeros(n);
        b[0] = 2.0;
        b[1] = -1.0;
        let w = DVector::from_element(n, 1.0);
        let r = irrepresentable_check(
            &data,
            &GlmFamily::linear(),
            &b,
            &[0, 1],
            &w,
            0.5,
            EvaluationMode::AtTargetOnly,
        )
        .unwrap();
        assert_eq!(r.kappa0, 0.0);
        assert_eq!(r.kappa1, 0.0);
        assert_relative_eq!(r.m0, 1.0, max_relative = 1e-14);
        let ev = SelectionEvent {
            lambda: 0.5,
            z0: 0.1,
            z1: 0.4,
            w_s_inf: 1.0,
            factor: None,
        };
        let r = r.with_event(&ev, &GlmFamily::linear());
        assert_eq!(r.predicted_no_false_positive, Some(true));
        assert_eq!(r.predicted_sign_recovery, Some(true));
        assert!(!r.heuristic);
    }

    #[test]
    fn hand_computed_two_by_one() {
        // Sigma = [[1, r], [r, 1]] with S = {0}: kappa0 = kappa1 = |r|, M0 = 1.
        let r = 0.6;
        let x =
            DMatrix::from_row_slice(2, 2, &[1.0, r, 0.0, (1.0f64 - r * r).sqrt()]) * 2f64.sqrt();
        let data = Dataset::new(x, DVector::zeros(2)).unwrap();
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let w = DVector::from_vec(vec![1.0, 2.0]);
        let rep = irrepresentable_check(
            &data,
            &GlmFamily::linear(),
            &b,
            &[0],
            &w,
            0.1,
            EvaluationMode::AtTargetOnly,
        )
        .unwrap();
        assert_relative_eq!(rep.kappa1, r / 2.0, max_relative = 1e-12);
        assert_relative_eq!(rep.kappa0, r / 2.0, max_relative = 1e-12);
        assert_relative_eq!(rep.m0, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn sampled_ball_dominates_target_and_is_deterministic() {
        let x = DMatrix::from_fn(40, 4, |i, j| (((i * 13 + j * 7) % 9) as f64 - 4.0) / 2.0);
        let data = Dataset::new(x, DVector::zeros(40)).unwrap();
        let b = DVector::from_vec(vec![0.5, -0.3, 0.0, 0.0]);
        let w = DVector::from_element(4, 1.0);
        let lg = GlmFamily::logistic();
        let at = irrepresentable_check(
            &data,
            &lg,
            &b,
            &[0, 1],
            &w,
            0.5,
            EvaluationMode::AtTargetOnly,
        )
        .unwrap();
        let mode = EvaluationMode::SampledBall { count: 64, seed: 3 };
        let sa = irrepresentable_check(&data, &lg, &b, &[0, 1], &w, 0.5, mode).unwrap();
        let sb = irrepresentable_check(&data, &lg, &b, &[0, 1], &w, 0.5, mode).unwrap();
        assert_eq!(sa, sb);
        assert!(sa.kappa0 >= at.kappa0 && sa.kappa1 >= at.kappa1 && sa.m0 >= at.m0);
        assert!(sa.heuristic);
        let ev = SelectionEvent {
            lambda: 0.2,
            z0: 0.05,
            z1: 0.05,
            w_s_inf: 1.0,
            factor: None,
        };
        assert_eq!(
            sa.clone().with_event(&ev, &lg).predicted_no_false_positive,
            None
        );
    }

    #[test]
    fn singular_block_is_reported() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, -1.0, -1.0, 0.5]);
        let data = Dataset::new(x, DVector::zeros(3)).unwrap();
        let b = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let w = DVector::from_element(3, 1.0);
        let e = irrepresentable_check(
            &data,
            &GlmFamily::linear(),
            &b,
            &[0, 1],
            &w,
            0.1,
            EvaluationMode::AtTargetOnly,
        );
        assert!(matches!(e, Err(Error::Singular(_))));
    }
}
