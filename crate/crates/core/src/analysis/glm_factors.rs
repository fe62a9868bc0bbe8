//! Computable lower bounds for the general invertibility factor of a GLM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cone::{multistart_search, ConeSpec, FactorOptions, SphereObjective};
use crate::error::{Error, Result};
use crate::glm::{hessian, linear_predictor, Dataset, GlmFamily};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFactorBounds {
    /// Search value for the factor with the truncated quadratic numerator
    /// and `phi = M2 |.|_2`; an upper bound on the infimum.
    pub f_star: f64,
    /// Search value for `n <b, Sigma* b>^2 / (M1 |b_S|_1 sum_i psi0''_i |x_i b|^3)`;
    /// `+inf` when `M1 = 0`.
    pub f_lower: f64,
    /// `M1 (|X_S|_inf + xi |X_{S^c} W^{-1}|_inf)`.
    pub m3: f64,
    pub m2: f64,
    pub certified: bool,
}

/// `Sigma* = X' diag(psi0''(X beta*)) X / n`.
pub fn sigma_star(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    hessian(data, family, beta_star)
}

/// `M1 max_i |x_i|_2 / sqrt(n)`; the row scale alone when `M1 = 0`.
pub fn default_m2(data: &Dataset, family: &GlmFamily) -> f64 {
    let x = data.x();
    let row_max = (0..data.n())
        .map(|i| x.row(i).norm())
        .fold(0.0_f64, f64::max)
        / (data.n() as f64).sqrt();
    let m1 = family.m1();
    if m1 > 0.0 {
        m1 * row_max
    } else {
        row_max
    }
}

pub fn m3_constant(data: &Dataset, family: &GlmFamily, cone: &ConeSpec) -> f64 {
    let in_s = cone.membership();
    let (mut on, mut off) = (0.0_f64, 0.0_f64);
    for j in 0..data.p() {
        let col_max = data.column(j).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if in_s[j] {
            on = on.max(col_max);
        } else {
            off = off.max(col_max / cone.w_bound[j]);
        }
    }
    family.m1() * (on + cone.xi * off)
}

struct Design<'a> {
    x: &'a DMatrix<f64>,
    curvature: DVector<f64>,
    in_s: Vec<bool>,
    n: f64,
}

impl Design<'_> {
    fn s_l1_sign(&self, b: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut l1 = 0.0;
        let mut sign = DVector::zeros(b.len());
        for j in 0..b.len() {
            if self.in_s[j] {
                l1 += b[j].abs();
                sign[j] = if b[j] > 0.0 {
                    1.0
                } else if b[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        (l1, sign)
    }
}

struct TruncatedObjective<'a> {
    design: Design<'a>,
    m1: f64,
    m2: f64,
}

impl SphereObjective for TruncatedObjective<'_> {
    fn value_grad(&self, b: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let d = &self.design;
        let (l1, sign) = d.s_l1_sign(b);
        if !(l1 > 0.0) {
            return None;
        }
        let u = d.x * b;
        let knee = if self.m1 > 0.0 {
            self.m2 / self.m1
        } else {
            f64::INFINITY
        };
        let mut num = 0.0;
        let mut du = DVector::zeros(u.len());
        for i in 0..u.len() {
            let a = u[i].abs();
            let c = d.curvature[i];
            if a < knee {
                num += c * a * a;
                du[i] = c * 2.0 * u[i];
            } else {
                num += c * a * knee;
                du[i] = c * knee * u[i].signum();
            }
        }
        let denom = d.n * l1 * self.m2;
        let f = num / denom;
        let g = (d.x.tr_mul(&du) - sign * (f * d.n * self.m2)) / denom;
        Some((f, g))
    }
}

struct CubicObjective<'a> {
    design: Design<'a>,
    m1: f64,
}

impl SphereObjective for CubicObjective<'_> {
    fn value_grad(&self, b: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let d = &self.design;
        let (l1, sign) = d.s_l1_sign(b);
        if !(l1 > 0.0) {
            return None;
        }
        let u = d.x * b;
        let (mut q, mut c) = (0.0, 0.0);
        let mut dq = DVector::zeros(u.len());
        let mut dc = DVector::zeros(u.len());
        for i in 0..u.len() {
            let w = d.curvature[i];
            q += w * u[i] * u[i];
            c += w * u[i].abs().powi(3);
            dq[i] = 2.0 * w * u[i];
            dc[i] = 3.0 * w * u[i] * u[i].abs();
        }
        q /= d.n;
        if !(c > 0.0) {
            return None;
        }
        let f = d.n * q * q / (self.m1 * l1 * c);
        let gq = d.x.tr_mul(&dq) / d.n;
        let gc = d.x.tr_mul(&dc);
        let g = (gq * (2.0 / q) - sign / l1 - gc / c) * f;
        Some((f, g))
    }
}

/// `F*`, `F_-` and `M3` at `beta_star`, found by multistart search on the
/// unit sphere intersected with the cone.
pub fn glm_gif_lower_bounds(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    cone: &ConeSpec,
    m2: f64,
) -> Result<GlmFactorBounds> {
    glm_gif_lower_bounds_with(data, family, beta_star, cone, m2, &FactorOptions::default())
}

pub fn glm_gif_lower_bounds_with(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    cone: &ConeSpec,
    m2: f64,
    options: &FactorOptions,
) -> Result<GlmFactorBounds> {
    if !(m2 > 0.0 && m2.is_finite()) {
        return Err(Error::domain(format!("M2 must be positive, got {m2}")));
    }
    if cone.p() != data.p() {
        return Err(Error::domain(format!(
            "cone dimension {} differs from p = {}",
            cone.p(),
            data.p()
        )));
    }
    let theta = linear_predictor(data, family, beta_star)?;
    let curvature = theta.map(|t| family.psi0_ddot(t));
    let design = || Design {
        x: data.x(),
        curvature: curvature.clone(),
        in_s: cone.membership(),
        n: data.n() as f64,
    };
    let m1 = family.m1();
    let truncated = TruncatedObjective {
        design: design(),
        m1,
        m2,
    };
    let (f_star, _) = multistart_search(&truncated, cone, options, &[]);
    let f_lower = if m1 > 0.0 {
        multistart_search(
            &CubicObjective {
                design: design(),
                m1,
            },
            cone,
            options,
            &[],
        )
        .0
    } else {
        f64::INFINITY
    };
    Ok(GlmFactorBounds {
        f_star,
        f_lower,
        m3: m3_constant(data, family, cone),
        m2,
        certified: false,
    })
}
