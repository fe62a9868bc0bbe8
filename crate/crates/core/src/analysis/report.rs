//! All cone factors for one `(Sigma, xi, S)` in a single report.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cone::{
    compatibility_constant_with, f2_factor_with, restricted_eigenvalue_with, simple_gif_with,
    ConeSpec, FactorEstimate, FactorMethod, FactorOptions, Phi,
};
use super::glm_factors::glm_gif_lower_bounds_with;
use crate::error::Result;
use crate::glm::{Dataset, GlmFamily};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiFactor {
    pub phi: Phi,
    pub estimate: FactorEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityReport {
    pub xi: f64,
    pub support: Vec<usize>,
    pub kappa_star: FactorEstimate,
    pub re2: FactorEstimate,
    pub f2: FactorEstimate,
    pub f0_by_phi: Vec<PhiFactor>,
    pub f_star_glm: Option<f64>,
    pub f_lower_glm: Option<f64>,
    pub m3: Option<f64>,
    /// Search if any factor came from search, identity if all came from the
    /// scaled-identity shortcut, enumeration otherwise.
    pub method: FactorMethod,
    /// Every reported cone factor is a guaranteed lower bound.
    pub certified_lower_bound: bool,
}

/// GLM inputs for `F*` and `F_-`.
pub struct GlmFactorInputs<'a> {
    pub data: &'a Dataset,
    pub family: &'a GlmFamily,
    pub beta_star: &'a DVector<f64>,
    pub m2: f64,
}

pub fn invertibility_report(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    phis: &[Phi],
    options: &FactorOptions,
    glm: Option<GlmFactorInputs<'_>>,
) -> Result<InvertibilityReport> {
    let kappa_star = compatibility_constant_with(sigma, cone, options)?;
    let re2 = restricted_eigenvalue_with(sigma, cone, options)?;
    let f2 = f2_factor_with(sigma, cone, options)?;
    let mut f0_by_phi = Vec::with_capacity(phis.len());
    for &phi in phis {
        f0_by_phi.push(PhiFactor {
            phi,
            estimate: simple_gif_with(sigma, cone, phi, options)?,
        });
    }
    let all: Vec<&FactorEstimate> = [&kappa_star, &re2, &f2]
        .into_iter()
        .chain(f0_by_phi.iter().map(|f| &f.estimate))
        .collect();
    let method = if all
        .iter()
        .any(|e| e.method == FactorMethod::MultistartSearch)
    {
        FactorMethod::MultistartSearch
    } else if all.iter().all(|e| e.method == FactorMethod::ScaledIdentity) {
        FactorMethod::ScaledIdentity
    } else {
        FactorMethod::ExactEnumeration
    };
    let certified_lower_bound = all.iter().all(|e| e.certified);
    let (f_star_glm, f_lower_glm, m3) = match glm {
        Some(g) => {
            let b = glm_gif_lower_bounds_with(g.data, g.family, g.beta_star, cone, g.m2, options)?;
            (Some(b.f_star), Some(b.f_lower), Some(b.m3))
        }
        None => (None, None, None),
    };
    Ok(InvertibilityReport {
        xi: cone.xi,
        support: cone.support.clone(),
        kappa_star,
        re2,
        f2,
        f0_by_phi,
        f_star_glm,
        f_lower_glm,
        m3,
        method,
        certified_lower_bound,
    })
}
