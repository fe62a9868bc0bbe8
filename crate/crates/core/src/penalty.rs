//! Concave penalties `rho_lambda` and the weights they induce.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MCP_GAMMA: f64 = 3.0;
pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    Mcp { gamma: f64 },
    Scad { a: f64 },
}

impl PenaltyKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltyKind::L1 => Ok(()),
            PenaltyKind::Mcp { gamma } if gamma > 1.0 && gamma.is_finite() => Ok(()),
            PenaltyKind::Mcp { gamma } => Err(Error::domain(format!(
                "mcp gamma must exceed 1, got {gamma}"
            ))),
            PenaltyKind::Scad { a } if a > 2.0 && a.is_finite() => Ok(()),
            PenaltyKind::Scad { a } => Err(Error::domain(format!("scad a must exceed 2, got {a}"))),
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyKind::L1 => f.write_str("l1"),
            PenaltyKind::Mcp { gamma } => write!(f, "mcp:{gamma}"),
            PenaltyKind::Scad { a } => write!(f, "scad:{a}"),
        }
    }
}

/// Parses `l1`, `mcp`, `mcp:<gamma>`, `scad` or `scad:<a>`.
impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((name, arg)) => (name, Some(arg)),
            None => (s.as_str(), None),
        };
        let parse_arg = |default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => a
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::domain(format!("invalid penalty parameter `{a}`"))),
            }
        };
        let kind = match name {
            "l1" | "lasso" if arg.is_none() => PenaltyKind::L1,
            "mcp" => PenaltyKind::Mcp {
                gamma: parse_arg(DEFAULT_MCP_GAMMA)?,
            },
            "scad" => PenaltyKind::Scad {
                a: parse_arg(DEFAULT_SCAD_A)?,
            },
            _ => return Err(Error::domain(format!("unknown penalty `{s}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// A penalty kind together with its level `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        kind.validate()?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(PenaltySpec { kind, lambda })
    }

    pub fn l1(lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::L1, lambda)
    }

    pub fn mcp(gamma: f64, lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::Mcp { gamma }, lambda)
    }

    pub fn scad(a: f64, lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::Scad { a }, lambda)
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        Self::new(self.kind, lambda)
    }
}

#[inline]
fn derivative_unchecked(spec: &PenaltySpec, t: f64) -> f64 {
    let lambda = spec.lambda;
    match spec.kind {
        PenaltyKind::L1 => lambda,
        PenaltyKind::Mcp { gamma } => (lambda - t / gamma).max(0.0),
        PenaltyKind::Scad { a } => {
            if t <= lambda {
                lambda
            } else if t < a * lambda {
                ((a * lambda - t) / (a - 1.0)).clamp(0.0, lambda)
            } else {
                0.0
            }
        }
    }
}

/// `rho'_lambda(t)` for `t >= 0`.
pub fn rho_derivative(spec: &PenaltySpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!(
            "penalty derivative needs t >= 0, got {t}"
        )));
    }
    Ok(derivative_unchecked(spec, t))
}

/// `rho_lambda(t)` for `t >= 0`, used for objective reporting.
pub fn rho_value(spec: &PenaltySpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!(
            "penalty value needs t >= 0, got {t}"
        )));
    }
    let lambda = spec.lambda;
    Ok(match spec.kind {
        PenaltyKind::L1 => lambda * t,
        PenaltyKind::Mcp { gamma } => {
            if t <= gamma * lambda {
                lambda * t - t * t / (2.0 * gamma)
            } else {
                0.5 * gamma * lambda * lambda
            }
        }
        PenaltyKind::Scad { a } => {
            if t <= lambda {
                lambda * t
            } else if t <= a * lambda {
                (2.0 * a * lambda * t - t * t - lambda * lambda) / (2.0 * (a - 1.0))
            } else {
                0.5 * (a + 1.0) * lambda * lambda
            }
        }
    })
}

/// Lipschitz constant of `rho'_lambda` on `[0, inf)`.
pub fn lipschitz_kappa(spec: &PenaltySpec) -> f64 {
    match spec.kind {
        PenaltyKind::L1 => 0.0,
        PenaltyKind::Mcp { gamma } => 1.0 / gamma,
        PenaltyKind::Scad { a } => 1.0 / (a - 1.0),
    }
}

/// Adaptive weights `w_j = rho'_lambda(|beta_j|) / lambda`, zero on `unpenalized`.
pub fn weights_from_estimate(
    spec: &PenaltySpec,
    beta_tilde: &DVector<f64>,
    unpenalized: &[usize],
) -> Result<DVector<f64>> {
    if let Some(j) = beta_tilde.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "non-finite initial estimate at index {j}"
        )));
    }
    if let Some(&j) = unpenalized.iter().find(|&&j| j >= beta_tilde.len()) {
        return Err(Error::domain(format!("unpenalized index {j} out of range")));
    }
    let mut w = beta_tilde.map(|b| derivative_unchecked(spec, b.abs()) / spec.lambda);
    for &j in unpenalized {
        w[j] = 0.0;
    }
    Ok(w)
}

/// Lasso weights: ones, with zeros on `unpenalized`.
pub fn unit_weights(p: usize, unpenalized: &[usize]) -> DVector<f64> {
    let mut w = DVector::from_element(p, 1.0);
    for &j in unpenalized {
        if j < p {
            w[j] = 0.0;
        }
    }
    w
}
