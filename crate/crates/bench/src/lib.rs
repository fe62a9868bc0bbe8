//! Fixtures shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use wlasso_core::sim::{design_rng, generate_design};
use wlasso_core::{
    generate_synthetic, Dataset, DesignSpec, ExperimentConfig, ExperimentKind, FamilyKind,
};

/// A standardized Gaussian design with `s0` signals of size one to two and
/// one response draw.
pub fn problem(
    family: FamilyKind,
    n: usize,
    p: usize,
    s0: usize,
    seed: u64,
) -> (Dataset, DVector<f64>) {
    let mut c = ExperimentConfig::new(ExperimentKind::Fit, n, p);
    c.family = family;
    c.s0_size = s0;
    c.beta_min = if family == FamilyKind::Linear {
        1.0
    } else {
        0.3
    };
    c.beta_max = 2.0 * c.beta_min;
    generate_synthetic(&c, seed).expect("fixture configuration is valid")
}

/// Gram matrix of `2p` Gaussian rows with AR(1) correlation `rho`.
pub fn ar1_gram(p: usize, rho: f64, seed: u64) -> DMatrix<f64> {
    let n = 2 * p;
    let x = generate_design(
        &DesignSpec::GaussianCorrelated { rho },
        n,
        p,
        false,
        &mut design_rng(seed),
    )
    .expect("fixture design is valid");
    let g = x.tr_mul(&x) / n as f64;
    (&g + g.transpose()) * 0.5
}
