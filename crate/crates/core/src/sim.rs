//! Synthetic designs, targets and responses.
//!
//! All randomness comes from ChaCha20 seeded with the experiment seed. The
//! design and target use stream `u64::MAX`; replicate `k` draws its response
//! from stream `k`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::glm::{sample_response, Dataset, GlmFamily};
use crate::io::ingest_csv;

const DESIGN_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    /// `sqrt(n) I_p` stacked over zero rows when standardized, `I_p` otherwise; needs `n >= p`.
    Identity,
    #[default]
    GaussianIid,
    /// Gaussian rows with `corr(x_j, x_k) = rho^|j-k|`.
    GaussianCorrelated { rho: f64 },
    /// Design read from CSV; the file's last column is ignored.
    FromFile {
        path: PathBuf,
        #[serde(default)]
        header: bool,
    },
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        if let DesignSpec::GaussianCorrelated { rho } = self {
            if !(*rho > -1.0 && *rho < 1.0) {
                return Err(Error::domain(format!("rho must lie in (-1, 1), got {rho}")));
            }
        }
        Ok(())
    }
}

pub fn design_rng(seed: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(DESIGN_STREAM);
    rng
}

pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn standardize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let norm = x.column(j).norm();
        if norm == 0.0 {
            return Err(Error::domain(format!(
                "column {j} is zero and cannot be standardized"
            )));
        }
        x.column_mut(j).scale_mut(n.sqrt() / norm);
    }
    Ok(())
}

pub fn generate_design<R: Rng + ?Sized>(
    design: &DesignSpec,
    n: usize,
    p: usize,
    standardize: bool,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    design.validate()?;
    let mut x = match design {
        DesignSpec::Identity => {
            if n < p {
                return Err(Error::domain(format!(
                    "identity design needs n >= p, got n = {n}, p = {p}"
                )));
            }
            let scale = if standardize { (n as f64).sqrt() } else { 1.0 };
            DMatrix::from_fn(n, p, |i, j| if i == j { scale } else { 0.0 })
        }
        DesignSpec::GaussianIid => DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng)),
        DesignSpec::GaussianCorrelated { rho } => {
            let tail = (1.0 - rho * rho).sqrt();
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                let mut prev: f64 = StandardNormal.sample(rng);
                x[(i, 0)] = prev;
                for j in 1..p {
                    let e: f64 = StandardNormal.sample(rng);
                    prev = rho * prev + tail * e;
                    x[(i, j)] = prev;
                }
            }
            x
        }
        DesignSpec::FromFile { path, header } => {
            let data = ingest_csv(path, *header)?;
            if data.n() != n || data.p() != p {
                return Err(Error::Ingestion(format!(
                    "{}: file is {} x {} but the configuration asks for n = {n}, p = {p}",
                    path.display(),
                    data.n(),
                    data.p()
                )));
            }
            data.x().clone()
        }
    };
    if standardize && !matches!(design, DesignSpec::Identity) {
        standardize_columns(&mut x)?;
    }
    Ok(x)
}

/// Target with `s0_size` leading nonzeros, magnitudes uniform on
/// `[beta_min, beta_max]` and random signs.
pub fn draw_target<R: Rng + ?Sized>(
    p: usize,
    s0_size: usize,
    beta_min: f64,
    beta_max: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if s0_size > p {
        return Err(Error::domain(format!(
            "s0_size = {s0_size} exceeds p = {p}"
        )));
    }
    if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
        return Err(Error::domain("need 0 <= beta_min <= beta_max < inf"));
    }
    let mut beta = DVector::zeros(p);
    for j in 0..s0_size {
        let m = beta_min + (beta_max - beta_min) * rng.random::<f64>();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        beta[j] = sign * m;
    }
    Ok(beta)
}

/// Design, target and one response draw from the design stream.
pub fn generate_synthetic(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, DVector<f64>)> {
    config.validate()?;
    let family = config.glm_family()?;
    let mut rng = design_rng(seed);
    let x = generate_design(
        &config.design,
        config.n,
        config.p,
        config.standardize,
        &mut rng,
    )?;
    let beta = draw_target(
        config.p,
        config.s0_size,
        config.beta_min,
        config.beta_max,
        &mut rng,
    )?;
    let theta = &x * &beta;
    let y = sample_response(&family, &theta, &mut rng)?;
    Ok((Dataset::new(x, y)?, beta))
}

/// Response of replicate `k` on a fixed design.
pub fn replicate_dataset(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    seed: u64,
    k: usize,
) -> Result<Dataset> {
    let theta = data.x() * beta_star;
    let y = sample_response(family, &theta, &mut replicate_rng(seed, k))?;
    data.with_response(y)
}
