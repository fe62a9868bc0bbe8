//! Sparse Riesz condition and the dimension bound for the Lasso.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::noise::support_mask;
use crate::error::{Error, Result};
use crate::glm::{hessian, negative_gradient, Dataset, GlmFamily};

pub const DEFAULT_SUBSET_CAP: u128 = 1_000_000;
/// Largest `p` for exhaustive subset checks.
pub const MAX_EXHAUSTIVE_P: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub c_lower: f64,
    pub c_upper: f64,
    pub d_star: usize,
    pub alpha: f64,
    pub eta: f64,
    pub support_size: usize,
    /// `usize::MAX` when `alpha = 1`.
    pub d1: usize,
    /// The cardinality inequality relating `d*` to `|S|`, `alpha` and `c*/c_-`.
    pub cardinality_holds: bool,
    /// Eigenvalue sandwich over all `A ⊇ S` with `|A| = d*`, when checked.
    pub sandwich_holds: Option<bool>,
    pub observed_min_eigen: Option<f64>,
    pub observed_max_eigen: Option<f64>,
    pub subsets_checked: u128,
    pub src_holds: bool,
    pub gradient_condition_holds: Option<bool>,
    pub gradient_statistic: Option<f64>,
    pub gradient_threshold: Option<f64>,
}

impl SparsityReport {
    /// `lambda_xi = (xi - 1) lambda / (xi + 1)`.
    pub fn lambda_xi(xi: f64, lambda: f64) -> f64 {
        (xi - 1.0) * lambda / (xi + 1.0)
    }

    /// Evaluates the gradient condition
    /// `max_{A ⊇ S, |A| <= d1} |Sigma*_A^(-1/2) l'_A(beta*)|_2 <= e^(-eta) alpha lambda sqrt((d1 - |S|)/c*)`
    /// on the response carried by `data`.
    pub fn with_gradient_condition(
        mut self,
        data: &Dataset,
        family: &GlmFamily,
        beta_star: &DVector<f64>,
        support: &[usize],
        lambda: f64,
    ) -> Result<Self> {
        let check = gradient_condition(
            data,
            family,
            beta_star,
            support,
            self.d1,
            self.alpha,
            self.eta,
            self.c_upper,
            lambda,
        )?;
        self.gradient_statistic = Some(check.statistic);
        self.gradient_threshold = Some(check.threshold);
        self.gradient_condition_holds = Some(check.holds);
        Ok(self)
    }
}

/// `floor(|S| / (2(1 - alpha)) (e^(2 eta) c*/c_- - 1))`.
pub fn dimension_bound(s_size: usize, alpha: f64, eta: f64, c_lower: f64, c_upper: f64) -> usize {
    if alpha >= 1.0 {
        return usize::MAX;
    }
    let v = s_size as f64 / (2.0 * (1.0 - alpha)) * ((2.0 * eta).exp() * c_upper / c_lower - 1.0);
    if v >= usize::MAX as f64 {
        usize::MAX
    } else {
        v.floor().max(0.0) as usize
    }
}

/// Left side of the cardinality inequality, `|S| / (2(1 - alpha)) (e^(2 eta) c*/c_- + 1 - alpha)`.
pub fn src_cardinality(s_size: usize, alpha: f64, eta: f64, c_lower: f64, c_upper: f64) -> f64 {
    if alpha >= 1.0 {
        return f64::INFINITY;
    }
    s_size as f64 / (2.0 * (1.0 - alpha)) * ((2.0 * eta).exp() * c_upper / c_lower + 1.0 - alpha)
}

/// Smallest `d*` meeting the cardinality inequality.
pub fn default_d_star(
    s_size: usize,
    alpha: f64,
    eta: f64,
    c_lower: f64,
    c_upper: f64,
) -> Option<usize> {
    let v = src_cardinality(s_size, alpha, eta, c_lower, c_upper);
    v.is_finite().then(|| v.ceil().max(s_size as f64) as usize)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Calls `f` on every `k`-subset of `pool` in lexicographic order.
fn for_each_subset(
    pool: &[usize],
    k: usize,
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if k > pool.len() {
        return Ok(());
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut chosen = vec![0; k];
    loop {
        for (c, &i) in chosen.iter_mut().zip(&idx) {
            *c = pool[i];
        }
        f(&chosen)?;
        let Some(i) = (0..k).rev().find(|&i| idx[i] < i + pool.len() - k) else {
            return Ok(());
        };
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn superset_pool(
    p: usize,
    support: &[usize],
    size: usize,
    cap: u128,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if p > MAX_EXHAUSTIVE_P {
        return Err(Error::Unsupported(format!(
            "exhaustive subset checks need p <= {MAX_EXHAUSTIVE_P}, got {p}"
        )));
    }
    let in_s = support_mask(p, support)?;
    let s: Vec<usize> = (0..p).filter(|&j| in_s[j]).collect();
    let rest: Vec<usize> = (0..p).filter(|&j| !in_s[j]).collect();
    if size < s.len() || size > p {
        return Err(Error::domain(format!(
            "subset size {size} must lie between |S| = {} and p = {p}",
            s.len()
        )));
    }
    let extra = size - s.len();
    let count = binomial(rest.len(), extra);
    if count > cap {
        return Err(Error::Combinatorial { count, cap });
    }
    Ok((s, rest, extra))
}

/// Smallest and largest eigenvalues of `H_A` over all `A ⊇ S` with
/// `|A| = size`, and the number of subsets visited.
pub fn sparse_eigen_extremes(
    h: &DMatrix<f64>,
    support: &[usize],
    size: usize,
    cap: u128,
) -> Result<(f64, f64, u128)> {
    let (s, rest, extra) = superset_pool(h.nrows(), support, size, cap)?;
    let (mut lo, mut hi, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0u128);
    for_each_subset(&rest, extra, |add| {
        let a: Vec<usize> = s.iter().chain(add).copied().collect();
        let sub = DMatrix::from_fn(a.len(), a.len(), |i, j| h[(a[i], a[j])]);
        let ev = SymmetricEigen::new(sub).eigenvalues;
        lo = lo.min(ev.min());
        hi = hi.max(ev.max());
        count += 1;
        Ok(())
    })?;
    Ok((lo, hi, count))
}

#[allow(clippy::too_many_arguments)]
pub fn src_and_dimension_bound(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    c_lower: f64,
    c_upper: f64,
    d_star: Option<usize>,
    alpha: f64,
    eta: f64,
    verify_src: bool,
) -> Result<SparsityReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::domain(format!("eta must lie in (0, 1], got {eta}")));
    }
    if !(c_lower > 0.0 && c_upper >= c_lower && c_upper.is_finite()) {
        return Err(Error::domain("need 0 < c_lower <= c_upper < inf"));
    }
    let in_s = support_mask(data.p(), support)?;
    let s_size = in_s.iter().filter(|&&b| b).count();
    if s_size == 0 {
        return Err(Error::domain("support must be nonempty"));
    }
    let d_star = match d_star {
        Some(d) => d,
        None => default_d_star(s_size, alpha, eta, c_lower, c_upper)
            .ok_or_else(|| Error::domain("alpha = 1 leaves d* unbounded; supply d* explicitly"))?,
    };
    let cardinality_holds = src_cardinality(s_size, alpha, eta, c_lower, c_upper) <= d_star as f64;
    let (mut sandwich_holds, mut observed_min_eigen, mut observed_max_eigen, mut subsets_checked) =
        (None, None, None, 0);
    if verify_src {
        let h = hessian(data, family, beta_star)?;
        let (lo, hi, count) = sparse_eigen_extremes(&h, support, d_star, DEFAULT_SUBSET_CAP)?;
        sandwich_holds = Some(lo >= c_lower && hi <= c_upper);
        observed_min_eigen = Some(lo);
        observed_max_eigen = Some(hi);
        subsets_checked = count;
    }
    Ok(SparsityReport {
        c_lower,
        c_upper,
        d_star,
        alpha,
        eta,
        support_size: s_size,
        d1: dimension_bound(s_size, alpha, eta, c_lower, c_upper),
        cardinality_holds,
        sandwich_holds,
        observed_min_eigen,
        observed_max_eigen,
        subsets_checked,
        src_holds: cardinality_holds && sandwich_holds.unwrap_or(false),
        gradient_condition_holds: None,
        gradient_statistic: None,
        gradient_threshold: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCondition {
    pub statistic: f64,
    pub threshold: f64,
    pub holds: bool,
}

/// The gradient condition of the dimension bound. The quadratic form
/// `g_A' Sigma*_A^(-1) g_A` grows with `A`, so the maximum is taken over
/// supersets of the largest admissible size. Fails when `d1 <= |S|`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_condition(
    data: &Dataset,
    family: &GlmFamily,
    beta_star: &DVector<f64>,
    support: &[usize],
    d1: usize,
    alpha: f64,
    eta: f64,
    c_upper: f64,
    lambda: f64,
) -> Result<GradientCondition> {
    let p = data.p();
    let in_s = support_mask(p, support)?;
    let s_size = in_s.iter().filter(|&&b| b).count();
    if d1 <= s_size {
        return Ok(GradientCondition {
            statistic: f64::NAN,
            threshold: 0.0,
            holds: false,
        });
    }
    let threshold = (-eta).exp() * alpha * lambda * ((d1 - s_size) as f64 / c_upper).sqrt();
    let h = hessian(data, family, beta_star)?;
    let g = -negative_gradient(data, family, beta_star)?;
    let size = d1.min(p);
    let (s, rest, extra) = superset_pool(p, support, size, DEFAULT_SUBSET_CAP)?;
    let mut best = 0.0_f64;
    for_each_subset(&rest, extra, |add| {
        let a: Vec<usize> = s.iter().chain(add).copied().collect();
        let sub = DMatrix::from_fn(a.len(), a.len(), |i, j| h[(a[i], a[j])]);
        let ga = DVector::from_fn(a.len(), |i, _| g[a[i]]);
        let chol = sub
            .cholesky()
            .ok_or_else(|| Error::Singular("Hessian block is not positive definite".to_string()))?;
        let v = ga.dot(&chol.solve(&ga));
        best = best.max(v);
        Ok(())
    })?;
    let statistic = best.max(0.0).sqrt();
    Ok(GradientCondition {
        statistic,
        threshold,
        holds: statistic <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_formula() {
        // e^(2 eta) c*/c_- = 2 with |S| = 2, alpha = 1/2.
        let eta = 0.5 * 2f64.ln();
        assert_eq!(dimension_bound(2, 0.5, eta, 1.0, 1.0), 2);
        assert_eq!(dimension_bound(3, 0.5, eta, 1.0, 1.0), 3);
        assert_eq!(dimension_bound(2, 1.0, eta, 1.0, 1.0), usize::MAX);
    }

    #[test]
    fn subsets_and_binomials() {
        assert_eq!(binomial(18, 5), 8568);
        assert_eq!(binomial(5, 7), 0);
        let mut seen = Vec::new();
        for_each_subset(&[1, 4, 6, 9], 2, |s| {
            seen.push(s.to_vec());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![1, 4]);
        assert_eq!(seen[5], vec![6, 9]);
        let mut count = 0;
        for_each_subset(&[1, 2], 0, |_| {
            count += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(count, 1);
    }

    #[test]
    fn identity_sandwich_is_exact() {
        let n = 10;
        let x = DMatrix::identity(n, n) * (n as f64).sqrt();
        let data = Dataset::new(x, DVector::zeros(n)).unwrap();
        let b = DVector::zeros(n);
        let r = src_and_dimension_bound(
            &data,
            &GlmFamily::linear(),
            &b,
            &[0, 1],
            1.0 - 1e-9,
            1.0 + 1e-9,
            None,
            0.5,
            0.1,
            true,
        )
        .unwrap();
        assert_eq!(r.sandwich_holds, Some(true));
        assert!((r.observed_min_eigen.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.cardinality_holds && r.src_holds);
        assert_eq!(r.subsets_checked, binomial(8, r.d_star - 2));
    }

    #[test]
    fn refuses_large_enumeration() {
        let h = DMatrix::identity(20, 20);
        let e = sparse_eigen_extremes(&h, &[0], 11, 1000);
        assert!(matches!(
            e,
            Err(Error::Combinatorial {
                count: 92378,
                cap: 1000
            })
        ));
    }

    #[test]
    fn lambda_xi_helper() {
        assert_eq!(SparsityReport::lambda_xi(3.0, 2.0), 1.0);
    }
}
