//! Infima of quadratic-form ratios over the cone
//! `C(xi, S) = { b : |W b_{S^c}|_1 <= xi |b_S|_1 != 0 }`.
//!
//! For small `p` the infimum is found exactly by enumerating the faces of the
//! cone: a support `T`, a sign pattern on `T` (modulo global sign) and whether
//! the `l1` constraint is active. The minimizer lies in the relative interior
//! of some face, where it solves a generalized eigenproblem on the face span.
//! Ratios with a product in the denominator are bounded below through
//! `L1 L2 = min_s (s L1^2 + L2^2 / s) / 2`, maximized over `s`; the result is
//! exact when this lower bound meets the best primal value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub xi: f64,
    pub support: Vec<usize>,
    /// Weights `w` on `S^c`; entries on `S` are ignored.
    #[serde(with = "crate::serde_vec::dvec")]
    pub w_bound: DVector<f64>,
}

impl ConeSpec {
    /// Cone with unit weights in dimension `p`.
    pub fn new(xi: f64, support: Vec<usize>, p: usize) -> Result<Self> {
        Self::with_weights(xi, support, DVector::from_element(p, 1.0))
    }

    pub fn with_weights(xi: f64, mut support: Vec<usize>, w_bound: DVector<f64>) -> Result<Self> {
        support.sort_unstable();
        support.dedup();
        let cone = ConeSpec {
            xi,
            support,
            w_bound,
        };
        cone.validate()?;
        Ok(cone)
    }

    pub fn p(&self) -> usize {
        self.w_bound.len()
    }

    pub fn with_xi(&self, xi: f64) -> Result<Self> {
        Self::with_weights(xi, self.support.clone(), self.w_bound.clone())
    }

    fn validate(&self) -> Result<()> {
        let p = self.p();
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::domain(format!(
                "xi must be positive and finite, got {}",
                self.xi
            )));
        }
        if self.support.is_empty() {
            return Err(Error::domain("cone support must be nonempty"));
        }
        if let Some(&j) = self.support.iter().find(|&&j| j >= p) {
            return Err(Error::domain(format!(
                "support index {j} out of range for p = {p}"
            )));
        }
        let in_s = self.membership();
        for j in 0..p {
            if !in_s[j] && !(self.w_bound[j] > 0.0 && self.w_bound[j].is_finite()) {
                return Err(Error::domain(format!(
                    "cone weight {j} must be positive off the support"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn membership(&self) -> Vec<bool> {
        let mut in_s = vec![false; self.p()];
        for &j in &self.support {
            in_s[j] = true;
        }
        in_s
    }

    /// `|W b_{S^c}|_1 / |b_S|_1`, infinite when `b_S = 0`.
    pub fn cone_ratio(&self, b: &DVector<f64>) -> f64 {
        let in_s = self.membership();
        let (mut on, mut off) = (0.0, 0.0);
        for j in 0..self.p() {
            if in_s[j] {
                on += b[j].abs();
            } else {
                off += self.w_bound[j] * b[j].abs();
            }
        }
        if on > 0.0 {
            off / on
        } else {
            f64::INFINITY
        }
    }

    /// Membership in the cone with a relative slack of `1e-9`.
    pub fn contains(&self, b: &DVector<f64>) -> bool {
        self.cone_ratio(b) <= self.xi * (1.0 + 1e-9)
    }
}

/// Seminorm `phi` in the simple invertibility factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// `|b|_q / |S|^(1/q)`.
    Q { q: f64 },
    /// `|b_S|_1 / |S|`.
    OneS,
}

impl Phi {
    pub fn label(&self) -> String {
        match self {
            Phi::Q { q } => format!("phi_{q}"),
            Phi::OneS => "phi_1S".to_string(),
        }
    }

    pub fn eval(&self, b: &DVector<f64>, support: &[usize]) -> f64 {
        let s = support.len() as f64;
        match *self {
            Phi::Q { q } => lq_norm(b.as_slice(), q) / s.powf(1.0 / q),
            Phi::OneS => support.iter().map(|&j| b[j].abs()).sum::<f64>() / s,
        }
    }
}

fn lq_norm(b: &[f64], q: f64) -> f64 {
    if q == 1.0 {
        b.iter().map(|v| v.abs()).sum()
    } else if q == 2.0 {
        b.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        let m = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if m == 0.0 {
            return 0.0;
        }
        m * b
            .iter()
            .map(|v| (v.abs() / m).powf(q))
            .sum::<f64>()
            .powf(1.0 / q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMethod {
    ExactEnumeration,
    ScaledIdentity,
    MultistartSearch,
}

/// A cone infimum.
///
/// With `certified = true`, `value` is a guaranteed lower bound of the
/// infimum and `upper_bound` is attained by `minimizer`; `exact` records that
/// the two agree to the gap tolerance. Search results are attained values,
/// hence upper bounds, and carry `certified = false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorEstimate {
    pub value: f64,
    pub upper_bound: f64,
    pub certified: bool,
    pub exact: bool,
    pub method: FactorMethod,
    #[serde(with = "crate::serde_vec::opt_dvec")]
    pub minimizer: Option<DVector<f64>>,
}

impl FactorEstimate {
    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        FactorEstimate {
            value: f(self.value.max(0.0)),
            upper_bound: f(self.upper_bound.max(0.0)),
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorOptions {
    /// Largest `p` handled by exact enumeration.
    pub enumeration_cap: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Relative gap below which a bounded value counts as exact.
    pub gap_tolerance: f64,
}

impl Default for FactorOptions {
    fn default() -> Self {
        FactorOptions {
            enumeration_cap: 12,
            restarts: 64,
            max_iterations: 300,
            seed: 0x5eed_f00d,
            gap_tolerance: 1e-9,
        }
    }
}

/// Hard ceiling on the enumeration cap; supports are held in `u32` masks.
const MAX_ENUMERATION_P: usize = 20;

fn check_sigma(sigma: &DMatrix<f64>, cone: &ConeSpec) -> Result<()> {
    cone.validate()?;
    let p = cone.p();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::domain(format!(
            "matrix is {}x{} but the cone has dimension {p}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("matrix has non-finite entries"));
    }
    let scale = sigma
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for i in 0..p {
        for j in (i + 1)..p {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::domain(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// `Some(c)` when `sigma = c I`.
fn scaled_identity(sigma: &DMatrix<f64>) -> Option<f64> {
    let p = sigma.nrows();
    let c = sigma[(0, 0)];
    for i in 0..p {
        for j in 0..p {
            let expect = if i == j { c } else { 0.0 };
            if sigma[(i, j)] != expect {
                return None;
            }
        }
    }
    Some(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Ratio {
    /// `|S| b'Sb / |b_S|_1^2`.
    Kappa2,
    /// `b'Sb / |b|_2^2`.
    Re2,
    /// `b'Sb / (|b_S|_2 |b|_2)`.
    F2,
    /// `b'Sb / (|b_S|_1 phi_q(b))`.
    PhiQ(f64),
}

struct Geometry<'a> {
    sigma: &'a DMatrix<f64>,
    p: usize,
    in_s: Vec<bool>,
    s_size: f64,
    w: Vec<f64>,
    xi: f64,
}

impl<'a> Geometry<'a> {
    fn new(sigma: &'a DMatrix<f64>, cone: &ConeSpec) -> Self {
        Geometry {
            sigma,
            p: cone.p(),
            in_s: cone.membership(),
            s_size: cone.support.len() as f64,
            w: cone.w_bound.iter().copied().collect(),
            xi: cone.xi,
        }
    }

    fn s_l1(&self, b: &[f64]) -> f64 {
        b.iter()
            .zip(&self.in_s)
            .filter(|(_, &s)| s)
            .map(|(v, _)| v.abs())
            .sum()
    }

    fn s_l2sq(&self, b: &[f64]) -> f64 {
        b.iter()
            .zip(&self.in_s)
            .filter(|(_, &s)| s)
            .map(|(v, _)| v * v)
            .sum()
    }

    fn feasible(&self, b: &[f64]) -> bool {
        let on = self.s_l1(b);
        if !(on > 0.0) {
            return false;
        }
        let off: f64 = (0..self.p)
            .filter(|&j| !self.in_s[j])
            .map(|j| self.w[j] * b[j].abs())
            .sum();
        off <= self.xi * on * (1.0 + 1e-9)
    }

    /// Shrinks `b_{S^c}` onto the cone boundary when outside.
    fn retract(&self, b: &mut DVector<f64>) -> bool {
        let on = self.s_l1(b.as_slice());
        if !(on > 0.0) {
            return false;
        }
        let off: f64 = (0..self.p)
            .filter(|&j| !self.in_s[j])
            .map(|j| self.w[j] * b[j].abs())
            .sum();
        let cap = self.xi * on;
        if off > cap {
            let f = cap / off;
            for j in 0..self.p {
                if !self.in_s[j] {
                    b[j] *= f;
                }
            }
        }
        true
    }

    fn quad(&self, b: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.p {
            if b[j] == 0.0 {
                continue;
            }
            let col = self.sigma.column(j);
            let mut s = 0.0;
            for i in 0..self.p {
                s += col[i] * b[i];
            }
            total += b[j] * s;
        }
        total
    }

    fn ratio(&self, kind: Ratio, b: &[f64]) -> f64 {
        let n = self.quad(b);
        let d = match kind {
            Ratio::Kappa2 => {
                let l1 = self.s_l1(b);
                l1 * l1 / self.s_size
            }
            Ratio::Re2 => b.iter().map(|v| v * v).sum(),
            Ratio::F2 => (self.s_l2sq(b) * b.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            Ratio::PhiQ(q) => self.s_l1(b) * lq_norm(b, q) / self.s_size.powf(1.0 / q),
        };
        n / d
    }

    fn ratio_grad(&self, kind: Ratio, b: &DVector<f64>) -> (f64, DVector<f64>) {
        let sb = self.sigma * b;
        let n = b.dot(&sb);
        let sign_s = DVector::from_fn(self.p, |j, _| {
            if self.in_s[j] {
                b[j].signum() * (b[j] != 0.0) as u8 as f64
            } else {
                0.0
            }
        });
        let (d, dd) = match kind {
            Ratio::Kappa2 => {
                let l1 = self.s_l1(b.as_slice());
                (l1 * l1 / self.s_size, &sign_s * (2.0 * l1 / self.s_size))
            }
            Ratio::Re2 => (b.norm_squared(), b * 2.0),
            Ratio::F2 => {
                let bs = DVector::from_fn(self.p, |j, _| if self.in_s[j] { b[j] } else { 0.0 });
                let ns = bs.norm();
                let nb = b.norm();
                (ns * nb, bs * (nb / ns) + b * (ns / nb))
            }
            Ratio::PhiQ(q) => {
                let l1 = self.s_l1(b.as_slice());
                let lq = lq_norm(b.as_slice(), q);
                let c = self.s_size.powf(1.0 / q);
                let dlq = DVector::from_fn(self.p, |j, _| {
                    if b[j] == 0.0 {
                        0.0
                    } else {
                        b[j].signum() * (b[j].abs() / lq).powf(q - 1.0)
                    }
                });
                (l1 * lq / c, (&sign_s * lq + dlq * l1) / c)
            }
        };
        let r = n / d;
        let g = (sb * 2.0 - dd * r) / d;
        (r, g)
    }
}

/// Best candidate found over a set of faces.
#[derive(Clone, Debug)]
struct Best {
    lower: f64,
    lower_arg: Option<Vec<f64>>,
    upper: f64,
    upper_arg: Option<Vec<f64>>,
    key: u64,
}

impl Best {
    fn empty() -> Self {
        Best {
            lower: f64::INFINITY,
            lower_arg: None,
            upper: f64::INFINITY,
            upper_arg: None,
            key: u64::MAX,
        }
    }

    fn offer(&mut self, g: f64, r: f64, b: &[f64]) {
        if g < self.lower {
            self.lower = g;
            self.lower_arg = Some(b.to_vec());
        }
        if r < self.upper {
            self.upper = r;
            self.upper_arg = Some(b.to_vec());
        }
    }

    fn merge(a: Best, b: Best) -> Best {
        let (first, second) = if a.key <= b.key { (a, b) } else { (b, a) };
        let mut out = first.clone();
        if second.lower < out.lower {
            out.lower = second.lower;
            out.lower_arg = second.lower_arg;
        }
        if second.upper < out.upper {
            out.upper = second.upper;
            out.upper_arg = second.upper_arg;
        }
        out.key = first.key.min(second.key);
        out
    }
}

fn mask_indices(mask: u32, p: usize) -> Vec<usize> {
    (0..p).filter(|&j| mask & (1 << j) != 0).collect()
}

fn submatrix(sigma: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| sigma[(idx[a], idx[b])])
}

/// Candidate minimizers of `u' At u / u'u` on `{ u : at' u = 0 }` given the
/// eigendecomposition of `At` with ascending `order`.
fn constrained_eigen_candidates(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    order: &[usize],
    at: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let d: Vec<f64> = order.iter().map(|&i| q.column(i).dot(at)).collect();
    let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Vec::new();
    if dn == 0.0 {
        out.push(q.column(order[0]).into_owned());
        return out;
    }
    let tol = 1e-13 * dn;
    if let Some(k) = d.iter().position(|v| v.abs() <= tol) {
        out.push(q.column(order[k]).into_owned());
    }
    let nz: Vec<usize> = (0..d.len()).filter(|&k| d[k].abs() > tol).collect();
    if nz.len() < 2 {
        return out;
    }
    let (k1, k2) = (nz[0], nz[1]);
    let (l1, l2) = (lam[order[k1]], lam[order[k2]]);
    let spread = lam.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    if l2 - l1 <= 1e-14 * spread {
        out.push(q.column(order[k1]) * d[k2] - q.column(order[k2]) * d[k1]);
        return out;
    }
    let f = |mu: f64| -> f64 { nz.iter().map(|&k| d[k] * d[k] / (lam[order[k]] - mu)).sum() };
    let (mut lo, mut hi) = (l1, l2);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut u = DVector::zeros(at.len());
    for &k in &nz {
        let denom = lam[order[k]] - mu;
        if denom != 0.0 {
            u += q.column(order[k]) * (d[k] / denom);
        }
    }
    if u.iter().all(|v| v.is_finite()) && u.norm() > 0.0 {
        out.push(u);
    }
    out
}

fn sorted_order(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order
}

/// How `B` depends on the face.
enum Whitener {
    /// `B = I`.
    Identity,
    /// `B = diag(s [j in S] + 1/s) / 2`.
    Diagonal { s: f64 },
    /// `B = (s c c' + I / (s |S|)) / 2`, with `c` the signs on `S`.
    RankOne { s: f64 },
}

impl Whitener {
    fn depends_on_signs(&self) -> bool {
        matches!(self, Whitener::RankOne { .. })
    }

    /// `B^(-1/2)` on the face with support `idx` and `S`-signs `c`.
    fn matrix(&self, geo: &Geometry, idx: &[usize], c: &DVector<f64>) -> DMatrix<f64> {
        let t = idx.len();
        match *self {
            Whitener::Identity => DMatrix::identity(t, t),
            Whitener::Diagonal { s } => DMatrix::from_fn(t, t, |a, b| {
                if a == b {
                    let d = (s * geo.in_s[idx[a]] as u8 as f64 + 1.0 / s) / 2.0;
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            }),
            Whitener::RankOne { s } => {
                let cn2 = c.norm_squared();
                let k = s * s * geo.s_size * cn2;
                let scale = (2.0 * s * geo.s_size).sqrt();
                let mut m = DMatrix::identity(t, t);
                let coef = (1.0 / (1.0 + k).sqrt() - 1.0) / cn2;
                m += c * c.transpose() * coef;
                m * scale
            }
        }
    }

    /// `b' B b` evaluated with the true seminorms.
    fn form(&self, geo: &Geometry, b: &[f64]) -> f64 {
        let l2sq: f64 = b.iter().map(|v| v * v).sum();
        match *self {
            Whitener::Identity => l2sq,
            Whitener::Diagonal { s } => (s * geo.s_l2sq(b) + l2sq / s) / 2.0,
            Whitener::RankOne { s } => {
                let l1 = geo.s_l1(b);
                (s * l1 * l1 + l2sq / (s * geo.s_size)) / 2.0
            }
        }
    }
}

fn lift(geo: &Geometry, idx: &[usize], bt: &DVector<f64>) -> Vec<f64> {
    let mut b = vec![0.0; geo.p];
    for (a, &j) in idx.iter().enumerate() {
        b[j] = bt[a];
    }
    b
}

/// Sign vector on the face from the pattern bits, first `S` index positive.
fn face_signs(
    geo: &Geometry,
    idx: &[usize],
    s_bits: u32,
    sc_bits: u32,
) -> (DVector<f64>, DVector<f64>) {
    let t = idx.len();
    let mut c = DVector::zeros(t);
    let mut a = DVector::zeros(t);
    let (mut ks, mut kc) = (0, 0);
    let mut first = true;
    for (pos, &j) in idx.iter().enumerate() {
        if geo.in_s[j] {
            let sign = if first {
                first = false;
                1.0
            } else {
                let s = if s_bits & (1 << ks) != 0 { -1.0 } else { 1.0 };
                ks += 1;
                s
            };
            c[pos] = sign;
            a[pos] = -geo.xi * sign;
        } else {
            let sign = if sc_bits & (1 << kc) != 0 { -1.0 } else { 1.0 };
            kc += 1;
            a[pos] = geo.w[j] * sign;
        }
    }
    (c, a)
}

/// Minimum of `b'Sb / b'Bb` and of the true ratio over candidates from all
/// faces, for a positive-definite `B`.
fn enumerate_whitened(geo: &Geometry, whitener: &Whitener, ratio: Ratio) -> Best {
    let p = geo.p;
    let s_mask: u32 = (0..p).filter(|&j| geo.in_s[j]).fold(0, |m, j| m | (1 << j));
    (1u32..(1u32 << p))
        .into_par_iter()
        .filter(|mask| mask & s_mask != 0)
        .map(|mask| {
            let mut best = Best::empty();
            best.key = mask as u64;
            let idx = mask_indices(mask, p);
            let ns = idx.iter().filter(|&&j| geo.in_s[j]).count();
            let nc = idx.len() - ns;
            let at = submatrix(geo.sigma, &idx);
            let visit = |bt: &DVector<f64>, best: &mut Best| {
                let b = lift(geo, &idx, bt);
                if geo.feasible(&b) {
                    let g = geo.quad(&b) / whitener.form(geo, &b);
                    let r = geo.ratio(ratio, &b);
                    if g.is_finite() && r.is_finite() {
                        best.offer(g, r, &b);
                    }
                }
            };
            let patterns = 1u32 << (ns - 1);
            let mut shared: Option<(DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>, Vec<usize>)> =
                None;
            for s_bits in 0..patterns {
                if !whitener.depends_on_signs() && s_bits > 0 && nc == 0 {
                    break;
                }
                let (c, _) = face_signs(geo, &idx, s_bits, 0);
                let fresh = whitener.depends_on_signs() || shared.is_none();
                if fresh {
                    let m = whitener.matrix(geo, &idx, &c);
                    let wt = &m * &at * &m;
                    let eig = SymmetricEigen::new(wt);
                    let order = sorted_order(&eig);
                    shared = Some((m, eig, order));
                }
                let (m, eig, order) = shared.as_ref().expect("decomposition present");
                if fresh {
                    let lam0 = eig.eigenvalues[order[0]];
                    let spread = eig
                        .eigenvalues
                        .iter()
                        .fold(0.0_f64, |mx, v| mx.max(v.abs()))
                        .max(1e-300);
                    for &k in order.iter() {
                        if eig.eigenvalues[k] - lam0 > 1e-12 * spread {
                            break;
                        }
                        let bt = m * eig.eigenvectors.column(k);
                        visit(&bt, &mut best);
                    }
                }
                for sc_bits in 0..(1u32 << nc) {
                    if nc == 0 {
                        break;
                    }
                    let (_, a) = face_signs(geo, &idx, s_bits, sc_bits);
                    let aw = m * &a;
                    for u in constrained_eigen_candidates(eig, order, &aw) {
                        let bt = m * u;
                        visit(&bt, &mut best);
                    }
                }
            }
            best
        })
        .reduce(Best::empty, Best::merge)
}

/// Exact `min |S| b'Sb / |b_S|_1^2` by bordered solves on every face.
fn enumerate_kappa2(geo: &Geometry) -> Best {
    let p = geo.p;
    let s_mask: u32 = (0..p).filter(|&j| geo.in_s[j]).fold(0, |m, j| m | (1 << j));
    (1u32..(1u32 << p))
        .into_par_iter()
        .filter(|mask| mask & s_mask != 0)
        .map(|mask| {
            let mut best = Best::empty();
            best.key = mask as u64;
            let idx = mask_indices(mask, p);
            let t = idx.len();
            let ns = idx.iter().filter(|&&j| geo.in_s[j]).count();
            let nc = t - ns;
            let at = submatrix(geo.sigma, &idx);
            let visit = |bt: &[f64], best: &mut Best| {
                let b = lift(geo, &idx, &DVector::from_column_slice(bt));
                if geo.feasible(&b) {
                    let r = geo.ratio(Ratio::Kappa2, &b);
                    if r.is_finite() {
                        best.offer(r, r, &b);
                    }
                }
            };
            for s_bits in 0..(1u32 << (ns - 1)) {
                let (c, _) = face_signs(geo, &idx, s_bits, 0);
                let mut k1 = DMatrix::zeros(t + 1, t + 1);
                k1.view_mut((0, 0), (t, t)).copy_from(&at);
                for a in 0..t {
                    k1[(a, t)] = c[a];
                    k1[(t, a)] = c[a];
                }
                let mut rhs = DVector::zeros(t + 1);
                rhs[t] = 1.0;
                if let Some(x) = k1.lu().solve(&rhs) {
                    visit(&x.as_slice()[..t], &mut best);
                }
                for sc_bits in 0..(1u32 << nc) {
                    if nc == 0 {
                        break;
                    }
                    let (_, a) = face_signs(geo, &idx, s_bits, sc_bits);
                    let mut k2 = DMatrix::zeros(t + 2, t + 2);
                    k2.view_mut((0, 0), (t, t)).copy_from(&at);
                    for r in 0..t {
                        k2[(r, t)] = c[r];
                        k2[(t, r)] = c[r];
                        k2[(r, t + 1)] = a[r];
                        k2[(t + 1, r)] = a[r];
                    }
                    let mut rhs = DVector::zeros(t + 2);
                    rhs[t] = 1.0;
                    if let Some(x) = k2.lu().solve(&rhs) {
                        visit(&x.as_slice()[..t], &mut best);
                    }
                }
            }
            best
        })
        .reduce(Best::empty, Best::merge)
}

fn exact_estimate(lower: f64, upper: f64, arg: Option<Vec<f64>>, tol: f64) -> FactorEstimate {
    let lower = lower.min(upper).max(0.0);
    let exact = upper - lower <= tol * upper.abs().max(1e-300) || upper <= 0.0;
    FactorEstimate {
        value: lower,
        upper_bound: upper,
        certified: true,
        exact,
        method: FactorMethod::ExactEnumeration,
        minimizer: arg.map(DVector::from_vec),
    }
}

/// Lower and upper bounds for a product-denominator ratio by maximizing
/// the AM-GM relaxation over `s`.
fn enumerate_product(geo: &Geometry, ratio: Ratio, tol: f64) -> FactorEstimate {
    let whitener_for = |s: f64| match ratio {
        Ratio::F2 => Whitener::Diagonal { s },
        _ => Whitener::RankOne { s },
    };
    // Optimal s for a given b makes the AM-GM bound tight.
    let tight_s = |b: &[f64]| -> f64 {
        let l2sq: f64 = b.iter().map(|v| v * v).sum();
        match ratio {
            Ratio::F2 => (l2sq / geo.s_l2sq(b)).sqrt(),
            _ => (l2sq / geo.s_size).sqrt() / geo.s_l1(b),
        }
    };
    let mut lower = 0.0_f64;
    let mut upper = f64::INFINITY;
    let mut upper_arg = None;
    let eval = |s: f64,
                lower: &mut f64,
                upper: &mut f64,
                upper_arg: &mut Option<Vec<f64>>|
     -> Option<Vec<f64>> {
        let best = enumerate_whitened(geo, &whitener_for(s), ratio);
        if best.lower.is_finite() {
            *lower = lower.max(best.lower);
        }
        if best.upper < *upper {
            *upper = best.upper;
            *upper_arg = best.upper_arg.clone();
        }
        best.lower_arg
    };
    let closed = |lower: f64, upper: f64| upper - lower <= tol * upper.abs().max(1e-300);
    let mut s = 1.0;
    let mut tried: Vec<f64> = Vec::new();
    for _ in 0..40 {
        tried.push(s);
        let arg = eval(s, &mut lower, &mut upper, &mut upper_arg);
        if closed(lower, upper) {
            break;
        }
        let Some(b) = arg else { break };
        let next = tight_s(&b);
        if !(next.is_finite() && next > 0.0) || (next.ln() - s.ln()).abs() < 1e-13 {
            break;
        }
        s = next;
    }
    if !closed(lower, upper) {
        // Golden-section refinement of the dual over log s.
        let centre = s.ln();
        let (mut a, mut b) = (centre - 3.0, centre + 3.0);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - phi * (b - a);
        let mut x2 = a + phi * (b - a);
        let probe =
            |x: f64, lower: &mut f64, upper: &mut f64, upper_arg: &mut Option<Vec<f64>>| -> f64 {
                let before = *lower;
                *lower = 0.0;
                eval(x.exp(), lower, upper, upper_arg);
                let v = *lower;
                *lower = before.max(v);
                v
            };
        let mut f1 = probe(x1, &mut lower, &mut upper, &mut upper_arg);
        let mut f2 = probe(x2, &mut lower, &mut upper, &mut upper_arg);
        for _ in 0..30 {
            if closed(lower, upper) {
                break;
            }
            if f1 > f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = probe(x1, &mut lower, &mut upper, &mut upper_arg);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = probe(x2, &mut lower, &mut upper, &mut upper_arg);
            }
        }
    }
    exact_estimate(lower, upper, upper_arg, tol)
}

/// Objective on the sphere for the multistart search: a value and its
/// Euclidean gradient, or `None` outside the domain.
pub(crate) trait SphereObjective: Sync {
    fn value_grad(&self, b: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

struct RatioObjective<'a> {
    geo: Geometry<'a>,
    ratio: Ratio,
}

impl SphereObjective for RatioObjective<'_> {
    fn value_grad(&self, b: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let (v, g) = self.geo.ratio_grad(self.ratio, b);
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((v, g))
    }
}

/// Multistart retraction-gradient descent on `{ |b|_2 = 1 } ∩ C(xi, S)`.
pub(crate) fn multistart_search(
    objective: &dyn SphereObjective,
    cone: &ConeSpec,
    options: &FactorOptions,
    extra_starts: &[DVector<f64>],
) -> (f64, Option<DVector<f64>>) {
    let p = cone.p();
    let dummy = DMatrix::zeros(0, 0);
    let geo = Geometry::new(&dummy, cone);
    let mut starts: Vec<DVector<f64>> = Vec::new();
    let mut ind = DVector::zeros(p);
    for &j in &cone.support {
        ind[j] = 1.0;
    }
    starts.push(ind);
    starts.extend(extra_starts.iter().cloned());
    let restarts = options.restarts.max(starts.len());
    let results: Vec<(f64, Option<DVector<f64>>)> = (0..restarts)
        .into_par_iter()
        .map(|k| {
            let mut b = if k < starts.len() {
                starts[k].clone()
            } else {
                let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
                rng.set_stream(k as u64);
                let spread: f64 = {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    u.abs()
                };
                DVector::from_fn(p, |j, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if geo.in_s[j] {
                        z
                    } else {
                        z * spread
                    }
                })
            };
            if !geo.retract(&mut b) || b.norm() == 0.0 {
                return (f64::INFINITY, None);
            }
            b.normalize_mut();
            let Some((mut f, mut g)) = objective.value_grad(&b) else {
                return (f64::INFINITY, None);
            };
            let mut step = 0.1;
            for _ in 0..options.max_iterations {
                let rg = &g - &b * g.dot(&b);
                let rn2 = rg.norm_squared();
                if rn2 <= 1e-24 * (1.0 + f * f) {
                    break;
                }
                let mut moved = false;
                while step > 1e-14 {
                    let mut cand = &b - &rg * step;
                    if geo.retract(&mut cand) && cand.norm() > 0.0 {
                        cand.normalize_mut();
                        if let Some((fc, gc)) = objective.value_grad(&cand) {
                            if fc < f - 1e-4 * step * rn2 {
                                b = cand;
                                f = fc;
                                g = gc;
                                moved = true;
                                step *= 2.0;
                                break;
                            }
                        }
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            (f, Some(b))
        })
        .collect();
    results.into_iter().fold(
        (f64::INFINITY, None),
        |acc, r| if r.0 < acc.0 { r } else { acc },
    )
}

fn search_estimate(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    ratio: Ratio,
    options: &FactorOptions,
) -> FactorEstimate {
    let objective = RatioObjective {
        geo: Geometry::new(sigma, cone),
        ratio,
    };
    let (v, arg) = multistart_search(&objective, cone, options, &[]);
    FactorEstimate {
        value: v,
        upper_bound: v,
        certified: false,
        exact: false,
        method: FactorMethod::MultistartSearch,
        minimizer: arg,
    }
}

fn dispatch(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    ratio: Ratio,
    options: &FactorOptions,
) -> Result<FactorEstimate> {
    check_sigma(sigma, cone)?;
    let p = cone.p();
    let cap = options.enumeration_cap.min(MAX_ENUMERATION_P);
    let exact_capable = !matches!(ratio, Ratio::PhiQ(q) if q != 2.0);
    if p <= cap && exact_capable {
        let geo = Geometry::new(sigma, cone);
        return Ok(match ratio {
            Ratio::Kappa2 => {
                let best = enumerate_kappa2(&geo);
                exact_estimate(
                    best.lower,
                    best.upper,
                    best.upper_arg,
                    options.gap_tolerance,
                )
            }
            Ratio::Re2 => {
                let best = enumerate_whitened(&geo, &Whitener::Identity, ratio);
                exact_estimate(
                    best.lower,
                    best.upper,
                    best.upper_arg,
                    options.gap_tolerance,
                )
            }
            Ratio::F2 | Ratio::PhiQ(_) => enumerate_product(&geo, ratio, options.gap_tolerance),
        });
    }
    if let Some(c) = scaled_identity(sigma) {
        if exact_capable {
            return Ok(FactorEstimate {
                value: c,
                upper_bound: c,
                certified: true,
                exact: true,
                method: FactorMethod::ScaledIdentity,
                minimizer: None,
            });
        }
    }
    Ok(search_estimate(sigma, cone, ratio, options))
}

/// Compatibility constant `kappa*(xi, S)`.
pub fn compatibility_constant(sigma: &DMatrix<f64>, cone: &ConeSpec) -> Result<FactorEstimate> {
    compatibility_constant_with(sigma, cone, &FactorOptions::default())
}

pub fn compatibility_constant_with(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    options: &FactorOptions,
) -> Result<FactorEstimate> {
    Ok(dispatch(sigma, cone, Ratio::Kappa2, options)?.map(f64::sqrt))
}

/// Restricted eigenvalue `RE_2(xi, S)`.
pub fn restricted_eigenvalue(sigma: &DMatrix<f64>, cone: &ConeSpec) -> Result<FactorEstimate> {
    restricted_eigenvalue_with(sigma, cone, &FactorOptions::default())
}

pub fn restricted_eigenvalue_with(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    options: &FactorOptions,
) -> Result<FactorEstimate> {
    Ok(dispatch(sigma, cone, Ratio::Re2, options)?.map(f64::sqrt))
}

/// Simple invertibility factor `F_0(xi, S; phi)`.
pub fn simple_gif(sigma: &DMatrix<f64>, cone: &ConeSpec, phi: Phi) -> Result<FactorEstimate> {
    simple_gif_with(sigma, cone, phi, &FactorOptions::default())
}

pub fn simple_gif_with(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    phi: Phi,
    options: &FactorOptions,
) -> Result<FactorEstimate> {
    match phi {
        Phi::OneS => dispatch(sigma, cone, Ratio::Kappa2, options),
        Phi::Q { q } => {
            if !(q >= 1.0 && q.is_finite()) {
                return Err(Error::domain(format!("phi_q needs finite q >= 1, got {q}")));
            }
            dispatch(sigma, cone, Ratio::PhiQ(q), options)
        }
    }
}

/// `F_2(xi, S) = inf b'Sb / (|b_S|_2 |b|_2)`.
pub fn f2_factor(sigma: &DMatrix<f64>, cone: &ConeSpec) -> Result<FactorEstimate> {
    f2_factor_with(sigma, cone, &FactorOptions::default())
}

pub fn f2_factor_with(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    options: &FactorOptions,
) -> Result<FactorEstimate> {
    dispatch(sigma, cone, Ratio::F2, options)
}

/// Value of the ratio defining each factor at a given `b` (for oracles).
pub fn factor_ratio_at(
    sigma: &DMatrix<f64>,
    cone: &ConeSpec,
    which: FactorKind,
    b: &DVector<f64>,
) -> f64 {
    let geo = Geometry::new(sigma, cone);
    match which {
        FactorKind::KappaStarSquared => geo.ratio(Ratio::Kappa2, b.as_slice()),
        FactorKind::Re2Squared => geo.ratio(Ratio::Re2, b.as_slice()),
        FactorKind::F2 => geo.ratio(Ratio::F2, b.as_slice()),
        FactorKind::F0(Phi::OneS) => geo.ratio(Ratio::Kappa2, b.as_slice()),
        FactorKind::F0(Phi::Q { q }) => geo.ratio(Ratio::PhiQ(q), b.as_slice()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    KappaStarSquared,
    Re2Squared,
    F2,
    F0(Phi),
}
