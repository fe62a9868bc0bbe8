//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use wlasso_core::{Dataset, FamilyKind};

pub const FAMILIES: [FamilyKind; 3] = [
    FamilyKind::Linear,
    FamilyKind::Logistic,
    FamilyKind::Poisson,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn psi0(kind: FamilyKind, t: f64) -> f64 {
    match kind {
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

pub fn psi0_dot(kind: FamilyKind, t: f64) -> f64 {
    match kind {
        FamilyKind::Linear => t,
        FamilyKind::Logistic => 1.0 / (1.0 + (-t).exp()),
        FamilyKind::Poisson => t.exp(),
    }
}

pub fn psi0_ddot(kind: FamilyKind, t: f64) -> f64 {
    match kind {
        FamilyKind::Linear => 1.0,
        FamilyKind::Logistic => {
            let s = 1.0 / (1.0 + (-t).exp());
            s * (1.0 - s)
        }
        FamilyKind::Poisson => t.exp(),
    }
}

/// `(1/n) sum_i [psi0(x_i b) - y_i x_i b]`, written out row by row.
pub fn loss(data: &Dataset, kind: FamilyKind, beta: &DVector<f64>) -> f64 {
    let (n, p) = (data.n(), data.p());
    let mut total = 0.0;
    for i in 0..n {
        let mut t = 0.0;
        for j in 0..p {
            t += data.x()[(i, j)] * beta[j];
        }
        total += psi0(kind, t) - data.y()[i] * t;
    }
    total / n as f64
}

pub fn gradient(data: &Dataset, kind: FamilyKind, beta: &DVector<f64>) -> DVector<f64> {
    let (n, p) = (data.n(), data.p());
    let mut g = DVector::zeros(p);
    for i in 0..n {
        let mut t = 0.0;
        for j in 0..p {
            t += data.x()[(i, j)] * beta[j];
        }
        let r = psi0_dot(kind, t) - data.y()[i];
        for j in 0..p {
            g[j] += data.x()[(i, j)] * r / n as f64;
        }
    }
    g
}

pub fn objective(
    data: &Dataset,
    kind: FamilyKind,
    beta: &DVector<f64>,
    lambda: f64,
    w: &DVector<f64>,
) -> f64 {
    loss(data, kind, beta)
        + lambda
            * beta
                .iter()
                .zip(w.iter())
                .map(|(b, w)| w * b.abs())
                .sum::<f64>()
}

/// Distance of `-grad` from `lambda * w_j * subdifferential(|beta_j|)`,
/// maximized over coordinates.
pub fn kkt_violation(
    beta: &DVector<f64>,
    grad: &DVector<f64>,
    lambda: f64,
    w: &DVector<f64>,
) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..beta.len() {
        let t = lambda * w[j];
        let g = -grad[j];
        let v = if beta[j] > 0.0 {
            (g - t).abs()
        } else if beta[j] < 0.0 {
            (g + t).abs()
        } else {
            (g.abs() - t).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Gaussian design scaled by `scale` and a response drawn at a small
/// random coefficient vector.
pub fn random_dataset(seed: u64, kind: FamilyKind, n: usize, p: usize, scale: f64) -> Dataset {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| scale * normal(&mut r));
    let b = DVector::from_fn(p, |_, _| r.random_range(-0.5..0.5));
    let theta = &x * &b;
    let y = DVector::from_fn(n, |i, _| match kind {
        FamilyKind::Linear => theta[i] + normal(&mut r),
        FamilyKind::Logistic => {
            let pr = psi0_dot(kind, theta[i]);
            f64::from(Bernoulli::new(pr).unwrap().sample(&mut r) as u8)
        }
        FamilyKind::Poisson => Poisson::new(theta[i].exp()).unwrap().sample(&mut r),
    });
    Dataset::new(x, y).unwrap()
}

/// Minimizer of a convex objective by a dense grid on `[-radius, radius]^p`
/// followed by a shrinking pattern search.
pub fn brute_force_minimizer(
    f: impl Fn(&DVector<f64>) -> f64,
    p: usize,
    radius: f64,
    grid: usize,
) -> DVector<f64> {
    let mut best = DVector::zeros(p);
    let mut best_v = f(&best);
    let total = grid.pow(p as u32);
    let mut point = DVector::zeros(p);
    for idx in 0..total {
        let mut k = idx;
        for j in 0..p {
            point[j] = -radius + 2.0 * radius * (k % grid) as f64 / (grid - 1) as f64;
            k /= grid;
        }
        let v = f(&point);
        if v < best_v {
            best_v = v;
            best.copy_from(&point);
        }
    }
    let mut step = 2.0 * radius / (grid - 1) as f64;
    while step > 1e-11 {
        let mut moved = false;
        for j in 0..p {
            for dir in [1.0, -1.0] {
                let mut cand = best.clone();
                cand[j] += dir * step;
                let v = f(&cand);
                if v < best_v {
                    best_v = v;
                    best = cand;
                    moved = true;
                }
            }
        }
        // Snap coordinates that sit within a step of zero onto the kink.
        for j in 0..p {
            if best[j] != 0.0 && best[j].abs() <= step {
                let mut cand = best.clone();
                cand[j] = 0.0;
                let v = f(&cand);
                if v <= best_v {
                    best_v = v;
                    best = cand;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

/// A random symmetric positive definite matrix with unit-order entries.
pub fn random_spd(seed: u64, p: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    let m = p + 3;
    let a = DMatrix::from_fn(m, p, |_, _| normal(&mut r));
    a.transpose() * a / m as f64 + DMatrix::identity(p, p) * 0.05
}

pub fn in_cone(b: &DVector<f64>, support: &[usize], xi: f64) -> bool {
    let on: f64 = support.iter().map(|&j| b[j].abs()).sum();
    let off: f64 = (0..b.len())
        .filter(|j| !support.contains(j))
        .map(|j| b[j].abs())
        .sum();
    on > 0.0 && off <= xi * on
}

/// Minimum of `f` over unit vectors of the cone of width `xi`: a dense grid
/// on the sphere followed by a shrinking search with coordinate and random
/// directions. Returns an attained value, hence an upper bound.
pub fn sphere_minimum(
    f: impl Fn(&DVector<f64>) -> f64,
    p: usize,
    support: &[usize],
    xi: f64,
    per_angle: usize,
    seed: u64,
) -> f64 {
    assert!((2..=4).contains(&p), "sphere grid supports p in 2..=4");
    let mut best = f64::INFINITY;
    let mut arg = DVector::zeros(p);
    let mut visit = |b: DVector<f64>| {
        if in_cone(&b, support, xi) {
            let v = f(&b);
            if v < best {
                best = v;
                arg = b;
            }
        }
    };
    let pi = std::f64::consts::PI;
    let k = per_angle;
    match p {
        2 => {
            for a in 0..k {
                let t = 2.0 * pi * a as f64 / k as f64;
                visit(DVector::from_vec(vec![t.cos(), t.sin()]));
            }
        }
        3 => {
            for a in 0..=k {
                let th = pi * a as f64 / k as f64;
                for c in 0..2 * k {
                    let ph = pi * c as f64 / k as f64;
                    visit(DVector::from_vec(vec![
                        th.sin() * ph.cos(),
                        th.sin() * ph.sin(),
                        th.cos(),
                    ]));
                }
            }
        }
        _ => {
            for a in 0..=k {
                let t1 = pi * a as f64 / k as f64;
                for c in 0..=k {
                    let t2 = pi * c as f64 / k as f64;
                    for d in 0..2 * k {
                        let t3 = pi * d as f64 / k as f64;
                        visit(DVector::from_vec(vec![
                            t1.cos(),
                            t1.sin() * t2.cos(),
                            t1.sin() * t2.sin() * t3.cos(),
                            t1.sin() * t2.sin() * t3.sin(),
                        ]));
                    }
                }
            }
        }
    }
    let mut r = rng(seed);
    let mut step = 2.0 * pi / k as f64;
    while step > 1e-10 {
        let mut moved = false;
        let mut dirs: Vec<DVector<f64>> = (0..p)
            .map(|j| {
                let mut e = DVector::zeros(p);
                e[j] = 1.0;
                e
            })
            .collect();
        for _ in 0..4 * p {
            let d = DVector::from_fn(p, |_, _| normal(&mut r));
            dirs.push(d.normalize());
        }
        for d in &dirs {
            for sgn in [1.0, -1.0] {
                let c = (&arg + d * (sgn * step)).normalize();
                if in_cone(&c, support, xi) {
                    let v = f(&c);
                    if v < best {
                        best = v;
                        arg = c;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

pub fn quad(sigma: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    b.dot(&(sigma * b))
}

pub fn s_l1(b: &DVector<f64>, support: &[usize]) -> f64 {
    support.iter().map(|&j| b[j].abs()).sum()
}

pub fn s_l2(b: &DVector<f64>, support: &[usize]) -> f64 {
    support.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt()
}

pub fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}
