//! Three variance estimators and the gap between `Var(S_n)` and the second
//! derivative of the eigenvalue product.

use serde::{Deserialize, Serialize};

use super::rpf::{rpf_extract, Fiber};
use super::MeasureKind;
use crate::error::Result;
use crate::observable::Observable;
use crate::ops::{Cocycle, TowerFn, C64, PULLBACK_MAX};
use crate::tower::{enumerate_cylinders, RandomTower, CYLINDER_CAP};

/// Finite-difference step for derivatives in `t`.
pub const FD_STEP: f64 = 1e-4;

/// Step for derivatives of the eigenvalue product. Rounding in each `ln lambda_j`
/// is divided by the squared step and adds up along `n`, so this one is coarser.
pub const PRODUCT_STEP: f64 = 1e-2;

/// Second derivative at 0 by central differences with one Richardson step.
pub fn second_derivative(f: impl Fn(f64) -> f64, step: f64) -> f64 {
    let f0 = f(0.0);
    let d = |h: f64| (f(h) - 2.0 * f0 + f(-h)) / (h * h);
    (4.0 * d(step / 2.0) - d(step)) / 3.0
}

/// First derivative at 0 by central differences with one Richardson step.
pub fn first_derivative(f: impl Fn(f64) -> f64, step: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(step / 2.0) - d(step)) / 3.0
}

/// Means and covariance matrix of `phi o F^j`, `j < n`, under the measure whose
/// weighted density on the first fiber is `start`, from exact operator pushes.
pub fn second_moments(co: &Cocycle, start: &TowerFn, n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let zero = C64::new(0.0, 0.0);
    let mut s = start.clone();
    let mut densities = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    for _ in 0..n {
        let phi = TowerFn::from_observable(s.grid.clone(), &co.phi);
        means.push(phi.mul(&s)?.integral().re);
        densities.push(s.clone());
        s = co.l(zero, &s)?;
    }
    let mut cov = vec![vec![0.0; n]; n];
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let phi_i = TowerFn::from_observable(densities[i].grid.clone(), &co.phi);
        let mut u = phi_i.map(|v| v - means[i]).mul(&densities[i])?;
        for j in i..n {
            if j > i {
                u = co.l(zero, &u)?;
            }
            let phi_j = TowerFn::from_observable(u.grid.clone(), &co.phi);
            let c = phi_j.mul(&u)?.integral().re;
            cov[i][j] = c;
            cov[j][i] = c;
        }
    }
    Ok((means, cov))
}

/// `Var(S_n)` for every `n` from 1 to the size of the covariance matrix.
pub fn cumulative_variance(cov: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cov.len());
    let mut acc = 0.0;
    for n in 0..cov.len() {
        acc += cov[n][n] + 2.0 * cov[n][..n].iter().sum::<f64>();
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    /// `Var_mu(S_n)`.
    pub var_equivariant: f64,
    /// Variance under the normalized reference measure.
    pub var_reference: f64,
    /// Second derivative of `sum_{j<n} ln lambda_j(t)` at 0.
    pub pi2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n: usize,
    /// `Var/n` from the second difference of `ln mgf`.
    pub finite_difference: f64,
    /// `Var/n` from depth-`n` cylinder sums.
    pub enumeration: f64,
    /// `Var/n` from summed covariances.
    pub green_kubo: f64,
    pub max_relative_gap: f64,
    pub rows: Vec<VarianceRow>,
    /// Largest `|Var - pi2|` over the first and second half of the rows.
    pub early_gap: f64,
    pub late_gap: f64,
    /// Largest `|Var_mu - Var_ref|` over all rows.
    pub reference_gap: f64,
    /// First derivative of `sum ln lambda_j` at 0 minus the sum of fiber means,
    /// at the largest row.
    pub derivative_defect: f64,
    pub degenerate: bool,
}

/// Below this `Var/n` the observable is flagged as a possible coboundary. The
/// finite-difference estimator resolves variances only down to about this level.
pub const DEGENERATE_VARIANCE: f64 = 1e-6;

pub fn variance(sys: &RandomTower, anchor: i64, phi: &Observable, n: usize, n_max: usize) -> Result<VarianceReport> {
    let fiber = Fiber::new(sys, phi, anchor, 1)?;
    let co = &fiber.co;

    let f = |t: f64| {
        fiber
            .mgf(C64::new(t, 0.0), n, MeasureKind::Equivariant)
            .expect("real mgf")
            .log_modulus
    };
    let finite_difference = second_derivative(f, FD_STEP) / n as f64;

    let d = &fiber.density;
    let cyl = enumerate_cylinders(sys, anchor, n, phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP)?;
    let m1: f64 = cyl.iter().map(|c| c.mass_mu * c.birkhoff_sum).sum();
    let m2: f64 = cyl.iter().map(|c| c.mass_mu * (c.birkhoff_sum - m1).powi(2)).sum();
    let enumeration = m2 / n as f64;

    let top = n.max(n_max);
    let (means, cov) = second_moments(co, &d.h_tilde, top)?;
    let var_mu = cumulative_variance(&cov);
    let green_kubo = var_mu[n - 1] / n as f64;

    let grid = co.grid(anchor);
    let a = grid.mass();
    let reference = TowerFn::constant(grid, C64::new(1.0 / a, 0.0)).over_weight();
    let (_, cov_ref) = second_moments(co, &reference, n_max)?;
    let var_ref = cumulative_variance(&cov_ref);

    // sum_{j<n} ln lambda_j(t) for every n at once
    let products = |t: f64| -> Vec<f64> {
        let tr = rpf_extract(co, C64::new(t, 0.0), anchor, n_max, PULLBACK_MAX.min(256)).expect("real triplet");
        let mut acc = 0.0;
        tr.lambda
            .iter()
            .map(|l| {
                acc += l.re.ln();
                acc
            })
            .collect()
    };
    let h = PRODUCT_STEP;
    let p = [products(-h), products(-h / 2.0), products(0.0), products(h / 2.0), products(h)];
    let rows: Vec<VarianceRow> = (0..n_max)
        .map(|k| {
            let d2 = |s: f64, lo: &Vec<f64>, hi: &Vec<f64>| (hi[k] - 2.0 * p[2][k] + lo[k]) / (s * s);
            let pi2 = (4.0 * d2(h / 2.0, &p[1], &p[3]) - d2(h, &p[0], &p[4])) / 3.0;
            VarianceRow {
                n: k + 1,
                var_equivariant: var_mu[k],
                var_reference: var_ref[k],
                pi2,
            }
        })
        .collect();
    let d1 = |s: f64, lo: &Vec<f64>, hi: &Vec<f64>| (hi[n_max - 1] - lo[n_max - 1]) / (2.0 * s);
    let pi1 = (4.0 * d1(h / 2.0, &p[1], &p[3]) - d1(h, &p[0], &p[4])) / 3.0;
    let derivative_defect = pi1 - means[..n_max].iter().sum::<f64>();

    let half = n_max / 2;
    let gap = |r: &VarianceRow| (r.var_equivariant - r.pi2).abs();
    let early_gap = rows[..half].iter().map(gap).fold(0.0, f64::max);
    let late_gap = rows[half..].iter().map(gap).fold(0.0, f64::max);
    let reference_gap = rows
        .iter()
        .map(|r| (r.var_equivariant - r.var_reference).abs())
        .fold(0.0, f64::max);

    let est = [finite_difference, enumeration, green_kubo];
    let mut max_relative_gap: f64 = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let scale = est[i].abs().max(est[j].abs());
            if scale > 0.0 {
                max_relative_gap = max_relative_gap.max((est[i] - est[j]).abs() / scale);
            }
        }
    }
    let degenerate = est.iter().all(|v| v.abs() < DEGENERATE_VARIANCE);
    if degenerate {
        max_relative_gap = est.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    Ok(VarianceReport {
        n,
        finite_difference,
        enumeration,
        green_kubo,
        max_relative_gap,
        rows,
        early_gap,
        late_gap,
        reference_gap,
        derivative_defect,
        degenerate,
    })
}

/// `Var_mu(S_n) / n` on one fiber from exact operator pushes.
pub fn quenched_variance(sys: &RandomTower, anchor: i64, phi: &Observable, n: usize) -> Result<f64> {
    let fiber = Fiber::new(sys, phi, anchor, 1)?;
    let (_, cov) = second_moments(&fiber.co, &fiber.density.h_tilde, n)?;
    Ok(cumulative_variance(&cov)[n - 1] / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gm3, Environment};

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    #[test]
    fn derivative_helpers() {
        let f = |t: f64| (1.5 * t).exp() + t * t * t;
        assert!((second_derivative(f, FD_STEP) - 2.25).abs() < 1e-6);
        assert!((first_derivative(f, FD_STEP) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn three_estimators_agree() {
        let r = variance(&gm3_sys(3), 0, &Observable::base_indicator(), 12, 32).unwrap();
        assert!(r.max_relative_gap < 1e-4, "{r:?}");
        assert!(r.derivative_defect.abs() < 1e-6);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_observable_has_no_variance() {
        let r = variance(&gm3_sys(3), 0, &Observable::constant(1.3), 8, 16).unwrap();
        assert!(r.degenerate);
        assert!(r.max_relative_gap < DEGENERATE_VARIANCE);
    }
}
