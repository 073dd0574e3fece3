//! Spectral radius of the characteristic-function operator on a constant fiber.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, Family};
use crate::error::Result;
use crate::observable::Observable;
use crate::ops::{Cocycle, TowerFn, C64};
use crate::tower::RandomTower;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTable {
    pub symbol: usize,
    pub rows: Vec<(f64, f64)>,
    /// Largest radius over the grid points with `|t| >= exclude`.
    pub max_radius: f64,
    pub exclude: f64,
}

/// Growth rate of `L^{it}` iterated on a constant fiber, read off the sup norm
/// between `iters / 2` and `iters`.
pub fn spectral_radius(co: &Cocycle, t: f64, iters: usize) -> Result<f64> {
    let z = C64::new(0.0, t);
    let mut g = TowerFn::constant(co.grid(0), C64::new(1.0, 0.0));
    let mut log_scale = 0.0;
    let mut mid = 0.0;
    for i in 1..=iters {
        g = co.l(z, &g)?;
        let s = g.sup();
        if s == 0.0 {
            return Ok(0.0);
        }
        g = g.scale(C64::new(1.0 / s, 0.0));
        log_scale += s.ln();
        if i == iters / 2 {
            mid = log_scale;
        }
    }
    Ok(((log_scale - mid) / (iters - iters / 2) as f64).exp())
}

pub fn fixed_fiber_spectral_radius(
    family: &Family,
    symbol: usize,
    phi: &Observable,
    t_grid: &[f64],
    exclude: f64,
    iters: usize,
) -> Result<SpectralTable> {
    let sys = RandomTower::new(family.clone(), Environment::constant(symbol, family.len()))?;
    let co = Cocycle::new(&sys, 1, phi.clone());
    let rows: Vec<(f64, f64)> = t_grid
        .iter()
        .map(|&t| Ok((t, spectral_radius(&co, t, iters)?)))
        .collect::<Result<_>>()?;
    let max_radius = rows
        .iter()
        .filter(|(t, _)| t.abs() >= exclude)
        .map(|r| r.1)
        .fold(0.0, f64::max);
    Ok(SpectralTable {
        symbol,
        rows,
        max_radius,
        exclude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::gm3;
    use std::f64::consts::PI;

    #[test]
    fn radius_table_on_all_a() {
        let (fam, _) = gm3();
        let grid: Vec<f64> = (-32..=32).map(|i| PI * i as f64 / 32.0).collect();
        let tab = fixed_fiber_spectral_radius(&fam, 0, &Observable::base_indicator(), &grid, 0.3, 400).unwrap();
        let at0 = tab.rows.iter().find(|r| r.0 == 0.0).unwrap().1;
        assert!((at0 - 1.0).abs() < 1e-9);
        let at_pi = tab.rows.last().unwrap().1;
        assert!(at_pi < 1.0 - 1e-3, "{at_pi}");
        assert!(tab.max_radius < 1.0);
        for w in tab.rows.windows(2) {
            assert!((w[1].1 - w[0].1).abs() < 0.1);
        }
    }

    #[test]
    fn zero_observable_keeps_radius_one() {
        let (fam, _) = gm3();
        let tab = fixed_fiber_spectral_radius(&fam, 1, &Observable::zero(), &[1.0, 2.0], 0.0, 200).unwrap();
        assert!(tab.rows.iter().all(|r| (r.1 - 1.0).abs() < 1e-9));
    }
}
