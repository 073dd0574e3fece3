//! Moment generating functions, leading eigendata of the perturbed cocycle and
//! the exponential convergence diagnostic.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MeasureKind;
use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::ops::{
    density_with, norms, pullback, random_fn, Cocycle, DecayTable, DensityResult, TowerFn, C64,
    PULLBACK_MAX,
};
use crate::stats::line_fit;
use crate::tower::RandomTower;

/// `ln E e^{z S_n}` as log-modulus and phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMgf {
    pub log_modulus: f64,
    pub phase: f64,
}

impl LogMgf {
    pub fn value(&self) -> C64 {
        C64::from_polar(self.log_modulus.exp(), self.phase)
    }

    pub fn ln(&self) -> C64 {
        C64::new(self.log_modulus, self.phase)
    }
}

/// A fiber with its cocycle and equivariant density.
pub struct Fiber {
    pub co: Cocycle,
    pub anchor: i64,
    pub density: DensityResult,
}

impl Fiber {
    pub fn new(sys: &RandomTower, phi: &Observable, anchor: i64, depth: usize) -> Result<Self> {
        let co = Cocycle::new(sys, depth, phi.clone());
        let density = density_with(&co, anchor, PULLBACK_MAX, 1e-14)?;
        Ok(Self {
            co,
            anchor,
            density,
        })
    }

    pub fn sys(&self) -> &RandomTower {
        &self.co.sys
    }

    /// Starting function whose `L^{z,n}` image integrates to the MGF.
    fn start(&self, kind: MeasureKind) -> TowerFn {
        match kind {
            MeasureKind::Equivariant => self.density.h_tilde.clone(),
            MeasureKind::Reference => {
                let grid = self.co.grid(self.anchor);
                let a = grid.mass();
                TowerFn::constant(grid, C64::new(1.0 / a, 0.0)).over_weight()
            }
        }
    }

    /// `mtilde(L^{z,n} h_tilde)` or `a^{-1} mtilde(L^{z,n}(1/v))`, renormalized at
    /// every step.
    pub fn mgf(&self, z: C64, n: usize, kind: MeasureKind) -> Result<LogMgf> {
        let (g, log_scale) = self.co.l_n_scaled(z, &self.start(kind), n)?;
        let i = g.integral();
        Ok(LogMgf {
            log_modulus: log_scale + i.norm().ln(),
            phase: i.arg(),
        })
    }

    /// `mgf` at every `n` from 1 to `n_max`.
    pub fn mgf_path(&self, z: C64, n_max: usize, kind: MeasureKind) -> Result<Vec<LogMgf>> {
        let mut g = self.start(kind);
        let mut log_scale = 0.0;
        let mut out = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            g = self.co.l(z, &g)?;
            let s = g.sup();
            if s > 0.0 {
                g = g.scale(C64::new(1.0 / s, 0.0));
                log_scale += s.ln();
            }
            let i = g.integral();
            out.push(LogMgf {
                log_modulus: log_scale + i.norm().ln(),
                phase: i.arg(),
            });
        }
        Ok(out)
    }

    /// Means of the observable under the equivariant measures along the orbit,
    /// `mu_{anchor + j}(phi)` for `j < n`.
    pub fn fiber_means(&self, n: usize) -> Result<Vec<f64>> {
        let zero = C64::new(0.0, 0.0);
        let mut h = self.density.h_tilde.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let phi = TowerFn::from_observable(h.grid.clone(), &self.co.phi);
            out.push(phi.mul(&h)?.integral().re);
            h = self.co.l(zero, &h)?;
        }
        Ok(out)
    }
}

/// Leading eigendata along the orbit: `L^z h_j = lambda_j h_{j+1}` with every
/// `h_j` normalized to `mtilde(h_j) = 1`.
#[derive(Debug, Clone)]
pub struct RpfTriplet {
    pub z: C64,
    pub lambda: Vec<C64>,
    pub h: Vec<TowerFn>,
    pub pullback_n: usize,
    /// `|| pullback(k + 1) - pullback(k) ||_Li` against `k`.
    pub convergence: DecayTable,
}

impl RpfTriplet {
    /// `sum_{j < n} ln lambda_j`.
    pub fn log_lambda_product(&self, n: usize) -> C64 {
        self.lambda[..n].iter().map(|l| l.ln()).sum()
    }

    pub fn h_z(&self) -> &TowerFn {
        &self.h[0]
    }
}

/// Pulls `1` back under `L^z` over `pullback_n` steps to get `h_0`, then pushes
/// it `window` steps forward recording the normalization ratios.
pub fn rpf_extract(co: &Cocycle, z: C64, anchor: i64, window: usize, pullback_n: usize) -> Result<RpfTriplet> {
    let mut h = vec![pullback(co, z, anchor, pullback_n)?];
    let mut lambda = Vec::with_capacity(window);
    for j in 0..window {
        let next = co.l(z, &h[j])?;
        let l = next.integral();
        if l.norm() == 0.0 || !l.norm().is_finite() {
            return Err(Error::NoConvergence(format!("eigenvalue vanished at step {j}")));
        }
        lambda.push(l);
        h.push(next.scale(l.inv()));
    }
    let ks: Vec<usize> = (1..=pullback_n.min(48)).collect();
    let mut prev = pullback(co, z, anchor, 1)?;
    let mut diffs = Vec::with_capacity(ks.len());
    for &k in &ks {
        let cur = pullback(co, z, anchor, k + 1)?;
        diffs.push(norms(&co.sys, &cur.sub(&prev)?).norm_li);
        prev = cur;
    }
    Ok(RpfTriplet {
        z,
        lambda,
        h,
        pullback_n,
        convergence: DecayTable::from_rows(ks, diffs),
    })
}

/// `|| L^z h_j - lambda_j h_{j+1} ||_Li / || h_j ||_Li` with `h_{j+1}` pulled back
/// independently from further in the past.
pub fn eigen_residual(co: &Cocycle, z: C64, anchor: i64, pullback_n: usize) -> Result<f64> {
    let h0 = pullback(co, z, anchor, pullback_n)?;
    let h1 = pullback(co, z, anchor + 1, pullback_n)?;
    let lh = co.l(z, &h0)?;
    let lambda = lh.integral();
    let r = lh.sub(&h1.scale(lambda))?;
    Ok(norms(&co.sys, &r).norm_li / norms(&co.sys, &h0).norm_li)
}

/// Residuals `|| L^{z,n} g / lambda_n - nu(g) h_n ||_Li / ||g||_Li` for one `g`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub z: (f64, f64),
    pub residual: Vec<f64>,
    pub slope: f64,
    pub r2: f64,
}

/// Eigendata together with the dual functionals `nu_j`, normalized `nu_j(h_j) = 1`,
/// obtained by pulling `mtilde` back through the transposed cocycle from `n + tail`.
pub struct Projector {
    pub triplet: RpfTriplet,
    pub nu: Vec<Vec<C64>>,
}

impl Projector {
    pub fn new(co: &Cocycle, z: C64, anchor: i64, n: usize, tail: usize) -> Result<Self> {
        let total = n + tail;
        let triplet = rpf_extract(co, z, anchor, total, PULLBACK_MAX.min(256))?;
        let last = &triplet.h[total];
        let mut nu_top: Vec<C64> = last
            .grid
            .cells
            .iter()
            .map(|c| C64::new(c.mtilde(), 0.0))
            .collect();
        let mut nu = vec![Vec::new(); n + 1];
        for j in (0..total).rev() {
            let step = co.step(anchor + j as i64);
            let mut back = step.adjoint_l(z, &nu_top);
            let c = triplet.lambda[j].inv();
            for v in &mut back {
                *v *= c;
            }
            // keep nu_j(h_j) = 1 against accumulated rounding
            let s = triplet.h[j].pair(&back);
            for v in &mut back {
                *v /= s;
            }
            if j <= n {
                nu[j] = back.clone();
            }
            nu_top = back;
        }
        Ok(Self { triplet, nu })
    }

    /// Deflated iteration: the component along `h_j` is removed after every step,
    /// so rounding never builds up along the leading direction.
    pub fn residuals(&self, co: &Cocycle, g: &TowerFn, n: usize) -> Result<Vec<f64>> {
        let t = &self.triplet;
        let scale = norms(&co.sys, g).norm_li;
        let mut u = g.sub(&t.h[0].scale(g.pair(&self.nu[0])))?;
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let w = co.l(t.z, &u)?.scale(t.lambda[j].inv());
            u = w.sub(&t.h[j + 1].scale(w.pair(&self.nu[j + 1])))?;
            out.push(norms(&co.sys, &u).norm_li / scale);
        }
        Ok(out)
    }
}

/// Runs the convergence diagnostic for `count` random complex `g` of the grid
/// at `anchor`, fitting `ln residual` against `n` over `n_lo..=n_hi`.
pub fn convergence_experiment(
    co: &Cocycle,
    z: C64,
    anchor: i64,
    n_lo: usize,
    n_hi: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ConvergenceRun>> {
    let proj = Projector::new(co, z, anchor, n_hi, 64)?;
    let grid: Arc<_> = co.grid(anchor);
    let mut runs = Vec::with_capacity(count);
    for _ in 0..count {
        let g = random_fn(grid.clone(), rng, false, true);
        let res = proj.residuals(co, &g, n_hi)?;
        let (x, y): (Vec<f64>, Vec<f64>) = (n_lo..=n_hi)
            .map(|n| (n as f64, res[n - 1].ln()))
            .unzip();
        let fit = line_fit(&x, &y);
        runs.push(ConvergenceRun {
            z: (z.re, z.im),
            residual: res,
            slope: fit.slope,
            r2: fit.r2,
        });
    }
    Ok(runs)
}
