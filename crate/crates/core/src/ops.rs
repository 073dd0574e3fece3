//! Transfer operators on cylinder-constant tower functions.
//!
//! A [`TowerFn`] takes one complex value per depth-`D` cylinder of a fiber. The
//! space is invariant under the transfer operator when the observable is constant
//! on atoms, so every application below is an exact finite linear map:
//!
//! ```text
//! P^z g(x) = sum_{F y = x} exp(z phi(y)) g(y) / JF(y),    L^z g = P^z(g v) / v
//! ```
//!
//! Climbing cells pass their value one floor up; returning atoms of length `r`
//! feed the base of the next fiber with weight `r`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::stats::{line_fit, LineFit};
use crate::tower::{truncate_path, Grid, RandomTower, INFINITE_SEPARATION};

pub type C64 = Complex64;

/// Complex function on the depth-`D` cylinders of one fiber.
#[derive(Debug, Clone)]
pub struct TowerFn {
    pub grid: Arc<Grid>,
    pub values: Vec<C64>,
}

impl TowerFn {
    pub fn new(grid: Arc<Grid>, values: Vec<C64>) -> Self {
        assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn constant(grid: Arc<Grid>, c: C64) -> Self {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn from_real(grid: Arc<Grid>, values: &[f64]) -> Self {
        let v = values.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::new(grid, v)
    }

    /// The observable read on each cell.
    pub fn from_observable(grid: Arc<Grid>, phi: &Observable) -> Self {
        let v = grid
            .cells
            .iter()
            .map(|c| C64::new(phi.value(c.floor, c.symbol, c.atom()), 0.0))
            .collect();
        Self::new(grid, v)
    }

    /// The floor weight `v` itself.
    pub fn weight(grid: Arc<Grid>) -> Self {
        let v = grid.cells.iter().map(|c| C64::new(c.weight, 0.0)).collect();
        Self::new(grid, v)
    }

    pub fn anchor(&self) -> i64 {
        self.grid.anchor
    }

    pub fn depth(&self) -> usize {
        self.grid.depth
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: C64) -> Self {
        self.map(|v| v * c)
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid)
            || (self.grid.anchor == other.grid.anchor
                && self.grid.depth == other.grid.depth
                && self.grid.len() == other.grid.len())
        {
            Ok(())
        } else {
            Err(Error::ResolutionMismatch(format!(
                "fiber {} depth {} vs fiber {} depth {}",
                self.grid.anchor, self.grid.depth, other.grid.anchor, other.grid.depth
            )))
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        self.same_grid(other)?;
        let v = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::new(self.grid.clone(), v))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    /// `g * v`.
    pub fn times_weight(&self) -> Self {
        let v = self
            .values
            .iter()
            .zip(&self.grid.cells)
            .map(|(&a, c)| a * c.weight)
            .collect();
        Self::new(self.grid.clone(), v)
    }

    /// `g / v`.
    pub fn over_weight(&self) -> Self {
        let v = self
            .values
            .iter()
            .zip(&self.grid.cells)
            .map(|(&a, c)| a / c.weight)
            .collect();
        Self::new(self.grid.clone(), v)
    }

    /// Integral against the Lebesgue tower measure `m`.
    pub fn integral_m(&self) -> C64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(&a, c)| a * c.mass)
            .sum()
    }

    /// Integral against the weighted measure `mtilde = v m`.
    pub fn integral(&self) -> C64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(&a, c)| a * c.mtilde())
            .sum()
    }

    pub fn l1_m(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(a, c)| a.norm() * c.mass)
            .sum()
    }

    pub fn l1_mtilde(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(a, c)| a.norm() * c.mtilde())
            .sum()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `sum_k a_k g_k` for a functional given by its cell coefficients.
    pub fn pair(&self, functional: &[C64]) -> C64 {
        self.values
            .iter()
            .zip(functional)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Same function read on a finer grid of the same fiber.
    pub fn refine(&self, sys: &RandomTower, fine: Arc<Grid>) -> Result<Self> {
        if fine.anchor != self.grid.anchor || fine.depth < self.grid.depth {
            return Err(Error::ResolutionMismatch(format!(
                "cannot refine depth {} to depth {}",
                self.grid.depth, fine.depth
            )));
        }
        let v = fine
            .cells
            .iter()
            .map(|c| {
                let p = truncate_path(sys, fine.anchor, c.floor, &c.path, self.grid.depth);
                let k = self.grid.locate(c.floor, &p).expect("coarse cell exists");
                self.values[k]
            })
            .collect();
        Ok(Self::new(fine, v))
    }
}

/// One step of the cocycle: the sparse matrix of `P` from the fiber at `anchor`
/// to the fiber at `anchor + 1`, with the observable read on source cells.
#[derive(Debug)]
pub struct Transfer {
    pub src: Arc<Grid>,
    pub dst: Arc<Grid>,
    /// For each target cell, the source cells and their inverse Jacobians.
    pub entries: Vec<Vec<(usize, f64)>>,
    pub phi: Vec<f64>,
}

impl Transfer {
    pub fn new(sys: &RandomTower, src: Arc<Grid>, dst: Arc<Grid>, phi: &Observable) -> Self {
        assert_eq!(src.anchor + 1, dst.anchor);
        assert_eq!(src.depth, dst.depth);
        let a = src.anchor;
        let depth = src.depth;
        // returning atoms of the source fiber: (floor, atom, length)
        let mut returning = Vec::new();
        for l in 0..sys.height() {
            let spec = sys.spec(a - l as i64);
            for (i, at) in spec.atoms.iter().enumerate() {
                if at.return_time as usize == l + 1 {
                    returning.push((l, i as u16, at.length));
                }
            }
        }
        let entries = dst
            .cells
            .iter()
            .map(|c| {
                if c.floor > 0 {
                    let p = truncate_path(sys, a, c.floor - 1, &c.path, depth);
                    let k = src.locate(c.floor - 1, &p).expect("climb preimage");
                    vec![(k, 1.0)]
                } else {
                    returning
                        .iter()
                        .map(|&(l, i, len)| {
                            let mut full = Vec::with_capacity(c.path.len() + 1);
                            full.push(i);
                            full.extend_from_slice(&c.path);
                            let p = truncate_path(sys, a, l, &full, depth);
                            (src.locate(l, &p).expect("return preimage"), len)
                        })
                        .collect()
                }
            })
            .collect();
        let phi = src
            .cells
            .iter()
            .map(|c| phi.value(c.floor, c.symbol, c.atom()))
            .collect();
        Self {
            src,
            dst,
            entries,
            phi,
        }
    }

    fn factors(&self, z: C64) -> Vec<C64> {
        self.phi.iter().map(|&p| (z * p).exp()).collect()
    }

    pub fn apply_p(&self, z: C64, g: &TowerFn) -> Result<TowerFn> {
        self.check(g)?;
        let e = self.factors(z);
        let v = self
            .entries
            .iter()
            .map(|row| row.iter().map(|&(k, w)| e[k] * g.values[k] * w).sum())
            .collect();
        Ok(TowerFn::new(self.dst.clone(), v))
    }

    pub fn apply_l(&self, z: C64, g: &TowerFn) -> Result<TowerFn> {
        self.check(g)?;
        let e = self.factors(z);
        let v = self
            .entries
            .iter()
            .zip(&self.dst.cells)
            .map(|(row, c)| {
                row.iter()
                    .map(|&(k, w)| e[k] * g.values[k] * (w * self.src.cells[k].weight))
                    .sum::<C64>()
                    / c.weight
            })
            .collect();
        Ok(TowerFn::new(self.dst.clone(), v))
    }

    /// Transpose of `L^z`: takes cell coefficients of a functional on the target
    /// fiber to those of `f -> functional(L^z f)` on the source fiber.
    pub fn adjoint_l(&self, z: C64, functional: &[C64]) -> Vec<C64> {
        let e = self.factors(z);
        let mut out = vec![C64::new(0.0, 0.0); self.src.len()];
        for ((row, c), &a) in self.entries.iter().zip(&self.dst.cells).zip(functional) {
            for &(k, w) in row {
                out[k] += a * e[k] * (w * self.src.cells[k].weight / c.weight);
            }
        }
        out
    }

    fn check(&self, g: &TowerFn) -> Result<()> {
        if g.grid.anchor != self.src.anchor
            || g.grid.depth != self.src.depth
            || g.grid.len() != self.src.len()
        {
            return Err(Error::ResolutionMismatch(format!(
                "operator from fiber {} depth {} applied to fiber {} depth {}",
                self.src.anchor, self.src.depth, g.grid.anchor, g.grid.depth
            )));
        }
        Ok(())
    }
}

/// Operators along the orbit of the environment, with grids and steps cached per
/// fiber.
pub struct Cocycle {
    pub sys: RandomTower,
    pub depth: usize,
    pub phi: Observable,
    grids: Mutex<HashMap<i64, Arc<Grid>>>,
    steps: Mutex<HashMap<i64, Arc<Transfer>>>,
}

impl Cocycle {
    pub fn new(sys: &RandomTower, depth: usize, phi: Observable) -> Self {
        Self {
            sys: sys.clone(),
            depth,
            phi,
            grids: Mutex::new(HashMap::new()),
            steps: Mutex::new(HashMap::new()),
        }
    }

    pub fn grid(&self, anchor: i64) -> Arc<Grid> {
        if let Some(g) = self.grids.lock().expect("grid cache").get(&anchor) {
            return g.clone();
        }
        let g = Arc::new(Grid::new(&self.sys, anchor, self.depth).expect("grid within cap"));
        self.grids
            .lock()
            .expect("grid cache")
            .entry(anchor)
            .or_insert(g)
            .clone()
    }

    /// The step from `anchor` to `anchor + 1`.
    pub fn step(&self, anchor: i64) -> Arc<Transfer> {
        if let Some(t) = self.steps.lock().expect("step cache").get(&anchor) {
            return t.clone();
        }
        let t = Arc::new(Transfer::new(
            &self.sys,
            self.grid(anchor),
            self.grid(anchor + 1),
            &self.phi,
        ));
        self.steps
            .lock()
            .expect("step cache")
            .entry(anchor)
            .or_insert(t)
            .clone()
    }

    /// Drops cached grids and steps outside `lo..=hi`.
    pub fn retain(&self, lo: i64, hi: i64) {
        self.grids
            .lock()
            .expect("grid cache")
            .retain(|k, _| (lo..=hi).contains(k));
        self.steps
            .lock()
            .expect("step cache")
            .retain(|k, _| (lo..=hi).contains(k));
    }

    pub fn one(&self, anchor: i64) -> TowerFn {
        TowerFn::constant(self.grid(anchor), C64::new(1.0, 0.0))
    }

    pub fn p(&self, z: C64, g: &TowerFn) -> Result<TowerFn> {
        self.step(g.anchor()).apply_p(z, g)
    }

    pub fn l(&self, z: C64, g: &TowerFn) -> Result<TowerFn> {
        self.step(g.anchor()).apply_l(z, g)
    }

    pub fn p_n(&self, z: C64, g: &TowerFn, n: usize) -> Result<TowerFn> {
        let mut g = g.clone();
        for _ in 0..n {
            g = self.p(z, &g)?;
        }
        Ok(g)
    }

    pub fn l_n(&self, z: C64, g: &TowerFn, n: usize) -> Result<TowerFn> {
        let mut g = g.clone();
        for _ in 0..n {
            g = self.l(z, &g)?;
        }
        Ok(g)
    }

    /// `L^{z,n} g = exp(log_scale) * direction` with the direction renormalized to
    /// unit sup norm at every step.
    pub fn l_n_scaled(&self, z: C64, g: &TowerFn, n: usize) -> Result<(TowerFn, f64)> {
        let mut g = g.clone();
        let mut log_scale = 0.0;
        for _ in 0..n {
            g = self.l(z, &g)?;
            let s = g.sup();
            if s > 0.0 && s.is_finite() {
                g = g.scale(C64::new(1.0 / s, 0.0));
                log_scale += s.ln();
            }
        }
        Ok((g, log_scale))
    }

    /// `f o F` for `f` on the fiber after `anchor`, read on the grid of `anchor`
    /// one level deeper.
    pub fn koopman(&self, f: &TowerFn) -> Result<TowerFn> {
        let anchor = f.anchor() - 1;
        let fine = Arc::new(Grid::new(&self.sys, anchor, f.depth() + 1).expect("grid within cap"));
        let v = fine
            .cells
            .iter()
            .map(|c| {
                let spec = self.sys.spec(anchor - c.floor as i64);
                let r = spec.atoms[c.atom()].return_time as usize;
                let (floor, path) = if r > c.floor + 1 {
                    (c.floor + 1, c.path.clone())
                } else {
                    (0, c.path[1..].to_vec())
                };
                let p = truncate_path(&self.sys, anchor + 1, floor, &path, f.depth());
                let k = f.grid.locate(floor, &p).expect("image cell exists");
                f.values[k]
            })
            .collect();
        Ok(TowerFn::new(fine, v))
    }
}

/// One application of `P^z`. The target lives on the next fiber at the same depth.
pub fn apply_p(sys: &RandomTower, z: C64, g: &TowerFn, phi: &Observable) -> Result<TowerFn> {
    let dst = Arc::new(Grid::new(sys, g.anchor() + 1, g.depth())?);
    Transfer::new(sys, g.grid.clone(), dst, phi).apply_p(z, g)
}

/// One application of `L^z g = P^z(g v) / v`.
pub fn apply_l(sys: &RandomTower, z: C64, g: &TowerFn, phi: &Observable) -> Result<TowerFn> {
    let dst = Arc::new(Grid::new(sys, g.anchor() + 1, g.depth())?);
    Transfer::new(sys, g.grid.clone(), dst, phi).apply_l(z, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// `sup_l v_l^{-1} sup |g 1_l|`.
    pub norm_s: f64,
    /// `sup_l v_l^{-1} Lip(g 1_l)`.
    pub norm_h: f64,
    /// `norm_s + norm_h`.
    pub norm_weighted: f64,
    pub sup: f64,
    /// Unweighted Lipschitz seminorm over same-floor pairs.
    pub seminorm: f64,
    /// `sup + seminorm`.
    pub norm_li: f64,
    pub l1_m: f64,
    /// Mass of truncated floors (zero for full-height grids).
    pub residue_term: f64,
}

/// Lipschitz constant of `g` on each floor for the metric `beta^s`.
pub fn floor_lipschitz(sys: &RandomTower, g: &TowerFn) -> Vec<f64> {
    let grid = &g.grid;
    (0..grid.floors())
        .map(|l| {
            let r = grid.floor_range(l);
            let mut lip: f64 = 0.0;
            for i in r.clone() {
                for j in (i + 1)..r.end {
                    let diff = (g.values[i] - g.values[j]).norm();
                    if diff == 0.0 {
                        continue;
                    }
                    let s = grid.separation(sys, i, j);
                    debug_assert_ne!(s, INFINITE_SEPARATION);
                    lip = lip.max(diff / sys.beta.powi(s as i32));
                }
            }
            lip
        })
        .collect()
}

/// Norms of a cylinder-constant function. On this space the Lipschitz seminorm is
/// exact: two cells split at the depth where their paths first differ.
pub fn norms(sys: &RandomTower, g: &TowerFn) -> NormReport {
    let grid = &g.grid;
    let lips = floor_lipschitz(sys, g);
    let mut norm_s: f64 = 0.0;
    let mut norm_h: f64 = 0.0;
    for (l, lip) in lips.iter().enumerate() {
        let v = sys.weight(l);
        let sup_l = g.values[grid.floor_range(l)]
            .iter()
            .map(|a| a.norm())
            .fold(0.0, f64::max);
        norm_s = norm_s.max(sup_l / v);
        norm_h = norm_h.max(lip / v);
    }
    let sup = g.sup();
    let seminorm = lips.iter().copied().fold(0.0, f64::max);
    NormReport {
        norm_s,
        norm_h,
        norm_weighted: norm_s + norm_h,
        sup,
        seminorm,
        norm_li: sup + seminorm,
        l1_m: g.l1_m(),
        residue_term: 0.0,
    }
}

/// `|integral f L g dmtilde - integral g (f o F) dmtilde|` at `z = 0`.
pub fn duality_defect(co: &Cocycle, f: &TowerFn, g: &TowerFn) -> Result<f64> {
    let zero = C64::new(0.0, 0.0);
    let lhs = f.mul(&co.l(zero, g)?)?.integral();
    let fo = co.koopman(f)?;
    let gf = g.refine(&co.sys, fo.grid.clone())?;
    let rhs = gf.mul(&fo)?.integral();
    Ok((lhs - rhs).norm())
}

#[derive(Debug, Clone)]
pub struct DensityResult {
    /// Density of the equivariant measure with respect to `mtilde`.
    pub h_tilde: TowerFn,
    pub pullback_n: usize,
    /// `|| L h_tilde - h_tilde(next fiber) ||` in `L^1(mtilde)`.
    pub equivariance_defect: f64,
    /// Extremes of `h = h_tilde v`, the density with respect to `m`.
    pub min_h: f64,
    pub max_h: f64,
    pub lipschitz: f64,
    pub integral: f64,
}

impl DensityResult {
    /// `h(floor, atom)`, the density with respect to `m` on a depth-1 cell.
    pub fn h_at(&self, floor: usize, atom: usize) -> f64 {
        let k = self
            .h_tilde
            .grid
            .locate(floor, &[atom as u16])
            .expect("depth-1 density");
        self.h_tilde.values[k].re * self.h_tilde.grid.cells[k].weight
    }

    /// Equivariant masses of the cells of a finer grid of the same fiber.
    pub fn mu_masses(&self, sys: &RandomTower, fine: &Arc<Grid>) -> Vec<f64> {
        let h = self.h_tilde.refine(sys, fine.clone()).expect("same fiber");
        h.values
            .iter()
            .zip(&fine.cells)
            .map(|(v, c)| v.re * c.mtilde())
            .collect()
    }
}

/// Default cap on the pullback length.
pub const PULLBACK_MAX: usize = 1024;

/// `L^{z,n} 1` pulled back from `anchor - n`, normalized to `integral dmtilde = 1`
/// after every step.
pub fn pullback(co: &Cocycle, z: C64, anchor: i64, n: usize) -> Result<TowerFn> {
    let mut g = co.one(anchor - n as i64);
    let norm = g.integral();
    g = g.scale(norm.inv());
    for _ in 0..n {
        g = co.l(z, &g)?;
        let s = g.integral();
        if s.norm() == 0.0 || !s.norm().is_finite() {
            return Err(Error::NoConvergence(format!(
                "pullback normalization vanished at z = {z}"
            )));
        }
        g = g.scale(s.inv());
    }
    Ok(g)
}

/// Pulls `1` back from `anchor - n` under `L^z`, normalizing `integral dmtilde = 1`,
/// doubling `n` from 16 until successive results differ by less than `tol` in the
/// Lipschitz norm.
pub fn pullback_eigenfunction(
    co: &Cocycle,
    z: C64,
    anchor: i64,
    max_n: usize,
    tol: f64,
) -> Result<(TowerFn, usize)> {
    let mut n = 16.min(max_n).max(1);
    let mut prev = pullback(co, z, anchor, n)?;
    while n < max_n {
        let next_n = (2 * n).min(max_n);
        let next = pullback(co, z, anchor, next_n)?;
        let diff = norms(&co.sys, &next.sub(&prev)?).norm_li;
        prev = next;
        n = next_n;
        if diff < tol {
            break;
        }
    }
    Ok((prev, n))
}

/// Equivariant density of the fiber at `anchor`, on the atom grid.
pub fn equivariant_density(
    sys: &RandomTower,
    anchor: i64,
    pullback_n: usize,
    tol: f64,
) -> Result<DensityResult> {
    let co = Cocycle::new(sys, 1, Observable::zero());
    density_with(&co, anchor, pullback_n, tol)
}

/// As [`equivariant_density`] on an existing cocycle of any depth.
pub fn density_with(co: &Cocycle, anchor: i64, pullback_n: usize, tol: f64) -> Result<DensityResult> {
    let zero = C64::new(0.0, 0.0);
    let (h, n) = pullback_eigenfunction(co, zero, anchor, pullback_n, tol)?;
    let next = pullback(co, zero, anchor + 1, n)?;
    let pushed = co.l(zero, &h)?;
    let defect = pushed.sub(&next)?.l1_mtilde();
    if defect > 10.0 * tol.max(1e-15) && n >= pullback_n {
        return Err(Error::NoConvergence(format!(
            "equivariance defect {defect:.3e} after pullback {n}"
        )));
    }
    let hv = h.times_weight();
    let re = hv.re();
    let min_h = re.iter().copied().fold(f64::INFINITY, f64::min);
    let max_h = re.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lipschitz = norms(&co.sys, &hv).seminorm;
    Ok(DensityResult {
        integral: h.integral().re,
        h_tilde: h,
        pullback_n: n,
        equivariance_defect: defect,
        min_h,
        max_h,
        lipschitz,
    })
}

/// Densities along the orbit `anchor, anchor + 1, .., anchor + n`, obtained by
/// pushing the density at `anchor` forward with `L^0`.
pub fn densities_along(co: &Cocycle, anchor: i64, n: usize, tol: f64) -> Result<Vec<TowerFn>> {
    let d = density_with(co, anchor, PULLBACK_MAX, tol)?;
    let zero = C64::new(0.0, 0.0);
    let mut out = Vec::with_capacity(n + 1);
    out.push(d.h_tilde);
    for k in 0..n {
        let next = co.l(zero, &out[k])?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyConstants {
    /// `(1 - beta)^{-1} Lip(phi)`.
    pub a: f64,
    /// Distortion constant; zero for affine branches.
    pub c1: f64,
    /// Bound on the weighted floor sum.
    pub c2: f64,
    /// Cylinder/Jacobian comparability constant; one for affine branches.
    pub q: f64,
}

impl LyConstants {
    pub fn of(sys: &RandomTower, phi: &Observable) -> Self {
        Self {
            a: phi.lipschitz(&sys.family, sys.beta) / (1.0 - sys.beta),
            c1: 0.0,
            c2: sys.weight_bound(),
            q: 1.0,
        }
    }
}

/// Worst slack `rhs - lhs` of each Lasota–Yorke bound; `INFINITY` when a bound
/// had nothing to test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyReport {
    pub n: usize,
    pub t: f64,
    pub upper_sup: f64,
    pub upper_lip: f64,
    pub lower_sup: f64,
    pub lower_lip: f64,
    pub constants: LyConstants,
}

impl LyReport {
    pub fn min_slack(&self) -> f64 {
        self.upper_sup
            .min(self.upper_lip)
            .min(self.lower_sup)
            .min(self.lower_lip)
    }
}

/// Relative rounding allowance when comparing the two sides of a bound.
pub const LY_ROUNDING: f64 = 1e-12;

/// Evaluates both sides of the four Lasota–Yorke bounds for `P^{it,N} g`: the
/// sup and Lipschitz bounds on floors `l >= N`, reached by pure climbing, and on
/// floors `l < N`, reached through a return.
pub fn ly_check(co: &Cocycle, g: &TowerFn, n: usize, t: f64) -> Result<LyReport> {
    assert!(n >= 1);
    let sys = &co.sys;
    let k = LyConstants::of(sys, &co.phi);
    let src = norms(sys, g);
    let out = co.p_n(C64::new(0.0, t), g, n)?;
    let grid = out.grid.clone();
    let beta = sys.beta;
    let r_n = k.q * (g.l1_m() + beta.powi(n as i32) * src.norm_h * k.c2);

    let mut slack = [f64::INFINITY; 4];
    let mut worst: Option<Error> = None;
    let mut record = |slot: usize, name: &'static str, floor: usize, lhs: f64, rhs: f64| {
        let tie = LY_ROUNDING * rhs.abs().max(lhs.abs()).max(f64::MIN_POSITIVE);
        // sides equal up to rounding count as a tie
        let s = if (rhs - lhs).abs() <= tie { 0.0 } else { rhs - lhs };
        slack[slot] = slack[slot].min(s);
        if s < 0.0 && worst.is_none() {
            worst = Some(Error::BoundViolation {
                bound: name,
                floor,
                lhs,
                rhs,
            });
        }
    };
    for l in 0..grid.floors() {
        let range = grid.floor_range(l);
        let high = l >= n;
        let v = if high { sys.weight(l - n) } else { 0.0 };
        for i in range.clone() {
            let lhs = out.values[i].norm();
            if high {
                record(0, "LY1.1", l, lhs, v * src.norm_s);
            } else {
                record(2, "LY2.1", l, lhs, r_n);
            }
            for j in (i + 1)..range.end {
                let s = grid.separation(sys, i, j);
                let d = beta.powi(s as i32);
                let lhs = (out.values[i] - out.values[j]).norm();
                if high {
                    let rhs = (src.norm_h * beta.powi(n as i32)
                        + (k.a * t.abs() + 2.0 / beta) * src.norm_s)
                        * v
                        * d;
                    record(1, "LY1.2", l, lhs, rhs);
                } else {
                    let rhs = (k.c1 + 2.0 / beta + t.abs() * k.a) * r_n * d;
                    record(3, "LY2.2", l, lhs, rhs);
                }
            }
        }
    }
    if let Some(e) = worst {
        return Err(e);
    }
    Ok(LyReport {
        n,
        t,
        upper_sup: slack[0],
        upper_lip: slack[1],
        lower_sup: slack[2],
        lower_lip: slack[3],
        constants: k,
    })
}

/// Random function on a grid with entries uniform in `[-1, 1]` (or `[0, 1]`).
pub fn random_fn(grid: Arc<Grid>, rng: &mut impl Rng, nonneg: bool, complex: bool) -> TowerFn {
    let lo = if nonneg { 0.0 } else { -1.0 };
    let v = (0..grid.len())
        .map(|_| {
            let re = rng.gen_range(lo..1.0);
            let im = if complex { rng.gen_range(-1.0..1.0) } else { 0.0 };
            C64::new(re, im)
        })
        .collect();
    TowerFn::new(grid, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub n: Vec<usize>,
    pub value: Vec<f64>,
    /// Fit of `ln value` against `n`.
    pub fit: LineFit,
}

/// Values below this fraction of the largest entry are rounding noise and are left
/// out of decay fits.
pub const FIT_FLOOR: f64 = 1e-12;

impl DecayTable {
    pub fn from_rows(n: Vec<usize>, value: Vec<f64>) -> Self {
        let top = value.iter().copied().fold(0.0, f64::max);
        let (x, y): (Vec<f64>, Vec<f64>) = n
            .iter()
            .zip(&value)
            .filter(|(_, v)| **v > FIT_FLOOR * top)
            .map(|(&k, &v)| (k as f64, v.ln()))
            .unzip();
        let fit = line_fit(&x, &y);
        Self { n, value, fit }
    }

    /// Per-step decay factor `exp(slope)`.
    pub fn rate(&self) -> f64 {
        self.fit.slope.exp()
    }

    /// Number of rows used by the fit.
    pub fn fitted_rows(&self) -> usize {
        let top = self.value.iter().copied().fold(0.0, f64::max);
        self.value.iter().filter(|v| **v > FIT_FLOOR * top).count()
    }
}

/// Lower estimate of the mixing coefficient `d_k`: the largest
/// `|| L^{0,k} g - mtilde(g) h_tilde ||_{L^1(mtilde)} / ||g||_Li` over a battery of
/// nonnegative functions and a sample of fibers.
pub fn alpha_mixing_dk(
    sys: &RandomTower,
    anchors: &[i64],
    ks: &[usize],
    battery_size: usize,
    rng: &mut impl Rng,
) -> Result<DecayTable> {
    let co = Cocycle::new(sys, 1, Observable::zero());
    let zero = C64::new(0.0, 0.0);
    let mut best = vec![0.0f64; ks.len()];
    let k_max = ks.iter().copied().max().unwrap_or(0);
    for &a in anchors {
        let h = density_with(&co, a, PULLBACK_MAX, 1e-13)?.h_tilde;
        for b in 0..battery_size {
            let g = if b == 0 {
                h.clone()
            } else {
                random_fn(co.grid(a), rng, true, false)
            };
            let li = norms(sys, &g).norm_li;
            // L^k h_tilde is the density downstream, so the centered part carries
            // the whole deviation
            let mut u = g.sub(&h.scale(g.integral()))?;
            for k in 1..=k_max {
                u = co.l(zero, &u)?;
                if let Some(pos) = ks.iter().position(|&kk| kk == k) {
                    best[pos] = best[pos].max(u.l1_mtilde() / li);
                }
            }
        }
    }
    Ok(DecayTable::from_rows(ks.to_vec(), best))
}

/// `|mu(g f o F^n) - mu(g) mu(f)|` under the equivariant measure of `anchor`,
/// for atom-constant `g` and `f`.
pub fn correlation_decay(
    sys: &RandomTower,
    anchor: i64,
    g: &Observable,
    f: &Observable,
    ns: &[usize],
) -> Result<DecayTable> {
    let co = Cocycle::new(sys, 1, Observable::zero());
    let zero = C64::new(0.0, 0.0);
    let h = density_with(&co, anchor, PULLBACK_MAX, 1e-13)?.h_tilde;
    let gf = TowerFn::from_observable(co.grid(anchor), g);
    let mean_g = gf.mul(&h)?.integral();
    let mut u = gf.map(|v| v - mean_g).mul(&h)?;
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let mut values = vec![0.0; ns.len()];
    for n in 0..=n_max {
        if n > 0 {
            u = co.l(zero, &u)?;
        }
        if let Some(pos) = ns.iter().position(|&k| k == n) {
            let ff = TowerFn::from_observable(u.grid.clone(), f);
            values[pos] = ff.mul(&u)?.integral().norm();
        }
    }
    Ok(DecayTable::from_rows(ns.to_vec(), values))
}

/// Largest correlation over a sample of fibers at each lag. Single fibers of a
/// finite alphabet can decorrelate exactly after particular words, so the decay
/// envelope is read across fibers.
pub fn correlation_envelope(
    sys: &RandomTower,
    anchors: &[i64],
    g: &Observable,
    f: &Observable,
    ns: &[usize],
) -> Result<DecayTable> {
    let mut best = vec![0.0f64; ns.len()];
    for &a in anchors {
        let t = correlation_decay(sys, a, g, f, ns)?;
        for (b, v) in best.iter_mut().zip(&t.value) {
            *b = b.max(*v);
        }
    }
    Ok(DecayTable::from_rows(ns.to_vec(), best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gm3, single_atom, Environment};
    use crate::tower::{apply_f, enumerate_cylinders, TowerPoint, CYLINDER_CAP};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn single_atom_conserves_one() {
        let (fam, probs) = single_atom();
        let sys = RandomTower::new(fam, Environment::new(0, probs).unwrap()).unwrap();
        let co = Cocycle::new(&sys, 1, Observable::zero());
        let g = co.p(c(0.0), &co.one(0)).unwrap();
        assert_eq!(g.values, vec![c(1.0)]);
        let d = equivariant_density(&sys, 0, 64, 1e-13).unwrap();
        assert!((d.h_tilde.values[0] - c(1.0)).norm() < 1e-15);
        assert_eq!(d.equivariance_defect, 0.0);
    }

    #[test]
    fn p_preserves_lebesgue_integral() {
        let sys = gm3_sys(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for depth in [1, 3] {
            let co = Cocycle::new(&sys, depth, Observable::zero());
            for k in 0..100 {
                let g = random_fn(co.grid(k), &mut rng, false, true);
                let pg = co.p(c(0.0), &g).unwrap();
                assert!((pg.integral_m() - g.integral_m()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn p_matches_pointwise_preimages() {
        // at a point x of each target cell, sum exp(z phi) g / JF over the source
        // points y with F(y) = x, found by pushing sample points forward
        let sys = gm3_sys(8);
        let phi = Observable::atom_table(vec![vec![0.1, -0.7, 0.4], vec![1.0, 0.2]]);
        let co = Cocycle::new(&sys, 1, phi.clone());
        let z = C64::new(0.3, -0.2);
        let src = co.grid(0);
        let g: Vec<f64> = (0..src.len()).map(|k| 1.0 + k as f64).collect();
        let g = TowerFn::from_real(src.clone(), &g);
        let pg = co.p(z, &g).unwrap();
        let dst = co.grid(1);
        for (k, cell) in dst.cells.iter().enumerate() {
            let tgt = sys.spec(1 - cell.floor as i64).atoms[cell.atom()];
            let x = tgt.left + 0.37 * tgt.length;
            let mut expect = C64::new(0.0, 0.0);
            for (j, sc) in src.cells.iter().enumerate() {
                let a = sys.spec(-(sc.floor as i64)).atoms[sc.atom()];
                // F is affine on the source atom; invert it at x when x is covered
                let (lo, jac) = apply_f(&sys, 0, TowerPoint::new(sc.floor, a.left), 64).unwrap();
                if lo.floor != cell.floor {
                    continue;
                }
                let y = a.left + (x - lo.x) / jac;
                if y < a.left || y >= a.left + a.length {
                    continue;
                }
                let (img, _) = apply_f(&sys, 0, TowerPoint::new(sc.floor, y), 64).unwrap();
                assert!((img.x - x).abs() < 1e-12);
                let ph = phi.value(sc.floor, sc.symbol, sc.atom());
                expect += g.values[j] * (z * ph).exp() / jac;
            }
            assert!((pg.values[k] - expect).norm() < 1e-12, "cell {k}: {} vs {expect}", pg.values[k]);
        }
    }

    #[test]
    fn l_is_conjugated_p() {
        let sys = gm3_sys(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let co = Cocycle::new(&sys, 2, Observable::base_indicator());
        for k in 0..20 {
            let g = random_fn(co.grid(k), &mut rng, false, true);
            let z = C64::new(0.2, -0.4);
            let lg = co.l(z, &g).unwrap();
            let pv = co.p(z, &g.times_weight()).unwrap();
            let back = lg.times_weight();
            for (a, b) in back.values.iter().zip(&pv.values) {
                assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
            }
        }
    }

    #[test]
    fn duality_holds() {
        let sys = gm3_sys(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for depth in [1, 2] {
            let co = Cocycle::new(&sys, depth, Observable::zero());
            for k in 0..50 {
                let g = random_fn(co.grid(k), &mut rng, false, true);
                let f = random_fn(co.grid(k + 1), &mut rng, false, true);
                assert!(duality_defect(&co, &f, &g).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_examples() {
        let sys = gm3_sys(1);
        let grid = Arc::new(Grid::new(&sys, 0, 2).unwrap());
        let one = TowerFn::constant(grid.clone(), c(1.0));
        let r = norms(&sys, &one);
        assert!((r.norm_s - 1.0).abs() < 1e-15 && r.seminorm == 0.0);
        let v = TowerFn::weight(grid.clone());
        assert!((norms(&sys, &v).norm_s - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c2 = sys.weight_bound();
        for _ in 0..100 {
            let g = random_fn(grid.clone(), &mut rng, false, true);
            let r = norms(&sys, &g);
            assert!(r.l1_m <= c2 * r.norm_s);
            // ||g||_Li equals the weighted norm of g v
            let rv = norms(&sys, &g.times_weight());
            assert!((r.norm_li - rv.norm_weighted).abs() < 1e-12 * r.norm_li);
        }
    }

    #[test]
    fn density_matches_linear_solve() {
        // constant environment: the density is the fixed point of one matrix
        let (fam, _) = gm3();
        let sys = RandomTower::new(fam, Environment::constant(0, 2)).unwrap();
        let d = equivariant_density(&sys, 0, 256, 1e-14).unwrap();
        let co = Cocycle::new(&sys, 1, Observable::zero());
        let step = co.step(0);
        let n = step.src.len();
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (i, row) in step.entries.iter().enumerate() {
            for &(k, w) in row {
                m[(i, k)] += w * step.src.cells[k].weight / step.dst.cells[i].weight;
            }
        }
        let mut a = m - nalgebra::DMatrix::<f64>::identity(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        for k in 0..n {
            a[(n - 1, k)] = step.src.cells[k].mtilde();
        }
        b[n - 1] = 1.0;
        let h = a.lu().solve(&b).unwrap();
        for k in 0..n {
            assert!((d.h_tilde.values[k].re - h[k]).abs() < 1e-12);
        }
        assert!(d.min_h > 0.0);
    }

    #[test]
    fn density_is_deterministic_and_normalized() {
        let a = equivariant_density(&gm3_sys(12), 5, 256, 1e-13).unwrap();
        let b = equivariant_density(&gm3_sys(12), 5, 256, 1e-13).unwrap();
        assert_eq!(a.h_tilde.values, b.h_tilde.values);
        assert!((a.integral - 1.0).abs() < 1e-12);
        assert!(a.equivariance_defect < 1e-10);
        assert!(a.min_h > 0.0);
    }

    #[test]
    fn ly_examples() {
        let sys = gm3_sys(2);
        let phi = Observable::atom_table(vec![vec![0.0, 1.0, -0.5], vec![0.3, 0.9]]);
        let co = Cocycle::new(&sys, 3, phi);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_fn(co.grid(0), &mut rng, false, true);
        let r = ly_check(&co, &g, 3, 0.7).unwrap();
        assert!(r.min_slack() >= 0.0);
        let zero = TowerFn::constant(co.grid(0), c(0.0));
        // floors at or above n exist only for n below the tower height
        assert_eq!(r.upper_sup, f64::INFINITY);
        let r = ly_check(&co, &zero, 1, 0.7).unwrap();
        assert_eq!(r.upper_sup, 0.0);
        assert_eq!(r.lower_sup, 0.0);
    }

    #[test]
    fn mixing_coefficients_decay() {
        let sys = gm3_sys(21);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ks: Vec<usize> = (1..=20).collect();
        let d = alpha_mixing_dk(&sys, &[0, 40], &ks, 12, &mut rng).unwrap();
        assert!(d.fit.slope < 0.0);
        let zero = correlation_decay(&sys, 0, &Observable::constant(2.0), &Observable::base_indicator(), &ks).unwrap();
        assert!(zero.value.iter().all(|&v| v < 1e-14));
    }

    #[test]
    fn base_correlations_match_enumeration() {
        // mu(on base at 0 and at n) read off depth n+1 cylinders
        let sys = gm3_sys(21);
        let anchor = 4;
        let phi = Observable::base_indicator();
        let d = equivariant_density(&sys, anchor, 512, 1e-14).unwrap();
        let ns: Vec<usize> = (1..=6).collect();
        let t = correlation_decay(&sys, anchor, &phi, &phi, &ns).unwrap();
        let p0 = {
            let cyl = enumerate_cylinders(&sys, anchor, 1, &phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP).unwrap();
            cyl.iter().map(|c| c.mass_mu * c.birkhoff_sum).sum::<f64>()
        };
        let dn = |n: usize| equivariant_density(&sys, anchor + n as i64, 512, 1e-14).unwrap();
        for (k, &n) in ns.iter().enumerate() {
            let cyl = enumerate_cylinders(&sys, anchor, n + 1, &phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP).unwrap();
            let mut joint = 0.0;
            for c in cyl.iter().filter(|c| c.start_floor == 0) {
                let mut time = sys.spec(anchor).atoms[c.start_atom].return_time as usize;
                let mut hit = time == n;
                for &w in &c.word {
                    if time >= n {
                        break;
                    }
                    time += sys.spec(anchor + time as i64).atoms[w as usize].return_time as usize;
                    hit |= time == n;
                }
                if hit {
                    joint += c.mass_mu;
                }
            }
            let dd = dn(n);
            let pn: f64 = (0..sys.spec(anchor + n as i64).atoms.len())
                .map(|a| dd.h_at(0, a) * sys.spec(anchor + n as i64).atoms[a].length)
                .sum();
            let cov = (joint - p0 * pn).abs();
            assert!((t.value[k] - cov).abs() < 1e-12, "lag {n}: {} vs {cov}", t.value[k]);
        }
    }

    #[test]
    fn covariance_at_lag_zero() {
        let sys = gm3_sys(13);
        let phi = Observable::base_indicator();
        let t = correlation_decay(&sys, 3, &phi, &phi, &[0]).unwrap();
        let d = equivariant_density(&sys, 3, 512, 1e-13).unwrap();
        let cyl = enumerate_cylinders(&sys, 3, 1, &phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP).unwrap();
        let p: f64 = cyl.iter().map(|c| c.mass_mu * c.birkhoff_sum).sum();
        assert!((t.value[0] - (p - p * p)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn composition_splits(seed in 0u64..100, j in 0usize..8) {
            let sys = gm3_sys(seed);
            let co = Cocycle::new(&sys, 2, Observable::base_indicator());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_fn(co.grid(0), &mut rng, false, true);
            let z = C64::new(0.1, 0.3);
            let whole = co.l_n(z, &g, 8).unwrap();
            let split = co.l_n(z, &co.l_n(z, &g, j).unwrap(), 8 - j).unwrap();
            for (a, b) in whole.values.iter().zip(&split.values) {
                prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
            }
        }

        #[test]
        fn positivity(seed in 0u64..100, t in -1.0f64..1.0) {
            let sys = gm3_sys(seed);
            let co = Cocycle::new(&sys, 2, Observable::base_indicator());
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let g = random_fn(co.grid(0), &mut rng, true, false);
            let out = co.l_n(c(t), &g, 5).unwrap();
            prop_assert!(out.values.iter().all(|v| v.re >= 0.0 && v.im == 0.0));
        }
    }
}
