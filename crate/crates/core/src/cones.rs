//! Birkhoff cones on one fiber: membership, sampled Hilbert metric, contraction
//! certificates for `L^{0,k}` and the complex perturbation radius.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::ops::{density_with, floor_lipschitz, norms, random_fn, Cocycle, TowerFn, C64, PULLBACK_MAX};
use crate::tower::{cover_partition, CoverPartition, Grid, RandomTower};

/// Cone shape parameters. Functions live on depth-`s` cylinders, the same
/// resolution as the cover partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eps: f64,
    pub s: usize,
    /// Target shrink factor.
    pub delta: f64,
}

impl ConeParams {
    pub fn new(a: f64, b: f64, c: f64, eps: f64, s: usize) -> Self {
        Self {
            a,
            b,
            c,
            eps,
            s,
            delta: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 1.0
            && self.b > 1.0
            && self.c > 1.0
            && self.eps > 0.0
            && self.s >= 1
            && self.delta > 0.0
            && self.delta < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("cone parameters out of range: {self:?}")))
        }
    }

    pub fn shrunk(&self) -> Self {
        Self {
            a: self.delta * self.a,
            b: self.delta * self.b,
            c: self.delta * self.c,
            ..*self
        }
    }
}

/// Everything about one fiber the cone conditions need.
#[derive(Debug, Clone)]
pub struct ConeFiber {
    pub anchor: i64,
    pub grid: Arc<Grid>,
    pub partition: CoverPartition,
    /// Equivariant mass of every grid cell.
    pub mu: Vec<f64>,
    /// Partition cells as grid indices, complement last.
    pub pieces: Vec<Vec<usize>>,
    pub piece_mu: Vec<f64>,
    pub piece_mtilde: Vec<f64>,
    /// `h_tilde` on the grid.
    pub density: TowerFn,
}

impl ConeFiber {
    pub fn new(co: &Cocycle, anchor: i64, eps: f64) -> Result<Self> {
        let grid = co.grid(anchor);
        let d = density_with(co, anchor, PULLBACK_MAX, 1e-14)?;
        let density = d.h_tilde.refine(&co.sys, grid.clone())?;
        let mu: Vec<f64> = density
            .values
            .iter()
            .zip(&grid.cells)
            .map(|(h, c)| h.re * c.mtilde())
            .collect();
        let partition = cover_partition(&grid, &mu, eps)?;
        let pieces = partition.pieces();
        let piece_mu = pieces.iter().map(|p| p.iter().map(|&i| mu[i]).sum()).collect();
        let piece_mtilde = pieces
            .iter()
            .map(|p| p.iter().map(|&i| grid.cells[i].mtilde()).sum())
            .collect();
        Ok(Self {
            anchor,
            grid,
            partition,
            mu,
            pieces,
            piece_mu,
            piece_mtilde,
            density,
        })
    }

    pub fn complement(&self) -> &[usize] {
        self.pieces.last().expect("complement piece")
    }

    /// `(1 / mu(P)) integral_P g dmtilde` for every partition cell.
    pub fn averages(&self, g: &TowerFn) -> Vec<f64> {
        self.pieces
            .iter()
            .zip(&self.piece_mu)
            .map(|(p, m)| p.iter().map(|&i| g.values[i].re * self.grid.cells[i].mtilde()).sum::<f64>() / m)
            .collect()
    }

    /// `max mtilde(P) / mu(P)`.
    pub fn mass_ratio(&self) -> f64 {
        self.piece_mtilde
            .iter()
            .zip(&self.piece_mu)
            .map(|(t, m)| t / m)
            .fold(0.0, f64::max)
    }

    /// `max mu(A) / mtilde(A)` over the selected cylinders.
    pub fn inverse_mass_ratio(&self) -> f64 {
        let n = self.pieces.len() - 1;
        self.piece_mtilde[..n]
            .iter()
            .zip(&self.piece_mu[..n])
            .map(|(t, m)| m / t)
            .fold(0.0, f64::max)
    }

    fn sup_on_complement(&self, g: &TowerFn) -> f64 {
        self.complement()
            .iter()
            .map(|&i| g.values[i].norm())
            .fold(0.0, f64::max)
    }
}

/// Slack of the three cone conditions, each divided by `integral g dmtilde`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// `min_P min(avg_P, a - avg_P)`, averages normalized.
    pub averaging: f64,
    /// `b - |g| / integral`.
    pub lipschitz: f64,
    /// `c - sup_complement |g| / integral`.
    pub sup: f64,
    /// Smallest shrink factor whose cone contains `g`; infinite if none.
    pub ratio: f64,
}

impl Margins {
    pub fn is_member(&self) -> bool {
        self.min() >= 0.0
    }

    pub fn min(&self) -> f64 {
        self.averaging.min(self.lipschitz).min(self.sup)
    }
}

pub fn membership(sys: &RandomTower, fiber: &ConeFiber, params: &ConeParams, g: &TowerFn) -> Margins {
    let total = g.integral().re;
    if !(total > 0.0) {
        return Margins {
            averaging: f64::NEG_INFINITY,
            lipschitz: f64::NEG_INFINITY,
            sup: f64::NEG_INFINITY,
            ratio: f64::INFINITY,
        };
    }
    let avg: Vec<f64> = fiber.averages(g).iter().map(|v| v / total).collect();
    let lo = avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let semi = floor_lipschitz(sys, g).into_iter().fold(0.0, f64::max) / total;
    let sup = fiber.sup_on_complement(g) / total;
    let ratio = if lo < 0.0 {
        f64::INFINITY
    } else {
        (hi / params.a).max(semi / params.b).max(sup / params.c)
    };
    Margins {
        averaging: lo.min(params.a - hi),
        lipschitz: params.b - semi,
        sup: params.c - sup,
        ratio,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    Average,
    Gap,
    Difference,
    Point,
}

/// `gamma(f) = scale * integral f dmtilde + sum terms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    pub kind: FunctionalKind,
    pub scale: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Functional {
    pub fn eval(&self, f: &TowerFn) -> C64 {
        let base = f.integral() * self.scale;
        self.terms.iter().fold(base, |acc, &(i, w)| acc + f.values[i] * w)
    }
}

/// Finite sample of the functionals describing the cone on one fiber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalFamily {
    pub anchor: i64,
    pub functionals: Vec<Functional>,
    /// Sampled same-floor pairs over all such pairs.
    pub pair_coverage: f64,
    /// Distances from a sampled family only bound the true metric from below.
    pub lower_bound: bool,
}

/// Default number of same-floor pairs sampled per floor.
pub const PAIR_CAP: usize = 64;

impl FunctionalFamily {
    pub fn sample(
        sys: &RandomTower,
        fiber: &ConeFiber,
        params: &ConeParams,
        pair_cap: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let grid = &fiber.grid;
        let mut out = Vec::new();
        for (p, m) in fiber.pieces.iter().zip(&fiber.piece_mu) {
            let terms: Vec<(usize, f64)> = p.iter().map(|&i| (i, grid.cells[i].mtilde() / m)).collect();
            out.push(Functional {
                kind: FunctionalKind::Gap,
                scale: params.a,
                terms: terms.iter().map(|&(i, w)| (i, -w)).collect(),
            });
            out.push(Functional {
                kind: FunctionalKind::Average,
                scale: 0.0,
                terms,
            });
        }
        let mut total_pairs = 0usize;
        let mut taken = 0usize;
        for l in 0..grid.floors() {
            let r = grid.floor_range(l);
            let mut pairs: Vec<(usize, usize)> = r
                .clone()
                .flat_map(|i| ((i + 1)..r.end).map(move |j| (i, j)))
                .collect();
            total_pairs += pairs.len();
            pairs.shuffle(rng);
            pairs.truncate(pair_cap);
            pairs.sort_unstable();
            taken += pairs.len();
            for (i, j) in pairs {
                let d = sys.beta.powi(grid.separation(sys, i, j) as i32);
                for (x, y) in [(i, j), (j, i)] {
                    out.push(Functional {
                        kind: FunctionalKind::Difference,
                        scale: params.b,
                        terms: vec![(x, -1.0 / d), (y, 1.0 / d)],
                    });
                }
            }
        }
        let mut points = fiber.complement().to_vec();
        points.shuffle(rng);
        points.truncate(pair_cap);
        points.sort_unstable();
        for x in points {
            for sign in [1.0, -1.0] {
                out.push(Functional {
                    kind: FunctionalKind::Point,
                    scale: params.c,
                    terms: vec![(x, sign)],
                });
            }
        }
        Self {
            anchor: fiber.anchor,
            functionals: out,
            pair_coverage: if total_pairs == 0 {
                1.0
            } else {
                taken as f64 / total_pairs as f64
            },
            lower_bound: taken < total_pairs,
        }
    }

    /// Smallest `Re(conj(gamma(g)) gamma'(g))` over all pairs, divided by
    /// `|integral g|^2`. Nonnegative for members of the complexified cone.
    pub fn complex_membership(&self, g: &TowerFn) -> f64 {
        let vals: Vec<C64> = self.functionals.iter().map(|f| f.eval(g)).collect();
        let norm = g.integral().norm_sqr();
        let mut worst = f64::INFINITY;
        for u in &vals {
            for v in &vals {
                worst = worst.min((u.conj() * v).re);
            }
        }
        worst / norm
    }
}

/// Hilbert projective distance read on the sampled family. Infinite when one
/// of the functions leaves the cone.
pub fn hilbert_distance(family: &FunctionalFamily, f: &TowerFn, g: &TowerFn) -> Result<f64> {
    let mut up: f64 = 0.0;
    let mut down: f64 = 0.0;
    for gamma in &family.functionals {
        let (x, y) = (gamma.eval(f).re, gamma.eval(g).re);
        if x == 0.0 || y == 0.0 {
            return Err(Error::DegenerateRatio);
        }
        if x < 0.0 || y < 0.0 {
            return Ok(f64::INFINITY);
        }
        up = up.max(x / y);
        down = down.max(y / x);
    }
    Ok((up.ln() + down.ln()).max(0.0))
}

/// Smallest `R >= 0` with `f + R h_tilde` in the cone, for real `f`.
pub fn reproducing_shift(sys: &RandomTower, fiber: &ConeFiber, params: &ConeParams, f: &TowerFn) -> f64 {
    let total = f.integral().re;
    let avg = fiber.averages(f);
    let h = &fiber.density;
    let semi_h = floor_lipschitz(sys, h).into_iter().fold(0.0, f64::max);
    let semi_f = floor_lipschitz(sys, f).into_iter().fold(0.0, f64::max);
    let r1 = (avg.iter().copied().fold(f64::NEG_INFINITY, f64::max) - params.a * total) / (params.a - 1.0);
    let r2 = (semi_f - params.b * total) / (params.b - semi_h);
    let r3 = avg.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let r4 = fiber
        .complement()
        .iter()
        .map(|&i| (f.values[i].norm() - params.c * total) / (params.c - h.values[i].re))
        .fold(f64::NEG_INFINITY, f64::max);
    r1.max(r2).max(r3).max(r4).max(0.0)
}

/// A failed condition for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub sample: usize,
    pub margins: Margins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub params: ConeParams,
    pub anchor: i64,
    pub k: usize,
    /// Largest shrink ratio over the sampled images.
    pub delta_achieved: f64,
    /// Largest sampled distance between images, in the target cone.
    pub diameter_bound: f64,
    /// Filled in by the radius search.
    pub radius_r: Option<f64>,
    pub samples: usize,
    pub pair_coverage: f64,
    pub failures: Vec<Witness>,
    /// `max ||f||_Li / (K mtilde(f))` over the sampled members, with `K = 2 sqrt 2 (c2 + b)`.
    pub aperture_ratio: f64,
    pub aperture_k: f64,
    /// `max R(f) / (K1 ||f||_Li)` over signed test functions.
    pub reproducing_ratio: f64,
    pub k1: f64,
    /// Signed test functions whose shifted version left the cone.
    pub reproducing_failures: usize,
    /// Distance from the image of `h_tilde` to `h_tilde` on the target fiber.
    pub density_defect: f64,
    /// `-ln tanh(d / 4) / k`, the per-step rate implied by the diameter.
    pub implied_rate: f64,
}

impl ContractionCertificate {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.delta_achieved <= self.params.delta
    }
}

/// Shift added above the minimal reproducing shift, relative to `||f||_Li`.
const STRICT_SHIFT: f64 = 1e-6;

/// Random cone members: nonnegative cylinder-constant functions moved into the
/// cone by the reproducing shift.
pub fn sample_members(
    sys: &RandomTower,
    fiber: &ConeFiber,
    params: &ConeParams,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TowerFn> {
    (0..count)
        .map(|_| {
            let f = random_fn(fiber.grid.clone(), rng, true, false);
            let r = reproducing_shift(sys, fiber, params, &f) + STRICT_SHIFT * norms(sys, &f).norm_li;
            f.add(&fiber.density.scale(C64::new(r, 0.0))).expect("same grid")
        })
        .collect()
}

/// Images of sampled members under `L^{0,k}` checked against the shrunk cone.
/// Witnesses are recorded rather than raised.
pub fn evaluate_contraction(
    sys: &RandomTower,
    anchor: i64,
    k: usize,
    params: &ConeParams,
    n_samples: usize,
    seed: u64,
) -> Result<ContractionCertificate> {
    params.validate()?;
    let co = Cocycle::new(sys, params.s, Observable::zero());
    let src = ConeFiber::new(&co, anchor, params.eps)?;
    let dst = ConeFiber::new(&co, anchor + k as i64, params.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = sample_members(sys, &src, params, n_samples, &mut rng);
    let zero = C64::new(0.0, 0.0);
    let images: Vec<TowerFn> = members
        .iter()
        .map(|g| co.l_n(zero, g, k))
        .collect::<Result<_>>()?;
    let shrunk = params.shrunk();
    let mut failures = Vec::new();
    let mut delta_achieved: f64 = 0.0;
    for (i, img) in images.iter().enumerate() {
        let m = membership(sys, &dst, &shrunk, img);
        delta_achieved = delta_achieved.max(m.ratio * params.delta);
        if !m.is_member() {
            failures.push(Witness { sample: i, margins: m });
        }
    }

    let family = FunctionalFamily::sample(sys, &dst, params, PAIR_CAP, &mut rng);
    let cap = images.len().min(48);
    let mut diameter_bound: f64 = 0.0;
    for i in 0..cap {
        for j in (i + 1)..cap {
            diameter_bound = diameter_bound.max(hilbert_distance(&family, &images[i], &images[j])?);
        }
    }

    // aperture on the sampled members
    let c2 = (src.inverse_mass_ratio() * params.a + params.b * sys.beta.powi(params.s as i32)).max(params.c);
    let aperture_k = 2.0 * 2f64.sqrt() * (c2 + params.b);
    let aperture_ratio = members
        .iter()
        .map(|g| norms(sys, g).norm_li / (aperture_k * g.integral().norm()))
        .fold(0.0, f64::max);

    // reproducing property on signed functions
    let c0 = src.grid.mtilde();
    let k1 = 2.0 * (src.mass_ratio() + params.a * c0)
        .max(1.0 + params.b * c0)
        .max(1.0 + params.c * c0);
    let mut reproducing_ratio: f64 = 0.0;
    let mut reproducing_failures = 0;
    for _ in 0..n_samples {
        let f = random_fn(src.grid.clone(), &mut rng, false, false);
        let norm = norms(sys, &f).norm_li;
        let r = reproducing_shift(sys, &src, params, &f) + STRICT_SHIFT * norm;
        reproducing_ratio = reproducing_ratio.max(r / (k1 * norm));
        let g = f.add(&src.density.scale(C64::new(r, 0.0)))?;
        if !membership(sys, &src, params, &g).is_member() {
            reproducing_failures += 1;
        }
    }

    let pushed = co.l_n(zero, &src.density, k)?;
    let density_defect = pushed.sub(&dst.density)?.sup();
    let implied_rate = -(diameter_bound / 4.0).tanh().ln() / k.max(1) as f64;
    Ok(ContractionCertificate {
        params: *params,
        anchor,
        k,
        delta_achieved,
        diameter_bound,
        radius_r: None,
        samples: n_samples,
        pair_coverage: family.pair_coverage,
        failures,
        aperture_ratio,
        aperture_k,
        reproducing_ratio,
        k1,
        reproducing_failures,
        density_defect,
        implied_rate,
    })
}

/// As [`evaluate_contraction`], failing with the witness count when any image
/// leaves the shrunk cone.
pub fn certify_contraction(
    sys: &RandomTower,
    anchor: i64,
    k: usize,
    params: &ConeParams,
    n_samples: usize,
    seed: u64,
) -> Result<ContractionCertificate> {
    let cert = evaluate_contraction(sys, anchor, k, params, n_samples, seed)?;
    if cert.passed() {
        Ok(cert)
    } else {
        Err(Error::CertificationFailure {
            failures: cert.failures.len().max(1),
        })
    }
}

/// Widens `b / a`, `c / a` and `k` and halves `eps` until certification passes
/// or `rounds` attempts are used. Returns the certificate and the attempts made.
pub fn auto_certify(
    sys: &RandomTower,
    anchor: i64,
    k: usize,
    params: &ConeParams,
    n_samples: usize,
    seed: u64,
    rounds: usize,
) -> Result<(ContractionCertificate, usize)> {
    let mut p = *params;
    let mut k = k;
    let mut last = Error::CertificationFailure { failures: 0 };
    for round in 1..=rounds {
        match evaluate_contraction(sys, anchor, k, &p, n_samples, seed) {
            Ok(cert) if cert.passed() => return Ok((cert, round)),
            Ok(cert) => {
                last = Error::CertificationFailure {
                    failures: cert.failures.len().max(1),
                }
            }
            Err(e @ Error::AscovFailure { .. }) => {
                // the partition is too coarse for this eps: refine instead
                p.s += 1;
                last = e;
                continue;
            }
            Err(e) => return Err(e),
        }
        p.b *= 2.0;
        p.c *= 2.0;
        p.eps /= 2.0;
        k += k.div_ceil(2);
    }
    Err(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub r: f64,
    /// Largest perturbation ratio at `r`.
    pub eps1: f64,
    pub d0: f64,
    /// `(radius, largest ratio)` at every bisection point.
    pub ledger: Vec<(f64, f64)>,
    pub window: f64,
}

/// Number of angles on each circle `|z| = r`.
pub const RADIUS_ANGLES: usize = 8;

/// Largest ratio `|gamma(L^{z,k} f) - gamma(L^{0,k} f)| / gamma(L^{0,k} f)` over
/// the family, the members and `RADIUS_ANGLES` points with `|z| = r`.
pub fn perturbation_ratio(
    co: &Cocycle,
    family: &FunctionalFamily,
    members: &[TowerFn],
    real_images: &[TowerFn],
    k: usize,
    r: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for j in 0..RADIUS_ANGLES {
        let z = C64::from_polar(r, 2.0 * std::f64::consts::PI * j as f64 / RADIUS_ANGLES as f64);
        for (f, base) in members.iter().zip(real_images) {
            let img = co.l_n(z, f, k)?;
            for g in &family.functionals {
                let b = g.eval(base).re;
                worst = worst.max((g.eval(&img) - b).norm() / b);
            }
        }
    }
    Ok(worst)
}

/// Bisection for the largest `r <= window` with `2 eps1 (1 + cosh(d0 / 2)) < 1`.
#[allow(clippy::too_many_arguments)]
pub fn complex_radius(
    sys: &RandomTower,
    anchor: i64,
    k: usize,
    params: &ConeParams,
    phi: &Observable,
    cert: &ContractionCertificate,
    n_samples: usize,
    window: f64,
    seed: u64,
) -> Result<RadiusReport> {
    let co = Cocycle::new(sys, params.s, phi.clone());
    let src = ConeFiber::new(&co, anchor, params.eps)?;
    let dst = ConeFiber::new(&co, anchor + k as i64, params.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = sample_members(sys, &src, params, n_samples, &mut rng);
    members.push(src.density.clone());
    let zero = C64::new(0.0, 0.0);
    let real_images: Vec<TowerFn> = members
        .iter()
        .map(|g| co.l_n(zero, g, k))
        .collect::<Result<_>>()?;
    let family = FunctionalFamily::sample(sys, &dst, params, PAIR_CAP, &mut rng);
    let d0 = cert.diameter_bound;
    let bound = 1.0 / (2.0 * (1.0 + (d0 / 2.0).cosh()));
    let mut ledger = Vec::new();
    let mut ratio = |r: f64| -> Result<f64> {
        let e = perturbation_ratio(&co, &family, &members, &real_images, k, r)?;
        ledger.push((r, e));
        Ok(e)
    };
    let top = ratio(window)?;
    if top < bound {
        return Ok(RadiusReport {
            r: window,
            eps1: top,
            d0,
            ledger,
            window,
        });
    }
    let (mut lo, mut hi) = (0.0, window);
    let mut eps1 = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let e = ratio(mid)?;
        if e < bound {
            lo = mid;
            eps1 = e;
        } else {
            hi = mid;
        }
    }
    if lo < 1e-9 * window {
        return Err(Error::NoPositiveRadius);
    }
    Ok(RadiusReport {
        r: lo,
        eps1,
        d0,
        ledger,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gm3, Environment};

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    fn default_params() -> ConeParams {
        ConeParams::new(8.0, 512.0, 512.0, 0.05, 5)
    }

    fn fiber(sys: &RandomTower, anchor: i64) -> (Cocycle, ConeFiber) {
        let co = Cocycle::new(sys, 5, Observable::zero());
        let f = ConeFiber::new(&co, anchor, 0.05).unwrap();
        (co, f)
    }

    #[test]
    fn density_and_one_are_members() {
        let sys = gm3_sys(1);
        let (_, f) = fiber(&sys, 0);
        let p = default_params();
        let m = membership(&sys, &f, &p, &f.density);
        assert!(m.averaging > 0.0 && m.lipschitz > 0.0 && m.sup > 0.0, "{m:?}");
        let one = TowerFn::constant(f.grid.clone(), C64::new(1.0, 0.0));
        assert!(p.a > f.mass_ratio());
        assert!(membership(&sys, &f, &p, &one).is_member());
    }

    #[test]
    fn negative_average_breaks_first_condition() {
        let sys = gm3_sys(1);
        let (_, f) = fiber(&sys, 0);
        let p = default_params();
        let i = f.pieces[0][0];
        let mut g = f.density.clone();
        g.values[i] = C64::new(-1.0, 0.0);
        let m = membership(&sys, &f, &p, &g);
        assert!(m.averaging < 0.0);
    }

    #[test]
    fn margins_are_projective() {
        let sys = gm3_sys(1);
        let (_, f) = fiber(&sys, 0);
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = &sample_members(&sys, &f, &p, 1, &mut rng)[0];
        let a = membership(&sys, &f, &p, g);
        let b = membership(&sys, &f, &p, &g.scale(C64::new(3.7, 0.0)));
        assert!((a.averaging - b.averaging).abs() < 1e-12);
        assert!((a.lipschitz - b.lipschitz).abs() < 1e-9);
        assert!((a.sup - b.sup).abs() < 1e-9);
    }

    #[test]
    fn hilbert_distance_basics() {
        let sys = gm3_sys(1);
        let (_, f) = fiber(&sys, 0);
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fam = FunctionalFamily::sample(&sys, &f, &p, PAIR_CAP, &mut rng);
        let ms = sample_members(&sys, &f, &p, 2, &mut rng);
        let two = ms[0].scale(C64::new(2.0, 0.0));
        assert!(hilbert_distance(&fam, &ms[0], &two).unwrap() < 1e-12);
        let d1 = hilbert_distance(&fam, &ms[0], &ms[1]).unwrap();
        let d2 = hilbert_distance(&fam, &ms[1], &ms[0]).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
    }

    #[test]
    fn reproducing_shift_lands_in_cone() {
        let sys = gm3_sys(2);
        let (_, f) = fiber(&sys, 3);
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = random_fn(f.grid.clone(), &mut rng, false, false);
            let r = reproducing_shift(&sys, &f, &p, &g) * (1.0 + 1e-9) + 1e-12;
            let h = g.add(&f.density.scale(C64::new(r, 0.0))).unwrap();
            assert!(membership(&sys, &f, &p, &h).is_member());
        }
    }

    #[test]
    fn certificate_on_gm3() {
        let sys = gm3_sys(3);
        let cert = certify_contraction(&sys, 0, 12, &default_params(), 200, 1).unwrap();
        assert!(cert.delta_achieved <= 0.5);
        assert!(cert.diameter_bound.is_finite() && cert.diameter_bound > 0.0);
        assert!(cert.aperture_ratio <= 1.0);
        assert!(cert.reproducing_ratio <= 1.0 && cert.reproducing_failures == 0);
        assert!(cert.density_defect < 1e-10);
    }

    #[test]
    fn no_dynamics_no_contraction() {
        let sys = gm3_sys(3);
        let r = certify_contraction(&sys, 0, 0, &default_params(), 50, 1);
        assert!(matches!(r, Err(Error::CertificationFailure { .. })));
    }

    #[test]
    fn radius_is_positive_and_linear_at_small_z() {
        let sys = gm3_sys(3);
        let p = default_params();
        let cert = certify_contraction(&sys, 0, 12, &p, 64, 1).unwrap();
        let phi = Observable::base_indicator();
        let rep = complex_radius(&sys, 0, 12, &p, &phi, &cert, 16, 2.0, 2).unwrap();
        assert!(rep.r > 0.0);
        assert!(2.0 * rep.eps1 * (1.0 + (rep.d0 / 2.0).cosh()) < 1.0);

        let co = Cocycle::new(&sys, 5, phi);
        let src = ConeFiber::new(&co, 0, 0.05).unwrap();
        let dst = ConeFiber::new(&co, 12, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ms = sample_members(&sys, &src, &p, 8, &mut rng);
        let zero = C64::new(0.0, 0.0);
        let base: Vec<TowerFn> = ms.iter().map(|g| co.l_n(zero, g, 12).unwrap()).collect();
        let fam = FunctionalFamily::sample(&sys, &dst, &p, PAIR_CAP, &mut rng);
        let e1 = perturbation_ratio(&co, &fam, &ms, &base, 12, 1e-4).unwrap();
        let e2 = perturbation_ratio(&co, &fam, &ms, &base, 12, 2e-4).unwrap();
        assert!((e2 / e1 - 2.0).abs() < 0.05, "{e1} {e2}");
    }

    #[test]
    fn zero_observable_radius_fills_window() {
        let sys = gm3_sys(3);
        let p = default_params();
        let cert = certify_contraction(&sys, 0, 12, &p, 32, 1).unwrap();
        let rep = complex_radius(&sys, 0, 12, &p, &Observable::zero(), &cert, 8, 1.5, 2).unwrap();
        assert_eq!(rep.r, 1.5);
        assert_eq!(rep.eps1, 0.0);
    }

    #[test]
    fn complexified_members_pass_bilinear_test() {
        let sys = gm3_sys(1);
        let (_, f) = fiber(&sys, 0);
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fam = FunctionalFamily::sample(&sys, &f, &p, PAIR_CAP, &mut rng);
        let ms = sample_members(&sys, &f, &p, 2, &mut rng);
        // real members and their positive multiples
        assert!(fam.complex_membership(&ms[0]) >= 0.0);
        let rot = ms[0].scale(C64::from_polar(2.0, 0.7));
        assert!(fam.complex_membership(&rot) >= -1e-9);
    }
}
