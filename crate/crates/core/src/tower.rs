//! Fibered towers over the environment.
//!
//! The fiber at `anchor` is the tower whose floor `l` holds the atoms of the symbol
//! at `anchor - l` with return time above `l`. A point climbs while its return time
//! allows and otherwise lands on the base of the next fiber through the affine
//! branch of its atom.
//!
//! Cylinders of depth `n` are indexed by a path: the starting atom followed by the
//! atom chosen at every return that happens before time `n`. [`Grid`] lists all
//! depth-`D` cylinders of one fiber and is the index set of tower functions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{tail_constants, Environment, Family, SymbolSpec, TailConstants};
use crate::error::{Error, Result};
use crate::observable::Observable;

/// Default cap on enumerated cylinders.
pub const CYLINDER_CAP: usize = 10_000_000;

/// Separation time of points that never split within the horizon.
pub const INFINITE_SEPARATION: usize = usize::MAX;

/// The random system: symbol table, driving sequence and the metric/weight parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTower {
    pub family: Family,
    pub env: Environment,
    /// Floor weights are `exp(eps0 * l)`.
    pub eps0: f64,
    /// Base of the separation metric `beta^s`.
    pub beta: f64,
    pub tails: TailConstants,
}

impl RandomTower {
    /// Defaults: `eps0` is half the fitted tail rate, `beta = 1/2`.
    pub fn new(family: Family, env: Environment) -> Result<Self> {
        if env.probs.len() != family.len() {
            return Err(Error::InvalidSpec(format!(
                "{} probabilities for {} symbols",
                env.probs.len(),
                family.len()
            )));
        }
        let tails = tail_constants(&family.symbols)?;
        Ok(Self {
            eps0: tails.rate / 2.0,
            beta: 0.5,
            family,
            env,
            tails,
        })
    }

    pub fn with_eps0(mut self, eps0: f64) -> Self {
        self.eps0 = eps0;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        assert!(beta > 0.0 && beta < 1.0);
        self.beta = beta;
        self
    }

    #[inline]
    pub fn symbol(&self, j: i64) -> usize {
        self.env.symbol_at(j)
    }

    #[inline]
    pub fn spec(&self, j: i64) -> &SymbolSpec {
        &self.family.symbols[self.symbol(j)]
    }

    #[inline]
    pub fn weight(&self, floor: usize) -> f64 {
        (self.eps0 * floor as f64).exp()
    }

    /// Number of floors any fiber can have.
    pub fn height(&self) -> usize {
        self.family.max_return() as usize
    }

    /// Upper bound for the weighted floor sum of every fiber, from the tail
    /// envelope; infinite when the weights grow as fast as the tails decay.
    pub fn weight_bound(&self) -> f64 {
        let TailConstants { scale, rate } = self.tails;
        if self.eps0 >= rate {
            return f64::INFINITY;
        }
        scale * (-rate).exp() / (1.0 - (self.eps0 - rate).exp())
    }

    /// The system seen from the fiber `k` steps ahead.
    pub fn shift(&self, k: i64) -> Self {
        Self {
            env: self.env.shift(k),
            ..self.clone()
        }
    }

    /// Symbols at indices `from..from + len`, for hot loops.
    pub fn symbols(&self, from: i64, len: usize) -> Vec<usize> {
        self.env.window(from, len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorAtom {
    pub symbol: usize,
    pub atom: usize,
    pub left: f64,
    pub length: f64,
    pub return_time: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerShape {
    pub anchor: i64,
    pub l_max: usize,
    pub eps0: f64,
    pub floors: Vec<Vec<FloorAtom>>,
    pub floor_masses: Vec<f64>,
    pub total_mass: f64,
    /// Sum of `exp(eps0 l) m(floor l)` over the kept floors.
    pub weighted_sum: f64,
    /// Mass of the floors above `l_max`.
    pub residue: f64,
    /// Tail-envelope bound on `residue`.
    pub residue_bound: f64,
}

/// Floors `0..=l_max` of the fiber at `anchor`.
pub fn build_tower(sys: &RandomTower, anchor: i64, l_max: usize, eps0: f64) -> Result<TowerShape> {
    let bound = sys.clone().with_eps0(eps0).weight_bound();
    if !bound.is_finite() {
        return Err(Error::WeightTooLarge {
            sum: f64::INFINITY,
            bound,
        });
    }
    let mut floors = Vec::new();
    let mut floor_masses = Vec::new();
    let mut residue = 0.0;
    for l in 0..sys.height() {
        let s = sys.symbol(anchor - l as i64);
        let atoms: Vec<FloorAtom> = sys.family.symbols[s]
            .atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| a.return_time as usize > l)
            .map(|(i, a)| FloorAtom {
                symbol: s,
                atom: i,
                left: a.left,
                length: a.length,
                return_time: a.return_time,
            })
            .collect();
        let mass: f64 = atoms.iter().map(|a| a.length).sum();
        if l <= l_max {
            floors.push(atoms);
            floor_masses.push(mass);
        } else {
            residue += mass;
        }
    }
    let weighted_sum: f64 = floor_masses
        .iter()
        .enumerate()
        .map(|(l, m)| (eps0 * l as f64).exp() * m)
        .sum();
    if !(weighted_sum <= bound * (1.0 + 1e-12)) {
        return Err(Error::WeightTooLarge {
            sum: weighted_sum,
            bound,
        });
    }
    let TailConstants { scale, rate } = sys.tails;
    let residue_bound = scale * (-rate * (l_max + 1) as f64).exp() / (1.0 - (-rate).exp());
    Ok(TowerShape {
        anchor,
        l_max,
        eps0,
        total_mass: floor_masses.iter().sum(),
        floors,
        floor_masses,
        weighted_sum,
        residue,
        residue_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TowerPoint {
    pub floor: usize,
    pub x: f64,
}

impl TowerPoint {
    pub fn new(floor: usize, x: f64) -> Self {
        Self { floor, x }
    }
}

/// One step of the tower map from the fiber at `anchor`. Returns the image in the
/// fiber at `anchor + 1` and the Jacobian.
pub fn apply_f(
    sys: &RandomTower,
    anchor: i64,
    p: TowerPoint,
    l_max: usize,
) -> Result<(TowerPoint, f64)> {
    let spec = sys.spec(anchor - p.floor as i64);
    let a = spec.atoms[spec.locate(p.x)];
    if a.return_time as usize > p.floor + 1 {
        if p.floor + 1 > l_max {
            return Err(Error::TruncationEscape {
                floor: p.floor + 1,
                l_max,
            });
        }
        Ok((TowerPoint::new(p.floor + 1, p.x), 1.0))
    } else {
        let x = ((p.x - a.left) / a.length).clamp(0.0, 1.0 - f64::EPSILON);
        Ok((TowerPoint::new(0, x), 1.0 / a.length))
    }
}

/// First `n` with `p`, `q` in different depth-`n` cylinders, or
/// [`INFINITE_SEPARATION`] if they agree up to `horizon`.
pub fn separation_time(
    sys: &RandomTower,
    anchor: i64,
    p: TowerPoint,
    q: TowerPoint,
    horizon: usize,
) -> usize {
    let (mut p, mut q) = (p, q);
    let l_max = sys.height();
    for n in 0..horizon {
        if p.floor != q.floor {
            return n + 1;
        }
        let spec = sys.spec(anchor + n as i64 - p.floor as i64);
        if spec.locate(p.x) != spec.locate(q.x) {
            return n + 1;
        }
        let a = anchor + n as i64;
        p = apply_f(sys, a, p, l_max).expect("full-height tower").0;
        q = apply_f(sys, a, q, l_max).expect("full-height tower").0;
    }
    INFINITE_SEPARATION
}

/// A depth-`D` cylinder of one fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub floor: usize,
    /// Starting atom followed by the atoms chosen at returns before time `D`.
    pub path: Vec<u16>,
    pub symbol: usize,
    pub mass: f64,
    /// Floor weight `exp(eps0 * floor)`.
    pub weight: f64,
}

impl Cell {
    #[inline]
    pub fn atom(&self) -> usize {
        self.path[0] as usize
    }

    #[inline]
    pub fn mtilde(&self) -> f64 {
        self.mass * self.weight
    }
}

/// All depth-`depth` cylinders of the fiber at `anchor`, ordered by floor.
#[derive(Debug, Clone)]
pub struct Grid {
    pub anchor: i64,
    pub depth: usize,
    pub cells: Vec<Cell>,
    /// `floor_start[l]..floor_start[l + 1]` are the cells on floor `l`.
    pub floor_start: Vec<usize>,
    index: HashMap<(usize, Vec<u16>), usize>,
}

type PathList = Vec<(Vec<u16>, f64)>;

struct PathBuilder<'a> {
    sys: &'a RandomTower,
    memo: HashMap<(i64, usize), std::rc::Rc<PathList>>,
    count: usize,
    cap: usize,
}

impl PathBuilder<'_> {
    /// Paths of depth `depth` starting on the base of fiber `b`, with masses.
    fn base_paths(&mut self, b: i64, depth: usize) -> Result<std::rc::Rc<PathList>> {
        if let Some(p) = self.memo.get(&(b, depth)) {
            return Ok(p.clone());
        }
        let spec = self.sys.spec(b);
        let mut out = Vec::new();
        for (j, a) in spec.atoms.iter().enumerate() {
            let t = a.return_time as usize;
            if t >= depth {
                out.push((vec![j as u16], a.length));
            } else {
                let sub = self.base_paths(b + t as i64, depth - t)?;
                for (p, m) in sub.iter() {
                    let mut path = Vec::with_capacity(p.len() + 1);
                    path.push(j as u16);
                    path.extend_from_slice(p);
                    out.push((path, a.length * m));
                }
            }
            if out.len() > self.cap {
                return Err(Error::CombinatorialBlowup { cap: self.cap });
            }
        }
        let rc = std::rc::Rc::new(out);
        self.memo.insert((b, depth), rc.clone());
        Ok(rc)
    }
}

impl Grid {
    pub fn new(sys: &RandomTower, anchor: i64, depth: usize) -> Result<Self> {
        Self::with_cap(sys, anchor, depth, CYLINDER_CAP)
    }

    pub fn with_cap(sys: &RandomTower, anchor: i64, depth: usize, cap: usize) -> Result<Self> {
        assert!(depth >= 1, "cylinder depth must be at least 1");
        let mut builder = PathBuilder {
            sys,
            memo: HashMap::new(),
            count: 0,
            cap,
        };
        let mut cells = Vec::new();
        let mut floor_start = Vec::with_capacity(sys.height() + 1);
        for l in 0..sys.height() {
            floor_start.push(cells.len());
            let s = sys.symbol(anchor - l as i64);
            for (i, a) in sys.family.symbols[s].atoms.iter().enumerate() {
                let r = a.return_time as usize;
                if r <= l {
                    continue;
                }
                let t = r - l;
                let weight = sys.weight(l);
                if t >= depth {
                    cells.push(Cell {
                        floor: l,
                        path: vec![i as u16],
                        symbol: s,
                        mass: a.length,
                        weight,
                    });
                } else {
                    let sub = builder.base_paths(anchor + t as i64, depth - t)?;
                    for (p, m) in sub.iter() {
                        let mut path = Vec::with_capacity(p.len() + 1);
                        path.push(i as u16);
                        path.extend_from_slice(p);
                        cells.push(Cell {
                            floor: l,
                            path,
                            symbol: s,
                            mass: a.length * m,
                            weight,
                        });
                    }
                }
                builder.count = cells.len();
                if builder.count > cap {
                    return Err(Error::CombinatorialBlowup { cap });
                }
            }
        }
        floor_start.push(cells.len());
        let index = cells
            .iter()
            .enumerate()
            .map(|(k, c)| ((c.floor, c.path.clone()), k))
            .collect();
        Ok(Self {
            anchor,
            depth,
            cells,
            floor_start,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn floors(&self) -> usize {
        self.floor_start.len() - 1
    }

    pub fn floor_range(&self, floor: usize) -> std::ops::Range<usize> {
        self.floor_start[floor]..self.floor_start[floor + 1]
    }

    pub fn locate(&self, floor: usize, path: &[u16]) -> Option<usize> {
        self.index.get(&(floor, path.to_vec())).copied()
    }

    /// Total Lebesgue mass of the fiber.
    pub fn mass(&self) -> f64 {
        self.cells.iter().map(|c| c.mass).sum()
    }

    /// Total weighted mass `mtilde(1)`.
    pub fn mtilde(&self) -> f64 {
        self.cells.iter().map(Cell::mtilde).sum()
    }

    /// Separation time of two cells on the same floor, [`INFINITE_SEPARATION`] for
    /// a cell with itself and 1 across floors.
    pub fn separation(&self, sys: &RandomTower, i: usize, j: usize) -> usize {
        if i == j {
            return INFINITE_SEPARATION;
        }
        let (a, b) = (&self.cells[i], &self.cells[j]);
        if a.floor != b.floor || a.path[0] != b.path[0] {
            return 1;
        }
        let mut t = sys.family.symbols[a.symbol].atoms[a.atom()].return_time as usize - a.floor;
        for k in 1..a.path.len().min(b.path.len()) {
            if a.path[k] != b.path[k] {
                return t + 1;
            }
            let spec = sys.spec(self.anchor + t as i64);
            t += spec.atoms[a.path[k] as usize].return_time as usize;
        }
        // equal prefixes: a shorter path means a coarser cylinder of the other
        t.min(self.depth) + 1
    }

    /// Cell containing the point.
    pub fn cell_of(&self, sys: &RandomTower, p: TowerPoint) -> usize {
        let path = point_path(sys, self.anchor, p, self.depth);
        self.locate(p.floor, &path).expect("point lies in the tower")
    }
}

/// Path of the depth-`depth` cylinder containing `p`.
pub fn point_path(sys: &RandomTower, anchor: i64, p: TowerPoint, depth: usize) -> Vec<u16> {
    let spec = sys.spec(anchor - p.floor as i64);
    let i = spec.locate(p.x);
    let a = spec.atoms[i];
    let mut path = vec![i as u16];
    let mut t = a.return_time as usize - p.floor;
    let mut x = (p.x - a.left) / a.length;
    while t < depth {
        let spec = sys.spec(anchor + t as i64);
        let j = spec.locate(x);
        let b = spec.atoms[j];
        path.push(j as u16);
        x = ((x - b.left) / b.length).clamp(0.0, 1.0 - f64::EPSILON);
        t += b.return_time as usize;
    }
    path
}

/// Truncates a path read from `floor` of the fiber at `anchor` to the choices made
/// before time `depth`.
pub fn truncate_path(
    sys: &RandomTower,
    anchor: i64,
    floor: usize,
    path: &[u16],
    depth: usize,
) -> Vec<u16> {
    let first = sys.spec(anchor - floor as i64).atoms[path[0] as usize];
    let mut out = vec![path[0]];
    let mut t = first.return_time as usize - floor;
    let mut k = 1;
    while t < depth && k < path.len() {
        out.push(path[k]);
        t += sys.spec(anchor + t as i64).atoms[path[k] as usize].return_time as usize;
        k += 1;
    }
    out
}

/// Exact cylinder record from brute-force enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub start_floor: usize,
    pub start_atom: usize,
    /// Atoms chosen at successive returns.
    pub word: Vec<u16>,
    pub depth: usize,
    pub mass_m: f64,
    /// Mass under the equivariant measure; `NaN` when no density was supplied.
    pub mass_mu: f64,
    pub birkhoff_sum: f64,
}

/// Every depth-`depth` cylinder of the fiber at `anchor` with its exact Birkhoff
/// sum. `density(floor, atom)` is the density of the equivariant measure with
/// respect to `m` on the starting atom.
pub fn enumerate_cylinders(
    sys: &RandomTower,
    anchor: i64,
    depth: usize,
    phi: &Observable,
    density: Option<&dyn Fn(usize, usize) -> f64>,
    cap: usize,
) -> Result<Vec<Cylinder>> {
    assert!(depth >= 1);
    let h = sys.height() as i64;
    let syms = sys.symbols(anchor - h, depth + h as usize + 1);
    let sym = |j: i64| syms[(j - anchor + h) as usize];
    let mut out = Vec::new();

    struct Walk<'a> {
        sys: &'a RandomTower,
        phi: &'a Observable,
        depth: usize,
        cap: usize,
    }

    #[allow(clippy::too_many_arguments)]
    fn go(
        w: &Walk,
        sym: &dyn Fn(i64) -> usize,
        out: &mut Vec<Cylinder>,
        proto: &mut Cylinder,
        fiber: i64,
        floor: usize,
        s: usize,
        atom: usize,
        t: usize,
    ) -> Result<()> {
        let a = w.sys.family.symbols[s].atoms[atom];
        let sum_before = proto.birkhoff_sum;
        proto.birkhoff_sum += w.phi.value(floor, s, atom);
        if t + 1 == w.depth {
            if out.len() >= w.cap {
                return Err(Error::CombinatorialBlowup { cap: w.cap });
            }
            out.push(proto.clone());
        } else if a.return_time as usize > floor + 1 {
            go(w, sym, out, proto, fiber + 1, floor + 1, s, atom, t + 1)?;
        } else {
            let ns = sym(fiber + 1);
            let mass_before = proto.mass_m;
            for (j, b) in w.sys.family.symbols[ns].atoms.iter().enumerate() {
                proto.word.push(j as u16);
                proto.mass_m = mass_before * b.length;
                go(w, sym, out, proto, fiber + 1, 0, ns, j, t + 1)?;
                proto.word.pop();
            }
            proto.mass_m = mass_before;
        }
        proto.birkhoff_sum = sum_before;
        Ok(())
    }

    let walk = Walk {
        sys,
        phi,
        depth,
        cap,
    };
    for l in 0..sys.height() {
        let s = sym(anchor - l as i64);
        for (i, a) in sys.family.symbols[s].atoms.iter().enumerate() {
            if a.return_time as usize <= l {
                continue;
            }
            let mut proto = Cylinder {
                start_floor: l,
                start_atom: i,
                word: Vec::new(),
                depth,
                mass_m: a.length,
                mass_mu: f64::NAN,
                birkhoff_sum: 0.0,
            };
            let first = out.len();
            go(&walk, &sym, &mut out, &mut proto, anchor, l, s, i, 0)?;
            if let Some(dens) = density {
                let d = dens(l, i);
                for c in &mut out[first..] {
                    c.mass_mu = d * c.mass_m;
                }
            }
        }
    }
    Ok(out)
}

/// Cover partition of one fiber: selected depth-`s` cylinders plus the complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverPartition {
    pub eps: f64,
    pub s: usize,
    /// Cell indices of the selected cylinders in the depth-`s` grid.
    pub selected: Vec<usize>,
    /// Cell indices making up the complement.
    pub complement: Vec<usize>,
    pub complement_mass_m: f64,
    pub complement_mass_mtilde: f64,
    pub complement_mass_mu: f64,
    /// Smallest of `min(mu, m)` over the selected cells and the complement.
    pub delta: f64,
    pub count: usize,
}

impl CoverPartition {
    /// The cells of the partition as lists of grid indices; the complement is last.
    pub fn pieces(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.selected.iter().map(|&i| vec![i]).collect();
        out.push(self.complement.clone());
        out
    }
}

/// Greedy cover by decreasing weighted mass. `mu[k]` is the equivariant mass of
/// cell `k` of `grid`.
pub fn cover_partition(grid: &Grid, mu: &[f64], eps: f64) -> Result<CoverPartition> {
    let fail = Error::AscovFailure {
        eps,
        s: grid.depth,
    };
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid.cells[b]
            .mtilde()
            .total_cmp(&grid.cells[a].mtilde())
            .then(a.cmp(&b))
    });
    let total = grid.mtilde();
    let mut rest = total;
    let mut count = None;
    for (k, &i) in order.iter().enumerate() {
        rest -= grid.cells[i].mtilde();
        if k + 1 == order.len() {
            break;
        }
        if rest < eps {
            count = Some(k + 1);
            break;
        }
    }
    let count = count.ok_or(fail.clone())?;
    let mut selected = order[..count].to_vec();
    let mut complement = order[count..].to_vec();
    selected.sort_unstable();
    complement.sort_unstable();
    let cm: f64 = complement.iter().map(|&i| grid.cells[i].mass).sum();
    let ct: f64 = complement.iter().map(|&i| grid.cells[i].mtilde()).sum();
    let cu: f64 = complement.iter().map(|&i| mu[i]).sum();
    let delta = selected
        .iter()
        .map(|&i| mu[i].min(grid.cells[i].mass))
        .fold(cu.min(cm), f64::min);
    if !(delta > 0.0) || !(ct < eps) {
        return Err(fail);
    }
    Ok(CoverPartition {
        eps,
        s: grid.depth,
        selected,
        complement,
        complement_mass_m: cm,
        complement_mass_mtilde: ct,
        complement_mass_mu: cu,
        delta,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{geo, gm3, single_atom};
    use proptest::prelude::*;

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    fn all_a() -> RandomTower {
        let (fam, _) = gm3();
        RandomTower::new(fam, Environment::constant(0, 2)).unwrap()
    }

    fn find_anchor(sys: &RandomTower, pattern: &[usize]) -> i64 {
        (0..10_000)
            .find(|&a| {
                pattern
                    .iter()
                    .enumerate()
                    .all(|(k, &s)| sys.symbol(a - k as i64) == s)
            })
            .expect("pattern occurs")
    }

    #[test]
    fn gm3_floor_masses() {
        let sys = gm3_sys(1);
        // anchor with A at anchor, anchor-1, anchor-2
        let a = find_anchor(&sys, &[0, 0, 0]);
        let t = build_tower(&sys, a, 2, sys.eps0).unwrap();
        assert_eq!(t.floor_masses, vec![1.0, 0.5, 0.25]);
        assert!((t.total_mass - 1.75).abs() < 1e-15);
        assert_eq!(t.residue, 0.0);
    }

    #[test]
    fn single_atom_tower() {
        let (fam, probs) = single_atom();
        let sys = RandomTower::new(fam, Environment::new(0, probs).unwrap()).unwrap();
        let t = build_tower(&sys, 0, 0, sys.eps0).unwrap();
        assert_eq!(t.floor_masses, vec![1.0]);
        let cyl = enumerate_cylinders(&sys, 0, 7, &Observable::zero(), None, CYLINDER_CAP).unwrap();
        assert_eq!(cyl.len(), 1);
        assert!((cyl[0].mass_m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn geo_floors_are_geometric() {
        let (fam, probs) = geo(0.5, 12);
        let sys = RandomTower::new(fam, Environment::new(0, probs).unwrap()).unwrap();
        let t = build_tower(&sys, 5, 11, sys.eps0).unwrap();
        for (l, m) in t.floor_masses.iter().enumerate() {
            assert!((m - 2f64.powi(-(l as i32))).abs() < 1e-15);
        }
        assert!(t.weighted_sum <= sys.weight_bound());
    }

    #[test]
    fn weights_at_tail_rate_rejected() {
        let sys = gm3_sys(0);
        let eps = sys.tails.rate;
        assert!(matches!(
            build_tower(&sys, 0, 2, eps),
            Err(Error::WeightTooLarge { .. })
        ));
    }

    #[test]
    fn truncation_residue() {
        let (fam, probs) = geo(0.5, 12);
        let sys = RandomTower::new(fam, Environment::new(0, probs).unwrap()).unwrap();
        let t = build_tower(&sys, 0, 5, sys.eps0).unwrap();
        assert!((t.residue - (2f64.powi(-5) - 2f64.powi(-11))).abs() < 1e-15);
        assert!(t.residue <= t.residue_bound);
        let p = TowerPoint::new(5, 0.999);
        assert!(matches!(
            apply_f(&sys, 0, p, 5),
            Err(Error::TruncationEscape { .. })
        ));
    }

    #[test]
    fn apply_f_examples() {
        let sys = all_a();
        let (q, jac) = apply_f(&sys, 0, TowerPoint::new(0, 0.25), 2).unwrap();
        assert_eq!(q, TowerPoint::new(0, 0.5));
        assert_eq!(jac, 2.0);
        let (q, jac) = apply_f(&sys, 0, TowerPoint::new(0, 0.8), 2).unwrap();
        assert_eq!(q, TowerPoint::new(1, 0.8));
        assert_eq!(jac, 1.0);
        // three steps bring an R=3 point back to the base
        let mut p = TowerPoint::new(0, 0.8);
        for k in 0..3 {
            p = apply_f(&sys, k, p, 2).unwrap().0;
        }
        assert_eq!(p.floor, 0);
        assert!((p.x - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separation_examples() {
        let sys = gm3_sys(4);
        let p = TowerPoint::new(0, 0.1);
        assert_eq!(separation_time(&sys, 0, p, p, 30), INFINITE_SEPARATION);
        let sys = all_a();
        assert_eq!(
            separation_time(&sys, 0, TowerPoint::new(0, 0.1), TowerPoint::new(0, 0.6), 30),
            1
        );
        // both in [0, 1/2); images 0.2 and 0.9 fall in different atoms
        assert_eq!(
            separation_time(&sys, 0, TowerPoint::new(0, 0.1), TowerPoint::new(0, 0.45), 30),
            2
        );
    }

    #[test]
    fn grid_masses_and_separation_agree_with_points() {
        let sys = gm3_sys(9);
        for depth in 1..6 {
            let g = Grid::new(&sys, 3, depth).unwrap();
            let t = build_tower(&sys, 3, 2, sys.eps0).unwrap();
            assert!((g.mass() - t.total_mass).abs() < 1e-12);
            for l in 0..g.floors() {
                let r = g.floor_range(l);
                let m: f64 = g.cells[r].iter().map(|c| c.mass).sum();
                assert!((m - t.floor_masses[l]).abs() < 1e-12);
            }
        }
        // separation from paths equals separation from orbits of sample points
        let g = Grid::new(&sys, 3, 5).unwrap();
        let pts: Vec<TowerPoint> = (0..40)
            .flat_map(|k| (0..3).map(move |l| TowerPoint::new(l, (k as f64 + 0.5) / 40.0)))
            .filter(|p| {
                let spec = sys.spec(3 - p.floor as i64);
                spec.atoms[spec.locate(p.x)].return_time as usize > p.floor
            })
            .collect();
        for p in &pts {
            for q in &pts {
                if p.floor != q.floor {
                    continue;
                }
                let (i, j) = (g.cell_of(&sys, *p), g.cell_of(&sys, *q));
                let s = separation_time(&sys, 3, *p, *q, 5);
                if i == j {
                    assert_eq!(s, INFINITE_SEPARATION);
                } else {
                    assert_eq!(g.separation(&sys, i, j), s);
                }
            }
        }
    }

    #[test]
    fn enumeration_is_mass_complete() {
        let sys = gm3_sys(2);
        let t = build_tower(&sys, 0, 2, sys.eps0).unwrap();
        let one = enumerate_cylinders(&sys, 0, 1, &Observable::zero(), None, CYLINDER_CAP).unwrap();
        assert_eq!(one.len(), t.floors.iter().map(Vec::len).sum::<usize>());
        let cyl = enumerate_cylinders(&sys, 0, 10, &Observable::zero(), None, CYLINDER_CAP).unwrap();
        let m: f64 = cyl.iter().map(|c| c.mass_m).sum();
        assert!((m - t.total_mass).abs() / t.total_mass < 1e-10);
        let g = Grid::new(&sys, 0, 10).unwrap();
        assert_eq!(g.len(), cyl.len());
    }

    #[test]
    fn enumeration_cap() {
        let sys = gm3_sys(2);
        assert!(matches!(
            enumerate_cylinders(&sys, 0, 12, &Observable::zero(), None, 100),
            Err(Error::CombinatorialBlowup { cap: 100 })
        ));
    }

    #[test]
    fn cover_examples() {
        let sys = gm3_sys(5);
        let g = Grid::new(&sys, 0, 1).unwrap();
        let mu: Vec<f64> = g.cells.iter().map(|c| c.mass / g.mass()).collect();
        let biggest = g.cells.iter().map(Cell::mtilde).fold(0.0, f64::max);
        let p = cover_partition(&g, &mu, g.mtilde() - biggest + 1e-9).unwrap();
        assert_eq!(p.count, 1);
        assert!(matches!(
            cover_partition(&g, &mu, 0.0),
            Err(Error::AscovFailure { .. })
        ));
        let g2 = Grid::new(&sys, 0, 2).unwrap();
        let mu2: Vec<f64> = g2.cells.iter().map(|c| c.mass / g2.mass()).collect();
        let p = cover_partition(&g2, &mu2, 0.1).unwrap();
        assert!(p.complement_mass_mtilde < 0.1);
        for &i in &p.selected {
            assert!(mu2[i] >= p.delta && g2.cells[i].mass >= p.delta);
        }
        assert!(p.complement_mass_mu >= p.delta);
    }

    proptest! {
        #[test]
        fn ultrametric(seed in 0u64..50, a in 0usize..40, b in 0usize..40, c in 0usize..40) {
            let sys = gm3_sys(seed);
            let g = Grid::new(&sys, 0, 6).unwrap();
            let r = g.floor_range(0);
            let n = r.len();
            let (i, j, k) = (r.start + a % n, r.start + b % n, r.start + c % n);
            let d = |x, y| {
                let s = g.separation(&sys, x, y);
                if s == INFINITE_SEPARATION { 0.0 } else { sys.beta.powi(s as i32) }
            };
            prop_assert!(d(i, k) <= d(i, j).max(d(j, k)) + 1e-15);
        }

        #[test]
        fn cylinder_jacobian_comparability(seed in 0u64..50, x in 0.0f64..1.0, k in 1usize..9) {
            // m(C_k(p)) * JF^k(p) is 1 when F^k p sits on the base and the length of
            // the current atom otherwise
            let sys = gm3_sys(seed);
            let mut p = TowerPoint::new(0, x);
            let mut jac = 1.0;
            for t in 0..k {
                let (q, j) = apply_f(&sys, t as i64, p, 2).unwrap();
                p = q;
                jac *= j;
            }
            let g = Grid::new(&sys, 0, k).unwrap();
            let mass = g.cells[g.cell_of(&sys, TowerPoint::new(0, x))].mass;
            if p.floor == 0 {
                prop_assert!((mass * jac - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(mass * jac <= 1.0 + 1e-9 && mass * jac >= 0.25 - 1e-9);
            }
        }
    }
}
