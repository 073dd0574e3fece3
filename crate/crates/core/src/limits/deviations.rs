//! Averaged pressure, its Legendre transform, and large and moderate deviation
//! tails from the exact lattice law.

use serde::{Deserialize, Serialize};

use super::chain::{FiberChain, MeasureKind};
use super::rpf::Fiber;
use super::variance::{first_derivative, second_derivative, FD_STEP};
use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::ops::C64;
use crate::tower::RandomTower;

/// Default horizon for pressure evaluation.
pub const PRESSURE_N: usize = 2048;

/// `P(t)` as the fiber average of `(ln E e^{t S_n} - t E S_n) / n`.
pub struct Pressure {
    pub n: usize,
    pub anchors: Vec<i64>,
    fibers: Vec<Fiber>,
    sums: Vec<f64>,
}

impl Pressure {
    pub fn new(sys: &RandomTower, phi: &Observable, anchors: &[i64], n: usize) -> Result<Self> {
        let fibers: Vec<Fiber> = anchors
            .iter()
            .map(|&a| Fiber::new(sys, phi, a, 1))
            .collect::<Result<_>>()?;
        let sums = fibers
            .iter()
            .map(|f| Ok(f.fiber_means(n)?.iter().sum()))
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            anchors: anchors.to_vec(),
            fibers,
            sums,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.n as f64;
        let total: f64 = self
            .fibers
            .iter()
            .zip(&self.sums)
            .map(|(f, s)| {
                let l = f
                    .mgf(C64::new(t, 0.0), self.n, MeasureKind::Equivariant)
                    .expect("real mgf");
                (l.log_modulus - t * s) / n
            })
            .sum();
        total / self.fibers.len() as f64
    }

    pub fn derivative(&self, t: f64) -> f64 {
        first_derivative(|s| self.eval(t + s), FD_STEP)
    }

    /// `sup_{t in window} (t x - P(t))` by golden section, with the maximizer.
    pub fn legendre(&self, x: f64, window: (f64, f64)) -> (f64, f64) {
        let f = |t: f64| t * x - self.eval(t);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = window;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        while b - a > 1e-9 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d);
            }
        }
        let t = 0.5 * (a + b);
        (f(t), t)
    }

    /// Largest deviation level reachable from inside the tilt window.
    pub fn window(&self, tilt: (f64, f64)) -> f64 {
        self.derivative(tilt.1).min(-self.derivative(tilt.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureCurve {
    pub n: usize,
    pub t_grid: Vec<f64>,
    pub p_values: Vec<f64>,
    /// `P''(0)`.
    pub second_derivative_at_0: f64,
    pub first_derivative_at_0: f64,
    /// Smallest discrete second difference on the grid.
    pub min_second_difference: f64,
    /// `(x, I(x))` with `x` spanning the window.
    pub legendre: Vec<(f64, f64)>,
    /// `(x, x^2 / (2 P''(0)))`.
    pub quadratic: Vec<(f64, f64)>,
    pub tilt_window: (f64, f64),
    /// Largest admissible deviation level.
    pub window: f64,
}

pub fn pressure_and_rates(
    sys: &RandomTower,
    phi: &Observable,
    anchors: &[i64],
    n: usize,
    t_grid: &[f64],
    xs: &[f64],
) -> Result<PressureCurve> {
    let p = Pressure::new(sys, phi, anchors, n)?;
    let tilt_window = (
        t_grid.iter().copied().fold(f64::INFINITY, f64::min),
        t_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let p_values: Vec<f64> = t_grid.iter().map(|&t| p.eval(t)).collect();
    let min_second_difference = p_values
        .windows(3)
        .zip(t_grid.windows(3))
        .map(|(v, t)| {
            let h1 = t[1] - t[0];
            let h2 = t[2] - t[1];
            2.0 * (h1 * v[2] - (h1 + h2) * v[1] + h2 * v[0]) / (h1 * h2 * (h1 + h2))
        })
        .fold(f64::INFINITY, f64::min);
    let sigma2 = second_derivative(|t| p.eval(t), FD_STEP);
    let window = p.window(tilt_window);
    let legendre = xs
        .iter()
        .map(|&x| (x, p.legendre(x, tilt_window).0))
        .collect();
    let quadratic = xs.iter().map(|&x| (x, x * x / (2.0 * sigma2))).collect();
    Ok(PressureCurve {
        n,
        t_grid: t_grid.to_vec(),
        p_values,
        second_derivative_at_0: sigma2,
        first_derivative_at_0: p.derivative(0.0),
        min_second_difference,
        legendre,
        quadratic,
        tilt_window,
        window,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    Large,
    Moderate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub n: usize,
    /// `eps` for large deviations, `x` for moderate ones.
    pub level: f64,
    /// Threshold on `S_n - E S_n`.
    pub threshold: f64,
    /// Exact `ln P(S_n - E S_n >= threshold)`.
    pub log_prob: f64,
    /// `ln P / n` or `ln P / sqrt(n)`.
    pub normalized: f64,
    /// `-I(eps)` or `-x^2 / (2 Var(S_n) / n)`.
    pub target: f64,
    pub relative_error: f64,
    /// Importance-sampling estimate of `ln P` and its standard error.
    pub sampled: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub kind: DeviationKind,
    pub anchor: i64,
    pub rows: Vec<DeviationRow>,
    /// Admissible level window (large deviations only).
    pub window: Option<f64>,
}

impl DeviationReport {
    /// Rows at the largest `n`, one per level.
    pub fn last_rows(&self) -> Vec<&DeviationRow> {
        let top = self.rows.iter().map(|r| r.n).max().unwrap_or(0);
        self.rows.iter().filter(|r| r.n == top).collect()
    }
}

/// Settings shared by both deviation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSetup {
    pub anchor: i64,
    pub span: f64,
    pub ns: Vec<usize>,
    /// Rows with `n` at most this get an importance-sampling column.
    pub sampled_max_n: usize,
    pub samples: usize,
    pub seed: u64,
}

struct Row {
    n: usize,
    mean: f64,
    var: f64,
}

fn exact_rows(chain: &FiberChain, ns: &[usize]) -> Result<Vec<Row>> {
    ns.iter()
        .map(|&n| {
            let (mk, vk) = chain.law(n, 0.0).moments();
            let var = vk * chain.span * chain.span;
            if var / (n as f64) < 1e-12 {
                return Err(Error::DegenerateVariance(var / n as f64));
            }
            Ok(Row {
                n,
                mean: mk * chain.span,
                var,
            })
        })
        .collect()
}

fn tail_row(
    chain: &FiberChain,
    setup: &DeviationSetup,
    row: &Row,
    threshold: f64,
    t: f64,
) -> (f64, Option<(f64, f64)>) {
    let k0 = ((row.mean + threshold) / chain.span - 1e-9).ceil() as i64;
    let theta = t * chain.span;
    let log_prob = chain.law(row.n, theta).log_upper_tail(k0);
    let sampled = (row.n <= setup.sampled_max_n && setup.samples > 0)
        .then(|| chain.tilted_tail(row.n, theta, k0, setup.samples, setup.seed ^ row.n as u64));
    (log_prob, sampled)
}

pub fn large_deviations(
    sys: &RandomTower,
    phi: &Observable,
    pressure: &Pressure,
    tilt_window: (f64, f64),
    eps: &[f64],
    setup: &DeviationSetup,
) -> Result<DeviationReport> {
    let window = pressure.window(tilt_window);
    if let Some(&e) = eps.iter().find(|e| e.abs() > window) {
        return Err(Error::WindowExceeded { eps: e, window });
    }
    let top = setup.ns.iter().copied().max().unwrap_or(1);
    let chain = FiberChain::new(sys, setup.anchor, top, phi, setup.span, MeasureKind::Equivariant)?;
    let base = exact_rows(&chain, &setup.ns)?;
    let mut rows = Vec::new();
    for &e in eps {
        let (rate, t) = pressure.legendre(e, tilt_window);
        for r in &base {
            let (log_prob, sampled) = tail_row(&chain, setup, r, e * r.n as f64, t);
            let normalized = log_prob / r.n as f64;
            rows.push(DeviationRow {
                n: r.n,
                level: e,
                threshold: e * r.n as f64,
                log_prob,
                normalized,
                target: -rate,
                relative_error: (normalized + rate).abs() / rate,
                sampled,
            });
        }
    }
    Ok(DeviationReport {
        kind: DeviationKind::Large,
        anchor: setup.anchor,
        rows,
        window: Some(window),
    })
}

/// Deviations at scale `n^{3/4}`: `n^{-1/2} ln P(S_n - E S_n >= x n^{3/4})`
/// against `-x^2 / (2 Var(S_n) / n)`.
pub fn moderate_deviations(
    sys: &RandomTower,
    phi: &Observable,
    xs: &[f64],
    setup: &DeviationSetup,
) -> Result<DeviationReport> {
    let top = setup.ns.iter().copied().max().unwrap_or(1);
    let chain = FiberChain::new(sys, setup.anchor, top, phi, setup.span, MeasureKind::Equivariant)?;
    let base = exact_rows(&chain, &setup.ns)?;
    let mut rows = Vec::new();
    for &x in xs {
        for r in &base {
            let nf = r.n as f64;
            let sigma2 = r.var / nf;
            let threshold = x * nf.powf(0.75);
            let (log_prob, sampled) = tail_row(&chain, setup, r, threshold, threshold / (nf * sigma2));
            let normalized = log_prob / nf.sqrt();
            let target = -x * x / (2.0 * sigma2);
            rows.push(DeviationRow {
                n: r.n,
                level: x,
                threshold,
                log_prob,
                normalized,
                target,
                relative_error: ((normalized - target) / target).abs(),
                sampled,
            });
        }
    }
    Ok(DeviationReport {
        kind: DeviationKind::Moderate,
        anchor: setup.anchor,
        rows,
        window: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gm3, Environment};
    use crate::limits::quenched_variance;

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    #[test]
    fn pressure_shape() {
        let sys = gm3_sys(5);
        let phi = Observable::base_indicator();
        let anchors = [0, 1000];
        let p = Pressure::new(&sys, &phi, &anchors, 64).unwrap();
        assert!(p.eval(0.0).abs() < 1e-12);
        assert!(p.derivative(0.0).abs() < 1e-8);
        let var: f64 = anchors
            .iter()
            .map(|&a| quenched_variance(&sys, a, &phi, 64).unwrap())
            .sum::<f64>()
            / 2.0;
        let p2 = second_derivative(|t| p.eval(t), FD_STEP);
        assert!((p2 - var).abs() / var < 1e-4, "{p2} vs {var}");
        let (i0, t0) = p.legendre(0.0, (-1.0, 1.0));
        assert!(i0.abs() < 1e-10 && t0.abs() < 1e-4);
        for x in [-0.1, 0.05, 0.1] {
            assert!(p.legendre(x, (-1.0, 1.0)).0 > 0.0);
        }
    }

    #[test]
    fn curve_is_convex_with_quadratic_start() {
        let sys = gm3_sys(5);
        let grid: Vec<f64> = (-10..=10).map(|i| i as f64 / 10.0).collect();
        let c = pressure_and_rates(&sys, &Observable::base_indicator(), &[0, 500], 128, &grid, &[0.01]).unwrap();
        assert!(c.min_second_difference > -1e-8);
        let (i, q) = (c.legendre[0].1, c.quadratic[0].1);
        assert!((i - q).abs() / q < 0.05, "{i} vs {q}");
    }

    #[test]
    fn window_is_enforced() {
        let sys = gm3_sys(5);
        let phi = Observable::base_indicator();
        let p = Pressure::new(&sys, &phi, &[0], 64).unwrap();
        let setup = DeviationSetup {
            anchor: 0,
            span: 1.0,
            ns: vec![12],
            sampled_max_n: 0,
            samples: 0,
            seed: 0,
        };
        let r = large_deviations(&sys, &phi, &p, (-0.5, 0.5), &[10.0], &setup);
        assert!(matches!(r, Err(Error::WindowExceeded { .. })));
    }

    #[test]
    fn sampled_tail_agrees_with_exact() {
        let sys = gm3_sys(6);
        let phi = Observable::base_indicator();
        let setup = DeviationSetup {
            anchor: 0,
            span: 1.0,
            ns: vec![12, 128],
            sampled_max_n: 128,
            samples: 20_000,
            seed: 3,
        };
        let r = moderate_deviations(&sys, &phi, &[0.5], &setup).unwrap();
        for row in &r.rows {
            let (est, se) = row.sampled.unwrap();
            assert!((est - row.log_prob).abs() < 5.0 * se + 1e-9, "{row:?}");
        }
    }
}
