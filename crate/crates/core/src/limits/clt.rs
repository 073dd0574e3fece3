//! Berry–Esseen and lattice local limit experiments.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::chain::{FiberChain, MeasureKind};
use super::rpf::Fiber;
use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::ops::C64;
use crate::stats::{collapse, dkw_halfwidth, kolmogorov_discrete, line_fit};
use crate::tower::RandomTower;

/// Confidence level of the Monte Carlo bands.
pub const DKW_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeRow {
    pub n: usize,
    pub method: Method,
    /// Kolmogorov distance of the standardized sum to the standard normal.
    pub distance: f64,
    /// `distance * sqrt(n)`.
    pub scaled: f64,
    /// DKW half-width for Monte Carlo rows, zero for exact ones.
    pub band: f64,
    /// Exact distance at the same `n`, for comparison with Monte Carlo rows.
    pub exact_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeReport {
    pub kind: MeasureKind,
    pub rows: Vec<BeRow>,
    /// `max scaled / min scaled` over the exact rows.
    pub exact_band_ratio: f64,
    /// Slope of `ln(scaled)` against `ln n` over the Monte Carlo rows.
    pub mc_slope: f64,
    pub samples: usize,
}

/// Kolmogorov distance of `K_n * span` standardized by its exact mean and
/// standard deviation.
fn exact_distance(chain: &FiberChain, n: usize) -> Result<(f64, f64, f64)> {
    let law = chain.law(n, 0.0);
    let (mean, var) = law.moments();
    if var < 1e-12 {
        return Err(Error::DegenerateVariance(var / n as f64));
    }
    let probs = law.probs();
    let support: Vec<f64> = (0..probs.len()).map(|i| (law.kmin + i as i64) as f64).collect();
    Ok((kolmogorov_discrete(&support, &probs, mean, var.sqrt()), mean, var))
}

#[allow(clippy::too_many_arguments)]
pub fn berry_esseen_experiment(
    sys: &RandomTower,
    anchor: i64,
    phi: &Observable,
    span: f64,
    exact_ns: &[usize],
    mc_ns: &[usize],
    samples: usize,
    seed: u64,
    kind: MeasureKind,
) -> Result<BeReport> {
    let top = exact_ns.iter().chain(mc_ns).copied().max().unwrap_or(1);
    let chain = FiberChain::new(sys, anchor, top, phi, span, kind)?;
    let mut rows = Vec::new();
    for &n in exact_ns {
        let (d, _, _) = exact_distance(&chain, n)?;
        rows.push(BeRow {
            n,
            method: Method::Exact,
            distance: d,
            scaled: d * (n as f64).sqrt(),
            band: 0.0,
            exact_distance: d,
        });
    }
    for &n in mc_ns {
        let (exact, mean, var) = exact_distance(&chain, n)?;
        let sampler = chain.sampler(n, 0.0);
        let ks = chain.sample_many(&sampler, samples, seed ^ n as u64);
        let w = 1.0 / samples as f64;
        let (support, probs) = collapse(ks.iter().map(|&k| (k as f64, w)).collect(), 0.5);
        let d = kolmogorov_discrete(&support, &probs, mean, var.sqrt());
        rows.push(BeRow {
            n,
            method: Method::MonteCarlo,
            distance: d,
            scaled: d * (n as f64).sqrt(),
            band: dkw_halfwidth(samples, DKW_ALPHA),
            exact_distance: exact,
        });
    }
    let exact: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == Method::Exact)
        .map(|r| r.scaled)
        .collect();
    let exact_band_ratio = if exact.is_empty() {
        f64::NAN
    } else {
        exact.iter().copied().fold(0.0, f64::max) / exact.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.method == Method::MonteCarlo)
        .map(|r| ((r.n as f64).ln(), r.scaled.ln()))
        .unzip();
    let mc_slope = if x.len() >= 2 { line_fit(&x, &y).slope } else { f64::NAN };
    Ok(BeReport {
        kind,
        rows,
        exact_band_ratio,
        mc_slope,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcltRow {
    pub n: usize,
    pub mean: f64,
    /// `sqrt(Var(S_n) / n)`.
    pub sigma: f64,
    /// `sup_k |sqrt(2 pi n) sigma P(S_n = k span) / span - exp(-(k span - mean)^2 / (2 n sigma^2))|`.
    pub sup_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcltReport {
    pub span: f64,
    pub rows: Vec<LcltRow>,
    /// Largest ratio of consecutive deviations.
    pub worst_ratio: f64,
    pub check_n: usize,
    /// Largest gap between inverted and enumerated probabilities at `check_n`.
    pub inversion_error: f64,
    /// `(n, sqrt(n) sup_{t in J} |E e^{i t S_n}|)`.
    pub char_decay: Vec<(usize, f64)>,
    pub char_window: (f64, f64),
}

/// Number of points of the discrete Fourier inversion.
pub const FOURIER_POINTS: usize = 256;

/// `P(K_n = k)` for `k = kmin..kmin + FOURIER_POINTS` by inverting the operator
/// characteristic function on `FOURIER_POINTS` frequencies.
pub fn fourier_law(fiber: &Fiber, span: f64, n: usize, kmin: i64) -> Result<Vec<f64>> {
    let m = FOURIER_POINTS;
    let phis: Vec<C64> = (0..m)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / m as f64;
            fiber
                .mgf(C64::new(0.0, theta / span), n, MeasureKind::Equivariant)
                .map(|l| l.value())
        })
        .collect::<Result<_>>()?;
    Ok((0..m)
        .map(|i| {
            let k = kmin + i as i64;
            let s: C64 = phis
                .iter()
                .enumerate()
                .map(|(j, &c)| c * C64::from_polar(1.0, -2.0 * PI * (j as f64) * (k as f64) / m as f64))
                .sum();
            s.re / m as f64
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn lclt_experiment(
    sys: &RandomTower,
    anchor: i64,
    phi: &Observable,
    span: f64,
    ns: &[usize],
    check_n: usize,
    char_window: (f64, f64),
    char_ns: &[usize],
) -> Result<LcltReport> {
    let fiber = Fiber::new(sys, phi, anchor, 1)?;
    let top = ns.iter().chain(char_ns).copied().max().unwrap_or(1).max(check_n);
    let chain = FiberChain::new(sys, anchor, top, phi, span, MeasureKind::Equivariant)?;
    let mut rows = Vec::new();
    for &n in ns {
        let law = chain.law(n, 0.0);
        if law.tilted.len() > FOURIER_POINTS {
            return Err(Error::InvalidSpec(format!(
                "n = {n} exceeds the {FOURIER_POINTS}-point inversion"
            )));
        }
        let (mk, vk) = law.moments();
        if vk < 1e-12 {
            return Err(Error::DegenerateVariance(vk / n as f64));
        }
        let mean = mk * span;
        let sigma = (vk * span * span / n as f64).sqrt();
        let probs = fourier_law(&fiber, span, n, law.kmin)?;
        let nf = n as f64;
        let sup_deviation = probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let x = (law.kmin + i as i64) as f64 * span;
                let g = (-(x - mean).powi(2) / (2.0 * nf * sigma * sigma)).exp();
                ((2.0 * PI * nf).sqrt() * sigma * p / span - g).abs()
            })
            .fold(0.0, f64::max);
        rows.push(LcltRow {
            n,
            mean,
            sigma,
            sup_deviation,
        });
    }
    let worst_ratio = rows
        .windows(2)
        .map(|w| w[1].sup_deviation / w[0].sup_deviation)
        .fold(0.0, f64::max);

    let law = chain.law(check_n, 0.0);
    let inverted = fourier_law(&fiber, span, check_n, law.kmin)?;
    let direct = law.probs();
    let inversion_error = inverted
        .iter()
        .enumerate()
        .map(|(i, p)| (p - direct.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);

    let grid: Vec<f64> = (0..FOURIER_POINTS)
        .map(|j| char_window.0 + (char_window.1 - char_window.0) * j as f64 / (FOURIER_POINTS - 1) as f64)
        .collect();
    let char_decay = char_ns
        .iter()
        .map(|&n| {
            let sup = grid
                .iter()
                .map(|&t| {
                    fiber
                        .mgf(C64::new(0.0, t), n, MeasureKind::Equivariant)
                        .map(|l| l.log_modulus.exp())
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok((n, (n as f64).sqrt() * sup))
        })
        .collect::<Result<_>>()?;
    Ok(LcltReport {
        span,
        rows,
        worst_ratio,
        check_n,
        inversion_error,
        char_decay,
        char_window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gm3, Environment};
    use crate::stats::std_normal_cdf;
    use crate::tower::{enumerate_cylinders, CYLINDER_CAP};

    fn gm3_sys(seed: u64) -> RandomTower {
        let (fam, probs) = gm3();
        RandomTower::new(fam, Environment::new(seed, probs).unwrap()).unwrap()
    }

    #[test]
    fn harness_on_binomial_sums() {
        // fair coin sums: the classical bound keeps sqrt(n) * distance bounded
        let mut scaled = Vec::new();
        for n in [4usize, 16, 64, 256] {
            let mut p = vec![1.0];
            for _ in 0..n {
                let mut q = vec![0.0; p.len() + 1];
                for (k, v) in p.iter().enumerate() {
                    q[k] += 0.5 * v;
                    q[k + 1] += 0.5 * v;
                }
                p = q;
            }
            let support: Vec<f64> = (0..=n).map(|k| k as f64).collect();
            let d = kolmogorov_discrete(&support, &p, n as f64 / 2.0, (n as f64).sqrt() / 2.0);
            scaled.push(d * (n as f64).sqrt());
        }
        let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scaled.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo < 1.2 && hi < 0.5, "{scaled:?}");
        assert!(std_normal_cdf(0.0) == 0.5);
    }

    #[test]
    fn be_exact_rows_and_kinds() {
        let sys = gm3_sys(11);
        let phi = Observable::base_indicator();
        let ns: Vec<usize> = (4..=16).collect();
        let eq = berry_esseen_experiment(&sys, 0, &phi, 1.0, &ns, &[32], 20_000, 1, MeasureKind::Equivariant).unwrap();
        let rf = berry_esseen_experiment(&sys, 0, &phi, 1.0, &ns, &[], 0, 1, MeasureKind::Reference).unwrap();
        assert!(eq.exact_band_ratio < 3.0);
        for (a, b) in eq.rows.iter().zip(&rf.rows) {
            assert!((a.distance - b.distance).abs() * (a.n as f64).sqrt() < 1.0);
        }
        let mc = eq.rows.last().unwrap();
        assert!((mc.distance - mc.exact_distance).abs() < 2.0 * mc.band);
    }

    #[test]
    fn inversion_matches_enumeration() {
        let sys = gm3_sys(2);
        let phi = Observable::base_indicator();
        let r = lclt_experiment(&sys, 4, &phi, 1.0, &[8, 16], 10, (0.5, PI), &[8]).unwrap();
        assert!(r.inversion_error < 1e-12);
        // and against cylinder sums directly
        let fiber = Fiber::new(&sys, &phi, 4, 1).unwrap();
        let d = &fiber.density;
        let cyl = enumerate_cylinders(&sys, 4, 10, &phi, Some(&|l, a| d.h_at(l, a)), CYLINDER_CAP).unwrap();
        let mut exact = [0.0; 11];
        for c in &cyl {
            exact[c.birkhoff_sum.round() as usize] += c.mass_mu;
        }
        let inv = fourier_law(&fiber, 1.0, 10, 0).unwrap();
        for k in 0..=10 {
            assert!((inv[k] - exact[k]).abs() < 1e-12);
        }
        assert!(inv[11..].iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn constant_observable_is_degenerate() {
        let sys = gm3_sys(2);
        let r = lclt_experiment(&sys, 0, &Observable::zero(), 1.0, &[8], 8, (0.5, PI), &[]);
        assert!(matches!(r, Err(Error::DegenerateVariance(_))));
    }
}
