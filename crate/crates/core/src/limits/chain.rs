//! The tower dynamics at atom resolution as an inhomogeneous Markov chain.
//!
//! A state is a depth-1 cell `(floor, atom)` of the fiber reached at time `j`.
//! Climbing is deterministic; a return picks the next base atom with probability
//! equal to its length. Because branches are affine and observables constant on
//! atoms, this chain carries the exact law of the Birkhoff sums.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::ops::{equivariant_density, PULLBACK_MAX};
use crate::tower::{Grid, RandomTower};

/// Which measure on the starting fiber.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    /// The equivariant measure `mu`.
    Equivariant,
    /// Lebesgue measure normalized to a probability.
    Reference,
}

#[derive(Debug, Clone)]
struct Layer {
    grid: Arc<Grid>,
    /// Lattice value of the observable on each cell.
    k: Vec<i64>,
    /// Index of the cell one floor up in the next layer, or `None` on return.
    climb: Vec<Option<usize>>,
    /// Base cells of this layer with their lengths.
    base: Vec<f64>,
}

/// The chain from the fiber at `anchor` for `n` steps, with a lattice observable
/// `phi = span * k`.
#[derive(Debug, Clone)]
pub struct FiberChain {
    pub anchor: i64,
    pub span: f64,
    pub kind: MeasureKind,
    layers: Vec<Layer>,
    init: Vec<f64>,
}

/// Law of `K_n = S_n / span`, stored tilted by `exp(theta k)` so that the bulk of
/// the stored vector sits where the tilt puts it.
#[derive(Debug, Clone)]
pub struct TiltedLaw {
    pub n: usize,
    pub theta: f64,
    /// Smallest attainable `k`.
    pub kmin: i64,
    /// Tilted probabilities, summing to one.
    pub tilted: Vec<f64>,
    /// `ln E exp(theta K_n)`.
    pub log_mgf: f64,
}

impl TiltedLaw {
    /// `ln P(K_n = kmin + i)`.
    pub fn log_prob(&self, i: usize) -> f64 {
        let k = self.kmin + i as i64;
        self.tilted[i].ln() - self.theta * k as f64 + self.log_mgf
    }

    /// `ln P(K_n >= k0)`.
    pub fn log_upper_tail(&self, k0: i64) -> f64 {
        let start = (k0 - self.kmin).max(0) as usize;
        let logs: Vec<f64> = (start..self.tilted.len())
            .filter(|&i| self.tilted[i] > 0.0)
            .map(|i| self.log_prob(i))
            .collect();
        log_sum_exp(&logs)
    }

    /// Untilted probabilities; entries below `f64::MIN_POSITIVE` underflow to 0.
    pub fn probs(&self) -> Vec<f64> {
        (0..self.tilted.len())
            .map(|i| {
                if self.tilted[i] > 0.0 {
                    self.log_prob(i).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Mean and variance of `K_n`, accurate when `theta = 0`.
    pub fn moments(&self) -> (f64, f64) {
        let p = self.probs();
        let mean: f64 = p
            .iter()
            .enumerate()
            .map(|(i, q)| q * (self.kmin + i as i64) as f64)
            .sum();
        let var: f64 = p
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let d = (self.kmin + i as i64) as f64 - mean;
                q * d * d
            })
            .sum();
        (mean, var)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Backward values of the tilted chain, used to sample paths conditioned by
/// `exp(theta K_n)` exactly.
#[derive(Debug, Clone)]
pub struct TiltedSampler {
    pub theta: f64,
    pub n: usize,
    /// `values[j][cell]`, each layer scaled to unit maximum.
    values: Vec<Vec<f64>>,
    /// `ln E exp(theta K_n)`.
    pub log_mgf: f64,
}

impl FiberChain {
    pub fn new(
        sys: &RandomTower,
        anchor: i64,
        n: usize,
        phi: &Observable,
        span: f64,
        kind: MeasureKind,
    ) -> Result<Self> {
        let grids: Vec<Arc<Grid>> = (0..=n)
            .map(|j| Grid::new(sys, anchor + j as i64, 1).map(Arc::new))
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let g = &grids[j];
            let mut k = Vec::with_capacity(g.len());
            for c in &g.cells {
                let q = phi.value(c.floor, c.symbol, c.atom()) / span;
                if (q - q.round()).abs() > 1e-9 {
                    return Err(Error::LatticeMismatch { span });
                }
                k.push(q.round() as i64);
            }
            let climb = g
                .cells
                .iter()
                .map(|c| {
                    let r = sys.family.symbols[c.symbol].atoms[c.atom()].return_time as usize;
                    if r > c.floor + 1 && j < n {
                        grids[j + 1].locate(c.floor + 1, &c.path)
                    } else {
                        None
                    }
                })
                .collect();
            let base = g.cells[g.floor_range(0)].iter().map(|c| c.mass).collect();
            layers.push(Layer {
                grid: g.clone(),
                k,
                climb,
                base,
            });
        }
        let g0 = &grids[0];
        let init = match kind {
            MeasureKind::Equivariant => {
                let d = equivariant_density(sys, anchor, PULLBACK_MAX, 1e-14)?;
                g0.cells
                    .iter()
                    .map(|c| d.h_at(c.floor, c.atom()) * c.mass)
                    .collect()
            }
            MeasureKind::Reference => {
                let total = g0.mass();
                g0.cells.iter().map(|c| c.mass / total).collect()
            }
        };
        Ok(Self {
            anchor,
            span,
            kind,
            layers,
            init,
        })
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    /// Starting distribution over the depth-1 cells of the first fiber.
    pub fn init(&self) -> &[f64] {
        &self.init
    }

    fn k_range(&self) -> (i64, i64) {
        let mut lo = i64::MAX;
        let mut hi = i64::MIN;
        for l in &self.layers {
            for &k in &l.k {
                lo = lo.min(k);
                hi = hi.max(k);
            }
        }
        (lo, hi)
    }

    /// Exact law of `K_n` for `n <= horizon`, computed forward over `(cell, k)`.
    pub fn law(&self, n: usize, theta: f64) -> TiltedLaw {
        assert!(n >= 1 && n <= self.horizon());
        let (lo, hi) = self.k_range();
        let width = (hi - lo) as usize;
        // mass[cell][i] holds k = j * lo + i after j steps
        let mut mass: Vec<Vec<f64>> = self.init.iter().map(|&p| vec![p]).collect();
        let mut log_norm = 0.0;
        for j in 0..n {
            let layer = &self.layers[j];
            let next = &self.layers[j + 1];
            let len = j * width + 1 + width;
            let mut out: Vec<Vec<f64>> = vec![vec![0.0; len]; next.grid.len()];
            let mut ret = vec![0.0; len];
            for (c, m) in mass.iter().enumerate() {
                let shift = (layer.k[c] - lo) as usize;
                let w = (theta * layer.k[c] as f64).exp();
                let dst = match layer.climb[c] {
                    Some(d) => &mut out[d],
                    None => &mut ret,
                };
                for (i, &v) in m.iter().enumerate() {
                    dst[i + shift] += w * v;
                }
            }
            for (b, &len_b) in next.base.iter().enumerate() {
                for (o, r) in out[b].iter_mut().zip(&ret) {
                    *o += len_b * r;
                }
            }
            let total: f64 = out.iter().flatten().sum();
            log_norm += total.ln();
            for v in out.iter_mut().flatten() {
                *v /= total;
            }
            mass = out;
        }
        let len = mass[0].len();
        let tilted: Vec<f64> = (0..len).map(|i| mass.iter().map(|m| m[i]).sum()).collect();
        TiltedLaw {
            n,
            theta,
            kmin: n as i64 * lo,
            tilted,
            log_mgf: log_norm,
        }
    }

    /// Backward values for sampling `n` steps under the tilt `exp(theta K_n)`.
    pub fn sampler(&self, n: usize, theta: f64) -> TiltedSampler {
        assert!(n <= self.horizon());
        let mut values = vec![Vec::new(); n + 1];
        values[n] = vec![1.0; self.layers[n].grid.len()];
        let mut log_scale = 0.0;
        for j in (0..n).rev() {
            let layer = &self.layers[j];
            let next = &values[j + 1];
            let ret: f64 = self.layers[j + 1]
                .base
                .iter()
                .zip(next)
                .map(|(l, v)| l * v)
                .sum();
            let mut v: Vec<f64> = (0..layer.grid.len())
                .map(|c| {
                    let w = (theta * layer.k[c] as f64).exp();
                    w * match layer.climb[c] {
                        Some(d) => next[d],
                        None => ret,
                    }
                })
                .collect();
            let m = v.iter().copied().fold(0.0, f64::max);
            for x in &mut v {
                *x /= m;
            }
            log_scale += m.ln();
            values[j] = v;
        }
        let z0: f64 = self.init.iter().zip(&values[0]).map(|(a, b)| a * b).sum();
        TiltedSampler {
            theta,
            n,
            values,
            log_mgf: log_scale + z0.ln(),
        }
    }

    /// Draws one path under the tilted chain and returns `K_n`.
    pub fn sample_k(&self, s: &TiltedSampler, rng: &mut impl Rng) -> i64 {
        let pick = |weights: &mut dyn Iterator<Item = f64>, total: f64, rng: &mut dyn rand::RngCore| {
            let mut u = rng.gen::<f64>() * total;
            let mut last = 0;
            for (i, w) in weights.enumerate() {
                last = i;
                if u < w {
                    return i;
                }
                u -= w;
            }
            last
        };
        let v0 = &s.values[0];
        let total: f64 = self.init.iter().zip(v0).map(|(a, b)| a * b).sum();
        let mut cell = pick(
            &mut self.init.iter().zip(v0).map(|(a, b)| a * b),
            total,
            rng,
        );
        let mut k = 0;
        for j in 0..s.n {
            let layer = &self.layers[j];
            k += layer.k[cell];
            cell = match layer.climb[cell] {
                Some(d) => d,
                None => {
                    let nb = &self.layers[j + 1].base;
                    let vn = &s.values[j + 1];
                    let total: f64 = nb.iter().zip(vn).map(|(a, b)| a * b).sum();
                    pick(&mut nb.iter().zip(vn).map(|(a, b)| a * b), total, rng)
                }
            };
        }
        k
    }

    /// `samples` draws of `K_n` under the tilt, split into fixed chunks with one
    /// random stream each so results do not depend on the thread count.
    pub fn sample_many(&self, s: &TiltedSampler, samples: usize, seed: u64) -> Vec<i64> {
        const CHUNK: usize = 8192;
        let chunks = samples.div_ceil(CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64 + 1);
                let count = CHUNK.min(samples - c * CHUNK);
                (0..count)
                    .map(|_| self.sample_k(s, &mut rng))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Importance-sampling estimate of `ln P(K_n >= k0)` with its standard error
    /// on the natural-log scale.
    pub fn tilted_tail(&self, n: usize, theta: f64, k0: i64, samples: usize, seed: u64) -> (f64, f64) {
        let s = self.sampler(n, theta);
        let ks = self.sample_many(&s, samples, seed);
        // weights exp(-theta k) relative to the largest hit
        let hits: Vec<f64> = ks
            .iter()
            .filter(|&&k| k >= k0)
            .map(|&k| -theta * k as f64)
            .collect();
        if hits.is_empty() {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        let m = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = hits.iter().map(|x| (x - m).exp()).collect();
        let mean = w.iter().sum::<f64>() / samples as f64;
        let sq = w.iter().map(|x| x * x).sum::<f64>() / samples as f64;
        let se = ((sq - mean * mean).max(0.0) / samples as f64).sqrt() / mean;
        (s.log_mgf + m + mean.ln(), se)
    }
}
