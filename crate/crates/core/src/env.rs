//! The i.i.d. driving system and the per-symbol base maps.
//!
//! A symbol describes a full-branch affine map of `[0,1)`: each atom is an
//! interval sent onto the whole base by `x -> (x - left) / length`, after
//! `return_time` steps of the tower. The environment is a two-sided sequence of
//! symbols drawn lazily from a counter-based generator, so any index can be read
//! without storing history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Default tail rate used when a symbol has no mass above the base.
pub const TAIL_RATE_CAP: f64 = 4.0;

/// Default grid of cover levels checked by [`validate_family`].
pub const DEFAULT_COVER_GRID: [f64; 4] = [0.5, 0.25, 0.1, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub left: f64,
    pub length: f64,
    pub return_time: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub id: u32,
    pub atoms: Vec<Atom>,
}

impl SymbolSpec {
    pub fn new(id: u32, atoms: Vec<Atom>) -> Result<Self> {
        let spec = Self { id, atoms };
        spec.check()?;
        Ok(spec)
    }

    /// Builds a symbol from lengths and return times, laying atoms left to right.
    pub fn from_lengths(id: u32, parts: &[(f64, u32)]) -> Result<Self> {
        let mut left = 0.0;
        let mut atoms = Vec::with_capacity(parts.len());
        for &(length, return_time) in parts {
            atoms.push(Atom {
                left,
                length,
                return_time,
            });
            left += length;
        }
        Self::new(id, atoms)
    }

    pub fn check(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::InvalidSpec(format!("symbol {} has no atoms", self.id)));
        }
        let mut cursor = 0.0;
        for (i, a) in self.atoms.iter().enumerate() {
            if !(a.length > 0.0 && a.length <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "symbol {} atom {i}: length {} not in (0,1]",
                    self.id, a.length
                )));
            }
            if a.return_time == 0 {
                return Err(Error::InvalidSpec(format!(
                    "symbol {} atom {i}: return time must be >= 1",
                    self.id
                )));
            }
            if (a.left - cursor).abs() > 1e-9 || a.left < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "symbol {} atom {i}: left end {} does not continue the partition at {cursor}",
                    self.id, a.left
                )));
            }
            cursor += a.length;
        }
        if (cursor - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidSpec(format!(
                "symbol {}: atom lengths sum to {cursor}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn max_return(&self) -> u32 {
        self.atoms.iter().map(|a| a.return_time).max().unwrap_or(1)
    }

    /// Lebesgue mass of `{R >= n}` in the base.
    pub fn tail(&self, n: u32) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.return_time >= n)
            .map(|a| a.length)
            .sum()
    }

    /// Index of the atom containing `x`, clamped to the last atom at the right end.
    pub fn locate(&self, x: f64) -> usize {
        self.atoms
            .iter()
            .position(|a| x < a.left + a.length)
            .unwrap_or(self.atoms.len() - 1)
    }
}

/// The symbol table shared by every fiber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub symbols: Vec<SymbolSpec>,
}

impl Family {
    pub fn new(symbols: Vec<SymbolSpec>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidSpec("family has no symbols".into()));
        }
        for s in &symbols {
            s.check()?;
        }
        Ok(Self { symbols })
    }

    pub fn max_return(&self) -> u32 {
        self.symbols.iter().map(SymbolSpec::max_return).max().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Two-sided i.i.d. symbol sequence. `offset` realizes the shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub probs: Vec<f64>,
    pub offset: i64,
}

impl Environment {
    pub fn new(seed: u64, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidSpec(
                "symbol probabilities must be strictly positive".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidSpec(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            seed,
            probs,
            offset: 0,
        })
    }

    /// The deterministic sequence repeating symbol `k` out of `n`.
    pub fn constant(k: usize, n: usize) -> Self {
        assert!(k < n);
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        Self {
            seed: 0,
            probs,
            offset: 0,
        }
    }

    /// Symbol index at absolute position `j` of the sequence.
    pub fn symbol_at(&self, j: i64) -> usize {
        if let Some(k) = self.probs.iter().position(|&p| p == 1.0) {
            return k;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(j.wrapping_add(self.offset) as u64);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// The `k`-fold shift: `shift(k).symbol_at(j) == symbol_at(j + k)`.
    pub fn shift(&self, k: i64) -> Self {
        Self {
            offset: self.offset.wrapping_add(k),
            ..self.clone()
        }
    }

    /// Symbols at positions `from..from + len`.
    pub fn window(&self, from: i64, len: usize) -> Vec<usize> {
        (0..len as i64).map(|i| self.symbol_at(from + i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailConstants {
    /// Prefactor of the envelope `m(R >= n) <= scale * exp(-rate * n)`.
    pub scale: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverParams {
    pub eps: f64,
    /// Number of successive branch choices defining the covering words.
    pub s: usize,
    /// Largest number of atoms selected over all symbols.
    pub count: usize,
    /// Smallest selected or residual mass.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyValidationReport {
    pub aperiodicity_witness: Vec<u32>,
    pub tail_constants: TailConstants,
    pub cover_params: Vec<CoverParams>,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Checks aperiodicity, exponential tails and the lower-randomness cover on the
/// default grid of cover levels.
pub fn validate_family(specs: &[SymbolSpec], probs: &[f64]) -> Result<FamilyValidationReport> {
    validate_family_with(specs, probs, &DEFAULT_COVER_GRID)
}

pub fn validate_family_with(
    specs: &[SymbolSpec],
    probs: &[f64],
    cover_grid: &[f64],
) -> Result<FamilyValidationReport> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("family has no symbols".into()));
    }
    if probs.len() != specs.len() {
        return Err(Error::InvalidSpec(format!(
            "{} probabilities for {} symbols",
            probs.len(),
            specs.len()
        )));
    }
    Environment::new(0, probs.to_vec())?;
    for s in specs {
        s.check()?;
    }

    // return times carrying positive mass in every symbol
    let mut common: Vec<u32> = specs[0].atoms.iter().map(|a| a.return_time).collect();
    common.sort_unstable();
    common.dedup();
    for s in &specs[1..] {
        common.retain(|t| s.atoms.iter().any(|a| a.return_time == *t));
    }
    let g = common.iter().fold(0, |acc, &t| gcd(acc, t));
    if g != 1 {
        return Err(Error::NoCommonReturnTimes { gcd: g });
    }

    let tail_constants = tail_constants(specs)?;
    let cover_params = cover_grid
        .iter()
        .map(|&eps| cover_atoms(specs, eps))
        .collect::<Result<Vec<_>>>()?;

    Ok(FamilyValidationReport {
        aperiodicity_witness: common,
        tail_constants,
        cover_params,
    })
}

/// Envelope `m(R >= n) <= scale * exp(-rate * n)` valid for every symbol. The rate
/// is the slowest average decay `-ln m(R >= n) / (n - 1)` over symbols and `n >= 2`.
pub fn tail_constants(specs: &[SymbolSpec]) -> Result<TailConstants> {
    let mut rate = f64::INFINITY;
    for (k, s) in specs.iter().enumerate() {
        for n in 2..=s.max_return() {
            let t = s.tail(n);
            if t >= 1.0 - SUM_TOL {
                return Err(Error::TailViolation { symbol: k });
            }
            rate = rate.min(-t.ln() / f64::from(n - 1));
        }
    }
    if !rate.is_finite() {
        rate = TAIL_RATE_CAP;
    }
    let mut scale: f64 = 0.0;
    for s in specs {
        for n in 1..=s.max_return() {
            scale = scale.max(s.tail(n) * (rate * f64::from(n)).exp());
        }
    }
    // absorb rounding so the envelope is a true upper bound
    scale *= 1.0 + 1e-12;
    Ok(TailConstants { scale, rate })
}

/// Deepest base refinement tried when covering a level.
const COVER_DEPTH_MAX: usize = 8;
/// Budget on base words examined per level.
const COVER_WORD_CAP: usize = 2_000_000;

/// Greedy cover of the base by words of `s` successive branch choices, for the
/// smallest `s` that works: largest words first until the unselected mass drops
/// below `eps` while staying positive, in every symbol sequence of length `s`.
fn cover_atoms(specs: &[SymbolSpec], eps: f64) -> Result<CoverParams> {
    let fail = Error::AscovFailure { eps, s: 0 };
    let mut examined = 0usize;
    for s in 1..=COVER_DEPTH_MAX {
        let mut count = 0;
        let mut delta = f64::INFINITY;
        let mut ok = true;
        let n_seq = specs.len().pow(s as u32);
        for code in 0..n_seq {
            let mut seq = Vec::with_capacity(s);
            let mut c = code;
            for _ in 0..s {
                seq.push(c % specs.len());
                c /= specs.len();
            }
            let mut masses = vec![1.0];
            for &k in &seq {
                masses = masses
                    .iter()
                    .flat_map(|m| specs[k].atoms.iter().map(move |a| m * a.length))
                    .collect();
            }
            examined += masses.len();
            if examined > COVER_WORD_CAP {
                return Err(fail);
            }
            masses.sort_by(|a, b| b.total_cmp(a));
            let mut rest = 1.0;
            let mut chosen = None;
            for (j, m) in masses.iter().enumerate() {
                rest -= m;
                if rest <= SUM_TOL {
                    break;
                }
                if rest < eps {
                    chosen = Some((j + 1, rest));
                    break;
                }
            }
            match chosen {
                Some((j, rest)) => {
                    count = count.max(j);
                    delta = delta.min(rest).min(masses[j - 1]);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(CoverParams {
                eps,
                s,
                count,
                delta,
            });
        }
    }
    Err(fail)
}

/// Two symbols: `A` with lengths 1/2, 1/4, 1/4 and return times 1, 2, 3; `B` with
/// lengths 1/2, 1/2 and return times 1, 2. Equal probabilities.
pub fn gm3() -> (Family, Vec<f64>) {
    let a = SymbolSpec::from_lengths(0, &[(0.5, 1), (0.25, 2), (0.25, 3)]).expect("valid");
    let b = SymbolSpec::from_lengths(1, &[(0.5, 1), (0.5, 2)]).expect("valid");
    (Family { symbols: vec![a, b] }, vec![0.5, 0.5])
}

/// The return-time layout of [`gm3`] with non-dyadic lengths: `A` has lengths
/// 0.45, 0.3, 0.25 and `B` has 0.6, 0.4. With dyadic lengths, some finite words
/// make the centered cocycle vanish exactly; these lengths avoid that.
pub fn gm3_irregular() -> (Family, Vec<f64>) {
    let a = SymbolSpec::from_lengths(0, &[(0.45, 1), (0.3, 2), (0.25, 3)]).expect("valid");
    let b = SymbolSpec::from_lengths(1, &[(0.6, 1), (0.4, 2)]).expect("valid");
    (Family { symbols: vec![a, b] }, vec![0.5, 0.5])
}

/// One symbol with geometric return times: atom `i` has length `p (1-p)^(i-1)` and
/// return time `i`, the remainder merged into atom `i_max`.
pub fn geo(p: f64, i_max: u32) -> (Family, Vec<f64>) {
    assert!(p > 0.0 && p < 1.0 && i_max >= 1);
    let mut parts = Vec::with_capacity(i_max as usize);
    let mut used = 0.0;
    for i in 1..i_max {
        let len = p * (1.0 - p).powi(i as i32 - 1);
        parts.push((len, i));
        used += len;
    }
    parts.push((1.0 - used, i_max));
    let s = SymbolSpec::from_lengths(0, &parts).expect("valid");
    (Family { symbols: vec![s] }, vec![1.0])
}

/// The trivial family: one atom `[0,1)` returning at once.
pub fn single_atom() -> (Family, Vec<f64>) {
    let s = SymbolSpec::from_lengths(0, &[(1.0, 1)]).expect("valid");
    (Family { symbols: vec![s] }, vec![1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symbol_at_is_deterministic() {
        let env = Environment::new(7, vec![0.5, 0.5]).unwrap();
        let first = env.symbol_at(0);
        for _ in 0..10 {
            assert_eq!(env.symbol_at(0), first);
        }
    }

    #[test]
    fn degenerate_distribution() {
        let env = Environment::new(3, vec![1.0]).unwrap();
        assert!((-50..50).all(|j| env.symbol_at(j) == 0));
    }

    #[test]
    fn frequencies_follow_probs() {
        let env = Environment::new(11, vec![0.5, 0.5]).unwrap();
        let n = 100_000;
        let hits = (0..n).filter(|&j| env.symbol_at(j) == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn shift_examples() {
        let env = Environment::new(5, vec![0.3, 0.7]).unwrap();
        assert_eq!(env.shift(0), env);
        assert_eq!(env.shift(3).symbol_at(-3), env.symbol_at(0));
        let back = env.shift(2).shift(-2);
        assert!((-20..20).all(|j| back.symbol_at(j) == env.symbol_at(j)));
    }

    #[test]
    fn gm3_witness() {
        let (fam, probs) = gm3();
        let rep = validate_family(&fam.symbols, &probs).unwrap();
        assert_eq!(rep.aperiodicity_witness, vec![1, 2]);
        // exact tails are 2^{-n+1}
        assert!((rep.tail_constants.rate - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn irregular_variant_validates() {
        let (fam, probs) = gm3_irregular();
        let rep = validate_family(&fam.symbols, &probs).unwrap();
        assert_eq!(rep.aperiodicity_witness, vec![1, 2]);
    }

    #[test]
    fn period_two_is_rejected() {
        let s = SymbolSpec::from_lengths(0, &[(1.0, 2)]).unwrap();
        assert_eq!(
            validate_family(&[s], &[1.0]),
            Err(Error::NoCommonReturnTimes { gcd: 2 })
        );
    }

    #[test]
    fn geo_tail_rate() {
        let (fam, probs) = geo(0.5, 12);
        let rep = validate_family(&fam.symbols, &probs).unwrap();
        assert!(rep.tail_constants.rate >= std::f64::consts::LN_2 - 1e-6);
        let s = &fam.symbols[0];
        for n in 1..=12 {
            assert!((s.tail(n) - 2f64.powi(-(n as i32) + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn envelope_holds_exactly() {
        for (fam, probs) in [gm3(), geo(0.5, 12), geo(0.3, 9)] {
            let rep = validate_family(&fam.symbols, &probs).unwrap();
            let TailConstants { scale, rate } = rep.tail_constants;
            for s in &fam.symbols {
                for n in 1..=s.max_return() + 3 {
                    assert!(s.tail(n) <= scale * (-rate * f64::from(n)).exp());
                }
            }
        }
    }

    #[test]
    fn cover_fails_for_one_atom() {
        let (fam, probs) = single_atom();
        assert!(matches!(
            validate_family(&fam.symbols, &probs),
            Err(Error::AscovFailure { .. })
        ));
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(SymbolSpec::from_lengths(0, &[(0.5, 1), (0.4, 2)]).is_err());
        assert!(SymbolSpec::from_lengths(0, &[(0.5, 0), (0.5, 2)]).is_err());
        assert!(Environment::new(0, vec![0.5, 0.6]).is_err());
        assert!(Environment::new(0, vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn shift_equivariance(seed in any::<u64>(), k in -1000i64..1000, j in -1000i64..1000) {
            let env = Environment::new(seed, vec![0.2, 0.3, 0.5]).unwrap();
            prop_assert_eq!(env.shift(k).symbol_at(j), env.symbol_at(j + k));
        }

        #[test]
        fn cover_params_are_consistent(p in 0.2f64..0.8, imax in 3u32..10) {
            let (fam, probs) = geo(p, imax);
            if let Ok(rep) = validate_family(&fam.symbols, &probs) {
                for c in rep.cover_params {
                    prop_assert!(c.delta > 0.0);
                    prop_assert!(c.count >= 1);
                }
            }
        }
    }
}
