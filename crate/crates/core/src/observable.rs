//! Atom-constant observables on the tower.

use serde::{Deserialize, Serialize};

use crate::env::Family;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableKind {
    Constant { value: f64 },
    /// 1 on the base floor, 0 above it.
    BaseIndicator,
    /// One value per symbol and atom, shared by every floor above the atom.
    AtomTable { values: Vec<Vec<f64>> },
}

/// `phi(x, l) = kind(x, l) - offset`. The value depends on the floor, the symbol
/// owning the floor and the atom, never on the position inside the atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub kind: ObservableKind,
    #[serde(default)]
    pub offset: f64,
}

impl Observable {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: ObservableKind::Constant { value },
            offset: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn base_indicator() -> Self {
        Self {
            kind: ObservableKind::BaseIndicator,
            offset: 0.0,
        }
    }

    pub fn atom_table(values: Vec<Vec<f64>>) -> Self {
        Self {
            kind: ObservableKind::AtomTable { values },
            offset: 0.0,
        }
    }

    pub fn shifted(mut self, offset: f64) -> Self {
        self.offset += offset;
        self
    }

    #[inline]
    pub fn value(&self, floor: usize, symbol: usize, atom: usize) -> f64 {
        let raw = match &self.kind {
            ObservableKind::Constant { value } => *value,
            ObservableKind::BaseIndicator => {
                if floor == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            ObservableKind::AtomTable { values } => values[symbol][atom],
        };
        raw - self.offset
    }

    /// Largest and smallest value over the family.
    pub fn range(&self, family: &Family) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (s, spec) in family.symbols.iter().enumerate() {
            for (i, a) in spec.atoms.iter().enumerate() {
                for l in 0..a.return_time as usize {
                    let v = self.value(l, s, i);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }

    pub fn sup_abs(&self, family: &Family) -> f64 {
        let (lo, hi) = self.range(family);
        lo.abs().max(hi.abs())
    }

    /// Lipschitz constant for the separation metric `beta^s`. Distinct atoms of one
    /// floor separate at time 1, so only those pairs contribute.
    pub fn lipschitz(&self, family: &Family, beta: f64) -> f64 {
        let mut lip: f64 = 0.0;
        for (s, spec) in family.symbols.iter().enumerate() {
            let height = spec.max_return() as usize;
            for l in 0..height {
                let on_floor: Vec<usize> = (0..spec.atoms.len())
                    .filter(|&i| spec.atoms[i].return_time as usize > l)
                    .collect();
                for (k, &i) in on_floor.iter().enumerate() {
                    for &j in &on_floor[k + 1..] {
                        let d = (self.value(l, s, i) - self.value(l, s, j)).abs();
                        lip = lip.max(d / beta);
                    }
                }
            }
        }
        lip
    }

    /// True when every value is an integer multiple of `span` (offset included).
    pub fn is_lattice(&self, family: &Family, span: f64) -> bool {
        family.symbols.iter().enumerate().all(|(s, spec)| {
            spec.atoms.iter().enumerate().all(|(i, a)| {
                (0..a.return_time as usize).all(|l| {
                    let q = self.value(l, s, i) / span;
                    (q - q.round()).abs() < 1e-12
                })
            })
        })
    }
}
