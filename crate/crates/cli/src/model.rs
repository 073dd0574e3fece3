//! Model files and the built-in families.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rtower::env::{geo, gm3, gm3_irregular, single_atom, Family, SymbolSpec};

/// On-disk model: a TOML document with `seed`, `probs` and a `[[symbols]]` array
/// whose entries carry `id` and `atoms = [{ left, length, return_time }, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub seed: Option<u64>,
    pub probs: Vec<f64>,
    pub symbols: Vec<SymbolSpec>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub symbols: Vec<SymbolSpec>,
    pub probs: Vec<f64>,
    pub seed: Option<u64>,
}

impl Model {
    pub fn family(&self) -> rtower::Result<Family> {
        Family::new(self.symbols.clone())
    }
}

fn builtin(name: &str) -> Option<(Family, Vec<f64>)> {
    match name {
        "gm3" => Some(gm3()),
        "gm3-irregular" => Some(gm3_irregular()),
        "geo" => Some(geo(0.5, 12)),
        "single-atom" => Some(single_atom()),
        _ => None,
    }
}

/// Resolves a built-in name or reads a TOML model file. Failures here are I/O or
/// syntax errors; the assumptions are checked separately.
pub fn load(spec: &str) -> anyhow::Result<Model> {
    if let Some((fam, probs)) = builtin(spec) {
        return Ok(Model {
            name: spec.to_string(),
            symbols: fam.symbols,
            probs,
            seed: None,
        });
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading model file {spec}"))?;
    let file: ModelFile = toml::from_str(&text).with_context(|| format!("parsing model file {spec}"))?;
    Ok(Model {
        name: spec.to_string(),
        symbols: file.symbols,
        probs: file.probs,
        seed: file.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gm3_file_matches_builtin() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/gm3.toml");
        let m = load(path).unwrap();
        let b = load("gm3").unwrap();
        assert_eq!(m.symbols, b.symbols);
        assert_eq!(m.probs, b.probs);
        assert_eq!(m.seed, Some(7));
    }

    #[test]
    fn round_trip() {
        let (fam, probs) = geo(0.5, 6);
        let file = ModelFile {
            seed: Some(3),
            probs,
            symbols: fam.symbols,
        };
        let text = toml::to_string(&file).unwrap();
        assert_eq!(toml::from_str::<ModelFile>(&text).unwrap(), file);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "probs = [1.0]\nextra = 1\n[[symbols]]\nid = 0\natoms = []\n";
        assert!(toml::from_str::<ModelFile>(text).is_err());
    }
}
