//! The bundled molecule corpus: relaxed reference geometries, perturbed copies
//! for label-free training, and the size split by heavy-atom count.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chem_io::{self, Molecule};
use crate::error::{Error, Result};

macro_rules! embedded {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../data/molecules/", $name, ".xyz")))),*]
    };
}

/// Reference geometries (Ångström XYZ text), keyed by name.
pub const REFERENCE_GEOMETRIES: &[(&str, &str)] = embedded!(
    "h2", "lih", "hf", "lif", "h2o", "nh3", "ch4", "hcn", "h2co", "c2h4", "c2h6", "ch3oh", "ch3nh2",
    "hcooh", "c3h8", "c2h5oh", "ch3och3", "c4h10", "ch3cooh", "ch3conh2", "glycine",
);

pub fn reference_molecule(name: &str) -> Result<Molecule> {
    let (_, text) = REFERENCE_GEOMETRIES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no bundled molecule `{name}`")))?;
    chem_io::parse_xyz(text)
}

pub fn reference_molecules() -> Vec<Molecule> {
    REFERENCE_GEOMETRIES.iter().map(|(n, _)| reference_molecule(n).expect("bundled geometry parses")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// At most two heavy atoms.
    Train,
    /// Exactly three heavy atoms.
    Val,
    /// Four or more heavy atoms.
    Test,
}

impl Split {
    pub fn of(m: &Molecule) -> Split {
        match m.n_heavy_atoms() {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Perturbed copies generated per reference geometry.
    pub copies: usize,
    /// Bohr.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { copies: 10, amplitude: 0.05, seed: 2024 }
    }
}

/// Perturbed copies of every reference geometry, named `<base>-<k>`.
///
/// Copy `k` of the `i`-th reference uses seed `seed + 1000 i + k`.
pub fn generate(config: &CorpusConfig) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (i, base) in reference_molecules().iter().enumerate() {
        for k in 0..config.copies {
            let seed = config.seed.wrapping_add(1000 * i as u64 + k as u64);
            let mut m = chem_io::perturb_geometry(base, config.amplitude, seed)?;
            m.name = format!("{}-{k:02}", base.name);
            out.push(m);
        }
    }
    Ok(out)
}

pub fn split(molecules: &[Molecule], which: Split) -> Vec<Molecule> {
    molecules.iter().filter(|m| Split::of(m) == which).cloned().collect()
}

/// Reads every `*.xyz` file in `dir`, sorted by file name. Molecules are
/// named after their file stem.
pub fn load_dir(dir: &Path) -> Result<Vec<Molecule>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let mut m = chem_io::parse_xyz(&std::fs::read_to_string(p)?)?;
            if let Some(stem) = p.file_stem() {
                m.name = stem.to_string_lossy().into_owned();
            }
            Ok(m)
        })
        .collect()
}

/// Writes molecules as `<name>.xyz` files into `dir`.
pub fn write_dir(dir: &Path, molecules: &[Molecule]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for m in molecules {
        std::fs::write(dir.join(format!("{}.xyz", m.name)), chem_io::emit_xyz(m))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_geometries_parse_and_split() {
        let ms = reference_molecules();
        assert_eq!(ms.len(), 21);
        let count = |s| ms.iter().filter(|m| Split::of(m) == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (13, 4, 4));
        for (m, (name, _)) in ms.iter().zip(REFERENCE_GEOMETRIES) {
            assert_eq!(&m.name, name);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = CorpusConfig { copies: 2, ..Default::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 42);
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a[0].name, "h2-00");
        assert_ne!(a[0].atoms, a[1].atoms);
    }

    #[test]
    fn dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate(&CorpusConfig { copies: 1, ..Default::default() }).unwrap();
        write_dir(dir.path(), &ms[..3]).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        let orig = ms.iter().find(|m| m.name == back[0].name).unwrap();
        for (a, b) in orig.atoms.iter().zip(&back[0].atoms) {
            for d in 0..3 {
                assert!((a.position[d] - b.position[d]).abs() < 1e-6);
            }
        }
    }
}
