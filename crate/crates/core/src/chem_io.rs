//! Molecular geometries, XYZ I/O, Gaussian-94 basis parsing and geometry
//! augmentation.
//!
//! Everything past the XYZ boundary is in Bohr.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANGSTROM_TO_BOHR: f64 = 1.8897259886;

/// Smallest allowed interatomic distance, Bohr.
pub const MIN_DISTANCE: f64 = 0.1;

const ELEMENTS: [&str; 10] = ["H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne"];

/// Embedded STO-3G basis for H, Li, C, N, O, F.
pub const STO3G: &str = include_str!("../data/sto-3g.g94");

pub fn element_symbol(z: u32) -> Option<&'static str> {
    ELEMENTS.get((z as usize).checked_sub(1)?).copied()
}

pub fn atomic_number(symbol: &str) -> Option<u32> {
    ELEMENTS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(symbol))
        .map(|i| i as u32 + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub atomic_number: u32,
    /// Bohr.
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub name: String,
    pub atoms: Vec<Atom>,
    pub charge: i32,
}

impl Molecule {
    /// Builds a neutral molecule and checks the closed-shell and distance invariants.
    pub fn new(name: impl Into<String>, atoms: Vec<Atom>) -> Result<Self> {
        let m = Molecule { name: name.into(), atoms, charge: 0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Geometry("molecule has no atoms".into()));
        }
        if self.charge != 0 {
            return Err(Error::Geometry("only neutral molecules are supported".into()));
        }
        if let Some(d) = self.min_distance() {
            if d <= MIN_DISTANCE {
                return Err(Error::Geometry(format!(
                    "atoms closer than {MIN_DISTANCE} Bohr ({d:.4})"
                )));
            }
        }
        let n = self.n_electrons();
        if n % 2 != 0 {
            return Err(Error::OddElectronCount { line: 0, electrons: n });
        }
        Ok(())
    }

    pub fn n_electrons(&self) -> i64 {
        self.atoms.iter().map(|a| a.atomic_number as i64).sum::<i64>() - self.charge as i64
    }

    pub fn n_heavy_atoms(&self) -> usize {
        self.atoms.iter().filter(|a| a.atomic_number > 1).count()
    }

    pub fn min_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, a) in self.atoms.iter().enumerate() {
            for b in &self.atoms[i + 1..] {
                let d = distance(&a.position, &b.position);
                best = Some(best.map_or(d, |x| x.min(d)));
            }
        }
        best
    }

    pub fn nuclear_repulsion(&self) -> f64 {
        let mut e = 0.0;
        for (i, a) in self.atoms.iter().enumerate() {
            for b in &self.atoms[..i] {
                e += (a.atomic_number * b.atomic_number) as f64 / distance(&a.position, &b.position);
            }
        }
        e
    }

    pub fn translated(&self, shift: [f64; 3]) -> Molecule {
        let mut m = self.clone();
        for a in &mut m.atoms {
            for k in 0..3 {
                a.position[k] += shift[k];
            }
        }
        m
    }

    /// Applies `r` to every position (r · x).
    pub fn rotated(&self, r: &Matrix3<f64>) -> Molecule {
        let mut m = self.clone();
        for a in &mut m.atoms {
            let p = r * nalgebra::Vector3::from(a.position);
            a.position = [p.x, p.y, p.z];
        }
        m
    }

    /// New molecule whose atom `k` is the old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Molecule {
        let mut m = self.clone();
        m.atoms = order.iter().map(|&i| self.atoms[i].clone()).collect();
        m
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Parses an XYZ file (count, comment, `symbol x y z` in Ångström).
///
/// The molecule name is the first whitespace token of the comment line, or
/// `"molecule"` if the comment is empty.
pub fn parse_xyz(text: &str) -> Result<Molecule> {
    let lines: Vec<&str> = text.lines().collect();
    let count_line = lines.first().ok_or(Error::Parse { line: 1, message: "empty input".into() })?;
    let count: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: 1,
        message: format!("malformed atom count `{}`", count_line.trim()),
    })?;
    if count == 0 {
        return Err(Error::Parse { line: 1, message: "atom count must be positive".into() });
    }
    let name = lines
        .get(1)
        .and_then(|c| c.split_whitespace().next())
        .unwrap_or("molecule")
        .to_string();
    if lines.len() < count + 2 {
        return Err(Error::Parse {
            line: lines.len() + 1,
            message: format!("expected {count} atom lines"),
        });
    }
    let mut atoms = Vec::with_capacity(count);
    for (k, raw) in lines[2..2 + count].iter().enumerate() {
        let line = k + 3;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Parse { line, message: "expected `symbol x y z`".into() });
        }
        let z = atomic_number(fields[0])
            .ok_or_else(|| Error::UnknownElement { line, symbol: fields[0].to_string() })?;
        let mut pos = [0.0; 3];
        for d in 0..3 {
            let v: f64 = fields[d + 1].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad coordinate `{}`", fields[d + 1]),
            })?;
            pos[d] = v * ANGSTROM_TO_BOHR;
        }
        atoms.push(Atom { atomic_number: z, position: pos });
    }
    let m = Molecule { name, atoms, charge: 0 };
    let electrons = m.n_electrons();
    if electrons % 2 != 0 {
        return Err(Error::OddElectronCount { line: count + 2, electrons });
    }
    m.validate()?;
    Ok(m)
}

/// Formats `v` in plain decimal notation with `digits` significant digits.
fn significant(v: f64, digits: i32) -> String {
    if v == 0.0 {
        return "0.0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (digits - 1 - magnitude).clamp(1, 20) as usize;
    format!("{v:.decimals$}")
}

/// Canonical XYZ text (Ångström, 12 significant digits).
pub fn emit_xyz(m: &Molecule) -> String {
    let mut out = format!("{}\n{}\n", m.atoms.len(), m.name);
    for a in &m.atoms {
        let sym = element_symbol(a.atomic_number).unwrap_or("X");
        let c: Vec<String> = a.position.iter().map(|x| significant(x / ANGSTROM_TO_BOHR, 12)).collect();
        out.push_str(&format!("{sym} {} {} {}\n", c[0], c[1], c[2]));
    }
    out
}

/// Displaces every coordinate by an independent uniform draw in
/// `[-amplitude, amplitude]`.
///
/// The generator is ChaCha8 seeded with `seed`; attempt `k` uses stream `k`,
/// so retries after a minimum-distance violation draw fresh numbers while
/// staying reproducible.
pub fn perturb_geometry(m: &Molecule, amplitude: f64, seed: u64) -> Result<Molecule> {
    const ATTEMPTS: usize = 100;
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::Geometry(format!("amplitude must be non-negative, got {amplitude}")));
    }
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut out = m.clone();
        if amplitude > 0.0 {
            for a in &mut out.atoms {
                for x in &mut a.position {
                    *x += rng.gen_range(-amplitude..=amplitude);
                }
            }
        }
        if out.validate().is_ok() {
            return Ok(out);
        }
    }
    Err(Error::PerturbationRetries(ATTEMPTS))
}

/// One contracted shell centred on an atom. Coefficients carry the primitive
/// normalization and are scaled so the contracted function is normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Shell {
    pub center_atom: usize,
    pub center: [f64; 3],
    pub angular_momentum: u32,
    pub exponents: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl Shell {
    pub fn n_functions(&self) -> usize {
        2 * self.angular_momentum as usize + 1
    }

    fn new(center_atom: usize, center: [f64; 3], l: u32, exponents: Vec<f64>, raw: &[f64]) -> Self {
        let mut coefficients: Vec<f64> = exponents
            .iter()
            .zip(raw)
            .map(|(&a, &c)| c * primitive_norm(a, l))
            .collect();
        // Self-overlap of the contraction along one Cartesian axis of the function.
        let mut s = 0.0;
        for (i, &a) in exponents.iter().enumerate() {
            for (j, &b) in exponents.iter().enumerate() {
                let p = a + b;
                let radial = (std::f64::consts::PI / p).powf(1.5) * (0.5 / p).powi(l as i32);
                s += coefficients[i] * coefficients[j] * radial;
            }
        }
        let scale = 1.0 / s.sqrt();
        for c in &mut coefficients {
            *c *= scale;
        }
        Shell { center_atom, center, angular_momentum: l, exponents, coefficients }
    }
}

/// Normalization of x^l exp(-a r^2) (one Cartesian power of l, s or p).
fn primitive_norm(a: f64, l: u32) -> f64 {
    (2.0 * a / std::f64::consts::PI).powf(0.75) * (4.0 * a).powf(l as f64 / 2.0)
}

#[derive(Clone, Debug, PartialEq)]
struct ShellTemplate {
    l: u32,
    exponents: Vec<f64>,
    coefficients: Vec<f64>,
}

/// Parsed Gaussian-94 basis: per-element shell templates in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    elements: BTreeMap<u32, Vec<ShellTemplate>>,
}

fn parse_number(s: &str, line: usize) -> Result<f64> {
    s.replace(['D', 'd'], "E")
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("bad number `{s}`") })
}

impl BasisSet {
    pub fn sto3g() -> Self {
        Self::parse(STO3G).expect("embedded basis parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('!'))
            .collect();
        let mut elements = BTreeMap::new();
        let mut i = 0;
        while i < lines.len() {
            let (ln, l) = lines[i];
            if l.starts_with("****") {
                i += 1;
                continue;
            }
            let sym = l.split_whitespace().next().unwrap_or("");
            let z = atomic_number(sym)
                .ok_or_else(|| Error::UnknownElement { line: ln, symbol: sym.to_string() })?;
            i += 1;
            let mut shells = Vec::new();
            while i < lines.len() && !lines[i].1.starts_with("****") {
                let (ln, header) = lines[i];
                let f: Vec<&str> = header.split_whitespace().collect();
                if f.len() < 2 {
                    return Err(Error::Parse { line: ln, message: "malformed shell header".into() });
                }
                let kind = f[0].to_ascii_uppercase();
                let n: usize = f[1]
                    .parse()
                    .map_err(|_| Error::Parse { line: ln, message: "bad primitive count".into() })?;
                let ls: Vec<u32> = match kind.as_str() {
                    "S" => vec![0],
                    "P" => vec![1],
                    "SP" | "L" => vec![0, 1],
                    other => {
                        return Err(Error::Basis(format!("line {ln}: unsupported shell type `{other}`")))
                    }
                };
                let mut exps = Vec::with_capacity(n);
                let mut coefs = vec![Vec::with_capacity(n); ls.len()];
                for k in 0..n {
                    let (pl, row) = *lines.get(i + 1 + k).ok_or(Error::Parse {
                        line: ln,
                        message: "truncated shell".into(),
                    })?;
                    let cols: Vec<&str> = row.split_whitespace().collect();
                    if cols.len() != 1 + ls.len() {
                        return Err(Error::Basis(format!(
                            "line {pl}: ragged coefficient row (expected {} columns, got {})",
                            1 + ls.len(),
                            cols.len()
                        )));
                    }
                    let e = parse_number(cols[0], pl)?;
                    if !(e > 0.0) {
                        return Err(Error::Basis(format!("line {pl}: non-positive exponent {e}")));
                    }
                    exps.push(e);
                    for (c, col) in coefs.iter_mut().zip(&cols[1..]) {
                        c.push(parse_number(col, pl)?);
                    }
                }
                if exps.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Basis(format!("line {ln}: exponents not strictly decreasing")));
                }
                for (l, c) in ls.into_iter().zip(coefs) {
                    shells.push(ShellTemplate { l, exponents: exps.clone(), coefficients: c });
                }
                i += 1 + n;
            }
            elements.insert(z, shells);
        }
        Ok(BasisSet { elements })
    }

    pub fn covers(&self, z: u32) -> bool {
        self.elements.contains_key(&z)
    }

    /// Number of basis functions on an atom of element `z`.
    pub fn functions_per_atom(&self, z: u32) -> Option<usize> {
        self.elements.get(&z).map(|s| s.iter().map(|t| 2 * t.l as usize + 1).sum())
    }

    /// Shells for every atom, in atom order; within an atom, file order with
    /// SP shells split into S then P.
    pub fn shells_for(&self, m: &Molecule) -> Result<Vec<Shell>> {
        let mut out = Vec::new();
        for (ia, atom) in m.atoms.iter().enumerate() {
            let templates = self.elements.get(&atom.atomic_number).ok_or_else(|| {
                Error::Basis(format!(
                    "no entry for element {}",
                    element_symbol(atom.atomic_number).unwrap_or("?")
                ))
            })?;
            for t in templates {
                out.push(Shell::new(ia, atom.position, t.l, t.exponents.clone(), &t.coefficients));
            }
        }
        Ok(out)
    }
}

/// Parses `basis_text` and returns the shells of `molecule`.
/// SHA-256 of a basis text, hex encoded; ties checkpoints and labels to a basis.
pub fn basis_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn load_basis(molecule: &Molecule, basis_text: &str) -> Result<Vec<Shell>> {
    BasisSet::parse(basis_text)?.shells_for(molecule)
}
