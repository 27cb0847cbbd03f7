//! Molecular integrals over contracted s/p Gaussian shells (McMurchie–Davidson)
//! and the per-molecule [`BasisContext`] the solver consumes.

pub mod boys;
pub mod cache;
pub mod hermite;
pub mod one_electron;
pub mod two_electron;

use nalgebra::DMatrix;

use crate::chem_io::{BasisSet, Molecule, Shell};
use crate::error::{Error, Result};
use crate::linalg;

pub use one_electron::{one_electron_integrals, OneElectron};
pub use two_electron::{two_electron_integrals, Eri};

/// Eigenvalue floor for the overlap matrix.
pub const LINEAR_DEPENDENCE_THRESHOLD: f64 = 1e-8;

/// Default cap on the dense two-electron tensor, bytes.
pub const DEFAULT_ERI_CAP: u64 = 1 << 30;

/// Cartesian exponent triples of a shell, p ordered (x, y, z).
pub(crate) fn cartesian_powers(l: u32) -> &'static [[usize; 3]] {
    match l {
        0 => &[[0, 0, 0]],
        1 => &[[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        _ => panic!("only s and p shells are supported"),
    }
}

pub(crate) fn shell_offsets(shells: &[Shell]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(shells.len());
    let mut n = 0;
    for s in shells {
        offsets.push(n);
        n += s.n_functions();
    }
    (offsets, n)
}

/// X = S^{-1/2} from the symmetric eigendecomposition of S.
pub fn inverse_sqrt_overlap(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (w, u) = linalg::eigh(s)?;
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < LINEAR_DEPENDENCE_THRESHOLD {
        return Err(Error::LinearDependence { min_eigenvalue: min });
    }
    Ok(linalg::symmetrize(&linalg::spectral_map(&w, &u, |x| 1.0 / x.sqrt())))
}

/// Everything the SCF needs for one molecule in one basis.
#[derive(Clone, Debug)]
pub struct BasisContext {
    pub overlap: DMatrix<f64>,
    pub kinetic: DMatrix<f64>,
    pub nuclear: DMatrix<f64>,
    pub hcore: DMatrix<f64>,
    /// Electron-position integrals ⟨μ|r_k|ν⟩, origin at 0.
    pub dipole: [DMatrix<f64>; 3],
    pub eri: Eri,
    /// S^{-1/2}.
    pub x: DMatrix<f64>,
    /// S^{1/2}.
    pub s_half: DMatrix<f64>,
    pub nuclear_repulsion: f64,
    pub n_basis: usize,
    pub n_electrons: usize,
    pub n_occ: usize,
    /// Atom index of each basis function.
    pub ao_atom: Vec<usize>,
    /// Angular momentum of each basis function.
    pub ao_l: Vec<u32>,
    pub atomic_numbers: Vec<u32>,
}

impl BasisContext {
    pub fn build(molecule: &Molecule, basis: &BasisSet) -> Result<Self> {
        Self::build_with_cap(molecule, basis, DEFAULT_ERI_CAP)
    }

    pub fn build_with_cap(molecule: &Molecule, basis: &BasisSet, eri_cap: u64) -> Result<Self> {
        molecule.validate()?;
        let shells = basis.shells_for(molecule)?;
        Self::from_shells(molecule, &shells, eri_cap)
    }

    pub fn from_shells(molecule: &Molecule, shells: &[Shell], eri_cap: u64) -> Result<Self> {
        let one = one_electron_integrals(shells, molecule);
        let (w, u) = linalg::eigh(&one.overlap)?;
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < LINEAR_DEPENDENCE_THRESHOLD {
            return Err(Error::LinearDependence { min_eigenvalue: min });
        }
        let x = linalg::symmetrize(&linalg::spectral_map(&w, &u, |v| 1.0 / v.sqrt()));
        let s_half = linalg::symmetrize(&linalg::spectral_map(&w, &u, f64::sqrt));
        let eri = two_electron_integrals(shells, eri_cap)?;
        let mut ao_atom = Vec::new();
        let mut ao_l = Vec::new();
        for s in shells {
            for _ in 0..s.n_functions() {
                ao_atom.push(s.center_atom);
                ao_l.push(s.angular_momentum);
            }
        }
        let n_electrons = molecule.n_electrons() as usize;
        let n = one.overlap.nrows();
        if n_electrons / 2 > n {
            return Err(Error::OutOfRange(format!("{} occupied orbitals exceed basis size {n}", n_electrons / 2)));
        }
        let hcore = &one.kinetic + &one.nuclear;
        let ctx = BasisContext {
            overlap: one.overlap,
            kinetic: one.kinetic,
            nuclear: one.nuclear,
            hcore,
            dipole: one.dipole,
            eri,
            x,
            s_half,
            nuclear_repulsion: molecule.nuclear_repulsion(),
            n_basis: n,
            n_electrons,
            n_occ: n_electrons / 2,
            ao_atom,
            ao_l,
            atomic_numbers: molecule.atoms.iter().map(|a| a.atomic_number).collect(),
        };
        ctx.check_finite()?;
        Ok(ctx)
    }

    fn check_finite(&self) -> Result<()> {
        let mats = [&self.overlap, &self.kinetic, &self.nuclear, &self.dipole[0], &self.dipole[1], &self.dipole[2]];
        if mats.iter().any(|m| !linalg::all_finite(m)) || self.eri.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("integrals".into()));
        }
        Ok(())
    }

    pub fn n_virt(&self) -> usize {
        self.n_basis - self.n_occ
    }

    /// Basis-function index ranges of each atom.
    pub fn atom_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let n_atoms = self.atomic_numbers.len();
        let mut out = vec![0..0; n_atoms];
        for a in 0..n_atoms {
            let start = self.ao_atom.iter().position(|&x| x == a).unwrap_or(0);
            let len = self.ao_atom.iter().filter(|&&x| x == a).count();
            out[a] = start..start + len;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_small_cases() {
        let x = inverse_sqrt_overlap(&DMatrix::identity(3, 3)).unwrap();
        assert!((x - DMatrix::<f64>::identity(3, 3)).norm() < 1e-15);
        let x = inverse_sqrt_overlap(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(inverse_sqrt_overlap(&singular), Err(Error::LinearDependence { .. })));
    }
}
