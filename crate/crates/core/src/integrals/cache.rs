//! Binary dump/load of a [`BasisContext`].
//!
//! Layout (all little-endian):
//!
//! | field | type |
//! |-------|------|
//! | magic `SAILCTX\0` | 8 bytes |
//! | version | u32 (= 1) |
//! | key | 32 bytes, SHA-256 of geometry bits + basis text |
//! | n_basis, n_electrons, n_atoms | u32 × 3 |
//! | nuclear repulsion | f64 |
//! | atomic numbers | u32 × n_atoms |
//! | ao_atom, ao_l | u32 × n_basis each |
//! | S, T, V, Dx, Dy, Dz, X, S^{1/2} | f64 × n², row-major |
//! | ERI | f64 × n⁴, row-major (μ, ν, λ, σ) |

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::{BasisContext, Eri};
use crate::chem_io::Molecule;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SAILCTX\0";
pub const CACHE_VERSION: u32 = 1;

/// Content hash of the exact nuclear positions, charges and the basis text.
pub fn cache_key(molecule: &Molecule, basis_text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    for a in &molecule.atoms {
        h.update(a.atomic_number.to_le_bytes());
        for x in a.position {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    h.update(molecule.charge.to_le_bytes());
    h.update(basis_text.as_bytes());
    h.finalize().into()
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

pub fn write_context(ctx: &BasisContext, key: &[u8; 32], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CACHE_VERSION)?;
    w.write_all(key)?;
    put_u32(w, ctx.n_basis as u32)?;
    put_u32(w, ctx.n_electrons as u32)?;
    put_u32(w, ctx.atomic_numbers.len() as u32)?;
    put_f64s(w, std::iter::once(ctx.nuclear_repulsion))?;
    for &z in &ctx.atomic_numbers {
        put_u32(w, z)?;
    }
    for &a in &ctx.ao_atom {
        put_u32(w, a as u32)?;
    }
    for &l in &ctx.ao_l {
        put_u32(w, l)?;
    }
    for m in [&ctx.overlap, &ctx.kinetic, &ctx.nuclear, &ctx.dipole[0], &ctx.dipole[1], &ctx.dipole[2], &ctx.x, &ctx.s_half] {
        put_f64s(w, row_major(m))?;
    }
    put_f64s(w, ctx.eri.as_slice().iter().copied())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Cache("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn matrix(&mut self, n: usize) -> Result<DMatrix<f64>> {
        let vals = (0..n * n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_row_slice(n, n, &vals))
    }
}

/// Reads a context; fails if the stored key differs from `expected_key`.
pub fn read_context(r: &mut impl Read, expected_key: &[u8; 32]) -> Result<BasisContext> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader { buf: &buf, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    if rd.take(32)? != expected_key {
        return Err(Error::Cache("key mismatch".into()));
    }
    let n = rd.u32()? as usize;
    let n_electrons = rd.u32()? as usize;
    let n_atoms = rd.u32()? as usize;
    let nuclear_repulsion = rd.f64()?;
    let atomic_numbers = (0..n_atoms).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let ao_atom = (0..n).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let ao_l = (0..n).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let overlap = rd.matrix(n)?;
    let kinetic = rd.matrix(n)?;
    let nuclear = rd.matrix(n)?;
    let dipole = [rd.matrix(n)?, rd.matrix(n)?, rd.matrix(n)?];
    let x = rd.matrix(n)?;
    let s_half = rd.matrix(n)?;
    let eri_vals = (0..n.pow(4)).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
    if rd.pos != buf.len() {
        return Err(Error::Cache("trailing bytes".into()));
    }
    Ok(BasisContext {
        hcore: &kinetic + &nuclear,
        overlap,
        kinetic,
        nuclear,
        dipole,
        eri: Eri::from_raw(n, eri_vals)?,
        x,
        s_half,
        nuclear_repulsion,
        n_basis: n,
        n_electrons,
        n_occ: n_electrons / 2,
        ao_atom,
        ao_l,
        atomic_numbers,
    })
}

/// Loads the cached context for `molecule` from `dir`, or builds and stores it.
pub fn load_or_build(dir: &Path, molecule: &Molecule, basis_text: &str) -> Result<BasisContext> {
    let key = cache_key(molecule, basis_text);
    let path = dir.join(format!("{}.ctx", hex::encode(&key[..16])));
    if let Ok(mut f) = std::fs::File::open(&path) {
        if let Ok(ctx) = read_context(&mut f, &key) {
            return Ok(ctx);
        }
    }
    let basis = crate::chem_io::BasisSet::parse(basis_text)?;
    let ctx = BasisContext::build(molecule, &basis)?;
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_context(&ctx, &key, &mut f)?;
    Ok(ctx)
}
