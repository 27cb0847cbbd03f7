"""Independent RHF/STO-3G reference values from PySCF.

Writes crates/core/tests/fixtures/pyscf_reference.json, which the Rust test
suites read as frozen oracle values. Geometries are converted to Bohr with the
same factor the Rust parser uses, and handed to PySCF in Bohr so both programs
see bit-identical nuclear positions.
"""

import json
import os

import numpy as np
from pyscf import gto, scf

ANGSTROM_TO_BOHR = 1.8897259886
ROOT = os.path.join(os.path.dirname(__file__), "..", "crates", "core")
MOLS = os.path.join(ROOT, "data", "molecules")
OUT = os.path.join(ROOT, "tests", "fixtures", "pyscf_reference.json")


def load(name):
    with open(os.path.join(MOLS, f"{name}.xyz")) as fh:
        lines = fh.read().splitlines()
    n = int(lines[0])
    atoms = []
    for line in lines[2 : 2 + n]:
        sym, x, y, z = line.split()
        atoms.append((sym, [float(x) * ANGSTROM_TO_BOHR, float(y) * ANGSTROM_TO_BOHR, float(z) * ANGSTROM_TO_BOHR]))
    return gto.M(atom=atoms, basis="sto-3g", unit="Bohr", verbose=0, cart=False)


def rhf(mol):
    mf = scf.RHF(mol)
    mf.conv_tol = 1e-13
    mf.conv_tol_grad = 1e-9
    mf.max_cycle = 200
    mf.kernel()
    assert mf.converged
    return mf


def main():
    out = {"basis": "sto-3g", "program": "pyscf", "energies": {}, "nuclear_repulsion": {}, "sampled_eri": {}}
    rng = np.random.default_rng(17)
    for fname in sorted(os.listdir(MOLS)):
        name = fname[:-4]
        mol = load(name)
        mf = rhf(mol)
        out["energies"][name] = mf.e_tot
        out["nuclear_repulsion"][name] = mol.energy_nuc()
        eri = mol.intor("int2e")
        idx = rng.integers(0, mol.nao, size=(20, 4))
        out["sampled_eri"][name] = [[int(i), int(j), int(k), int(l), float(eri[i, j, k, l])] for i, j, k, l in idx]

    mol = gto.M(atom=[("H", [0.0, 0.0, 0.0]), ("H", [0.0, 0.0, 1.4])], basis="sto-3g", unit="Bohr", verbose=0)
    out["h2_1p4_bohr_energy"] = rhf(mol).e_tot

    mol = load("h2")
    mf = rhf(mol)
    dm = mf.make_rdm1()
    out["h2"] = {
        "fock": mf.get_fock(dm=dm).tolist(),
        "density": dm.tolist(),
        "overlap": mol.intor("int1e_ovlp").tolist(),
        "kinetic": mol.intor("int1e_kin").tolist(),
        "nuclear": mol.intor("int1e_nuc").tolist(),
        "eri_0000": float(mol.intor("int2e")[0, 0, 0, 0]),
        "hcore_eigenvalues": np.linalg.eigvalsh(
            np.linalg.solve(np.linalg.cholesky(mol.intor("int1e_ovlp")), np.eye(2))
            @ mf.get_hcore()
            @ np.linalg.solve(np.linalg.cholesky(mol.intor("int1e_ovlp")), np.eye(2)).T
        ).tolist(),
    }

    mol = load("h2o")
    mf = rhf(mol)
    with mol.with_common_orig((0.0, 0.0, 0.0)):
        dip = mol.intor("int1e_r")
    out["h2o"] = {
        "overlap": mol.intor("int1e_ovlp").tolist(),
        "kinetic": mol.intor("int1e_kin").tolist(),
        "nuclear": mol.intor("int1e_nuc").tolist(),
        "dipole_x": dip[0].tolist(),
        "dipole_y": dip[1].tolist(),
        "dipole_z": dip[2].tolist(),
        "eri": mol.intor("int2e").reshape(-1).tolist(),
        "fock": mf.get_fock().tolist(),
        "orbital_energies": mf.mo_energy.tolist(),
    }

    os.makedirs(os.path.dirname(OUT), exist_ok=True)
    with open(OUT, "w") as fh:
        json.dump(out, fh, indent=1)
    for k, v in out["energies"].items():
        print(f"{k:10s} {v:.10f}")


if __name__ == "__main__":
    main()
