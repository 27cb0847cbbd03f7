"""Build the base molecule geometries shipped in crates/core/data/molecules.

Each molecule is written from a z-matrix, relaxed at RHF/STO-3G with PySCF +
geomeTRIC, and emitted as XYZ (Angstrom, 10 decimals). Requires `pyscf` and
`geometric`. Re-running overwrites the data files.
"""

import os
import sys

import numpy as np
from pyscf import gto, scf
from pyscf.geomopt.geometric_solver import optimize

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data", "molecules")


def zmat_to_xyz(rows):
    """rows: (sym, [ref_bond, dist, ref_angle, angle, ref_dih, dih]) with 1-based refs."""
    coords = []
    syms = []
    for sym, spec in rows:
        syms.append(sym)
        if not spec:
            coords.append(np.zeros(3))
            continue
        if len(spec) == 2:
            coords.append(np.array([0.0, 0.0, spec[1]]) + coords[spec[0] - 1])
            continue
        if len(spec) == 4:
            a, r, b, theta = spec
            pa, pb = coords[a - 1], coords[b - 1]
            u = (pb - pa) / np.linalg.norm(pb - pa)
            perp = np.cross(u, [0.0, 1.0, 0.0])
            if np.linalg.norm(perp) < 1e-6:
                perp = np.cross(u, [1.0, 0.0, 0.0])
            perp /= np.linalg.norm(perp)
            t = np.radians(theta)
            coords.append(pa + r * (np.cos(t) * u + np.sin(t) * perp))
            continue
        a, r, b, theta, c, phi = spec
        pa, pb, pc = coords[a - 1], coords[b - 1], coords[c - 1]
        bc = pa - pb
        bc /= np.linalg.norm(bc)
        n = np.cross(pb - pc, bc)
        n /= np.linalg.norm(n)
        m = np.cross(n, bc)
        t, p = np.radians(theta), np.radians(phi)
        d2 = np.array([-r * np.cos(t), r * np.sin(t) * np.cos(p), r * np.sin(t) * np.sin(p)])
        coords.append(pa + d2[0] * bc + d2[1] * m + d2[2] * n)
    return syms, np.array(coords)


def methyl(c, nb, nd, d0):
    return [("H", [c, 1.09, nb, 110.0, nd, d0 + k]) for k in (0.0, 120.0, -120.0)]


MOLECULES = {
    "h2": [("H", []), ("H", [1, 0.74])],
    "lih": [("Li", []), ("H", [1, 1.60])],
    "hf": [("F", []), ("H", [1, 0.92])],
    "lif": [("Li", []), ("F", [1, 1.56])],
    "h2o": [("O", []), ("H", [1, 0.96]), ("H", [1, 0.96, 2, 104.5])],
    "nh3": [("N", []), ("H", [1, 1.01]), ("H", [1, 1.01, 2, 107.0]),
            ("H", [1, 1.01, 2, 107.0, 3, 113.0])],
    "ch4": [("C", []), ("H", [1, 1.09]), ("H", [1, 1.09, 2, 109.47]),
            ("H", [1, 1.09, 2, 109.47, 3, 120.0]), ("H", [1, 1.09, 2, 109.47, 3, -120.0])],
    "hcn": [("C", []), ("N", [1, 1.156]), ("H", [1, 1.065, 2, 179.0])],
    "h2co": [("C", []), ("O", [1, 1.21]), ("H", [1, 1.10, 2, 121.8]),
             ("H", [1, 1.10, 2, 121.8, 3, 180.0])],
    "c2h4": [("C", []), ("C", [1, 1.33]), ("H", [1, 1.09, 2, 121.5]),
             ("H", [1, 1.09, 2, 121.5, 3, 180.0]), ("H", [2, 1.09, 1, 121.5, 3, 0.0]),
             ("H", [2, 1.09, 1, 121.5, 3, 180.0])],
    "c2h6": [("C", []), ("C", [1, 1.53]), ("H", [1, 1.09, 2, 110.0]),
             ("H", [1, 1.09, 2, 110.0, 3, 120.0]), ("H", [1, 1.09, 2, 110.0, 3, -120.0]),
             ("H", [2, 1.09, 1, 110.0, 3, 180.0]), ("H", [2, 1.09, 1, 110.0, 3, 60.0]),
             ("H", [2, 1.09, 1, 110.0, 3, -60.0])],
    "ch3oh": [("C", []), ("O", [1, 1.43]), ("H", [2, 0.96, 1, 108.0]),
              ("H", [1, 1.09, 2, 110.0, 3, 180.0]), ("H", [1, 1.09, 2, 110.0, 3, 60.0]),
              ("H", [1, 1.09, 2, 110.0, 3, -60.0])],
    "ch3nh2": [("C", []), ("N", [1, 1.47]), ("H", [2, 1.01, 1, 110.0]),
               ("H", [2, 1.01, 1, 110.0, 3, 107.0]),
               ("H", [1, 1.09, 2, 110.0, 3, 60.0 + 180.0]),
               ("H", [1, 1.09, 2, 110.0, 3, -60.0 + 180.0]),
               ("H", [1, 1.09, 2, 110.0, 3, 180.0 + 180.0])],
    "hcooh": [("C", []), ("O", [1, 1.20]), ("O", [1, 1.34, 2, 125.0]),
              ("H", [1, 1.09, 2, 123.0, 3, 180.0]), ("H", [3, 0.97, 1, 107.0, 2, 0.0])],
    "c3h8": [("C", []), ("C", [1, 1.53]), ("C", [2, 1.53, 1, 112.0])]
    + methyl(1, 2, 3, 180.0)
    + [("H", [2, 1.09, 1, 109.5, 3, 121.0]), ("H", [2, 1.09, 1, 109.5, 3, -121.0])]
    + methyl(3, 2, 1, 180.0),
    "c2h5oh": [("C", []), ("C", [1, 1.52]), ("O", [2, 1.43, 1, 108.0]),
               ("H", [3, 0.96, 2, 109.0, 1, 180.0])]
    + methyl(1, 2, 3, 180.0)
    + [("H", [2, 1.09, 1, 110.0, 3, 120.0]), ("H", [2, 1.09, 1, 110.0, 3, -120.0])],
    "ch3och3": [("C", []), ("O", [1, 1.41]), ("C", [2, 1.41, 1, 112.0])]
    + methyl(1, 2, 3, 180.0)
    + methyl(3, 2, 1, 180.0),
    "c4h10": [("C", []), ("C", [1, 1.53]), ("C", [2, 1.53, 1, 112.0]),
              ("C", [3, 1.53, 2, 112.0, 1, 180.0])]
    + methyl(1, 2, 3, 180.0)
    + [("H", [2, 1.09, 1, 109.5, 3, 121.0]), ("H", [2, 1.09, 1, 109.5, 3, -121.0]),
       ("H", [3, 1.09, 4, 109.5, 2, 121.0]), ("H", [3, 1.09, 4, 109.5, 2, -121.0])]
    + methyl(4, 3, 2, 180.0),
    "ch3cooh": [("C", []), ("C", [1, 1.50]), ("O", [2, 1.21, 1, 126.0]),
                ("O", [2, 1.36, 1, 111.0, 3, 180.0]), ("H", [4, 0.97, 2, 106.0, 1, 180.0])]
    + methyl(1, 2, 3, 0.0),
    "ch3conh2": [("C", []), ("C", [1, 1.51]), ("O", [2, 1.22, 1, 122.0]),
                 ("N", [2, 1.36, 1, 115.0, 3, 180.0]), ("H", [4, 1.01, 2, 120.0, 1, 180.0]),
                 ("H", [4, 1.01, 2, 120.0, 1, 0.0])]
    + methyl(1, 2, 3, 0.0),
    "glycine": [("N", []), ("C", [1, 1.45]), ("C", [2, 1.52, 1, 112.0]),
                ("O", [3, 1.21, 2, 125.0, 1, 0.0]), ("O", [3, 1.35, 2, 112.0, 1, 180.0]),
                ("H", [5, 0.97, 3, 106.0, 2, 180.0]), ("H", [1, 1.01, 2, 110.0, 3, 60.0]),
                ("H", [1, 1.01, 2, 110.0, 3, -60.0]), ("H", [2, 1.09, 1, 109.0, 3, 120.0]),
                ("H", [2, 1.09, 1, 109.0, 3, -120.0])],
}


def main():
    os.makedirs(OUT, exist_ok=True)
    names = sys.argv[1:] or list(MOLECULES)
    for name in names:
        syms, xyz = zmat_to_xyz(MOLECULES[name])
        mol = gto.M(atom=list(zip(syms, xyz.tolist())), basis="sto-3g", unit="Angstrom", verbose=0)
        mf = scf.RHF(mol)
        try:
            mol = optimize(mf, maxsteps=100)
        except Exception as exc:  # keep the z-matrix geometry
            print(f"{name}: optimization failed ({exc}); keeping initial geometry")
        coords = mol.atom_coords(unit="Angstrom")
        lines = [str(len(syms)), f"{name} RHF/STO-3G relaxed"]
        for s, c in zip(syms, coords):
            lines.append(f"{s:<2} {c[0]:16.10f} {c[1]:16.10f} {c[2]:16.10f}")
        with open(os.path.join(OUT, f"{name}.xyz"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(name, "done")


if __name__ == "__main__":
    main()
