use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::hermite::{HermiteE, HermiteR};
use super::{cartesian_powers, shell_offsets};
use crate::chem_io::{Molecule, Shell};

/// Overlap, kinetic, nuclear-attraction and dipole (origin at 0) matrices.
pub struct OneElectron {
    pub overlap: DMatrix<f64>,
    pub kinetic: DMatrix<f64>,
    pub nuclear: DMatrix<f64>,
    pub dipole: [DMatrix<f64>; 3],
}

pub fn one_electron_integrals(shells: &[Shell], molecule: &Molecule) -> OneElectron {
    let (offsets, n) = shell_offsets(shells);
    let mut s = DMatrix::zeros(n, n);
    let mut t = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    let mut d = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];

    for (ia, sa) in shells.iter().enumerate() {
        for (ib, sb) in shells.iter().enumerate().take(ia + 1) {
            let pa = cartesian_powers(sa.angular_momentum);
            let pb = cartesian_powers(sb.angular_momentum);
            let la = sa.angular_momentum as usize;
            let lb = sb.angular_momentum as usize;
            let ab = [sa.center[0] - sb.center[0], sa.center[1] - sb.center[1], sa.center[2] - sb.center[2]];
            let mut blk_s = vec![0.0; pa.len() * pb.len()];
            let mut blk_t = blk_s.clone();
            let mut blk_v = blk_s.clone();
            let mut blk_d = [blk_s.clone(), blk_s.clone(), blk_s.clone()];

            for (&ea, &ca) in sa.exponents.iter().zip(&sa.coefficients) {
                for (&eb, &cb) in sb.exponents.iter().zip(&sb.coefficients) {
                    let p = ea + eb;
                    let e: [HermiteE; 3] = std::array::from_fn(|k| HermiteE::new(la, lb + 2, ea, eb, ab[k]));
                    let centre: [f64; 3] =
                        std::array::from_fn(|k| (ea * sa.center[k] + eb * sb.center[k]) / p);
                    let root = (PI / p).sqrt();
                    let rs: Vec<HermiteR> = molecule
                        .atoms
                        .iter()
                        .map(|atom| {
                            let pc = std::array::from_fn(|k| centre[k] - atom.position[k]);
                            HermiteR::new(la + lb, p, pc)
                        })
                        .collect();
                    let cc = ca * cb;

                    for (x, a) in pa.iter().enumerate() {
                        for (y, b) in pb.iter().enumerate() {
                            let idx = x * pb.len() + y;
                            // 1-D overlaps, kinetic pieces and first moments.
                            let s1: [f64; 3] = std::array::from_fn(|k| root * e[k].get(a[k], b[k], 0));
                            let t1: [f64; 3] = std::array::from_fn(|k| {
                                let j = b[k];
                                let mut val = -2.0 * eb * eb * e[k].get(a[k], j + 2, 0)
                                    + eb * (2 * j + 1) as f64 * e[k].get(a[k], j, 0);
                                if j >= 2 {
                                    val -= 0.5 * (j * (j - 1)) as f64 * e[k].get(a[k], j - 2, 0);
                                }
                                root * val
                            });
                            let m1: [f64; 3] = std::array::from_fn(|k| {
                                root * (e[k].get(a[k], b[k], 1) + centre[k] * e[k].get(a[k], b[k], 0))
                            });
                            blk_s[idx] += cc * s1[0] * s1[1] * s1[2];
                            blk_t[idx] += cc
                                * (t1[0] * s1[1] * s1[2] + s1[0] * t1[1] * s1[2] + s1[0] * s1[1] * t1[2]);
                            blk_d[0][idx] += cc * m1[0] * s1[1] * s1[2];
                            blk_d[1][idx] += cc * s1[0] * m1[1] * s1[2];
                            blk_d[2][idx] += cc * s1[0] * s1[1] * m1[2];

                            let mut vsum = 0.0;
                            for (atom, r) in molecule.atoms.iter().zip(&rs) {
                                let mut acc = 0.0;
                                for tt in 0..=a[0] + b[0] {
                                    let ex = e[0].get(a[0], b[0], tt);
                                    for uu in 0..=a[1] + b[1] {
                                        let ey = e[1].get(a[1], b[1], uu);
                                        for vv in 0..=a[2] + b[2] {
                                            acc += ex * ey * e[2].get(a[2], b[2], vv) * r.get(tt, uu, vv);
                                        }
                                    }
                                }
                                vsum -= atom.atomic_number as f64 * acc;
                            }
                            blk_v[idx] += cc * 2.0 * PI / p * vsum;
                        }
                    }
                }
            }

            for x in 0..pa.len() {
                for y in 0..pb.len() {
                    let (mu, nu) = (offsets[ia] + x, offsets[ib] + y);
                    let idx = x * pb.len() + y;
                    for (m, val) in [(&mut s, blk_s[idx]), (&mut t, blk_t[idx]), (&mut v, blk_v[idx])] {
                        m[(mu, nu)] = val;
                        m[(nu, mu)] = val;
                    }
                    for k in 0..3 {
                        d[k][(mu, nu)] = blk_d[k][idx];
                        d[k][(nu, mu)] = blk_d[k][idx];
                    }
                }
            }
        }
    }
    OneElectron { overlap: s, kinetic: t, nuclear: v, dipole: d }
}
