use std::f64::consts::PI;

use rayon::prelude::*;

use super::hermite::{HermiteE, HermiteR};
use super::{cartesian_powers, shell_offsets};
use crate::chem_io::Shell;
use crate::error::{Error, Result};

/// Dense (μν|λσ) in chemists' notation, row-major over (μ, ν, λ, σ).
#[derive(Clone, Debug, PartialEq)]
pub struct Eri {
    n: usize,
    data: Vec<f64>,
}

impl Eri {
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n.pow(4) {
            return Err(Error::Shape(format!("ERI of dimension {n} needs {} entries", n.pow(4))));
        }
        Ok(Eri { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.n + j) * self.n + k) * self.n + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.index(i, j, k, l)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

struct PrimPair {
    p: f64,
    centre: [f64; 3],
    coef: f64,
    e: [HermiteE; 3],
}

struct ShellPair {
    a: usize,
    b: usize,
    prims: Vec<PrimPair>,
}

fn shell_pair(shells: &[Shell], a: usize, b: usize) -> ShellPair {
    let (sa, sb) = (&shells[a], &shells[b]);
    let ab: [f64; 3] = std::array::from_fn(|k| sa.center[k] - sb.center[k]);
    let mut prims = Vec::new();
    for (&ea, &ca) in sa.exponents.iter().zip(&sa.coefficients) {
        for (&eb, &cb) in sb.exponents.iter().zip(&sb.coefficients) {
            let p = ea + eb;
            prims.push(PrimPair {
                p,
                centre: std::array::from_fn(|k| (ea * sa.center[k] + eb * sb.center[k]) / p),
                coef: ca * cb,
                e: std::array::from_fn(|k| {
                    HermiteE::new(sa.angular_momentum as usize, sb.angular_momentum as usize, ea, eb, ab[k])
                }),
            });
        }
    }
    ShellPair { a, b, prims }
}

/// Contracted (ab|cd) block, indexed [a][b][c][d] over Cartesian components.
fn quartet(shells: &[Shell], bra: &ShellPair, ket: &ShellPair) -> Vec<f64> {
    let pa = cartesian_powers(shells[bra.a].angular_momentum);
    let pb = cartesian_powers(shells[bra.b].angular_momentum);
    let pc = cartesian_powers(shells[ket.a].angular_momentum);
    let pd = cartesian_powers(shells[ket.b].angular_momentum);
    let l_bra = (shells[bra.a].angular_momentum + shells[bra.b].angular_momentum) as usize;
    let l_ket = (shells[ket.a].angular_momentum + shells[ket.b].angular_momentum) as usize;
    let (nb, nc, nd) = (pb.len(), pc.len(), pd.len());
    let mut out = vec![0.0; pa.len() * nb * nc * nd];

    for x in &bra.prims {
        for y in &ket.prims {
            let (p, q) = (x.p, y.p);
            let alpha = p * q / (p + q);
            let pq: [f64; 3] = std::array::from_fn(|k| x.centre[k] - y.centre[k]);
            let r = HermiteR::new(l_bra + l_ket, alpha, pq);
            let pref = 2.0 * PI.powf(2.5) / (p * q * (p + q).sqrt()) * x.coef * y.coef;
            for (ia, a) in pa.iter().enumerate() {
                for (ib, b) in pb.iter().enumerate() {
                    for (ic, c) in pc.iter().enumerate() {
                        for (id, d) in pd.iter().enumerate() {
                            let mut acc = 0.0;
                            for t in 0..=a[0] + b[0] {
                                let e1 = x.e[0].get(a[0], b[0], t);
                                for u in 0..=a[1] + b[1] {
                                    let e2 = e1 * x.e[1].get(a[1], b[1], u);
                                    for v in 0..=a[2] + b[2] {
                                        let e3 = e2 * x.e[2].get(a[2], b[2], v);
                                        if e3 == 0.0 {
                                            continue;
                                        }
                                        let mut inner = 0.0;
                                        for tau in 0..=c[0] + d[0] {
                                            let f1 = y.e[0].get(c[0], d[0], tau);
                                            for nu in 0..=c[1] + d[1] {
                                                let f2 = f1 * y.e[1].get(c[1], d[1], nu);
                                                for phi in 0..=c[2] + d[2] {
                                                    let f3 = f2 * y.e[2].get(c[2], d[2], phi);
                                                    let sign = if (tau + nu + phi) % 2 == 0 { 1.0 } else { -1.0 };
                                                    inner += sign * f3 * r.get(t + tau, u + nu, v + phi);
                                                }
                                            }
                                        }
                                        acc += e3 * inner;
                                    }
                                }
                            }
                            out[((ia * nb + ib) * nc + ic) * nd + id] += pref * acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bytes needed for the dense tensor of dimension `n`.
pub fn eri_bytes(n: usize) -> u64 {
    (n as u64).pow(4) * 8
}

/// Dense electron-repulsion tensor. Each unique shell quartet is evaluated
/// once and mirrored into all eight permutational positions.
pub fn two_electron_integrals(shells: &[Shell], cap_bytes: u64) -> Result<Eri> {
    let (offsets, n) = shell_offsets(shells);
    let required = eri_bytes(n);
    if required > cap_bytes {
        return Err(Error::MemoryCap { required_bytes: required, cap_bytes });
    }
    let pairs: Vec<ShellPair> = (0..shells.len())
        .flat_map(|a| (0..=a).map(move |b| (a, b)))
        .map(|(a, b)| shell_pair(shells, a, b))
        .collect();

    let blocks: Vec<(usize, usize, Vec<f64>)> = (0..pairs.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pairs = &pairs;
            (0..=i).map(move |j| (i, j, quartet(shells, &pairs[i], &pairs[j])))
        })
        .collect();

    let mut eri = Eri { n, data: vec![0.0; n.pow(4)] };
    for (i, j, block) in blocks {
        let (bra, ket) = (&pairs[i], &pairs[j]);
        let dims: Vec<usize> =
            [bra.a, bra.b, ket.a, ket.b].iter().map(|&s| shells[s].n_functions()).collect();
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    for w in 0..dims[3] {
                        // Within a shell-diagonal block only the canonical
                        // half is written so mirrored entries are bit-equal.
                        if (bra.a == bra.b && y > x)
                            || (ket.a == ket.b && w > z)
                            || (i == j && (x * dims[1] + y) < (z * dims[3] + w))
                        {
                            continue;
                        }
                        let val = block[((x * dims[1] + y) * dims[2] + z) * dims[3] + w];
                        let (m, nn) = (offsets[bra.a] + x, offsets[bra.b] + y);
                        let (l, s) = (offsets[ket.a] + z, offsets[ket.b] + w);
                        for (p, q, r, t) in [
                            (m, nn, l, s),
                            (nn, m, l, s),
                            (m, nn, s, l),
                            (nn, m, s, l),
                            (l, s, m, nn),
                            (s, l, m, nn),
                            (l, s, nn, m),
                            (s, l, nn, m),
                        ] {
                            let k = eri.index(p, q, r, t);
                            eri.data[k] = val;
                        }
                    }
                }
            }
        }
    }
    Ok(eri)
}
