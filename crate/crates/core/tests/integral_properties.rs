//! Integral checks against real-space quadrature and symmetry properties.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sailscf::chem_io::{BasisSet, Molecule, Shell};
use sailscf::corpus;
use sailscf::integrals::{self, cache, BasisContext};
use sailscf::scf::{self, ScfOptions};
use sailscf::Error;

fn sto3g(m: &Molecule) -> BasisContext {
    BasisContext::build(m, &BasisSet::sto3g()).unwrap()
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn h2() -> Molecule {
    corpus::reference_molecule("h2").unwrap()
}

/// (shell, cartesian powers) of every basis function.
fn functions(shells: &[Shell]) -> Vec<(&Shell, [usize; 3])> {
    let mut out = Vec::new();
    for s in shells {
        if s.angular_momentum == 0 {
            out.push((s, [0, 0, 0]));
        } else {
            for k in 0..3 {
                let mut p = [0; 3];
                p[k] = 1;
                out.push((s, p));
            }
        }
    }
    out
}

fn evaluate(s: &Shell, pw: [usize; 3], r: [f64; 3]) -> f64 {
    let d: [f64; 3] = std::array::from_fn(|k| r[k] - s.center[k]);
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let radial: f64 = s.exponents.iter().zip(&s.coefficients).map(|(a, c)| c * (-a * r2).exp()).sum();
    radial * (0..3).map(|k| d[k].powi(pw[k] as i32)).product::<f64>()
}

#[test]
fn h2_overlap_matches_dense_grid() {
    let m = h2();
    let shells = BasisSet::sto3g().shells_for(&m).unwrap();
    let ctx = sto3g(&m);
    let h = 0.05;
    let lo = [-6.0, -6.0, -6.0 + m.atoms[0].position[2].min(m.atoms[1].position[2])];
    let steps = (12.0 / h) as usize + 1;
    let mut s01 = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps + 40 {
                let r = [lo[0] + i as f64 * h, lo[1] + j as f64 * h, lo[2] + k as f64 * h];
                s01 += evaluate(&shells[0], [0; 3], r) * evaluate(&shells[1], [0; 3], r);
            }
        }
    }
    s01 *= h * h * h;
    assert!((s01 - ctx.overlap[(0, 1)]).abs() < 1e-6, "{s01} vs {}", ctx.overlap[(0, 1)]);
}

#[test]
fn h2_self_repulsion_matches_radial_shell_integration() {
    // χ0² is spherical, so its potential follows from the shell theorem.
    let m = h2();
    let shells = BasisSet::sto3g().shells_for(&m).unwrap();
    let s = &shells[0];
    let rho = |r: f64| {
        let v: f64 = s.exponents.iter().zip(&s.coefficients).map(|(a, c)| c * (-a * r * r).exp()).sum();
        v * v
    };
    let n = 200_000;
    let r_max = 15.0;
    let h = r_max / n as f64;
    let rs: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let inner: Vec<f64> = rs.iter().map(|&r| 4.0 * PI * r * r * rho(r)).collect();
    let outer: Vec<f64> = rs.iter().map(|&r| 4.0 * PI * r * rho(r)).collect();
    let mut q = vec![0.0; n + 1];
    for i in 1..=n {
        q[i] = q[i - 1] + 0.5 * h * (inner[i] + inner[i - 1]);
    }
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + 0.5 * h * (outer[i] + outer[i + 1]);
    }
    let pot = |i: usize| if i == 0 { tail[0] } else { q[i] / rs[i] + tail[i] };
    let mut j = 0.0;
    for i in 1..=n {
        j += 0.5 * h * (inner[i] * pot(i) + inner[i - 1] * pot(i - 1));
    }
    let ctx = sto3g(&m);
    assert!((j - ctx.eri.get(0, 0, 0, 0)).abs() < 1e-4, "{j} vs {}", ctx.eri.get(0, 0, 0, 0));
}

/// Polynomial in y with coefficient k on y^k.
fn shifted_power(d: f64, n: usize) -> Vec<f64> {
    // (y + d)^n
    let mut p = vec![1.0];
    for _ in 0..n {
        let mut q = vec![0.0; p.len() + 1];
        for (k, &c) in p.iter().enumerate() {
            q[k + 1] += c;
            q[k] += c * d;
        }
        p = q;
    }
    p
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// ∫ y^k exp(-c y²) dy.
fn moment(k: usize, c: f64) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut v = (PI / c).sqrt();
    for m in (1..k).step_by(2) {
        v *= m as f64 / (2.0 * c);
    }
    v
}

/// One Cartesian factor, Σ_k w_k (x−A)^k exp(−a (x−A)²).
struct Factor {
    a: f64,
    centre: f64,
    poly: Vec<f64>,
}

/// ∫ f(x) g(x) exp(−t² (x−C)²) (x^m) dx by Gaussian moments.
fn factor_integral(f: &Factor, g: &Factor, t2: f64, c_pos: f64, x_power: usize) -> f64 {
    let c = f.a + g.a + t2;
    let q = (f.a * f.centre + g.a * g.centre + t2 * c_pos) / c;
    let pre = (-(f.a * g.a * (f.centre - g.centre).powi(2)
        + f.a * t2 * (f.centre - c_pos).powi(2)
        + g.a * t2 * (g.centre - c_pos).powi(2))
        / c)
        .exp();
    let expand = |fac: &Factor| {
        let mut out = vec![0.0];
        for (k, &w) in fac.poly.iter().enumerate() {
            let term: Vec<f64> = shifted_power(q - fac.centre, k).iter().map(|x| x * w).collect();
            if out.len() < term.len() {
                out.resize(term.len(), 0.0);
            }
            for (i, v) in term.iter().enumerate() {
                out[i] += v;
            }
        }
        out
    };
    let prod = poly_mul(&poly_mul(&expand(f), &expand(g)), &shifted_power(q, x_power));
    pre * prod.iter().enumerate().map(|(k, w)| w * moment(k, c)).sum::<f64>()
}

fn factor(s: &Shell, prim: usize, pw: [usize; 3], k: usize) -> Factor {
    let mut poly = vec![0.0; pw[k] + 1];
    poly[pw[k]] = 1.0;
    Factor { a: s.exponents[prim], centre: s.center[k], poly }
}

/// Second derivative of a single-power factor.
fn second_derivative(f: &Factor) -> Factor {
    let i = f.poly.len() - 1;
    let mut poly = vec![0.0; i + 3];
    if i >= 2 {
        poly[i - 2] += (i * (i - 1)) as f64;
    }
    poly[i] -= 2.0 * f.a * (2 * i + 1) as f64;
    poly[i + 2] += 4.0 * f.a * f.a;
    Factor { a: f.a, centre: f.centre, poly }
}

/// Gauss–Legendre nodes and weights on [0, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

/// S, T, V, D_x of one function pair by separable quadrature; V uses
/// 1/r = (2/√π) ∫ exp(−t² r²) dt over t = u/(1−u).
fn quadrature_one_electron(
    (sa, pa): (&Shell, [usize; 3]),
    (sb, pb): (&Shell, [usize; 3]),
    m: &Molecule,
    nodes: &[(f64, f64)],
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..sa.exponents.len() {
        for j in 0..sb.exponents.len() {
            let w = sa.coefficients[i] * sb.coefficients[j];
            let fa: Vec<Factor> = (0..3).map(|k| factor(sa, i, pa, k)).collect();
            let fb: Vec<Factor> = (0..3).map(|k| factor(sb, j, pb, k)).collect();
            let s1: Vec<f64> = (0..3).map(|k| factor_integral(&fa[k], &fb[k], 0.0, 0.0, 0)).collect();
            let t1: Vec<f64> =
                (0..3).map(|k| factor_integral(&fa[k], &second_derivative(&fb[k]), 0.0, 0.0, 0)).collect();
            out[0] += w * s1[0] * s1[1] * s1[2];
            out[1] += w * -0.5 * (t1[0] * s1[1] * s1[2] + s1[0] * t1[1] * s1[2] + s1[0] * s1[1] * t1[2]);
            out[3] += w * factor_integral(&fa[0], &fb[0], 0.0, 0.0, 1) * s1[1] * s1[2];
            for atom in &m.atoms {
                let mut v = 0.0;
                for &(u, wu) in nodes {
                    let t = u / (1.0 - u);
                    let jac = 1.0 / ((1.0 - u) * (1.0 - u));
                    let prod: f64 = (0..3)
                        .map(|k| factor_integral(&fa[k], &fb[k], t * t, atom.position[k], 0))
                        .product();
                    v += wu * jac * prod;
                }
                out[2] -= w * atom.atomic_number as f64 * 2.0 / PI.sqrt() * v;
            }
        }
    }
    out
}

#[test]
fn sampled_one_electron_integrals_match_quadrature_on_corpus() {
    let nodes = gauss_legendre(400);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in corpus::reference_molecules() {
        let shells = BasisSet::sto3g().shells_for(&m).unwrap();
        let fns = functions(&shells);
        let ctx = sto3g(&m);
        for _ in 0..20 {
            let (mu, nu) = (rng.gen_range(0..fns.len()), rng.gen_range(0..fns.len()));
            let [s, t, v, dx] = quadrature_one_electron(fns[mu], fns[nu], &m, &nodes);
            let name = &m.name;
            assert!((s - ctx.overlap[(mu, nu)]).abs() < 1e-6, "{name} S[{mu},{nu}]");
            assert!((t - ctx.kinetic[(mu, nu)]).abs() < 1e-6, "{name} T[{mu},{nu}]");
            assert!((v - ctx.nuclear[(mu, nu)]).abs() < 1e-6, "{name} V[{mu},{nu}]: {v} vs {}", ctx.nuclear[(mu, nu)]);
            assert!((dx - ctx.dipole[0][(mu, nu)]).abs() < 1e-6, "{name} Dx[{mu},{nu}]");
        }
    }
}

#[test]
fn single_hydrogen_overlap_is_one() {
    let shells = BasisSet::sto3g().shells_for(&Molecule { name: "h".into(), atoms: h2().atoms[..1].to_vec(), charge: 0 }).unwrap();
    let one = integrals::one_electron_integrals(&shells, &h2());
    assert!((one.overlap[(0, 0)] - 1.0).abs() < 1e-10);
}

#[test]
fn translation_invariance() {
    for name in ["h2o", "ch3oh"] {
        let m = corpus::reference_molecule(name).unwrap();
        let a = sto3g(&m);
        let b = sto3g(&m.translated([1.0, 2.0, 3.0]));
        assert!(max_diff(&a.overlap, &b.overlap) < 1e-12);
        assert!(max_diff(&a.kinetic, &b.kinetic) < 1e-12);
        assert!(max_diff(&a.nuclear, &b.nuclear) < 1e-10);
    }
}

#[test]
fn eri_symmetry_and_finiteness_on_corpus() {
    for m in corpus::reference_molecules() {
        let ctx = sto3g(&m);
        let n = ctx.n_basis;
        let e = &ctx.eri;
        assert!(e.as_slice().iter().all(|v| v.is_finite()));
        for mats in [&ctx.overlap, &ctx.kinetic, &ctx.nuclear, &ctx.dipole[0], &ctx.dipole[1], &ctx.dipole[2]] {
            assert!(mats.iter().all(|v| v.is_finite()));
            assert!(max_diff(mats, &mats.transpose()) < 1e-12);
        }
        for i in 0..n {
            assert!((ctx.overlap[(i, i)] - 1.0).abs() < 1e-10);
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let v = e.get(i, j, k, l);
                        assert_eq!(v, e.get(j, i, k, l));
                        assert_eq!(v, e.get(i, j, l, k));
                        assert_eq!(v, e.get(k, l, i, j));
                        assert_eq!(v, e.get(j, i, l, k));
                    }
                }
            }
        }
        let xsx = ctx.x.transpose() * &ctx.overlap * &ctx.x;
        assert!(max_diff(&xsx, &DMatrix::identity(n, n)) < 1e-10, "{}", m.name);
    }
}

fn rotation(seed: u64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = nalgebra::Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    let angle = rng.gen_range(0.1..3.0);
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

/// Block-diagonal map taking the original basis to the rotated one.
fn basis_rotation(ctx: &BasisContext, r: &Matrix3<f64>) -> DMatrix<f64> {
    let n = ctx.n_basis;
    let mut u = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        if ctx.ao_l[i] == 0 {
            u[(i, i)] = 1.0;
            i += 1;
        } else {
            for a in 0..3 {
                for b in 0..3 {
                    u[(i + a, i + b)] = r[(a, b)];
                }
            }
            i += 3;
        }
    }
    u
}

fn converged_energy(ctx: &BasisContext) -> f64 {
    let (c, _) = scf::solve_roothaan(&ctx.hcore, ctx).unwrap();
    let p0 = scf::density_from_orbitals(&c, ctx.n_occ).unwrap();
    let t = scf::scf_run(&p0, ctx, &ScfOptions::default()).unwrap();
    assert!(t.converged);
    t.energy()
}

#[test]
fn rotation_covariance() {
    for (seed, name) in ["h2", "h2o", "ch3oh", "hcn"].iter().enumerate() {
        let m = corpus::reference_molecule(name).unwrap();
        let r = rotation(seed as u64);
        let a = sto3g(&m);
        let b = sto3g(&m.rotated(&r));
        let u = basis_rotation(&a, &r);
        for (x, y) in [(&a.overlap, &b.overlap), (&a.kinetic, &b.kinetic), (&a.nuclear, &b.nuclear)] {
            assert!(max_diff(&(&u * x * u.transpose()), y) < 1e-10, "{name}");
        }
        assert!((converged_energy(&a) - converged_energy(&b)).abs() < 1e-10, "{name}");
    }
}

#[test]
fn relabeling_h2_permutes_eri() {
    let m = h2();
    let a = sto3g(&m);
    let b = sto3g(&m.permuted(&[1, 0]));
    let p = |i: usize| 1 - i;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    assert!((a.eri.get(i, j, k, l) - b.eri.get(p(i), p(j), p(k), p(l))).abs() < 1e-14);
                }
            }
        }
    }
    assert!((converged_energy(&a) - converged_energy(&b)).abs() < 1e-12);
}

#[test]
fn random_spd_orthogonalizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
    let s = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
    let x = integrals::inverse_sqrt_overlap(&s).unwrap();
    assert!(max_diff(&x, &x.transpose()) < 1e-14);
    assert!(max_diff(&(x.transpose() * &s * &x), &DMatrix::identity(5, 5)) < 1e-10);
}

#[test]
fn memory_cap_is_enforced() {
    let m = corpus::reference_molecule("h2o").unwrap();
    let err = BasisContext::build_with_cap(&m, &BasisSet::sto3g(), 1000).unwrap_err();
    assert!(matches!(err, Error::MemoryCap { required_bytes: 19208, cap_bytes: 1000 }));
}

#[test]
fn cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus::reference_molecule("h2o").unwrap();
    let built = cache::load_or_build(dir.path(), &m, sailscf::chem_io::STO3G).unwrap();
    let loaded = cache::load_or_build(dir.path(), &m, sailscf::chem_io::STO3G).unwrap();
    assert_eq!(built.eri, loaded.eri);
    assert_eq!(built.overlap, loaded.overlap);
    assert_eq!(built.x, loaded.x);
    assert_eq!(built.ao_l, loaded.ao_l);

    let key = cache::cache_key(&m, sailscf::chem_io::STO3G);
    let mut buf = Vec::new();
    cache::write_context(&built, &key, &mut buf).unwrap();
    let other = cache::cache_key(&m.translated([0.0, 0.0, 1e-9]), sailscf::chem_io::STO3G);
    assert!(matches!(cache::read_context(&mut buf.as_slice(), &other), Err(Error::Cache(_))));
    buf.truncate(buf.len() - 3);
    assert!(cache::read_context(&mut buf.as_slice(), &key).is_err());
}
