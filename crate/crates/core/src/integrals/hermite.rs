//! McMurchie–Davidson Hermite machinery: expansion coefficients E^{ij}_t of a
//! one-dimensional Gaussian product, and Hermite Coulomb integrals R_{tuv}.

use super::boys::boys;

/// Highest Cartesian power handled on either side (p functions plus the +2
/// needed by the kinetic-energy formula).
pub const MAX_I: usize = 1;
pub const MAX_J: usize = 3;
const MAX_T: usize = MAX_I + MAX_J + 1;

/// E^{ij}_t for one Cartesian direction.
#[derive(Clone, Copy, Debug)]
pub struct HermiteE {
    e: [[[f64; MAX_T + 1]; MAX_J + 1]; MAX_I + 1],
}

impl HermiteE {
    /// `a`, `b`: exponents on centres A and B; `xab` = A − B along this axis.
    pub fn new(i_max: usize, j_max: usize, a: f64, b: f64, xab: f64) -> Self {
        debug_assert!(i_max <= MAX_I && j_max <= MAX_J);
        let p = a + b;
        let mu = a * b / p;
        let xpa = -b * xab / p;
        let xpb = a * xab / p;
        let half_p = 0.5 / p;
        let mut e = [[[0.0; MAX_T + 1]; MAX_J + 1]; MAX_I + 1];
        e[0][0][0] = (-mu * xab * xab).exp();
        for i in 0..i_max {
            for t in 0..=i + 1 {
                let lower = if t > 0 { e[i][0][t - 1] } else { 0.0 };
                let upper = if t < i { e[i][0][t + 1] } else { 0.0 };
                let mid = if t <= i { e[i][0][t] } else { 0.0 };
                e[i + 1][0][t] = half_p * lower + xpa * mid + (t + 1) as f64 * upper;
            }
        }
        for i in 0..=i_max {
            for j in 0..j_max {
                for t in 0..=i + j + 1 {
                    let lower = if t > 0 { e[i][j][t - 1] } else { 0.0 };
                    let upper = if t < i + j { e[i][j][t + 1] } else { 0.0 };
                    let mid = if t <= i + j { e[i][j][t] } else { 0.0 };
                    e[i][j + 1][t] = half_p * lower + xpb * mid + (t + 1) as f64 * upper;
                }
            }
        }
        HermiteE { e }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.e[i][j][t]
    }
}

/// Largest t+u+v needed: (pp|pp) electron repulsion.
pub const MAX_N: usize = 4;

/// Hermite Coulomb integrals R_{tuv}(alpha, PC) for t+u+v ≤ n_max,
/// stored in a dense cube.
#[derive(Clone, Debug)]
pub struct HermiteR {
    r: [[[f64; MAX_N + 1]; MAX_N + 1]; MAX_N + 1],
}

impl HermiteR {
    pub fn new(n_max: usize, alpha: f64, pc: [f64; 3]) -> Self {
        debug_assert!(n_max <= MAX_N);
        let r2 = pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
        let mut f = [0.0; MAX_N + 1];
        boys(n_max, alpha * r2, &mut f);
        // work[n][t][u][v] = R^n_{tuv}
        let mut work = [[[[0.0; MAX_N + 1]; MAX_N + 1]; MAX_N + 1]; MAX_N + 1];
        let mut scale = 1.0;
        for n in 0..=n_max {
            work[n][0][0][0] = scale * f[n];
            scale *= -2.0 * alpha;
        }
        // Build R^n_{tuv} from R^{n+1} with total order ≤ n_max - n.
        for n in (0..n_max).rev() {
            let budget = n_max - n;
            for t in 0..=budget {
                for u in 0..=budget - t {
                    for v in 0..=budget - t - u {
                        if t + u + v == 0 {
                            continue;
                        }
                        let val = if t > 0 {
                            let prev = if t > 1 { (t - 1) as f64 * work[n + 1][t - 2][u][v] } else { 0.0 };
                            prev + pc[0] * work[n + 1][t - 1][u][v]
                        } else if u > 0 {
                            let prev = if u > 1 { (u - 1) as f64 * work[n + 1][t][u - 2][v] } else { 0.0 };
                            prev + pc[1] * work[n + 1][t][u - 1][v]
                        } else {
                            let prev = if v > 1 { (v - 1) as f64 * work[n + 1][t][u][v - 2] } else { 0.0 };
                            prev + pc[2] * work[n + 1][t][u][v - 1]
                        };
                        work[n][t][u][v] = val;
                    }
                }
            }
        }
        HermiteR { r: work[0] }
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, v: usize) -> f64 {
        self.r[t][u][v]
    }
}
