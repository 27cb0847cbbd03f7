//! Boys function F_n(x) = ∫₀¹ t²ⁿ exp(-x t²) dt.

use std::f64::consts::PI;

/// Below this argument the top order comes from the power series, above it
/// from the asymptotic form (exp(-x) is then below 1e-15).
const SERIES_LIMIT: f64 = 35.0;

/// Fills `out[0..=n_max]` with F_0(x) .. F_{n_max}(x).
///
/// Small x: series for the highest order, then stable downward recursion.
/// Large x: asymptotic F_0 and upward recursion, which is stable there.
pub fn boys(n_max: usize, x: f64, out: &mut [f64]) {
    debug_assert!(out.len() > n_max);
    let ex = (-x).exp();
    if x < SERIES_LIMIT {
        // F_n(x) = exp(-x) Σ_k (2x)^k / ((2n+1)(2n+3)...(2n+2k+1))
        let mut term = 1.0 / (2 * n_max + 1) as f64;
        let mut sum = term;
        let mut k = 1;
        loop {
            term *= 2.0 * x / (2 * n_max + 2 * k + 1) as f64;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1;
        }
        out[n_max] = ex * sum;
        for n in (0..n_max).rev() {
            out[n] = (2.0 * x * out[n + 1] + ex) / (2 * n + 1) as f64;
        }
    } else {
        out[0] = 0.5 * (PI / x).sqrt();
        for n in 0..n_max {
            out[n + 1] = ((2 * n + 1) as f64 * out[n] - ex) / (2.0 * x);
        }
    }
}
