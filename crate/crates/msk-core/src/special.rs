//! Scalar hyperbolic helpers evaluated without overflow or cancellation.

use std::f64::consts::LN_2;

/// `log cosh x`, written as `|x| + log((1 + e^{-2|x|}) / 2)` so that large
/// arguments never overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// `sech x = 1 / cosh x`, equal to zero once `cosh` overflows.
pub fn sech(x: f64) -> f64 {
    1.0 / x.cosh()
}

/// Below this magnitude the two functions below switch to their Taylor series.
const SERIES_CUTOFF: f64 = 0.1;

/// Derivative of `tanh²(x) / x`, i.e. `2 tanh x sech² x / x − tanh² x / x²`.
///
/// By Gaussian integration by parts, `E[tanh²(σz)] / σ² = E[g(σz)]` with `g`
/// this function, so the ratio can be evaluated without dividing by a small
/// `σ²`.
pub fn tanh_sq_over_x_slope(x: f64) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        let y = x * x;
        // 1 − 2y + 17y²/9 − 62y³/45 + 1382y⁴/1575 − 21844y⁵/42525 + 929569y⁶/3274425
        1.0 + y
            * (-2.0
                + y * (17.0 / 9.0
                    + y * (-62.0 / 45.0
                        + y * (1382.0 / 1575.0
                            + y * (-21844.0 / 42525.0 + y * (929569.0 / 3274425.0))))))
    } else {
        let t = x.tanh();
        let s2 = 1.0 - t * t;
        2.0 * t * s2 / x - t * t / (x * x)
    }
}

/// `sech⁴ x − tanh_sq_over_x_slope(x)`, which behaves like `4x⁴/9` near zero.
///
/// Its Gaussian average measures how far the zero-field stability matrix sits
/// above the fixed-point ratio; the series branch keeps full relative accuracy
/// for tiny arguments where the direct difference would cancel.
pub fn stability_excess(x: f64) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        let y = x * x;
        y * y
            * (4.0 / 9.0
                + y * (-32.0 / 45.0
                    + y * (376.0 / 525.0
                        + y * (-24608.0 / 42525.0
                            + y * (1341364.0 / 3274425.0 + y * (-3764672.0 / 14189175.0))))))
    } else {
        let s = sech(x);
        s.powi(4) - tanh_sq_over_x_slope(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cosh_matches_naive_in_safe_range() {
        for &x in &[-20.0, -3.0, -0.5, 0.0, 1e-8, 0.7, 5.0, 30.0] {
            let naive: f64 = f64::cosh(x).ln();
            assert!((log_cosh(x) - naive).abs() <= 1e-14 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn log_cosh_is_finite_for_huge_arguments() {
        assert!((log_cosh(1e6) - (1e6 - LN_2)).abs() < 1e-6);
    }

    #[test]
    fn series_and_direct_branches_agree_at_cutoff() {
        for &x in &[0.0999999, 0.1000001, 0.09, 0.11] {
            let t = f64::tanh(x);
            let direct = 2.0 * t * (1.0 - t * t) / x - t * t / (x * x);
            assert!((tanh_sq_over_x_slope(x) - direct).abs() < 1e-14);
            let s = 1.0 / f64::cosh(x);
            let excess = s.powi(4) - direct;
            assert!((stability_excess(x) - excess).abs() < 1e-14);
        }
    }

    #[test]
    fn stability_excess_leading_term() {
        let x: f64 = 1e-3;
        let lead = 4.0 / 9.0 * x.powi(4);
        assert!((stability_excess(x) - lead).abs() < 1e-5 * lead);
    }
}
