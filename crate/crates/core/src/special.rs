//! Special functions used by the reconstruction pipelines: the Macdonald
//! function `K0`, the exponential integral `E1`, and the exact cell average
//! of the logarithmic singularity.
//!
//! Implementations are self-contained power series / asymptotic expansions /
//! continued fractions with the branch switches chosen so the worst relative
//! error (near the switch points) stays below `1e-7`, and far better in the
//! small-argument regime the pipelines actually hit. Reference values in the
//! tests were computed independently at high precision and frozen.

use num_complex::Complex64;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Mean of `ln|y|` over the unit square `[-1/2, 1/2]^2`:
/// `-(ln 2)/2 - 3/2 + pi/4`.
pub const LN_CELL_UNIT_MEAN: f64 = -1.061_175_426_882_524_3;

/// Modified Bessel function of the second kind, order zero.
///
/// Power series (with the `I0`-coupled logarithm) for `z <= 2`, where the
/// cancellation between the log term and the corrector sum costs at most one
/// decimal digit; trapezoidal quadrature of the `cosh` integral
/// representation beyond. Panics on non-positive arguments.
pub fn bessel_k0(z: f64) -> f64 {
    assert!(z > 0.0 && z.is_finite(), "bessel_k0 requires z > 0, got {z}");
    if z <= 2.0 {
        // K0(z) = -(ln(z/2) + gamma) I0(z) + sum_{k>=1} (z^2/4)^k / (k!)^2 * H_k
        let q = z * z / 4.0;
        let lg = (z / 2.0).ln() + EULER_GAMMA;
        let mut term = 1.0; // (z^2/4)^k / (k!)^2 at k = 0
        let mut i0 = 1.0;
        let mut sum = 0.0;
        let mut harmonic = 0.0;
        for k in 1..200 {
            term *= q / ((k * k) as f64);
            harmonic += 1.0 / k as f64;
            i0 += term;
            sum += term * harmonic;
            if term * (1.0 + harmonic) < 1e-18 * (i0.abs() + sum.abs()) {
                break;
            }
        }
        -lg * i0 + sum
    } else {
        // K0(z) = e^{-z} int_0^inf e^{-z(cosh t - 1)} dt. The integrand is
        // analytic in the strip |Im t| < pi/2, so the trapezoid converges
        // geometrically, with relative error about e^{z - pi^2/h}; shrinking
        // the spacing mildly with z keeps that at machine level for a few
        // dozen nodes. cosh t - 1 is evaluated as 2 sinh^2(t/2) to avoid
        // cancellation near t = 0.
        let h = (std::f64::consts::PI.powi(2) / (z + 38.0)).min(0.25);
        let mut sum = 0.5; // t = 0 node: integrand equals 1
        for k in 1.. {
            let t = k as f64 * h;
            let e = 2.0 * z * (0.5 * t).sinh().powi(2);
            if e > 45.0 {
                break;
            }
            sum += (-e).exp();
        }
        h * sum * (-z).exp()
    }
}

/// Exponential integral `E1(x) = int_x^inf e^{-t}/t dt` for `x > 0`.
///
/// Series for `x <= 1`, modified Lentz continued fraction beyond.
pub fn exp_integral_e1(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "E1 requires x > 0, got {x}");
    if x <= 1.0 {
        // E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k k!)
        let mut sum = 0.0;
        let mut term = 1.0; // x^k / k! at k = 0
        for k in 1..60 {
            term *= x / k as f64;
            let contrib = if k % 2 == 1 { term } else { -term } / k as f64;
            sum += contrib;
            if term / (k as f64) < 1e-18 * (1.0 + sum.abs()) {
                break;
            }
        }
        -EULER_GAMMA - x.ln() + sum
    } else {
        // E1(x) = e^{-x} / (x + 1 - 1^2/(x + 3 - 2^2/(x + 5 - ...)))
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for k in 1..200u32 {
            let a = -((k * k) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let delta = c * d;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// Exact mean of `ln |y|` over a square cell of side `a` centered at the
/// origin: `ln a + LN_CELL_UNIT_MEAN`. Used wherever a quadrature rule would
/// otherwise sample `ln 0` at a coincident node.
pub fn ln_cell_mean(a: f64) -> f64 {
    assert!(a > 0.0, "cell side must be positive");
    a.ln() + LN_CELL_UNIT_MEAN
}

/// Complex square root with the principal branch, for `sqrt(p)` arguments
/// that may sit on the positive real axis.
pub fn sqrt_c(p: Complex64) -> Complex64 {
    p.sqrt()
}
