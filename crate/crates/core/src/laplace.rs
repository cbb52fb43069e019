//! Laplace transforms of measured time series.
//!
//! The reconstruction pipelines work with `u~(x, p) = int_0^inf u(x,t)
//! e^{-pt} dt` at small positive `p`. Finite data covers `[0, T]` only, and
//! for diffusive decay (`u ~ c/t` in 2D) the truncated part of the integral
//! carries a non-negligible weight at small `p`, so the transform is
//! computed as a trapezoidal quadrature over the data window plus an
//! analytic tail: fit `u ~ c/t` on the last decade of data, and use
//! `int_T^inf (c/t) e^{-pt} dt = c E1(pT)` exactly.

use crate::error::{CoreError, Result};
use crate::special::exp_integral_e1;

/// How to extrapolate the series beyond the data window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailModel {
    /// Integrate the data window only (appropriate for exponentially
    /// decaying series).
    None,
    /// Fit `c/t` on the last decade of the window and add `c E1(pT)`.
    InverseTime,
}

/// Minimum number of samples inside the final decade for the tail fit.
const MIN_TAIL_SAMPLES: usize = 4;

/// Laplace transform of a uniformly sampled series `u(k*dt), k = 0..n`,
/// evaluated at `p > 0`.
pub fn laplace_transform(samples: &[f64], dt: f64, p: f64, tail: TailModel) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "Laplace parameter must be positive and finite, got {p}"
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "sample spacing must be positive and finite, got {dt}"
        )));
    }
    if samples.len() < 2 {
        return Err(CoreError::InvalidParameter(format!(
            "need at least two samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidParameter(
            "series contains non-finite samples".into(),
        ));
    }

    let n = samples.len() - 1;
    let t_data = n as f64 * dt;
    let mut integral = 0.0;
    let mut prev = samples[0]; // e^{-p*0} = 1
    for (k, &u) in samples.iter().enumerate().skip(1) {
        let weighted = u * (-p * k as f64 * dt).exp();
        integral += 0.5 * dt * (prev + weighted);
        prev = weighted;
    }

    match tail {
        TailModel::None => Ok(integral),
        TailModel::InverseTime => {
            // Least-squares c for u ~ c/t over t in [T/10, T].
            let t_lo = t_data / 10.0;
            let mut num = 0.0;
            let mut den = 0.0;
            let mut count = 0usize;
            for (k, &u) in samples.iter().enumerate() {
                let t = k as f64 * dt;
                if t >= t_lo && t > 0.0 {
                    num += u / t;
                    den += 1.0 / (t * t);
                    count += 1;
                }
            }
            if count < MIN_TAIL_SAMPLES {
                return Err(CoreError::InvalidParameter(format!(
                    "series too short to fit the 1/t tail: {count} samples in the last decade"
                )));
            }
            let c = num / den;
            Ok(integral + c * exp_integral_e1(p * t_data))
        }
    }
}
