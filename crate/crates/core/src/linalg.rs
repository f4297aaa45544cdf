//! Shared numerical policies: jittered Cholesky and variance rounding.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// First diagonal boost tried when a covariance fails to factor, as a
/// fraction of the signal variance.
pub const JITTER_BASE: f64 = 1e-10;
/// Largest tolerated boost before giving up, as a fraction of the signal
/// variance.
pub const JITTER_CAP: f64 = 1e-4;
/// Negative predictive variances beyond −NEG_VARIANCE_TOL·σ_f² are treated
/// as real errors rather than rounding.
pub const NEG_VARIANCE_TOL: f64 = 1e-10;

/// Cholesky factorization with an escalating jitter ladder.
///
/// Tries the matrix as given, then adds `JITTER_BASE·scale` to the diagonal,
/// escalating tenfold up to `JITTER_CAP·scale`. Returns the factor and the
/// jitter that was actually applied (0 when none was needed).
pub fn cholesky_with_jitter(a: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    debug_assert_eq!(a.nrows(), a.ncols());
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok((ch, 0.0));
    }
    let mut jitters = Vec::new();
    let mut jitter = JITTER_BASE * scale;
    let cap = JITTER_CAP * scale;
    while jitter <= cap * (1.0 + 1e-12) {
        jitters.push(jitter);
        let mut boosted = a.clone();
        for i in 0..a.nrows() {
            boosted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(boosted) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitters })
}

/// Round tiny negative predictive variances up to zero; anything below the
/// tolerated band is a genuine numerical failure and is surfaced.
pub fn clamp_variance(v: f64, signal_variance: f64) -> Result<f64> {
    let tol = NEG_VARIANCE_TOL * signal_variance;
    if v >= 0.0 {
        Ok(v)
    } else if v >= -tol {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance { value: v, tolerance: tol })
    }
}

/// Sum of log-diagonal entries of a Cholesky factor, i.e. ½·log det of the
/// factored matrix.
pub fn log_det_half(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum()
}
