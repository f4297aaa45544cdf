//! Squared-exponential covariance with per-dimension lengthscales.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Hyperparameters of the anisotropic squared-exponential kernel
///
/// k(x, x') = σ_f² · exp(−½ Σ_j (x_j − x'_j)² / ℓ_j²)
///
/// together with the observation noise variance σ_n² that is added to the
/// diagonal of the training covariance. One lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let h = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        h.validate()?;
        Ok(h)
    }

    /// Isotropic convenience constructor: the same lengthscale in every dimension.
    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize, noise_variance: f64) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim], noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidHyperparams("no lengthscales given".into()));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.signal_variance) {
            return Err(Error::InvalidHyperparams(format!(
                "signal variance must be finite and positive, got {}",
                self.signal_variance
            )));
        }
        if !pos(self.noise_variance) {
            return Err(Error::InvalidHyperparams(format!(
                "noise variance must be finite and positive, got {}",
                self.noise_variance
            )));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !pos(**l)) {
            return Err(Error::InvalidHyperparams(format!(
                "lengthscales must be finite and positive, got {l}"
            )));
        }
        Ok(())
    }

    /// Pack as [ln σ_f², ln ℓ_1, …, ln ℓ_d, ln σ_n²] for unconstrained optimization.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.signal_variance.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    /// Inverse of [`to_log_vec`](Self::to_log_vec).
    pub fn from_log_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::InvalidHyperparams(format!(
                "log-parameter vector needs at least 3 entries, got {}",
                v.len()
            )));
        }
        let d = v.len() - 2;
        Self::new(
            v[0].exp(),
            v[1..=d].iter().map(|x| x.exp()).collect(),
            v[d + 1].exp(),
        )
    }
}

/// ½ Σ_j (a_j − b_j)² / ℓ_j², the exponent argument of the kernel.
#[inline]
fn half_scaled_sq_dist(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..lengthscales.len() {
        let r = (a[j] - b[j]) / lengthscales[j];
        s += r * r;
    }
    0.5 * s
}

/// Kernel value between two points. Errors if either point's dimension
/// disagrees with the number of lengthscales.
pub fn se_kernel(x: &[f64], x_prime: &[f64], hyper: &KernelHyperparams) -> Result<f64> {
    let d = hyper.dim();
    for (p, ctx) in [(x, "left kernel argument"), (x_prime, "right kernel argument")] {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
                context: ctx,
            });
        }
    }
    Ok(hyper.signal_variance * (-half_scaled_sq_dist(x, x_prime, &hyper.lengthscales)).exp())
}

fn check_inputs(m: &DMatrix<f64>, d: usize, context: &'static str) -> Result<()> {
    if m.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m.ncols(),
            context,
        });
    }
    Ok(())
}

/// Cross-covariance matrix between the rows of `a` (n×d) and `b` (m×d); the
/// result is n×m. Rows are samples, columns are input dimensions.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, hyper: &KernelHyperparams) -> Result<DMatrix<f64>> {
    let d = hyper.dim();
    check_inputs(a, d, "kernel rows")?;
    check_inputs(b, d, "kernel columns")?;
    let (n, m) = (a.nrows(), b.nrows());
    let sf = hyper.signal_variance;
    let ls = &hyper.lengthscales;
    let mut arow = vec![0.0; d];
    let mut brow = vec![0.0; d];
    let mut k = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..d {
            arow[j] = a[(i, j)];
        }
        for c in 0..m {
            for j in 0..d {
                brow[j] = b[(c, j)];
            }
            k[(i, c)] = sf * (-half_scaled_sq_dist(&arow, &brow, ls)).exp();
        }
    }
    Ok(k)
}

/// Symmetric covariance of the rows of `a` with themselves; only the upper
/// triangle is computed and mirrored. The diagonal is exactly σ_f².
pub fn kernel_matrix_symmetric(a: &DMatrix<f64>, hyper: &KernelHyperparams) -> Result<DMatrix<f64>> {
    let d = hyper.dim();
    check_inputs(a, d, "kernel rows")?;
    let n = a.nrows();
    let sf = hyper.signal_variance;
    let ls = &hyper.lengthscales;
    let mut arow = vec![0.0; d];
    let mut brow = vec![0.0; d];
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf;
        for j in 0..d {
            arow[j] = a[(i, j)];
        }
        for c in (i + 1)..n {
            for j in 0..d {
                brow[j] = a[(c, j)];
            }
            let v = sf * (-half_scaled_sq_dist(&arow, &brow, ls)).exp();
            k[(i, c)] = v;
            k[(c, i)] = v;
        }
    }
    Ok(k)
}

/// Prior variance at every row of `a`: a constant σ_f² vector for this kernel.
pub fn kernel_diag(a: &DMatrix<f64>, hyper: &KernelHyperparams) -> DVector<f64> {
    DVector::from_element(a.nrows(), hyper.signal_variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_hyper(d: usize) -> KernelHyperparams {
        KernelHyperparams::isotropic(1.0, 1.0, d, 0.1).unwrap()
    }

    #[test]
    fn unit_distance_value() {
        // σ_f² = 1, ℓ = 1, |x − x'| = 1 ⇒ k = e^{−1/2}.
        let k = se_kernel(&[0.0], &[1.0], &unit_hyper(1)).unwrap();
        assert_relative_eq!(k, (-0.5f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn self_covariance_is_signal_variance() {
        let h = KernelHyperparams::new(2.5, vec![0.3, 4.0], 0.01).unwrap();
        let x = [0.7, -1.2];
        assert_eq!(se_kernel(&x, &x, &h).unwrap(), 2.5);
    }

    #[test]
    fn anisotropy_weighs_dimensions_separately() {
        let h = KernelHyperparams::new(1.0, vec![1.0, 10.0], 0.1).unwrap();
        // A unit step along the long-lengthscale axis decays far less.
        let k_short = se_kernel(&[0.0, 0.0], &[1.0, 0.0], &h).unwrap();
        let k_long = se_kernel(&[0.0, 0.0], &[0.0, 1.0], &h).unwrap();
        assert!(k_long > k_short);
        assert_relative_eq!(k_long, (-0.005f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(se_kernel(&[0.0, 1.0], &[0.0], &unit_hyper(2)).is_err());
        assert!(se_kernel(&[0.0], &[0.0, 1.0], &unit_hyper(1)).is_err());
    }

    #[test]
    fn non_positive_hyperparams_rejected() {
        assert!(KernelHyperparams::new(0.0, vec![1.0], 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, vec![-1.0], 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, vec![1.0], 0.0).is_err());
        assert!(KernelHyperparams::new(f64::NAN, vec![1.0], 0.1).is_err());
    }

    #[test]
    fn log_vec_round_trip() {
        let h = KernelHyperparams::new(0.8, vec![0.2, 3.0, 11.0], 1e-4).unwrap();
        let back = KernelHyperparams::from_log_vec(&h.to_log_vec()).unwrap();
        assert_relative_eq!(back.signal_variance, h.signal_variance, max_relative = 1e-14);
        assert_relative_eq!(back.noise_variance, h.noise_variance, max_relative = 1e-14);
        for (a, b) in back.lengthscales.iter().zip(&h.lengthscales) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn cross_matrix_matches_pointwise_kernel() {
        let h = KernelHyperparams::new(1.7, vec![0.9, 2.0], 0.1).unwrap();
        let a = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -1.0, 0.5, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, -1.0, 0.7]);
        let k = kernel_matrix(&a, &b, &h).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let ai = [a[(i, 0)], a[(i, 1)]];
                let bj = [b[(j, 0)], b[(j, 1)]];
                assert_eq!(k[(i, j)], se_kernel(&ai, &bj, &h).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_bounded_unit_diag(
            xs in prop::collection::vec(-50.0f64..50.0, 2..24),
            sf in 0.01f64..10.0,
            l in 0.05f64..20.0,
        ) {
            let n = xs.len() / 2;
            let a = DMatrix::from_row_slice(n, 2, &xs[..n * 2]);
            let h = KernelHyperparams::isotropic(sf, l, 2, 0.1).unwrap();
            let k = kernel_matrix_symmetric(&a, &h).unwrap();
            for i in 0..n {
                prop_assert_eq!(k[(i, i)], sf);
                for j in 0..n {
                    prop_assert_eq!(k[(i, j)], k[(j, i)]);
                    // Positive up to exp underflow at extreme scaled distances.
                    prop_assert!(k[(i, j)] >= 0.0 && k[(i, j)] <= sf);
                }
            }
        }
    }
}
