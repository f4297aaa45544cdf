//! Exact Gaussian-process regression with the squared-exponential kernel.
//!
//! The posterior mean reverts to zero away from training data, which is what
//! makes the GP usable as an additive corrector: where nothing was learned,
//! nothing is corrected.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dataset::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_symmetric, KernelHyperparams};
use crate::linalg::{cholesky_with_jitter, clamp_variance, log_det_half};
use crate::opt::{minimize, OptConfig, OptOutcome};

const LN_2PI: f64 = 1.8378770664093453;

/// A fitted exact GP: Cholesky factor of K + σ_n²I and the weight vector
/// α = (K + σ_n²I)⁻¹ y, plus the input map the model was trained under.
#[derive(Debug, Clone)]
pub struct ExactGpModel {
    hyper: KernelHyperparams,
    standardizer: Standardizer,
    train_inputs: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    jitter: f64,
}

fn regularized_covariance(inputs: &DMatrix<f64>, hyper: &KernelHyperparams) -> Result<DMatrix<f64>> {
    let mut ky = kernel_matrix_symmetric(inputs, hyper)?;
    for i in 0..ky.nrows() {
        ky[(i, i)] += hyper.noise_variance;
    }
    Ok(ky)
}

fn fit_in_space(
    data: &Dataset,
    hyper: &KernelHyperparams,
    standardizer: Standardizer,
) -> Result<ExactGpModel> {
    hyper.validate()?;
    if hyper.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: hyper.dim(),
            context: "lengthscales per input dimension",
        });
    }
    let z = standardizer.transform_matrix(data.inputs())?;
    let ky = regularized_covariance(&z, hyper)?;
    let (factor, jitter) = cholesky_with_jitter(&ky, hyper.signal_variance)?;
    let weights = factor.solve(data.targets());
    Ok(ExactGpModel {
        hyper: hyper.clone(),
        standardizer,
        train_inputs: z,
        factor,
        weights,
        jitter,
    })
}

/// Fit with per-dimension input standardization estimated from `data`.
pub fn fit_exact(data: &Dataset, hyper: &KernelHyperparams) -> Result<ExactGpModel> {
    fit_in_space(data, hyper, Standardizer::fit(data.inputs()))
}

/// Fit in the raw input space (no standardization). Useful when the caller
/// already controls the scale of the inputs, and for oracle comparisons.
pub fn fit_exact_raw(data: &Dataset, hyper: &KernelHyperparams) -> Result<ExactGpModel> {
    fit_in_space(data, hyper, Standardizer::identity(data.dim()))
}

impl ExactGpModel {
    /// Posterior (mean, variance) of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let z = self.standardizer.transform_row(x)?;
        let zs = DMatrix::from_row_slice(1, z.len(), &z);
        let kstar = kernel_matrix(&self.train_inputs, &zs, &self.hyper)?;
        let kcol = kstar.column(0);
        let mean = kcol.dot(&self.weights);
        let v = self.factor.solve(&kcol.clone_owned());
        let variance = clamp_variance(self.hyper.signal_variance - kcol.dot(&v), self.hyper.signal_variance)?;
        Ok((mean, variance))
    }

    pub fn predict_batch(&self, xs: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut means = Vec::with_capacity(xs.nrows());
        let mut vars = Vec::with_capacity(xs.nrows());
        let mut row = vec![0.0; xs.ncols()];
        for i in 0..xs.nrows() {
            for j in 0..xs.ncols() {
                row[j] = xs[(i, j)];
            }
            let (m, v) = self.predict(&row)?;
            means.push(m);
            vars.push(v);
        }
        Ok((means, vars))
    }

    pub fn hyper(&self) -> &KernelHyperparams {
        &self.hyper
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Training inputs in model space (standardized).
    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    /// Lower-triangular Cholesky factor of the regularized covariance.
    pub fn factor_l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The regularized covariance the factor was computed from, including any
    /// jitter that was applied.
    pub fn regularized_covariance(&self) -> Result<DMatrix<f64>> {
        let mut ky = regularized_covariance(&self.train_inputs, &self.hyper)?;
        for i in 0..ky.nrows() {
            ky[(i, i)] += self.jitter;
        }
        Ok(ky)
    }
}

/// Log marginal likelihood of `data` under the kernel, with its gradient in
/// log-parameter space [ln σ_f², ln ℓ_1…ln ℓ_d, ln σ_n²].
///
/// value = −½ yᵀα − Σ_i ln L_ii − (n/2) ln 2π
///
/// The gradient uses ∂/∂θ = ½ tr((ααᵀ − K_y⁻¹) ∂K_y/∂θ). Any jitter applied
/// to rescue the factorization is treated as a constant of the covariance.
pub fn log_marginal_likelihood(data: &Dataset, hyper: &KernelHyperparams) -> Result<(f64, Vec<f64>)> {
    hyper.validate()?;
    if hyper.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: hyper.dim(),
            context: "lengthscales per input dimension",
        });
    }
    let x = data.inputs();
    let y = data.targets();
    let n = data.n();
    let d = data.dim();

    let k = kernel_matrix_symmetric(x, hyper)?;
    let mut ky = k.clone();
    for i in 0..n {
        ky[(i, i)] += hyper.noise_variance;
    }
    let (factor, _jitter) = cholesky_with_jitter(&ky, hyper.signal_variance)?;
    let alpha = factor.solve(y);
    let value = -0.5 * y.dot(&alpha) - log_det_half(&factor) - 0.5 * n as f64 * LN_2PI;

    // G = ααᵀ − K_y⁻¹, symmetric.
    let mut gmat = factor.inverse();
    for i in 0..n {
        for j in 0..n {
            let v = alpha[i] * alpha[j] - gmat[(i, j)];
            gmat[(i, j)] = v;
        }
    }

    let mut grad = vec![0.0; d + 2];
    // ∂K_y/∂ln σ_f² = K (noise-free part scales with the signal variance).
    grad[0] = 0.5 * gmat.iter().zip(k.iter()).map(|(g, kv)| g * kv).sum::<f64>();
    // ∂K_y/∂ln ℓ_j multiplies each entry by (Δ_j/ℓ_j)².
    for j in 0..d {
        let lj2 = hyper.lengthscales[j] * hyper.lengthscales[j];
        let mut s = 0.0;
        for r in 0..n {
            for c in (r + 1)..n {
                let delta = x[(r, j)] - x[(c, j)];
                s += 2.0 * gmat[(r, c)] * k[(r, c)] * delta * delta / lj2;
            }
        }
        grad[1 + j] = 0.5 * s;
    }
    // ∂K_y/∂ln σ_n² = σ_n² I.
    grad[d + 1] = 0.5 * hyper.noise_variance * gmat.diagonal().sum();

    Ok((value, grad))
}

/// Maximize the log marginal likelihood from `init`, in log space, in the
/// input space of `data` as given.
pub fn optimize_hyperparams(
    data: &Dataset,
    init: &KernelHyperparams,
    cfg: &OptConfig,
) -> Result<(KernelHyperparams, OptOutcome)> {
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let h = KernelHyperparams::from_log_vec(theta)?;
        let (value, grad) = log_marginal_likelihood(data, &h)?;
        Ok((-value, grad.iter().map(|g| -g).collect()))
    };
    let out = minimize(objective, &init.to_log_vec(), cfg)?;
    let hyper = KernelHyperparams::from_log_vec(&out.x)?;
    Ok((hyper, out))
}

/// Standardize inputs, optimize hyperparameters by marginal likelihood, and
/// fit the final model in the standardized space.
pub fn fit_exact_optimized(
    data: &Dataset,
    init: &KernelHyperparams,
    cfg: &OptConfig,
) -> Result<ExactGpModel> {
    let standardizer = Standardizer::fit(data.inputs());
    let z = Dataset::new(standardizer.transform_matrix(data.inputs())?, data.targets().clone())?;
    let (hyper, _) = optimize_hyperparams(&z, init, cfg)?;
    fit_in_space(data, &hyper, standardizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn single_point() -> (Dataset, KernelHyperparams) {
        let data = Dataset::from_rows(&[vec![0.0]], &[0.7]).unwrap();
        let hyper = KernelHyperparams::new(2.0, vec![1.5], 0.5).unwrap();
        (data, hyper)
    }

    #[test]
    fn single_point_posterior_is_analytic() {
        let (data, hyper) = single_point();
        let model = fit_exact_raw(&data, &hyper).unwrap();
        let (mean, var) = model.predict(&[0.0]).unwrap();
        // mean = σ_f² t / (σ_f² + σ_n²), var = σ_f² − σ_f⁴/(σ_f² + σ_n²).
        assert_relative_eq!(mean, 2.0 * 0.7 / 2.5, max_relative = 1e-12);
        assert_relative_eq!(var, 2.0 - 4.0 / 2.5, max_relative = 1e-12);
    }

    #[test]
    fn single_point_lml_and_gradient_are_analytic() {
        let (data, hyper) = single_point();
        let (value, grad) = log_marginal_likelihood(&data, &hyper).unwrap();
        let s: f64 = 2.5; // σ_f² + σ_n²
        let expected = -0.5 * 0.7 * 0.7 / s - 0.5 * s.ln() - 0.5 * LN_2PI;
        assert_relative_eq!(value, expected, max_relative = 1e-12);
        let g = 0.7 * 0.7 / (s * s) - 1.0 / s;
        assert_relative_eq!(grad[0], 0.5 * g * 2.0, max_relative = 1e-12);
        assert_relative_eq!(grad[2], 0.5 * g * 0.5, max_relative = 1e-12);
        // A single point carries no lengthscale information.
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn zero_targets_give_zero_weights_and_prior_far_away() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0]], &[0.0, 0.0, 0.0]).unwrap();
        let hyper = KernelHyperparams::new(1.3, vec![0.8], 0.05).unwrap();
        let model = fit_exact_raw(&data, &hyper).unwrap();
        assert!(model.weights().iter().all(|w| *w == 0.0));
        let (mean, var) = model.predict(&[60.0]).unwrap();
        assert_eq!(mean, 0.0);
        assert_relative_eq!(var, 1.3, max_relative = 1e-12);
    }

    #[test]
    fn factor_reproduces_regularized_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let hyper = KernelHyperparams::new(0.9, vec![0.6, 1.1, 2.0], 0.01).unwrap();
        let model = fit_exact_raw(&data, &hyper).unwrap();
        let l = model.factor_l();
        let rebuilt = &l * l.transpose();
        let ky = model.regularized_covariance().unwrap();
        let rel = (&rebuilt - &ky).norm() / ky.norm();
        assert!(rel <= 1e-10, "relative factor error {rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let targets: Vec<f64> = rows.iter().map(|r| (r[0]).sin() + 0.3 * r[1]).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let hyper = KernelHyperparams::new(0.8, vec![1.2, 0.7], 0.05).unwrap();

        let (_, grad) = log_marginal_likelihood(&data, &hyper).unwrap();
        let theta = hyper.to_log_vec();
        let h = 1e-5;
        for p in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[p] += h;
            minus[p] -= h;
            let fp = log_marginal_likelihood(&data, &KernelHyperparams::from_log_vec(&plus).unwrap())
                .unwrap()
                .0;
            let fm = log_marginal_likelihood(&data, &KernelHyperparams::from_log_vec(&minus).unwrap())
                .unwrap()
                .0;
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[p].abs().max(fd.abs()).max(1e-6);
            assert!(
                (grad[p] - fd).abs() / denom <= 1e-5,
                "param {p}: analytic {} vs fd {fd}",
                grad[p]
            );
        }
    }

    #[test]
    fn optimization_improves_likelihood() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r[0].sin()).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let init = KernelHyperparams::new(1.0, vec![1.0], 0.5).unwrap();
        let before = log_marginal_likelihood(&data, &init).unwrap().0;
        let (tuned, out) = optimize_hyperparams(&data, &init, &OptConfig::default()).unwrap();
        let after = log_marginal_likelihood(&data, &tuned).unwrap().0;
        assert!(after > before, "LML {before} -> {after}, iters {}", out.iterations);
        // Noise on a noiseless sine should collapse well below the init.
        assert!(tuned.noise_variance < 0.05);
    }

    #[test]
    fn standardized_fit_predicts_training_points() {
        // Badly scaled inputs: one dimension in thousands, one tiny.
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![1000.0 + 10.0 * i as f64, 1e-3 * i as f64])
            .collect();
        let targets: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).cos()).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let hyper = KernelHyperparams::new(1.0, vec![1.0, 1.0], 1e-4).unwrap();
        let model = fit_exact(&data, &hyper).unwrap();
        for (row, t) in rows.iter().zip(&targets) {
            let (mean, _) = model.predict(row).unwrap();
            assert_relative_eq!(mean, *t, epsilon = 0.05);
        }
    }
}
