//! Model averaging over a candidate pool: the posterior predictive is a
//! mixture of the candidates' predictives, weighted by a Gaussian kernel on
//! each candidate's RMSE gap to the pool's best.
//!
//! The averaged corrector is evaluated at the shared rolled-out state each
//! step, so the mixture stays a single dynamical model rather than an
//! average of diverging trajectories.

use crate::error::{Error, Result};
use crate::hybrid::{rollout, Corrector, HybridModel, Rollout};
use crate::pbm::{Forcing, PbmParams, PbmState};
use crate::spgp::SpgpModel;

/// Floor on the weight temperature when derived from pool spread.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

/// Normalized candidate weights with the evidence they came from.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    weights: Vec<f64>,
    rmses: Vec<f64>,
    temperature: f64,
}

impl ModelWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rmses(&self) -> &[f64] {
        &self.rmses
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Turn per-candidate RMSEs into normalized weights
/// wᵢ ∝ exp(−(rmseᵢ − min rmse)²/(2τ²)).
///
/// `temperature` of `None` uses the standard deviation of the finite RMSEs,
/// floored at [`TEMPERATURE_FLOOR`]; candidates with non-finite RMSE get
/// weight zero.
pub fn compute_weights(rmses: &[f64], temperature: Option<f64>) -> Result<ModelWeights> {
    let finite: Vec<f64> = rmses.iter().copied().filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::InvalidData("no finite RMSEs to weight".into()));
    }
    if finite.iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidData("negative RMSE".into()));
    }
    let tau = match temperature {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => {
            return Err(Error::InvalidConfig(format!(
                "weight temperature must be positive and finite, got {t}"
            )))
        }
        None => {
            let mean = finite.iter().sum::<f64>() / finite.len() as f64;
            let var =
                finite.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / finite.len() as f64;
            var.sqrt().max(TEMPERATURE_FLOOR)
        }
    };
    let best = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = rmses
        .iter()
        .map(|r| {
            if r.is_finite() {
                let d = (r - best) / tau;
                (-0.5 * d * d).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        // All finite gaps underflowed except none: at least the argmin has
        // weight exp(0) = 1, so this cannot happen with finite inputs.
        return Err(Error::InvalidData("weight normalization collapsed".into()));
    }
    Ok(ModelWeights {
        weights: raw.iter().map(|w| w / total).collect(),
        rmses: rmses.to_vec(),
        temperature: tau,
    })
}

/// Weighted posterior mean over candidate means.
pub fn bma_mean(candidate_means: &[f64], weights: &ModelWeights) -> Result<f64> {
    if candidate_means.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: candidate_means.len(),
            context: "candidate means vs weights",
        });
    }
    Ok(candidate_means.iter().zip(weights.weights()).map(|(m, w)| w * m).sum())
}

/// Build the mixture corrector for a weighted pool.
pub fn bma_corrector(models: &[SpgpModel], weights: &ModelWeights) -> Result<Corrector> {
    if models.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: models.len(),
            context: "candidate models vs weights",
        });
    }
    if models.is_empty() {
        return Err(Error::InvalidData("empty candidate pool".into()));
    }
    Ok(Corrector::Mixture(
        weights.weights().iter().copied().zip(models.iter().cloned()).collect(),
    ))
}

/// Closed-loop rollout under the weighted-average correction, applied at the
/// shared current state each step.
pub fn bma_rollout(
    models: &[SpgpModel],
    weights: &ModelWeights,
    params: &PbmParams,
    initial: &PbmState,
    forcing: &[Forcing],
) -> Result<Rollout> {
    let model = HybridModel {
        params: params.clone(),
        corrector: bma_corrector(models, weights)?,
    };
    rollout(&model, initial, forcing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::kernel::KernelHyperparams;
    use crate::spgp::{condition_spgp, InducingSet};
    use nalgebra::{DMatrix, DVector};

    fn toy_model(targets: &[f64]) -> SpgpModel {
        let n = targets.len();
        let inputs = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.7);
        let data = Dataset::new(inputs.clone(), DVector::from_row_slice(targets)).unwrap();
        let hyper = KernelHyperparams::new(1.0, vec![1.0], 1e-4).unwrap();
        let inducing = InducingSet::new(inputs).unwrap();
        condition_spgp(&data, &hyper, &inducing, false).unwrap()
    }

    #[test]
    fn single_model_gets_weight_one() {
        let w = compute_weights(&[0.42], None).unwrap();
        assert_eq!(w.weights(), &[1.0]);
    }

    #[test]
    fn equal_rmses_give_uniform_weights() {
        let w = compute_weights(&[0.3, 0.3, 0.3, 0.3], None).unwrap();
        for wi in w.weights() {
            assert!((wi - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_model_weights_match_hand_arithmetic() {
        // Gap of 0.02 at τ = 0.02 → weights ∝ (1, e^{−1/2}).
        let w = compute_weights(&[0.02, 0.04], Some(0.02)).unwrap();
        assert!((w.weights()[0] - 0.6225).abs() < 1e-4, "{:?}", w.weights());
        assert!((w.weights()[1] - 0.3775).abs() < 1e-4);
        let mean = bma_mean(&[0.1, -0.1], &w).unwrap();
        assert!((mean - 0.0245).abs() < 1e-4);
    }

    #[test]
    fn weighted_mean_examples() {
        let w = compute_weights(&[1.0, 1.0], Some(1.0)).unwrap();
        assert!((bma_mean(&[1.0, 3.0], &w).unwrap() - 2.0).abs() < 1e-15);
        assert!(bma_mean(&[1.0], &w).is_err());
    }

    #[test]
    fn temperature_limits() {
        let rmses = [0.1, 0.2, 0.4];
        let hot = compute_weights(&rmses, Some(1e9)).unwrap();
        for wi in hot.weights() {
            assert!((wi - 1.0 / 3.0).abs() < 1e-9);
        }
        let cold = compute_weights(&rmses, Some(1e-12)).unwrap();
        assert_eq!(cold.weights()[0], 1.0);
        assert_eq!(cold.weights()[1], 0.0);

        // Tied argmins split the mass uniformly as τ → 0.
        let tied = compute_weights(&[0.1, 0.1, 0.4], Some(1e-12)).unwrap();
        assert!((tied.weights()[0] - 0.5).abs() < 1e-15);
        assert!((tied.weights()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_rmses_get_zero_weight() {
        let w = compute_weights(&[0.2, f64::NAN, 0.2], None).unwrap();
        assert_eq!(w.weights()[1], 0.0);
        assert!((w.weights()[0] - 0.5).abs() < 1e-15);
        assert!(compute_weights(&[f64::NAN, f64::INFINITY], None).is_err());
        assert!(compute_weights(&[0.1], Some(0.0)).is_err());
        assert!(compute_weights(&[0.1], Some(-1.0)).is_err());
    }

    #[test]
    fn weights_are_normalized_and_nonnegative() {
        let w = compute_weights(&[0.33, 0.11, 0.92, 0.48], None).unwrap();
        assert!(w.weights().iter().all(|wi| *wi >= 0.0));
        let sum: f64 = w.weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_hot_mixture_reproduces_single_model_exactly() {
        let a = toy_model(&[0.5, -0.2, 0.8, 0.1]);
        let b = toy_model(&[-1.0, 2.0, -3.0, 4.0]);
        let cold = compute_weights(&[0.1, 0.9], Some(1e-12)).unwrap();
        let mixture = bma_corrector(&[a.clone(), b], &cold).unwrap();
        for x in [-0.3, 0.0, 0.9, 2.1] {
            let (mu_mix, _) = mixture.correction(&[x]).unwrap();
            let (mu_a, _) = a.predict(&[x]).unwrap();
            assert_eq!(mu_mix.to_bits(), mu_a.to_bits());
        }
    }

    #[test]
    fn mixture_correction_stays_within_candidate_range() {
        let a = toy_model(&[0.5, -0.2, 0.8, 0.1]);
        let b = toy_model(&[-1.0, 2.0, -3.0, 4.0]);
        let w = compute_weights(&[0.2, 0.3], None).unwrap();
        let mixture = bma_corrector(&[a.clone(), b.clone()], &w).unwrap();
        for x in [-0.5, 0.2, 1.1, 1.9, 3.0] {
            let (mu_mix, var_mix) = mixture.correction(&[x]).unwrap();
            let (mu_a, _) = a.predict(&[x]).unwrap();
            let (mu_b, _) = b.predict(&[x]).unwrap();
            let lo = mu_a.min(mu_b) - 1e-12;
            let hi = mu_a.max(mu_b) + 1e-12;
            assert!(mu_mix >= lo && mu_mix <= hi, "{mu_mix} outside [{lo}, {hi}]");
            assert!(var_mix >= 0.0);
        }
    }
}
