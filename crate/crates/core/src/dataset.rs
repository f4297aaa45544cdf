//! Training data container and input standardization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A regression training set. Rows of `inputs` are samples; `targets` holds
/// one value per row. Everything must be finite.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::InvalidData("empty training set".into()));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: targets.len(),
                context: "targets per input row",
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in training set".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("empty training set".into()));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
                context: "ragged input rows",
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            DMatrix::from_row_slice(rows.len(), d, &flat),
            DVector::from_column_slice(targets),
        )
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// Population variance of the targets; used to seed hyperparameter guesses.
    pub fn target_variance(&self) -> f64 {
        let mean = self.targets.mean();
        self.targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / self.n() as f64
    }
}

/// Per-dimension affine map z_j = (x_j − mean_j) / scale_j fitted on training
/// inputs. Constant dimensions get scale 1 so they map to exactly zero.
///
/// Only inputs are ever standardized. Targets stay in their native units:
/// centering them would silently break the zero-mean reversion of the GP
/// corrector far from data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Standardizer {
    const SCALE_FLOOR: f64 = 1e-12;

    pub fn fit(inputs: &DMatrix<f64>) -> Self {
        let (n, d) = (inputs.nrows(), inputs.ncols());
        let mut means = vec![0.0; d];
        let mut scales = vec![1.0; d];
        for j in 0..d {
            let col = inputs.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            means[j] = mean;
            let sd = var.sqrt();
            scales[j] = if sd > Self::SCALE_FLOOR { sd } else { 1.0 };
        }
        Self { means, scales }
    }

    /// The identity map in `dim` dimensions.
    pub fn identity(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "standardizer input",
            });
        }
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn transform_matrix(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: inputs.ncols(),
                context: "standardizer input",
            });
        }
        let mut out = inputs.clone();
        for j in 0..self.dim() {
            let (m, s) = (self.means[j], self.scales[j]);
            for v in out.column_mut(j).iter_mut() {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_mismatched_and_nonfinite() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(Dataset::new(x.clone(), DVector::from_column_slice(&[1.0])).is_err());
        assert!(Dataset::new(x, DVector::from_column_slice(&[1.0, f64::NAN])).is_err());
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 5.0, 2.0, 5.0, 4.0, 5.0, 6.0, 5.0]);
        let s = Standardizer::fit(&x);
        let z = s.transform_matrix(&x).unwrap();
        // First column: mean 3, population sd sqrt(5).
        assert_relative_eq!(z.column(0).sum(), 0.0, epsilon = 1e-12);
        let var: f64 = z.column(0).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_relative_eq!(var, 1.0, max_relative = 1e-12);
        // Constant column maps to zero with unit scale, not a blow-up.
        assert!(z.column(1).iter().all(|v| *v == 0.0));
        assert_eq!(s.scales()[1], 1.0);
    }

    #[test]
    fn row_and_matrix_agree() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, -1.0, 5.0, 0.5]);
        let s = Standardizer::fit(&x);
        let z = s.transform_matrix(&x).unwrap();
        for i in 0..3 {
            let row = s.transform_row(&[x[(i, 0)], x[(i, 1)]]).unwrap();
            assert_eq!(row[0], z[(i, 0)]);
            assert_eq!(row[1], z[(i, 1)]);
        }
    }
}
