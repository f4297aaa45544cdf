//! Sparse GP regression with pseudo-inputs (FITC approximation).
//!
//! The full covariance is replaced by Q + diag(K − Q) + σ_n²I with
//! Q = K_nm K_mm⁻¹ K_mn, which keeps exact per-point variances while making
//! training O(n·m²). Pseudo-input locations are free parameters optimized
//! jointly with the kernel hyperparameters by marginal likelihood.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_symmetric, KernelHyperparams};
use crate::linalg::{clamp_variance, JITTER_BASE, JITTER_CAP, NEG_VARIANCE_TOL};
use crate::opt::{minimize, OptConfig, OptOutcome};

const LN_2PI: f64 = 1.8378770664093453;

/// Pseudo-input locations, one row per inducing point.
#[derive(Debug, Clone)]
pub struct InducingSet {
    points: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidData("empty inducing set".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite inducing point".into()));
        }
        Ok(Self { points })
    }

    /// A seeded random subset of `m` distinct training rows.
    pub fn from_subset(inputs: &DMatrix<f64>, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > inputs.nrows() {
            return Err(Error::InvalidData(format!(
                "inducing count {m} outside 1..={}",
                inputs.nrows()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, inputs.nrows(), m);
        let mut z = DMatrix::zeros(m, inputs.ncols());
        for (r, i) in idx.iter().enumerate() {
            for j in 0..inputs.ncols() {
                z[(r, j)] = inputs[(i, j)];
            }
        }
        Self::new(z)
    }

    /// A seeded subset of `m` distinct rows drawn without replacement with
    /// probability proportional to `weights`. Zero-weight rows are drawn
    /// only after every positive-weight row is exhausted.
    pub fn from_weighted_subset(
        inputs: &DMatrix<f64>,
        weights: &[f64],
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 || m > inputs.nrows() {
            return Err(Error::InvalidData(format!(
                "inducing count {m} outside 1..={}",
                inputs.nrows()
            )));
        }
        if weights.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: weights.len(),
                context: "inducing subset weights",
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidData("subset weights must be finite and >= 0".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidData("subset weights sum to zero".into()));
        }
        // Exponential-race keys: row i wins with key ln(u_i)/w_i, the
        // without-replacement analogue of weighted sampling.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut keyed: Vec<(f64, usize)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
                (key, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut z = DMatrix::zeros(m, inputs.ncols());
        for (r, (_, i)) in keyed.iter().take(m).enumerate() {
            for j in 0..inputs.ncols() {
                z[(r, j)] = inputs[(*i, j)];
            }
        }
        Self::new(z)
    }

    pub fn m(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }
}

/// Parameter packing for joint optimization:
/// [ln σ_f², ln ℓ_1…ln ℓ_d, ln σ_n², z_11…z_1d, z_21…, z_md].
pub fn pack_params(hyper: &KernelHyperparams, inducing: &InducingSet) -> Vec<f64> {
    let mut theta = hyper.to_log_vec();
    let z = inducing.points();
    for a in 0..z.nrows() {
        for j in 0..z.ncols() {
            theta.push(z[(a, j)]);
        }
    }
    theta
}

pub fn unpack_params(theta: &[f64], d: usize, m: usize) -> Result<(KernelHyperparams, InducingSet)> {
    let nh = d + 2;
    if theta.len() != nh + m * d {
        return Err(Error::DimensionMismatch {
            expected: nh + m * d,
            got: theta.len(),
            context: "packed FITC parameter vector",
        });
    }
    let hyper = KernelHyperparams::from_log_vec(&theta[..nh])?;
    let z = DMatrix::from_row_slice(m, d, &theta[nh..]);
    Ok((hyper, InducingSet::new(z)?))
}

/// Factorizations shared by likelihood, gradient, and model construction.
///
/// With W = K_mn, A = K_mm + jitter·I, L_m L_mᵀ = A, V = L_m⁻¹W:
/// γ_i = σ_f² − ‖V_:,i‖², g_i = γ_i + σ_n²,
/// B = I + V diag(1/g) Vᵀ = L_B L_Bᵀ, β = y/g, c = L_B⁻¹ V β.
struct FitcFactors {
    w: DMatrix<f64>,
    a: DMatrix<f64>,
    lm: DMatrix<f64>,
    v: DMatrix<f64>,
    gamma: DVector<f64>,
    g: DVector<f64>,
    lb: DMatrix<f64>,
    beta: DVector<f64>,
    c: DVector<f64>,
    value: f64,
    jitter: f64,
}

/// Cholesky of K_mm with a baseline jitter of JITTER_BASE·σ_f² always
/// applied (keeps the objective smooth while pseudo-inputs drift close to
/// one another), escalating tenfold when the factorization still fails.
fn chol_kmm(z: &DMatrix<f64>, hyper: &KernelHyperparams) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let kmm = kernel_matrix_symmetric(z, hyper)?;
    let mut jitter = JITTER_BASE * hyper.signal_variance;
    let cap = JITTER_CAP * hyper.signal_variance;
    let mut jitters = Vec::new();
    while jitter <= cap * (1.0 + 1e-12) {
        let mut a = kmm.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        jitters.push(jitter);
        if let Some(ch) = nalgebra::Cholesky::new(a.clone()) {
            return Ok((a, ch.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitters })
}

fn fitc_factorize(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &KernelHyperparams,
    inducing: &InducingSet,
) -> Result<FitcFactors> {
    hyper.validate()?;
    let n = x.nrows();
    let m = inducing.m();
    let z = inducing.points();

    let (a, lm, jitter) = chol_kmm(z, hyper)?;
    let w = kernel_matrix(z, x, hyper)?; // m×n
    let v = lm
        .solve_lower_triangular(&w)
        .ok_or_else(|| Error::Factorization { jitters: vec![jitter] })?;

    let mut gamma = DVector::zeros(n);
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let q = v.column(i).norm_squared();
        gamma[i] = hyper.signal_variance - q;
        g[i] = gamma[i] + hyper.noise_variance;
        if g[i] <= 0.0 {
            return Err(Error::NegativeVariance {
                value: g[i],
                tolerance: NEG_VARIANCE_TOL * hyper.signal_variance,
            });
        }
    }

    // B = I + V diag(1/g) Vᵀ, built from V with columns scaled by 1/√g.
    let mut vs = v.clone();
    for i in 0..n {
        let s = 1.0 / g[i].sqrt();
        for r in 0..m {
            vs[(r, i)] *= s;
        }
    }
    let mut b = &vs * vs.transpose();
    for r in 0..m {
        b[(r, r)] += 1.0;
    }
    let lb = nalgebra::Cholesky::new(b)
        .ok_or_else(|| Error::Factorization { jitters: vec![jitter] })?
        .unpack();

    let mut beta = y.clone();
    for i in 0..n {
        beta[i] /= g[i];
    }
    let vb = &v * &beta;
    let c = lb
        .solve_lower_triangular(&vb)
        .ok_or_else(|| Error::Factorization { jitters: vec![jitter] })?;

    // LML = −½[Σ ln g + 2 Σ ln diag(L_B) + yᵀβ − cᵀc + n ln 2π]
    let log_det: f64 = g.iter().map(|v| v.ln()).sum::<f64>()
        + 2.0 * (0..m).map(|r| lb[(r, r)].ln()).sum::<f64>();
    let quad = y.dot(&beta) - c.dot(&c);
    let value = -0.5 * (log_det + quad + n as f64 * LN_2PI);

    Ok(FitcFactors {
        w,
        a,
        lm,
        v,
        gamma,
        g,
        lb,
        beta,
        c,
        value,
        jitter,
    })
}

/// Gradient of the FITC log marginal likelihood in the packed layout of
/// [`pack_params`]. Never forms an n×n matrix.
///
/// Uses ∂LML/∂θ = ½ tr(H ∂Σ) with H = rrᵀ − Σ⁻¹, r = Σ⁻¹y, contracted
/// against ∂Σ = ∂WᵀA⁻¹W + WᵀA⁻¹∂W − WᵀA⁻¹∂A A⁻¹W + ∂diag(γ) + ∂σ_n²I via
///   S̃ = A⁻¹W(H − diag h),  T̃ = S̃WᵀA⁻¹,  h = diag H.
fn fitc_gradient(
    f: &FitcFactors,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &KernelHyperparams,
    inducing: &InducingSet,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    let d = x.ncols();
    let m = inducing.m();
    let z = inducing.points();
    let sf = hyper.signal_variance;
    let sn = hyper.noise_variance;

    let solve_lm = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        f.lm
            .solve_lower_triangular(rhs)
            .ok_or_else(|| Error::Factorization { jitters: vec![f.jitter] })
    };
    let solve_lm_t = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        f.lm
            .transpose()
            .solve_upper_triangular(rhs)
            .ok_or_else(|| Error::Factorization { jitters: vec![f.jitter] })
    };
    let solve_lb = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        f.lb
            .solve_lower_triangular(rhs)
            .ok_or_else(|| Error::Factorization { jitters: vec![f.jitter] })
    };
    let solve_lb_t = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        f.lb
            .transpose()
            .solve_upper_triangular(rhs)
            .ok_or_else(|| Error::Factorization { jitters: vec![f.jitter] })
    };

    // r = Σ⁻¹y = β − diag(1/g) Vᵀ L_B⁻ᵀ c
    let u = solve_lb_t(&DMatrix::from_column_slice(m, 1, f.c.as_slice()))?;
    let vtu = f.v.transpose() * u.column(0);
    let mut r = f.beta.clone();
    for i in 0..n {
        r[i] -= vtu[i] / f.g[i];
    }

    // P = Σ⁻¹Wᵀ = diag(1/g) Vᵀ B⁻¹ L_mᵀ  (n×m)
    let cmat = solve_lb_t(&solve_lb(&f.lm.transpose())?)?;
    let mut p = f.v.transpose() * &cmat;
    for i in 0..n {
        let s = 1.0 / f.g[i];
        for a_ in 0..m {
            p[(i, a_)] *= s;
        }
    }

    // diag(Σ⁻¹)_i = 1/g_i − ‖(L_B⁻¹V)_:,i‖² / g_i²
    let e = solve_lb(&f.v)?;
    let mut h = DVector::zeros(n);
    let mut trh = 0.0;
    for i in 0..n {
        let q = e.column(i).norm_squared();
        h[i] = r[i] * r[i] - (1.0 / f.g[i] - q / (f.g[i] * f.g[i]));
        trh += h[i];
    }

    // M = WH̃ = (Wr)rᵀ − Pᵀ − W diag(h);  S̃ = A⁻¹M;  T̃ = S̃WᵀA⁻¹
    let wr = &f.w * &r;
    let mut mmat = DMatrix::zeros(m, n);
    for i in 0..n {
        for a_ in 0..m {
            mmat[(a_, i)] = wr[a_] * r[i] - p[(i, a_)] - f.w[(a_, i)] * h[i];
        }
    }
    let stilde = solve_lm_t(&solve_lm(&mmat)?)?;
    let nmat = &stilde * f.w.transpose();
    let ttilde = solve_lm_t(&solve_lm(&nmat.transpose())?)?.transpose();

    let mut grad = vec![0.0; d + 2 + m * d];

    // ln σ_f²: ∂W = W, ∂A = A (jitter scales with σ_f² too), ∂k_nn = σ_f².
    let sw: f64 = stilde.iter().zip(f.w.iter()).map(|(s, w)| s * w).sum();
    let ta: f64 = ttilde.iter().zip(f.a.iter()).map(|(t, a_)| t * a_).sum();
    grad[0] = 0.5 * (2.0 * sw - ta + sf * trh);

    // ln σ_n²: ∂Σ = σ_n² I.
    grad[d + 1] = 0.5 * sn * trh;

    // Lengthscales and pseudo-input coordinates, fused over the same loops.
    // W-part: ⟨S̃, ∂W⟩ with ∂W_ai = W_ai·(z_aj−x_ij)²/ℓ_j² (lengthscale) or
    // −W_ai·(z_aj−x_ij)/ℓ_j² (coordinate z_aj).
    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    for a_ in 0..m {
        for i in 0..n {
            let swv = stilde[(a_, i)] * f.w[(a_, i)];
            for j in 0..d {
                let delta = z[(a_, j)] - x[(i, j)];
                grad[1 + j] += swv * delta * delta * inv_l2[j];
                grad[d + 2 + a_ * d + j] -= swv * delta * inv_l2[j];
            }
        }
    }
    // A-part: −½⟨T̃, ∂A⟩; off-diagonal entries only (diagonal is constant).
    for a_ in 0..m {
        for b_ in 0..m {
            if a_ == b_ {
                continue;
            }
            let ta_v = ttilde[(a_, b_)] * f.a[(a_, b_)];
            for j in 0..d {
                let delta = z[(a_, j)] - z[(b_, j)];
                grad[1 + j] -= 0.5 * ta_v * delta * delta * inv_l2[j];
                grad[d + 2 + a_ * d + j] += ta_v * delta * inv_l2[j];
            }
        }
    }

    let _ = y;
    Ok(grad)
}

/// FITC log marginal likelihood and its gradient with respect to the packed
/// parameters (log hyperparameters, then pseudo-input coordinates).
pub fn fitc_log_marginal_likelihood(
    data: &Dataset,
    hyper: &KernelHyperparams,
    inducing: &InducingSet,
) -> Result<(f64, Vec<f64>)> {
    check_dims(data, hyper, inducing)?;
    let f = fitc_factorize(data.inputs(), data.targets(), hyper, inducing)?;
    let grad = fitc_gradient(&f, data.inputs(), data.targets(), hyper, inducing)?;
    Ok((f.value, grad))
}

fn check_dims(data: &Dataset, hyper: &KernelHyperparams, inducing: &InducingSet) -> Result<()> {
    if hyper.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: hyper.dim(),
            context: "lengthscales per input dimension",
        });
    }
    if inducing.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: inducing.dim(),
            context: "inducing point dimension",
        });
    }
    if inducing.m() > data.n() {
        return Err(Error::InvalidData(format!(
            "more inducing points ({}) than training rows ({})",
            inducing.m(),
            data.n()
        )));
    }
    Ok(())
}

/// A fitted sparse GP. Caches the m×m factors and the conditioned vector c
/// so prediction costs O(m²) per point.
#[derive(Debug, Clone)]
pub struct SpgpModel {
    hyper: KernelHyperparams,
    standardizer: Standardizer,
    inducing: InducingSet,
    lm: DMatrix<f64>,
    lb: DMatrix<f64>,
    c: DVector<f64>,
    fitc_diag: DVector<f64>,
    jitter: f64,
    lml: f64,
}

impl SpgpModel {
    fn from_factors(
        f: FitcFactors,
        hyper: KernelHyperparams,
        standardizer: Standardizer,
        inducing: InducingSet,
    ) -> Result<Self> {
        // Stored per-point FITC variances: tiny negatives are rounding and
        // clamp to zero, anything worse is a real failure.
        let mut fitc_diag = f.gamma.clone();
        for v in fitc_diag.iter_mut() {
            *v = clamp_variance(*v, hyper.signal_variance)?;
        }
        Ok(Self {
            lm: f.lm,
            lb: f.lb,
            c: f.c,
            fitc_diag,
            jitter: f.jitter,
            lml: f.value,
            hyper,
            standardizer,
            inducing,
        })
    }

    /// Posterior (mean, variance) of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let zrow = self.standardizer.transform_row(x)?;
        let xs = DMatrix::from_row_slice(1, zrow.len(), &zrow);
        let kstar = kernel_matrix(self.inducing.points(), &xs, &self.hyper)?;
        let a = self
            .lm
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::Factorization { jitters: vec![self.jitter] })?;
        let b = self
            .lb
            .solve_lower_triangular(&a)
            .ok_or_else(|| Error::Factorization { jitters: vec![self.jitter] })?;
        let mean = b.column(0).dot(&self.c);
        let var = self.hyper.signal_variance - a.column(0).norm_squared() + b.column(0).norm_squared();
        Ok((mean, clamp_variance(var, self.hyper.signal_variance)?))
    }

    pub fn hyper(&self) -> &KernelHyperparams {
        &self.hyper
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Inducing locations in model (standardized) space.
    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    /// Clamped per-point FITC variances γ_i = k(x_i,x_i) − Q_ii.
    pub fn fitc_diag(&self) -> &DVector<f64> {
        &self.fitc_diag
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn inducing_count(&self) -> usize {
        self.inducing.m()
    }
}

/// Condition a sparse GP on `data` at fixed parameters (no optimization).
/// `standardize` controls whether inputs are z-scored first; when false the
/// inducing set is interpreted in raw input space.
pub fn condition_spgp(
    data: &Dataset,
    hyper: &KernelHyperparams,
    inducing: &InducingSet,
    standardize: bool,
) -> Result<SpgpModel> {
    check_dims(data, hyper, inducing)?;
    let standardizer = if standardize {
        Standardizer::fit(data.inputs())
    } else {
        Standardizer::identity(data.dim())
    };
    let z = standardizer.transform_matrix(data.inputs())?;
    let zin = InducingSet::new(standardizer.transform_matrix(inducing.points())?)?;
    let f = fitc_factorize(&z, data.targets(), hyper, &zin)?;
    SpgpModel::from_factors(f, hyper.clone(), standardizer, zin)
}

#[derive(Debug, Clone)]
pub struct SpgpOptions {
    /// Z-score inputs inside the model (recommended for physical features).
    pub standardize: bool,
    pub opt: OptConfig,
    /// Soft lower bound on the noise standard deviation, in target units.
    /// Zero disables it. FITC's heteroscedastic correction lets the search
    /// absorb observation noise into pseudo-input placement; when the noise
    /// level is known or estimable, penalizing ln σ_n² below the floor with
    /// a one-sided quadratic keeps the search out of that basin.
    pub noise_floor: f64,
    /// Per-row weights for the initial pseudo-input subset draw. Useful for
    /// residual targets where the structure is concentrated in a narrow
    /// regime that a uniform draw would miss. None draws uniformly.
    pub init_weights: Option<Vec<f64>>,
}

impl Default for SpgpOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            opt: OptConfig::default(),
            noise_floor: 0.0,
            init_weights: None,
        }
    }
}

/// Explicit starting point for [`fit_spgp_init`], in raw input space.
#[derive(Debug, Clone)]
pub struct SpgpInit {
    pub hyper: KernelHyperparams,
    pub inducing: InducingSet,
}

#[derive(Debug)]
pub struct SpgpFit {
    pub model: SpgpModel,
    pub opt: OptOutcome,
}

/// Fit a sparse GP with `m` pseudo-inputs initialized from a seeded random
/// subset of the training rows, with seed-dependent jitter on the initial
/// hyperparameters so independent restarts explore different basins.
pub fn fit_spgp(data: &Dataset, m: usize, seed: u64, options: &SpgpOptions) -> Result<SpgpFit> {
    if m == 0 || m > data.n() {
        return Err(Error::InvalidData(format!(
            "inducing count {m} outside 1..={}",
            data.n()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let var_y = data.target_variance().max(1e-8);
    let lognorm = |rng: &mut ChaCha12Rng, sd: f64| -> f64 {
        Normal::new(0.0, sd).unwrap().sample(rng).exp()
    };
    // Split the target variance evenly between signal and noise at the
    // start: residual targets are often noise-dominated, and a low noise
    // guess starts the search inside the FITC noise-absorption pathology
    // (pseudo-input placement soaking up what is really observation noise).
    let sf = 0.5 * var_y * lognorm(&mut rng, 0.3);
    let sn = 0.5 * var_y * lognorm(&mut rng, 0.5);
    let ls: Vec<f64> = (0..data.dim()).map(|_| lognorm(&mut rng, 0.3)).collect();

    // Lengthscale guesses of ~1 presume unit-scale inputs; in raw space we
    // scale them by the per-dimension spread instead.
    let scales = if options.standardize {
        vec![1.0; data.dim()]
    } else {
        Standardizer::fit(data.inputs()).scales().to_vec()
    };
    let ls: Vec<f64> = ls.iter().zip(&scales).map(|(l, s)| l * s).collect();

    let hyper = KernelHyperparams::new(sf, ls, sn)?;
    let subset_seed = rng.random();
    let inducing = match &options.init_weights {
        Some(w) => InducingSet::from_weighted_subset(data.inputs(), w, m, subset_seed)?,
        None => InducingSet::from_subset(data.inputs(), m, subset_seed)?,
    };
    fit_spgp_init(data, &SpgpInit { hyper, inducing }, options)
}

/// Fit a sparse GP from an explicit starting point.
pub fn fit_spgp_init(data: &Dataset, init: &SpgpInit, options: &SpgpOptions) -> Result<SpgpFit> {
    check_dims(data, &init.hyper, &init.inducing)?;
    let standardizer = if options.standardize {
        Standardizer::fit(data.inputs())
    } else {
        Standardizer::identity(data.dim())
    };
    let x = standardizer.transform_matrix(data.inputs())?;
    let y = data.targets();
    let z0 = InducingSet::new(standardizer.transform_matrix(init.inducing.points())?)?;
    let (d, m) = (data.dim(), z0.m());

    // One-sided quadratic prior on ln σ_n² below the floor. The weight n
    // matches the likelihood's scale, so undercutting the floor by a factor
    // e costs on the order of the whole data likelihood.
    let floor_log = if options.noise_floor > 0.0 {
        Some(2.0 * options.noise_floor.ln())
    } else {
        None
    };
    let noise_idx = d + 1;
    let n_weight = data.n() as f64;

    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (hyper, inducing) = unpack_params(theta, d, m)?;
        let f = fitc_factorize(&x, y, &hyper, &inducing)?;
        let grad = fitc_gradient(&f, &x, y, &hyper, &inducing)?;
        let mut value = -f.value;
        let mut grad: Vec<f64> = grad.iter().map(|g| -g).collect();
        if let Some(floor) = floor_log {
            let under = theta[noise_idx] - floor;
            if under < 0.0 {
                value += n_weight * under * under;
                grad[noise_idx] += 2.0 * n_weight * under;
            }
        }
        Ok((value, grad))
    };

    let theta0 = pack_params(&init.hyper, &z0);
    let out = minimize(objective, &theta0, &options.opt)?;
    let (hyper, inducing) = unpack_params(&out.x, d, m)?;
    let f = fitc_factorize(&x, y, &hyper, &inducing)?;
    let model = SpgpModel::from_factors(f, hyper, standardizer, inducing)?;
    Ok(SpgpFit { model, opt: out })
}
