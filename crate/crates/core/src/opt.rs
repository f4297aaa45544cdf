//! Limited-memory quasi-Newton minimizer with backtracking line search.
//!
//! Used for marginal-likelihood maximization in log-parameter space. The
//! objective returns value and gradient together so factorizations are
//! shared between the two.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptConfig {
    /// Hard iteration cap.
    pub max_iters: usize,
    /// Number of curvature pairs kept for the inverse-Hessian estimate.
    pub memory: usize,
    /// Stop once the relative objective improvement drops below this.
    pub rel_tol: f64,
    /// Stop once the gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Step halvings attempted before the line search gives up.
    pub max_backtracks: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            memory: 8,
            rel_tol: 1e-9,
            grad_tol: 1e-6,
            armijo_c1: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// True when a tolerance stopped the run, false when a cap or a stalled
    /// line search did.
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f` starting from `x0`.
///
/// The objective may fail (e.g. a covariance stops being factorizable at an
/// extreme iterate); failures during the line search shrink the step, while
/// a failure at the starting point is fatal. A non-finite starting value is
/// reported as divergence with the accepted-value trace attached.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &OptConfig) -> Result<OptOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<(f64, Vec<f64>)> {
        *evals += 1;
        f(x)
    };

    let mut x = x0.to_vec();
    let (mut fx, mut g) = eval(&x, &mut evals)?;
    let mut trace: Vec<(usize, f64)> = vec![(0, fx)];
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizerDiverged { trace });
    }

    // Curvature history for the two-loop recursion.
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut converged = false;
    let mut iter = 0usize;
    while iter < cfg.max_iters {
        if inf_norm(&g) < cfg.grad_tol {
            converged = true;
            break;
        }

        // Two-loop recursion for d = -H·g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        if k > 0 {
            let mut alphas = vec![0.0; k];
            for i in (0..k).rev() {
                let a = rho_hist[i] * dot(&s_hist[i], &d);
                alphas[i] = a;
                for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                    *dj -= a * yj;
                }
            }
            let last = k - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for dj in d.iter_mut() {
                *dj *= gamma;
            }
            for i in 0..k {
                let b = rho_hist[i] * dot(&y_hist[i], &d);
                for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                    *dj += (alphas[i] - b) * sj;
                }
            }
        }

        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Curvature info went stale; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        // First step is conservative; afterwards the unit quasi-Newton step
        // is usually right.
        let mut alpha = if iter == 0 {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };

        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..cfg.max_backtracks {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            match eval(&xt, &mut evals) {
                Ok((ft, gt))
                    if ft.is_finite()
                        && ft <= fx + cfg.armijo_c1 * alpha * slope
                        && gt.iter().all(|v| v.is_finite()) =>
                {
                    accepted = Some((xt, ft, gt));
                    break;
                }
                // Reject and shrink: covers insufficient decrease, non-finite
                // values, and objective errors at overshooting iterates alike.
                _ => alpha *= 0.5,
            }
        }

        let Some((xt, ft, gt)) = accepted else {
            break; // stalled line search: keep the best point found so far
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }

        let improvement = fx - ft;
        x = xt;
        fx = ft;
        g = gt;
        iter += 1;
        trace.push((iter, fx));
        if trace.len() > 8 {
            trace.remove(0);
        }

        if improvement >= 0.0 && improvement < cfg.rel_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    Ok(OptOutcome {
        x,
        value: fx,
        iterations: iter,
        evaluations: evals,
        converged,
    })
}
