//! Maximization-step solvers: the GLS coefficient update, conditional
//! sample-covariance assembly, and the trace-constrained precision update.
//!
//! With the identification constraint `Tr(Σ⁻¹) = c`, maximizing
//! `−log det Σ − Tr(Σ⁻¹ Ŝ)` reduces to the one-dimensional secular equation
//!
//! ```text
//! Σ_i 1/(λ_i − y) = c,   y < λ_1,
//! ```
//!
//! over the eigenvalues of `Ŝ`, after which `Σ = Ŝ − y* I` directly — no
//! matrix inversion. The root-finder brackets by doubling, bisects until the
//! iterate lands left of the root, then switches to Newton, which converges
//! monotonically from that side because `f` is increasing and convex.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::constraints::symmetrize;
use crate::error::{Error, Result};

/// Conditional sample covariance with its spectral decomposition attached.
#[derive(Clone, Debug)]
pub struct ShatSummary {
    pub s_hat: DMatrix<f64>,
    /// Ascending eigenvalues λ₁ ≤ … ≤ λ_m.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

/// Solution of the trace-constrained precision update.
#[derive(Clone, Debug)]
pub struct TraceSolveResult {
    pub y_star: f64,
    /// `Ŝ − y* I`, the new covariance estimate.
    pub sigma_new: DMatrix<f64>,
    pub newton_iters: usize,
    pub bisect_iters: usize,
}

/// One observation's contribution to the GLS normal equations.
///
/// `x` and `mu` live in the identified latent space of the observation (rows
/// limited to its available positions) and `weight` factors the matching
/// covariance block.
pub struct WeightedObs<'a> {
    pub x: &'a DMatrix<f64>,
    pub mu: &'a DVector<f64>,
    pub weight: &'a Cholesky<f64, Dyn>,
}

/// Generalized-least-squares coefficient update
/// `β = (Σ_i X_iᵀ Σ⁻¹ X_i)⁻¹ (Σ_i X_iᵀ Σ⁻¹ μ_i)`.
///
/// Solved through a symmetric factorization of the normal-equation matrix;
/// accumulation runs in the given observation order so results are
/// reproducible regardless of how the E-step was parallelized.
pub fn update_beta<'a>(items: impl IntoIterator<Item = WeightedObs<'a>>) -> Result<DVector<f64>> {
    let mut normal: Option<DMatrix<f64>> = None;
    let mut rhs: Option<DVector<f64>> = None;
    for obs in items {
        let wx = obs.weight.solve(obs.x);
        let wmu = obs.weight.solve(obs.mu);
        let xt = obs.x.transpose();
        let a = &xt * wx;
        let b = xt * wmu;
        match (&mut normal, &mut rhs) {
            (Some(n), Some(r)) => {
                *n += a;
                *r += b;
            }
            _ => {
                normal = Some(a);
                rhs = Some(b);
            }
        }
    }
    let (mut normal, rhs) = match (normal, rhs) {
        (Some(n), Some(r)) => (n, r),
        _ => return Err(Error::SingularDesign),
    };
    symmetrize(&mut normal);
    let chol = Cholesky::new(normal).ok_or(Error::SingularDesign)?;
    Ok(chol.solve(&rhs))
}

/// Assembles `Ŝ = (1/n) Σ_i [ S_i + (μ_i − X_iβ)(μ_i − X_iβ)ᵀ ]` and its
/// eigendecomposition.
///
/// Observations restricted to a position subset scatter into their kept
/// rows/columns and each entry is normalized by its own coverage count;
/// entries no observation covers carry over from `fallback` (the current Σ).
pub fn assemble_shat<'a>(
    contributions: impl IntoIterator<Item = (Option<&'a [usize]>, &'a DMatrix<f64>, DVector<f64>)>,
    dim: usize,
    fallback: &DMatrix<f64>,
) -> Result<ShatSummary> {
    let mut sum = DMatrix::<f64>::zeros(dim, dim);
    let mut counts = DMatrix::<f64>::zeros(dim, dim);
    let mut any = false;
    for (keep, cov, resid) in contributions {
        any = true;
        match keep {
            None => {
                debug_assert_eq!(cov.nrows(), dim);
                sum += cov;
                sum.ger(1.0, &resid, &resid, 1.0);
                counts.add_scalar_mut(1.0);
            }
            Some(keep) => {
                for (r, &j) in keep.iter().enumerate() {
                    for (c, &l) in keep.iter().enumerate() {
                        sum[(j, l)] += cov[(r, c)] + resid[r] * resid[c];
                        counts[(j, l)] += 1.0;
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::SingularDesign);
    }
    let mut s_hat = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        for l in 0..dim {
            s_hat[(j, l)] = if counts[(j, l)] > 0.0 {
                sum[(j, l)] / counts[(j, l)]
            } else {
                fallback[(j, l)]
            };
        }
    }
    symmetrize(&mut s_hat);
    summarize_spd(s_hat)
}

/// Eigendecomposition with ascending ordering and the near-singularity gate.
pub fn summarize_spd(s_hat: DMatrix<f64>) -> Result<ShatSummary> {
    let dim = s_hat.nrows();
    let eig = s_hat.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_fn(dim, |i, _| eig.eigenvalues[order[i]]);
    let mut eigenvectors = DMatrix::zeros(dim, dim);
    for (i, &src) in order.iter().enumerate() {
        eigenvectors.set_column(i, &eig.eigenvectors.column(src));
    }
    let lambda_min = eigenvalues[0];
    let lambda_max = eigenvalues[dim - 1];
    if !(lambda_min > 1e-10 * lambda_max.max(0.0)) {
        return Err(Error::NearSingularShat {
            lambda_min,
            lambda_max,
        });
    }
    Ok(ShatSummary {
        s_hat,
        eigenvalues,
        eigenvectors,
    })
}

/// Solves `Σ_i 1/(λ_i − y) = target` for `y < λ₁` and returns the direct
/// covariance update `Σ = Ŝ − y* I`.
pub fn solve_trace_constrained(summary: &ShatSummary, target: f64) -> Result<TraceSolveResult> {
    let lambda = &summary.eigenvalues;
    let m = lambda.len();
    let lambda_min = lambda[0];
    if !(lambda_min > 0.0) || !(target > 0.0) {
        return Err(Error::BracketFailure(0));
    }
    let f = |y: f64| lambda.iter().map(|&l| 1.0 / (l - y)).sum::<f64>() - target;
    let fprime = |y: f64| {
        lambda
            .iter()
            .map(|&l| {
                let g = l - y;
                1.0 / (g * g)
            })
            .sum::<f64>()
    };

    let eps = 1e-12 * lambda_min;
    let hi = lambda_min - eps;
    if f(hi) <= 0.0 {
        // The root would sit within eps of λ₁; Ŝ is effectively singular
        // under this trace target.
        return Err(Error::BracketFailure(0));
    }

    // Expand leftward until f < 0; f(λ₁ − t) ≤ m/t − target guarantees a
    // sign change once t > m/target.
    let mut dist = (m as f64 / target).max(eps * 2.0);
    let mut doublings = 0usize;
    let mut lo = lambda_min - dist;
    while f(lo) >= 0.0 {
        doublings += 1;
        if doublings > 200 {
            return Err(Error::BracketFailure(doublings));
        }
        dist *= 2.0;
        lo = lambda_min - dist;
    }

    // Bisection until the midpoint lands left of the root (f < 0), giving
    // Newton a starting point from which it converges monotonically.
    let mut bisect_iters = 0usize;
    let mut hi = hi;
    let mut y = loop {
        bisect_iters += 1;
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm <= 0.0 {
            lo = mid;
            break mid;
        }
        hi = mid;
        if bisect_iters > 400 {
            break lo;
        }
    };

    // Newton, safeguarded into the live bracket: a step that would leave
    // [lo, hi] falls back to its midpoint, and every evaluation tightens the
    // bracket. Iterates down to the rounding floor of f itself.
    let mut newton_iters = 0usize;
    let noise = |y: f64| {
        4.0 * f64::EPSILON
            * lambda
                .iter()
                .map(|&l| {
                    let g = l - y;
                    (l.abs() + y.abs()) / (g * g)
                })
                .sum::<f64>()
    };
    loop {
        let fy = f(y);
        if fy.abs() <= noise(y).max(f64::EPSILON * target) || newton_iters >= 100 {
            break;
        }
        if fy < 0.0 {
            lo = lo.max(y);
        } else {
            hi = hi.min(y);
        }
        newton_iters += 1;
        let step = fy / fprime(y);
        let mut y_next = y - step;
        if !(y_next > lo && y_next < hi) {
            y_next = 0.5 * (lo + hi);
            bisect_iters += 1;
        }
        if (y_next - y).abs() <= 4.0 * f64::EPSILON * y.abs().max(lambda_min) {
            y = y_next;
            break;
        }
        y = y_next;
    }

    let mut sigma_new = summary.s_hat.clone();
    for k in 0..m {
        sigma_new[(k, k)] -= y;
    }
    Ok(TraceSolveResult {
        y_star: y,
        sigma_new,
        newton_iters,
        bisect_iters,
    })
}
