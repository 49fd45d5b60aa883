//! Expectation propagation for truncated multivariate normal moments.
//!
//! The target density is a Gaussian prior multiplied by indicator factors
//! `t_k(z) = 1{ l_k ≤ a_kᵀ z ≤ u_k }`. Each factor is replaced by a scalar
//! Gaussian site in the projection `a_kᵀ z`, parameterized in natural form
//! `(ν̃_k, τ̃_k)`. A site update removes site `k` from the global Gaussian
//! (cavity), multiplies the cavity marginal by the true truncation factor
//! (tilted distribution), and refits the site by moment matching; the
//! univariate tilted moments come from [`crate::truncnorm`].
//!
//! Two execution paths share this logic:
//!
//! * the general path handles arbitrary square constraint matrices with
//!   sequential site updates and rank-one covariance maintenance, plus a full
//!   natural-parameter recomputation once per sweep to control drift;
//! * the box path assumes axis-aligned constraints (`A = I` after the
//!   involutory transform) where every site touches a single coordinate.
//!   Sites update in parallel from the sweep-start marginals, and the global
//!   refresh is amortized: between exact refreshes the marginal means and
//!   variances are advanced by first-order corrections, which keeps the
//!   per-sweep cost quadratic in the dimension. Convergence is only declared
//!   on a sweep whose marginals were exactly refreshed, so the fixed point
//!   is the same one the always-refresh iteration finds.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintSystem};
use crate::error::{Error, Result};
use crate::truncnorm::{truncated_moments, Interval1D, LOG_MASS_FLOOR};

/// One scalar Gaussian site in natural parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpSite {
    /// ν̃ = μ̃/σ̃².
    pub site_mean_times_prec: f64,
    /// τ̃ = 1/σ̃²; sites only ever tighten the prior, so τ̃ ≥ 0.
    pub site_prec: f64,
    /// Log normalizer matching the site's zeroth moment to the tilted mass.
    pub log_norm: f64,
}

/// Convergence and damping knobs for one EP solve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpConfig {
    /// Convergence threshold on the largest site-parameter change per sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Fraction of each natural-parameter update applied; 1.0 is undamped.
    pub damping: f64,
    /// Cavity precisions below this are considered degenerate and skipped.
    pub min_cavity_prec: f64,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 60,
            damping: 1.0,
            min_cavity_prec: 1e-12,
        }
    }
}

/// Log-mass, mean, and covariance of a truncated multivariate normal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TmvnMoments {
    pub log_mass: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Diagnostics from one EP solve.
#[derive(Clone, Debug, Default)]
pub struct EpStats {
    pub sweeps: usize,
    /// Exact global refreshes performed (the general path refreshes once per
    /// sweep by construction).
    pub refreshes: usize,
    pub residual: f64,
    pub converged: bool,
    /// Converged site parameters, one per constraint row.
    pub sites: Vec<EpSite>,
}

/// Approximate moments of the Gaussian `N(prior_mean, prior_cov)` truncated
/// to the region of `cs`.
///
/// Involutory systems are solved through the axis-aligned transform; other
/// systems run general EP. A `NotConverged` error carries the last iterate so
/// callers may accept it.
pub fn ep_moments(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    cfg: &EpConfig,
) -> Result<TmvnMoments> {
    ep_moments_with_stats(prior_mean, prior_cov, cs, cfg).map(|(m, _)| m)
}

/// Same fixed point as [`ep_moments`], returning only the log-mass.
pub fn ep_log_mass(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    cfg: &EpConfig,
) -> Result<f64> {
    ep_moments(prior_mean, prior_cov, cs, cfg).map(|m| m.log_mass)
}

/// [`ep_moments`] plus solve diagnostics.
pub fn ep_moments_with_stats(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    cfg: &EpConfig,
) -> Result<(TmvnMoments, EpStats)> {
    validate_inputs(prior_mean, prior_cov, cs)?;
    if cs.involutory {
        let (lo, hi, rect_cov) = constraints::axis_align(cs, prior_mean, prior_cov)?;
        let zero = DVector::zeros(cs.dim());
        match solve_box(&zero, &rect_cov, &lo, &hi, cfg) {
            Ok((u_moments, stats)) => Ok((
                constraints::untransform_moments(cs, prior_mean, &u_moments)?,
                stats,
            )),
            Err(Error::EpNotConverged {
                sweeps,
                residual,
                moments,
            }) => Err(Error::EpNotConverged {
                sweeps,
                residual,
                moments: Box::new(constraints::untransform_moments(cs, prior_mean, &moments)?),
            }),
            Err(e) => Err(e),
        }
    } else {
        solve_general(prior_mean, prior_cov, cs, cfg)
    }
}

/// Forces the general (rank-one update) path regardless of structure;
/// used to cross-check the axis-aligned fast path.
pub fn ep_moments_general(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    cfg: &EpConfig,
) -> Result<TmvnMoments> {
    validate_inputs(prior_mean, prior_cov, cs)?;
    solve_general(prior_mean, prior_cov, cs, cfg).map(|(m, _)| m)
}

fn validate_inputs(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
) -> Result<()> {
    let d = cs.dim();
    if prior_mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: prior_mean.len(),
        });
    }
    if prior_cov.nrows() != d || prior_cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: prior_cov.nrows(),
        });
    }
    Ok(())
}

fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|v| 2.0 * v.ln())
        .sum()
}

/// Exact refreshes happen every sweep at small dimension and every `d/16`
/// sweeps at large dimension; first-order corrections carry the marginals in
/// between, with a trust trigger forcing an early refresh whenever the
/// accumulated site change grows large. Growing the interval linearly in `d`
/// is what amortizes the cubic refresh into a quadratic per-sweep cost.
fn refresh_interval(d: usize) -> usize {
    (d / 16).max(1)
}

struct SitePassOutcome {
    residual: f64,
    updated: usize,
    degenerate: usize,
}

/// Cavity → tilted → site update for one factor. Returns the (damped)
/// parameter deltas, or `None` when the site must be skipped.
#[allow(clippy::too_many_arguments)]
fn site_update(
    v: f64,
    m: f64,
    tau_k: f64,
    nu_k: f64,
    iv: Interval1D,
    cfg: &EpConfig,
    degenerate: &mut usize,
) -> Option<(f64, f64)> {
    if !(v > 0.0) {
        return None;
    }
    let tau_cav = 1.0 / v - tau_k;
    if tau_cav < cfg.min_cavity_prec {
        return None;
    }
    let nu_cav = m / v - nu_k;
    let v_cav = 1.0 / tau_cav;
    let mu_cav = nu_cav * v_cav;
    let tilted = match truncated_moments(mu_cav, v_cav, iv) {
        Ok(t) => t,
        Err(Error::DegenerateMass { .. }) => {
            *degenerate += 1;
            return None;
        }
        Err(_) => return None,
    };
    let tau_new = (1.0 / tilted.variance - tau_cav).max(0.0);
    let nu_new = tilted.mean / tilted.variance - nu_cav;
    let dtau = cfg.damping * (tau_new - tau_k);
    let dnu = cfg.damping * (nu_new - nu_k);
    Some((dtau, dnu))
}

/// Site log-normalizers and total EP log-mass, computed once at the end from
/// the final sites and exactly refreshed marginals. `marginal(k)` must return
/// the current `(variance, mean)` of the k-th constraint projection.
#[allow(clippy::too_many_arguments)]
fn total_log_mass(
    tau: &DVector<f64>,
    nu: &DVector<f64>,
    intervals: &[Interval1D],
    marginal: impl Fn(usize) -> (f64, f64),
    mu: &DVector<f64>,
    eta: &DVector<f64>,
    mu0: &DVector<f64>,
    eta0: &DVector<f64>,
    log_det_prior_cov: f64,
    log_det_lambda: f64,
    cfg: &EpConfig,
) -> (f64, Vec<EpSite>) {
    let d = tau.len();
    let mut sites = Vec::with_capacity(d);
    let mut sum_log_norm = 0.0;
    for k in 0..d {
        let (v, m) = marginal(k);
        let tau_cav = (1.0 / v - tau[k]).max(cfg.min_cavity_prec);
        let nu_cav = m / v - nu[k];
        let v_cav = 1.0 / tau_cav;
        let mu_cav = nu_cav * v_cav;
        let log_z = match truncated_moments(mu_cav, v_cav, intervals[k]) {
            Ok(t) => t.log_mass,
            Err(_) => LOG_MASS_FLOOR,
        };
        let tau_p = tau_cav + tau[k];
        let eta_p = nu_cav + nu[k];
        let log_norm = log_z + 0.5 * (v_cav * tau_p).ln() - eta_p * eta_p / (2.0 * tau_p)
            + mu_cav * mu_cav / (2.0 * v_cav);
        sum_log_norm += log_norm;
        sites.push(EpSite {
            site_mean_times_prec: nu[k],
            site_prec: tau[k],
            log_norm,
        });
    }
    let total = sum_log_norm + 0.5 * (mu.dot(eta) - mu0.dot(eta0))
        - 0.5 * (log_det_prior_cov + log_det_lambda);
    (total, sites)
}

/// Parallel-update EP on an axis-aligned box with amortized exact refreshes.
fn solve_box(
    mu0: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    cfg: &EpConfig,
) -> Result<(TmvnMoments, EpStats)> {
    let d = mu0.len();
    let intervals: Vec<Interval1D> = (0..d)
        .map(|k| Interval1D::new(lo[k], hi[k]))
        .collect::<Result<_>>()?;

    let prior_chol = Cholesky::new(prior_cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let log_det_prior = log_det_from_cholesky(&prior_chol);
    let prior_prec = prior_chol.inverse();
    let eta0 = prior_chol.solve(mu0);

    let mut tau = DVector::zeros(d);
    let mut nu = DVector::zeros(d);

    // Anchor state from the last exact refresh plus accumulated site deltas.
    let mut sigma = DMatrix::zeros(d, d);
    let mut anchor_diag = DVector::zeros(d);
    let mut anchor_mu = DVector::zeros(d);
    let mut dtau_acc = DVector::zeros(d);
    let mut dnu_acc = DVector::zeros(d);
    let mut log_det_lambda = 0.0;

    // Working marginals for the current sweep.
    let mut diag_cur = DVector::zeros(d);
    let mut mu_cur = DVector::zeros(d);

    let interval = refresh_interval(d);
    let mut stats = EpStats::default();
    let mut since_refresh = usize::MAX; // force refresh on the first sweep
    let mut refresh_requested = true;

    let refresh =
        |tau: &DVector<f64>,
         nu: &DVector<f64>,
         sigma: &mut DMatrix<f64>,
         anchor_diag: &mut DVector<f64>,
         anchor_mu: &mut DVector<f64>,
         dtau_acc: &mut DVector<f64>,
         dnu_acc: &mut DVector<f64>,
         log_det_lambda: &mut f64,
         refreshes: &mut usize|
         -> Result<()> {
            let mut lambda = prior_prec.clone();
            for k in 0..d {
                lambda[(k, k)] += tau[k];
            }
            let chol = Cholesky::new(lambda).ok_or(Error::NotPositiveDefinite)?;
            *log_det_lambda = log_det_from_cholesky(&chol);
            *sigma = chol.inverse();
            *anchor_diag = sigma.diagonal();
            *anchor_mu = chol.solve(&(&eta0 + nu));
            dtau_acc.fill(0.0);
            dnu_acc.fill(0.0);
            *refreshes += 1;
            Ok(())
        };

    for sweep in 0..cfg.max_sweeps {
        if refresh_requested || since_refresh >= interval || sweep < 2 {
            refresh(
                &tau,
                &nu,
                &mut sigma,
                &mut anchor_diag,
                &mut anchor_mu,
                &mut dtau_acc,
                &mut dnu_acc,
                &mut log_det_lambda,
                &mut stats.refreshes,
            )?;
            since_refresh = 0;
            refresh_requested = false;
        }
        let fresh = since_refresh == 0;

        if fresh {
            diag_cur.copy_from(&anchor_diag);
            mu_cur.copy_from(&anchor_mu);
        } else {
            // First-order correction of the marginals around the anchor:
            // diag(Λ+Δ)⁻¹ ≈ diag(Σ) − Σ_k Δτ_k Σ[:,k]², and
            // μ ≈ μ_A + Σ_A (Δν − Δτ ∘ μ_A).
            diag_cur.copy_from(&anchor_diag);
            for k in 0..d {
                let dt = dtau_acc[k];
                if dt != 0.0 {
                    let col = sigma.column(k);
                    for j in 0..d {
                        diag_cur[j] -= dt * col[j] * col[j];
                    }
                }
            }
            let rhs = DVector::from_fn(d, |k, _| dnu_acc[k] - dtau_acc[k] * anchor_mu[k]);
            mu_cur.copy_from(&anchor_mu);
            mu_cur.gemv(1.0, &sigma, &rhs, 1.0);
        }

        let mut pass = SitePassOutcome {
            residual: 0.0,
            updated: 0,
            degenerate: 0,
        };
        let mut trust_violation = false;
        for k in 0..d {
            if let Some((dtau, dnu)) = site_update(
                diag_cur[k],
                mu_cur[k],
                tau[k],
                nu[k],
                intervals[k],
                cfg,
                &mut pass.degenerate,
            ) {
                tau[k] += dtau;
                nu[k] += dnu;
                dtau_acc[k] += dtau;
                dnu_acc[k] += dnu;
                pass.residual = pass.residual.max(dtau.abs()).max(dnu.abs());
                pass.updated += 1;
                if dtau_acc[k].abs() * diag_cur[k] > 0.4 {
                    trust_violation = true;
                }
            }
        }
        stats.sweeps = sweep + 1;
        stats.residual = pass.residual;
        since_refresh += 1;
        if trust_violation {
            refresh_requested = true;
        }
        if sweep == 0 && pass.degenerate == d {
            return Err(Error::InfeasibleRegion);
        }
        if pass.residual < cfg.tol {
            if fresh {
                stats.converged = true;
                break;
            }
            // Validate the fixed point against exact marginals next sweep.
            refresh_requested = true;
        }
    }

    // Final exact refresh so the returned moments and the log-mass pass see
    // the converged sites.
    refresh(
        &tau,
        &nu,
        &mut sigma,
        &mut anchor_diag,
        &mut anchor_mu,
        &mut dtau_acc,
        &mut dnu_acc,
        &mut log_det_lambda,
        &mut stats.refreshes,
    )?;

    let eta = &eta0 + &nu;
    let (log_mass, sites) = total_log_mass(
        &tau,
        &nu,
        &intervals,
        |k| (anchor_diag[k], anchor_mu[k]),
        &anchor_mu,
        &eta,
        mu0,
        &eta0,
        log_det_prior,
        log_det_lambda,
        cfg,
    );
    stats.sites = sites;

    let mut cov = sigma;
    constraints::symmetrize(&mut cov);
    let moments = TmvnMoments {
        log_mass,
        mean: anchor_mu,
        cov,
    };
    if stats.converged {
        Ok((moments, stats))
    } else {
        Err(Error::EpNotConverged {
            sweeps: stats.sweeps,
            residual: stats.residual,
            moments: Box::new(moments),
        })
    }
}

/// Sequential EP with rank-one covariance updates for a general square
/// constraint matrix.
fn solve_general(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    cfg: &EpConfig,
) -> Result<(TmvnMoments, EpStats)> {
    let d = cs.dim();
    let intervals: Vec<Interval1D> = (0..d).map(|k| cs.interval(k)).collect::<Result<_>>()?;
    let rows: Vec<DVector<f64>> = (0..d)
        .map(|k| cs.a_matrix.row(k).transpose())
        .collect();

    let prior_chol = Cholesky::new(prior_cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let log_det_prior = log_det_from_cholesky(&prior_chol);
    let prior_prec = prior_chol.inverse();
    let eta0 = prior_chol.solve(prior_mean);

    let mut tau = DVector::zeros(d);
    let mut nu = DVector::zeros(d);
    let mut sigma = prior_cov.clone();
    let mut mu = prior_mean.clone();
    let mut log_det_lambda = -log_det_prior;

    let mut stats = EpStats::default();
    let mut s = DVector::zeros(d);

    let recompute = |tau: &DVector<f64>,
                         nu: &DVector<f64>,
                         sigma: &mut DMatrix<f64>,
                         mu: &mut DVector<f64>,
                         log_det_lambda: &mut f64|
     -> Result<()> {
        let mut lambda = prior_prec.clone();
        for k in 0..d {
            if tau[k] != 0.0 {
                lambda.ger(tau[k], &rows[k], &rows[k], 1.0);
            }
        }
        let chol = Cholesky::new(lambda).ok_or(Error::NotPositiveDefinite)?;
        *log_det_lambda = log_det_from_cholesky(&chol);
        let mut eta = eta0.clone();
        for k in 0..d {
            eta.axpy(nu[k], &rows[k], 1.0);
        }
        *sigma = chol.inverse();
        *mu = chol.solve(&eta);
        Ok(())
    };

    for sweep in 0..cfg.max_sweeps {
        let mut pass = SitePassOutcome {
            residual: 0.0,
            updated: 0,
            degenerate: 0,
        };
        for k in 0..d {
            s.gemv(1.0, &sigma, &rows[k], 0.0);
            let v = rows[k].dot(&s);
            let m = rows[k].dot(&mu);
            if let Some((dtau, dnu)) =
                site_update(v, m, tau[k], nu[k], intervals[k], cfg, &mut pass.degenerate)
            {
                tau[k] += dtau;
                nu[k] += dnu;
                let denom = 1.0 + dtau * v;
                let scale = dtau / denom;
                // Σ ← Σ − (Δτ/(1+Δτ v)) s sᵀ and the matching μ update.
                sigma.ger(-scale, &s, &s, 1.0);
                mu.axpy((dnu - dtau * m) / denom, &s, 1.0);
                pass.residual = pass.residual.max(dtau.abs()).max(dnu.abs());
                pass.updated += 1;
            }
        }
        stats.sweeps = sweep + 1;
        stats.residual = pass.residual;
        if sweep == 0 && pass.degenerate == d {
            return Err(Error::InfeasibleRegion);
        }
        // Rebuild from natural parameters once per sweep to control drift.
        recompute(&tau, &nu, &mut sigma, &mut mu, &mut log_det_lambda)?;
        stats.refreshes += 1;
        if pass.residual < cfg.tol {
            stats.converged = true;
            break;
        }
    }

    let mut eta = eta0.clone();
    for k in 0..d {
        eta.axpy(nu[k], &rows[k], 1.0);
    }
    let (log_mass, sites) = total_log_mass(
        &tau,
        &nu,
        &intervals,
        |k| {
            let sk = &sigma * &rows[k];
            (rows[k].dot(&sk), rows[k].dot(&mu))
        },
        &mu,
        &eta,
        prior_mean,
        &eta0,
        log_det_prior,
        log_det_lambda,
        cfg,
    );
    stats.sites = sites;

    let mut cov = sigma;
    constraints::symmetrize(&mut cov);
    let moments = TmvnMoments {
        log_mass,
        mean: mu,
        cov,
    };
    if stats.converged {
        Ok((moments, stats))
    } else {
        Err(Error::EpNotConverged {
            sweeps: stats.sweeps,
            residual: stats.residual,
            moments: Box::new(moments),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{build_constraints, ModelKind, Outcome};
    use crate::truncnorm;

    fn cfg() -> EpConfig {
        EpConfig {
            tol: 1e-10,
            max_sweeps: 200,
            ..EpConfig::default()
        }
    }

    #[test]
    fn one_dimensional_ep_is_exact() {
        for &(mu, s2, lo, hi) in &[
            (0.0, 1.0, 0.0, f64::INFINITY),
            (0.7, 2.3, -1.0, 0.5),
            (-2.0, 0.4, f64::NEG_INFINITY, -1.5),
            (1.0, 1.0, 3.0, 6.0),
        ] {
            let cs = ConstraintSystem::from_box(
                DVector::from_vec(vec![lo]),
                DVector::from_vec(vec![hi]),
            )
            .unwrap();
            let got = ep_moments(
                &DVector::from_vec(vec![mu]),
                &DMatrix::from_vec(1, 1, vec![s2]),
                &cs,
                &cfg(),
            )
            .unwrap();
            let want = truncated_moments(mu, s2, Interval1D::new(lo, hi).unwrap()).unwrap();
            assert!((got.log_mass - want.log_mass).abs() < 1e-10);
            assert!((got.mean[0] - want.mean).abs() < 1e-10);
            assert!((got.cov[(0, 0)] - want.variance).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_prior_factorizes() {
        let d = 4;
        let mean = DVector::from_vec(vec![0.3, -0.4, 0.0, 1.2]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 2.0, 0.8]));
        let lo = DVector::from_vec(vec![0.0, f64::NEG_INFINITY, -1.0, 0.5]);
        let hi = DVector::from_vec(vec![f64::INFINITY, 0.0, 1.0, f64::INFINITY]);
        let cs = ConstraintSystem::from_box(lo.clone(), hi.clone()).unwrap();
        let got = ep_moments(&mean, &cov, &cs, &cfg()).unwrap();
        let mut want_log_mass = 0.0;
        for k in 0..d {
            let want = truncated_moments(
                mean[k],
                cov[(k, k)],
                Interval1D::new(lo[k], hi[k]).unwrap(),
            )
            .unwrap();
            want_log_mass += want.log_mass;
            assert!((got.mean[k] - want.mean).abs() < 1e-8);
            assert!((got.cov[(k, k)] - want.variance).abs() < 1e-8);
            for j in 0..d {
                if j != k {
                    assert!(got.cov[(j, k)].abs() < 1e-10);
                }
            }
        }
        assert!((got.log_mass - want_log_mass).abs() < 1e-8);
    }

    #[test]
    fn orthant_mass_matches_closed_form() {
        // P(Z1 > 0, Z2 > 0) = 1/4 + asin(rho)/(2π) = 1/3 at rho = 1/2.
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let cs = ConstraintSystem::from_box(
            DVector::zeros(2),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let lm = ep_log_mass(&mean, &cov, &cs, &cfg()).unwrap();
        let rel = (lm.exp() - 1.0 / 3.0).abs() / (1.0 / 3.0);
        assert!(rel < 2e-2, "relative error {rel}");
    }

    #[test]
    fn unbounded_region_has_unit_mass() {
        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let cs = ConstraintSystem::from_box(
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let got = ep_moments(&mean, &cov, &cs, &cfg()).unwrap();
        assert!(got.log_mass.abs() < 1e-12);
        assert!((got.mean - &mean).amax() < 1e-12);
        assert!((got.cov - &cov).amax() < 1e-12);
    }

    #[test]
    fn general_and_fast_paths_agree() {
        let kind = ModelKind::MultinomialOutside;
        let dim = 4;
        let cs = build_constraints(&kind, &Outcome::Chosen(2), dim).unwrap();
        assert!(!cs.axis_aligned && cs.involutory);
        let mean = DVector::from_vec(vec![0.2, 0.5, -0.3, 0.1]);
        let cov = DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                1.0
            } else {
                0.3 / (1.0 + (i as f64 - j as f64).abs())
            }
        });
        let fast = ep_moments(&mean, &cov, &cs, &cfg()).unwrap();
        let general = ep_moments_general(&mean, &cov, &cs, &cfg()).unwrap();
        assert!((&fast.mean - &general.mean).amax() < 1e-6);
        assert!(
            (&fast.cov - &general.cov)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()))
                < 1e-6
        );
        assert!((fast.log_mass - general.log_mass).abs() < 1e-6);
    }

    #[test]
    fn infeasible_region_is_flagged() {
        let cs = ConstraintSystem::from_box(
            DVector::from_vec(vec![40.0]),
            DVector::from_vec(vec![41.0]),
        )
        .unwrap();
        let err = ep_moments(
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            &cs,
            &cfg(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleRegion));
    }

    #[test]
    fn non_pd_prior_is_rejected() {
        let cs = ConstraintSystem::from_box(
            DVector::zeros(2),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = ep_moments(&DVector::zeros(2), &bad, &cs, &cfg()).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite));
    }

    #[test]
    fn damping_reaches_the_same_fixed_point() {
        let kind = ModelKind::MultinomialOutside;
        let cs = build_constraints(&kind, &Outcome::Chosen(1), 3).unwrap();
        let mean = DVector::from_vec(vec![0.4, -0.1, 0.2]);
        let cov = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.35 });
        let undamped = ep_moments(&mean, &cov, &cs, &cfg()).unwrap();
        let damped_cfg = EpConfig {
            damping: 0.5,
            ..cfg()
        };
        let damped = ep_moments(&mean, &cov, &cs, &damped_cfg).unwrap();
        assert!((&undamped.mean - &damped.mean).amax() < 1e-8);
        assert!((undamped.log_mass - damped.log_mass).abs() < 1e-8);
    }

    #[test]
    fn deep_but_feasible_tail_still_solves() {
        // Mass ~ Φ(-5): small but far above the degeneracy floor.
        let cs = ConstraintSystem::from_box(
            DVector::from_vec(vec![5.0]),
            DVector::from_vec(vec![f64::INFINITY]),
        )
        .unwrap();
        let got = ep_moments(&DVector::zeros(1), &DMatrix::identity(1, 1), &cs, &cfg()).unwrap();
        let want = truncnorm::truncated_moments(0.0, 1.0, Interval1D::greater_than(5.0)).unwrap();
        assert!((got.log_mass - want.log_mass).abs() < 1e-9);
    }
}
