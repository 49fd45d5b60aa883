//! Synthetic choice-data generation plus Monte-Carlo TMVN oracles (Gibbs and
//! rejection samplers).
//!
//! The samplers exist to validate EP and end-to-end estimates; they are not
//! estimation paths. Generation draws each observation from its own
//! counter-seeded RNG stream so datasets are identical no matter how the work
//! is scheduled.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintSystem, ModelKind, Outcome};
use crate::em::ChoiceObservation;
use crate::error::{Error, Result};

/// Covariance structure of the generated latent utilities.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum SigmaKind {
    /// `diag·I + off·11ᵀ`.
    CompoundSymmetric { diag: f64, off: f64 },
    /// `Σ_jk = decay^|j−k|` within the band, zero outside.
    Banded { bandwidth: usize, decay: f64 },
    /// Normalized Wishart-style draw keyed by its own seed.
    RandomPd { seed: u64 },
}

/// Simulation protocol: `X ~ Unif(−.5, .5)`, `Z = Xβ + ε`, `ε ~ N(0, Σ)`,
/// outcome by the argmax rule of `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub beta_true: DVector<f64>,
    pub sigma_kind: SigmaKind,
    pub kind: ModelKind,
    pub seed: u64,
}

/// Generating parameters recorded next to a simulated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub seed: u64,
}

pub fn build_sigma(kind: &SigmaKind, m: usize) -> Result<DMatrix<f64>> {
    let sigma = match kind {
        SigmaKind::CompoundSymmetric { diag, off } => {
            DMatrix::from_fn(m, m, |i, j| if i == j { diag + off } else { *off })
        }
        SigmaKind::Banded { bandwidth, decay } => DMatrix::from_fn(m, m, |i, j| {
            let gap = i.abs_diff(j);
            if gap == 0 {
                1.0
            } else if gap <= *bandwidth {
                decay.powi(gap as i32)
            } else {
                0.0
            }
        }),
        SigmaKind::RandomPd { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let g = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut s = &g * g.transpose() / m as f64;
            for k in 0..m {
                s[(k, k)] += 0.25;
            }
            // Normalize to unit average variance so scales stay comparable.
            let mean_diag = s.trace() / m as f64;
            s / mean_diag
        }
    };
    if Cholesky::new(sigma.clone()).is_none() {
        return Err(Error::InvalidSpec(
            "generated covariance is not positive definite".into(),
        ));
    }
    Ok(sigma)
}

fn obs_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // SplitMix64 step decorrelates the per-observation streams.
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generates observations together with the latent utilities that produced
/// them (exposed for region-consistency checks and forward-simulation
/// oracles).
pub fn generate_with_latents(
    spec: &SimSpec,
) -> Result<(Vec<ChoiceObservation>, Vec<DVector<f64>>, GroundTruth)> {
    if spec.beta_true.len() != spec.p {
        return Err(Error::InvalidSpec(format!(
            "beta_true has {} entries, expected p = {}",
            spec.beta_true.len(),
            spec.p
        )));
    }
    if let ModelKind::MultinomialReference { ref_index } = spec.kind {
        if ref_index >= spec.m {
            return Err(Error::InvalidSpec(format!(
                "ref_index {ref_index} out of range for m = {}",
                spec.m
            )));
        }
    }
    let sigma = build_sigma(&spec.sigma_kind, spec.m)?;
    let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
    let mut observations = Vec::with_capacity(spec.n);
    let mut latents = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = obs_rng(spec.seed, i);
        let x = DMatrix::from_fn(spec.m, spec.p, |_, _| rng.gen::<f64>() - 0.5);
        let eps_raw = DVector::from_fn(spec.m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &x * &spec.beta_true + chol.l() * eps_raw;
        let outcome = outcome_of(&spec.kind, &z);
        observations.push(ChoiceObservation {
            x,
            outcome,
            positions: None,
        });
        latents.push(z);
    }
    Ok((
        observations,
        latents,
        GroundTruth {
            beta: spec.beta_true.clone(),
            sigma,
            seed: spec.seed,
        },
    ))
}

/// Generates a dataset under the simulation protocol (deterministic in the
/// seed).
pub fn generate(spec: &SimSpec) -> Result<(Vec<ChoiceObservation>, GroundTruth)> {
    generate_with_latents(spec).map(|(obs, _, truth)| (obs, truth))
}

/// Outcome implied by latent utilities under each model kind.
pub fn outcome_of(kind: &ModelKind, z: &DVector<f64>) -> Outcome {
    match kind {
        ModelKind::Multivariate => Outcome::Binary(z.iter().map(|&v| v >= 0.0).collect()),
        ModelKind::MultinomialOutside => {
            let (argmax, max) = argmax(z);
            Outcome::Chosen(if max >= 0.0 { argmax + 1 } else { 0 })
        }
        ModelKind::MultinomialReference { ref_index } => {
            let (argmax, _) = argmax(z);
            Outcome::Chosen(if argmax == *ref_index { 0 } else { argmax + 1 })
        }
    }
}

fn argmax(z: &DVector<f64>) -> (usize, f64) {
    z.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
        if v > acc.1 {
            (i, v)
        } else {
            acc
        }
    })
}

/// Sample-moment estimates with Monte-Carlo standard errors.
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub se_mean: DVector<f64>,
    pub se_cov: DMatrix<f64>,
    pub n_samples: usize,
    /// Acceptance rate (rejection sampler only).
    pub acceptance: Option<f64>,
}

/// One draw from a standard normal truncated to `[a, b]` (either side may be
/// infinite). Robert-style rejection, robust far into the tails.
fn sample_std_trunc<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    match (a.is_finite(), b.is_finite()) {
        (false, false) => rng.sample(StandardNormal),
        (true, false) => sample_lower_tail(rng, a),
        (false, true) => -sample_lower_tail(rng, -b),
        (true, true) => {
            if b - a <= 2.0 {
                // Thin interval: uniform proposal against the density peak.
                let mode = a.max(0.0).min(b);
                let peak = -0.5 * mode * mode;
                loop {
                    let x = a + (b - a) * rng.gen::<f64>();
                    if (-0.5 * x * x - peak).exp() >= rng.gen::<f64>() {
                        return x;
                    }
                }
            } else if a > 0.0 {
                loop {
                    let x = sample_lower_tail(rng, a);
                    if x <= b {
                        return x;
                    }
                }
            } else if b < 0.0 {
                loop {
                    let x = -sample_lower_tail(rng, -b);
                    if x >= a {
                        return x;
                    }
                }
            } else {
                loop {
                    let x: f64 = rng.sample(StandardNormal);
                    if x >= a && x <= b {
                        return x;
                    }
                }
            }
        }
    }
}

/// Standard normal conditioned on `x ≥ a`.
fn sample_lower_tail<R: Rng>(rng: &mut R, a: f64) -> f64 {
    if a <= 0.45 {
        loop {
            let x: f64 = rng.sample(StandardNormal);
            if x >= a {
                return x;
            }
        }
    } else {
        // Translated-exponential proposal with optimal rate.
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let e: f64 = rng.gen::<f64>();
            let x = a - e.ln() / lambda;
            let d = x - lambda;
            if (-0.5 * d * d).exp() >= rng.gen::<f64>() {
                return x;
            }
        }
    }
}

/// Gibbs sampler for the TMVN defined by `cs`, cycling through coordinates
/// of the latent vector.
///
/// Involutory systems are transformed to their axis-aligned box first and the
/// draws mapped back, so the chain always works with simple interval
/// conditionals. Standard errors come from batch means over the kept draws.
pub fn gibbs_tmvn(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    draws: usize,
    burn_in: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    if draws == 0 {
        return Err(Error::InvalidSpec("gibbs needs draws > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if cs.involutory {
        let (lo, hi, rect_cov) = constraints::axis_align(cs, prior_mean, prior_cov)?;
        let samples = gibbs_box(&lo, &hi, &rect_cov, draws, burn_in, &mut rng)?;
        // Map each draw back: z = A u + mean.
        let mapped: Vec<DVector<f64>> = samples
            .into_iter()
            .map(|u| &cs.a_matrix * u + prior_mean)
            .collect();
        Ok(moments_with_batch_se(&mapped, None))
    } else {
        let samples = gibbs_polytope(prior_mean, prior_cov, cs, draws, burn_in, &mut rng)?;
        Ok(moments_with_batch_se(&samples, None))
    }
}

/// Gibbs chain on a box region with dense covariance (zero mean).
fn gibbs_box(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    cov: &DMatrix<f64>,
    draws: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    let d = lo.len();
    let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let prec = chol.inverse();
    // Feasible start by coordinate projection of the prior mean (zero).
    let mut u = DVector::zeros(d);
    for k in 0..d {
        u[k] = feasible_coordinate(lo[k], hi[k]);
    }
    let mut out = Vec::with_capacity(draws);
    for it in 0..(burn_in + draws) {
        for k in 0..d {
            let pkk = prec[(k, k)];
            let cond_var = 1.0 / pkk;
            let mut dot = 0.0;
            for j in 0..d {
                if j != k {
                    dot += prec[(j, k)] * u[j];
                }
            }
            let cond_mean = -cond_var * dot;
            let sd = cond_var.sqrt();
            let a = (lo[k] - cond_mean) / sd;
            let b = (hi[k] - cond_mean) / sd;
            u[k] = cond_mean + sd * sample_std_trunc(rng, a, b);
        }
        if it >= burn_in {
            out.push(u.clone());
        }
    }
    Ok(out)
}

/// Gibbs chain on a general polytope `{ l ≤ A z ≤ u }`.
fn gibbs_polytope(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    draws: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    let d = cs.dim();
    let chol = Cholesky::new(prior_cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let prec = chol.inverse();

    // Feasible start: project the prior mean coordinate-by-coordinate onto
    // the constraint intersection, retrying with jitter if a pass stalls.
    let mut z = prior_mean.clone();
    let mut attempts = 0;
    while !cs.contains(&z) {
        for k in 0..d {
            if let Some((a, b)) = conditional_interval(cs, &z, k) {
                z[k] = z[k].clamp(a, b);
            }
        }
        attempts += 1;
        if cs.contains(&z) {
            break;
        }
        if attempts >= 1000 {
            return Err(Error::NoFeasibleStart(attempts));
        }
        for k in 0..d {
            z[k] += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut out = Vec::with_capacity(draws);
    for it in 0..(burn_in + draws) {
        for k in 0..d {
            let (a, b) = conditional_interval(cs, &z, k).ok_or(Error::InfeasibleRegion)?;
            let pkk = prec[(k, k)];
            let cond_var = 1.0 / pkk;
            let mut dot = 0.0;
            for j in 0..d {
                if j != k {
                    dot += prec[(j, k)] * (z[j] - prior_mean[j]);
                }
            }
            let cond_mean = prior_mean[k] - cond_var * dot;
            let sd = cond_var.sqrt();
            let lo = ((a - cond_mean) / sd).max(-38.0);
            let hi = ((b - cond_mean) / sd).min(38.0);
            if lo < hi {
                z[k] = cond_mean + sd * sample_std_trunc(rng, lo, hi);
            }
        }
        if it >= burn_in {
            out.push(z.clone());
        }
    }
    Ok(out)
}

/// Interval of feasible values for coordinate `k` with the others fixed.
fn conditional_interval(cs: &ConstraintSystem, z: &DVector<f64>, k: usize) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for r in 0..cs.dim() {
        let ark = cs.a_matrix[(r, k)];
        let mut rest = 0.0;
        for j in 0..cs.dim() {
            if j != k {
                rest += cs.a_matrix[(r, j)] * z[j];
            }
        }
        if ark == 0.0 {
            continue;
        }
        let (l, u) = (cs.lower[r] - rest, cs.upper[r] - rest);
        if ark > 0.0 {
            lo = lo.max(l / ark);
            hi = hi.min(u / ark);
        } else {
            lo = lo.max(u / ark);
            hi = hi.min(l / ark);
        }
    }
    (lo < hi).then_some((lo, hi))
}

fn feasible_coordinate(lo: f64, hi: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo + 1.0,
        (false, true) => hi - 1.0,
        (false, false) => 0.0,
    }
}

/// Exact iid oracle: sample the unconstrained Gaussian, keep points inside
/// the region. A pilot run estimates the acceptance rate first and the
/// sampler refuses regions below 1e-4.
pub fn rejection_tmvn(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    target_accepted: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let d = cs.dim();
    if prior_mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: prior_mean.len(),
        });
    }
    let chol = Cholesky::new(prior_cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &l * g + prior_mean
    };

    const PILOT: usize = 10_000;
    let mut pilot_hits = 0usize;
    for _ in 0..PILOT {
        if cs.contains(&draw(&mut rng)) {
            pilot_hits += 1;
        }
    }
    let pilot_acceptance = pilot_hits as f64 / PILOT as f64;
    if pilot_acceptance < 1e-4 {
        return Err(Error::AcceptanceTooLow(pilot_acceptance));
    }

    let mut kept = Vec::with_capacity(target_accepted);
    let budget = ((target_accepted as f64 / pilot_acceptance.max(1e-4)) * 10.0) as usize + PILOT;
    let mut total = 0usize;
    while kept.len() < target_accepted {
        total += 1;
        if total > budget {
            return Err(Error::AcceptanceTooLow(pilot_acceptance));
        }
        let z = draw(&mut rng);
        if cs.contains(&z) {
            kept.push(z);
        }
    }
    // The reported acceptance pools the pilot with the main run; as a mass
    // estimate its relative standard error is about sqrt((1-p)/accepted).
    let acceptance = (pilot_hits + kept.len()) as f64 / (PILOT + total) as f64;
    Ok(moments_with_batch_se(&kept, Some(acceptance)))
}

/// Sample moments with batch-means standard errors (50 batches; collapses to
/// the iid formula when draws are independent).
fn moments_with_batch_se(samples: &[DVector<f64>], acceptance: Option<f64>) -> MomentEstimate {
    let n = samples.len();
    let d = samples[0].len();
    let nf = n as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= nf;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= nf - 1.0;

    let n_batches = 50.min(n.max(2) / 2).max(2);
    let batch_len = n / n_batches;
    let used = batch_len * n_batches;
    let mut mean_batches = vec![DVector::<f64>::zeros(d); n_batches];
    let mut cov_batches = vec![DMatrix::<f64>::zeros(d, d); n_batches];
    for (b, chunk) in samples[..used].chunks(batch_len).enumerate() {
        let mut bm = DVector::zeros(d);
        for s in chunk {
            bm += s;
        }
        bm /= batch_len as f64;
        let mut bc = DMatrix::zeros(d, d);
        for s in chunk {
            let r = s - &mean;
            bc.ger(1.0, &r, &r, 1.0);
        }
        bc /= batch_len as f64;
        mean_batches[b] = bm;
        cov_batches[b] = bc;
    }
    let bf = n_batches as f64;
    let mut se_mean = DVector::zeros(d);
    for j in 0..d {
        let avg: f64 = mean_batches.iter().map(|b| b[j]).sum::<f64>() / bf;
        let var: f64 = mean_batches
            .iter()
            .map(|b| (b[j] - avg) * (b[j] - avg))
            .sum::<f64>()
            / (bf - 1.0);
        se_mean[j] = (var / bf).sqrt();
    }
    let mut se_cov = DMatrix::zeros(d, d);
    for j in 0..d {
        for k in 0..d {
            let avg: f64 = cov_batches.iter().map(|b| b[(j, k)]).sum::<f64>() / bf;
            let var: f64 = cov_batches
                .iter()
                .map(|b| (b[(j, k)] - avg) * (b[(j, k)] - avg))
                .sum::<f64>()
                / (bf - 1.0);
            se_cov[(j, k)] = (var / bf).sqrt();
        }
    }
    MomentEstimate {
        mean,
        cov,
        se_mean,
        se_cov,
        n_samples: n,
        acceptance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::build_constraints;
    use crate::truncnorm::{truncated_moments, Interval1D};

    #[test]
    fn generation_is_deterministic() {
        let spec = SimSpec {
            n: 50,
            m: 4,
            p: 3,
            beta_true: DVector::from_vec(vec![1.0, 0.0, -1.0]),
            sigma_kind: SigmaKind::CompoundSymmetric { diag: 0.5, off: 0.5 },
            kind: ModelKind::MultinomialOutside,
            seed: 99,
        };
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x, y.x);
            assert_eq!(x.outcome, y.outcome);
        }
        let empty = SimSpec { n: 0, ..spec };
        assert!(generate(&empty).unwrap().0.is_empty());
    }

    #[test]
    fn latents_satisfy_their_regions() {
        for kind in [
            ModelKind::Multivariate,
            ModelKind::MultinomialOutside,
            ModelKind::MultinomialReference { ref_index: 1 },
        ] {
            let spec = SimSpec {
                n: 200,
                m: 4,
                p: 2,
                beta_true: DVector::from_vec(vec![0.5, -0.5]),
                sigma_kind: SigmaKind::RandomPd { seed: 3 },
                kind,
                seed: 11,
            };
            let (obs, latents, _) = generate_with_latents(&spec).unwrap();
            for (o, z) in obs.iter().zip(&latents) {
                match kind {
                    ModelKind::Multivariate | ModelKind::MultinomialOutside => {
                        let cs = build_constraints(&kind, &o.outcome, 4).unwrap();
                        assert!(cs.contains(z), "latent outside region for {kind:?}");
                    }
                    ModelKind::MultinomialReference { ref_index } => {
                        let cs = build_constraints(&kind, &o.outcome, 3).unwrap();
                        let zt = DVector::from_iterator(
                            3,
                            (0..4).filter(|&j| j != ref_index).map(|j| z[j] - z[ref_index]),
                        );
                        assert!(cs.contains(&zt), "reduced latent outside region");
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_outcome_frequencies() {
        // β = 0, Σ = I, outside option: alternatives are exchangeable.
        let spec = SimSpec {
            n: 40_000,
            m: 3,
            p: 2,
            beta_true: DVector::zeros(2),
            sigma_kind: SigmaKind::CompoundSymmetric { diag: 1.0, off: 0.0 },
            kind: ModelKind::MultinomialOutside,
            seed: 17,
        };
        let (obs, _) = generate(&spec).unwrap();
        let mut counts = [0usize; 4];
        for o in &obs {
            if let Outcome::Chosen(c) = o.outcome {
                counts[c] += 1;
            }
        }
        // P(alternative j) identical across j; P(outside) = P(all < 0) = 1/8.
        let n = spec.n as f64;
        let p_out = counts[0] as f64 / n;
        assert!((p_out - 0.125).abs() < 0.01, "outside rate {p_out}");
        let p_each = (1.0 - 0.125) / 3.0;
        for &c in &counts[1..] {
            assert!((c as f64 / n - p_each).abs() < 0.015);
        }
    }

    #[test]
    fn gibbs_matches_closed_form_univariate() {
        let cs = ConstraintSystem::from_box(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![f64::INFINITY]),
        )
        .unwrap();
        let est = gibbs_tmvn(
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            &cs,
            100_000,
            500,
            5,
        )
        .unwrap();
        let want = truncated_moments(0.0, 1.0, Interval1D::greater_than(0.0)).unwrap();
        assert!(
            (est.mean[0] - want.mean).abs() < 3.0 * est.se_mean[0].max(1e-4),
            "mean {} vs {}",
            est.mean[0],
            want.mean
        );
        assert!((est.cov[(0, 0)] - want.variance).abs() < 0.01);
    }

    #[test]
    fn gibbs_reproduces_prior_when_unbounded() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let cs = ConstraintSystem::from_box(
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let est = gibbs_tmvn(&mean, &cov, &cs, 60_000, 500, 7).unwrap();
        for j in 0..2 {
            assert!((est.mean[j] - mean[j]).abs() < 4.0 * est.se_mean[j].max(1e-3));
        }
        assert!((est.cov[(0, 1)] - 0.6).abs() < 0.05);
    }

    #[test]
    fn rejection_acceptance_matches_orthant_probability() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let cs = ConstraintSystem::from_box(
            DVector::zeros(2),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let est = rejection_tmvn(&DVector::zeros(2), &cov, &cs, 50_000, 23).unwrap();
        let acc = est.acceptance.unwrap();
        // True probability 1/3; pilot SE ≈ sqrt(p(1-p)/1e4) ≈ 0.0047.
        assert!((acc - 1.0 / 3.0).abs() < 0.015, "acceptance {acc}");
    }

    #[test]
    fn gibbs_and_rejection_agree_on_orthant() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let cs = ConstraintSystem::from_box(
            DVector::zeros(2),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let g = gibbs_tmvn(&DVector::zeros(2), &cov, &cs, 80_000, 500, 31).unwrap();
        let r = rejection_tmvn(&DVector::zeros(2), &cov, &cs, 80_000, 37).unwrap();
        for j in 0..2 {
            let tol = 3.0 * (g.se_mean[j].powi(2) + r.se_mean[j].powi(2)).sqrt();
            assert!(
                (g.mean[j] - r.mean[j]).abs() < tol.max(5e-3),
                "mean mismatch at {j}: {} vs {}",
                g.mean[j],
                r.mean[j]
            );
        }
    }

    #[test]
    fn rejection_accepts_everything_on_full_space() {
        let cs = ConstraintSystem::from_box(
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        let est = rejection_tmvn(
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            &cs,
            5_000,
            1,
        )
        .unwrap();
        assert_eq!(est.acceptance, Some(1.0));
    }

    #[test]
    fn rejection_refuses_tiny_regions() {
        let cs = ConstraintSystem::from_box(
            DVector::from_vec(vec![6.0]),
            DVector::from_vec(vec![f64::INFINITY]),
        )
        .unwrap();
        let err = rejection_tmvn(&DVector::zeros(1), &DMatrix::identity(1, 1), &cs, 100, 3)
            .unwrap_err();
        assert!(matches!(err, Error::AcceptanceTooLow(_)));
    }

    #[test]
    fn monte_carlo_error_shrinks_with_sample_size() {
        let cs = ConstraintSystem::from_box(
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![f64::INFINITY]),
        )
        .unwrap();
        let want = (2.0 / std::f64::consts::PI).sqrt();
        let mut errs = Vec::new();
        for &n in &[1000usize, 10_000, 100_000] {
            let est =
                rejection_tmvn(&DVector::zeros(1), &DMatrix::identity(1, 1), &cs, n, 41).unwrap();
            errs.push((est.mean[0] - want).abs().max(1e-6));
        }
        // Error at 100k draws must be far below the error at 1k draws.
        assert!(errs[2] < errs[0].max(3e-3));
    }
}
