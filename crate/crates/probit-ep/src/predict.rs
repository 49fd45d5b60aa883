//! Choice-probability prediction and counterfactual repositioning, using the
//! EP log-mass as the region-probability estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    build_constraints, reduce_covariance, reduce_reference, ModelKind, Outcome,
};
use crate::em::ProbitModel;
use crate::ep::{ep_log_mass, EpConfig};
use crate::error::{Error, Result};
use crate::truncnorm::{truncated_moments, Interval1D};

/// Region masses per candidate outcome.
///
/// For multinomial kinds the vectors are indexed by outcome code: slot 0 is
/// the outside/reference option and slot `j` is alternative `j`. Under
/// reference identification the slot of the reference alternative's own
/// 1-based code is structurally zero (its probability lives in slot 0). For
/// the multivariate kind the vectors instead hold the per-coordinate marginal
/// success probabilities `P(Y_j = 1)` and `mass_defect` is zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChoiceProbabilities {
    /// Raw EP masses; these need not sum to exactly one.
    pub raw_mass: Vec<f64>,
    /// Raw masses normalized to sum to one.
    pub normalized: Vec<f64>,
    /// |Σ raw − 1|, a diagnostic for EP approximation quality.
    pub mass_defect: f64,
}

/// Baseline and swapped predictions from a repositioning counterfactual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Counterfactual {
    pub baseline: ChoiceProbabilities,
    pub swapped: ChoiceProbabilities,
    /// Normalized probability of the item at its original position.
    pub item_baseline_prob: f64,
    /// Normalized probability of the item once moved to the top.
    pub item_swapped_prob: f64,
    /// `item_swapped_prob − item_baseline_prob`.
    pub uplift: f64,
}

/// Outcome-code slot holding the choice probability of a given position.
///
/// Under reference identification the reference position's probability lives
/// in slot 0; every other position maps to its 1-based code.
fn slot_for_position(kind: &ModelKind, position: usize) -> usize {
    match kind {
        ModelKind::MultinomialReference { ref_index } if *ref_index == position => 0,
        _ => position + 1,
    }
}

/// Choice (or marginal success) probabilities for one covariate matrix.
pub fn choice_probabilities(
    model: &ProbitModel,
    x: &DMatrix<f64>,
    ep: &EpConfig,
) -> Result<ChoiceProbabilities> {
    match model.kind {
        ModelKind::Multivariate => multivariate_marginals(model, x),
        ModelKind::MultinomialOutside => {
            let m = x.nrows();
            if model.dim() != m {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    got: m,
                });
            }
            let mean = x * &model.beta;
            let codes: Vec<usize> = (0..=m).collect();
            let raw = masses_for_codes(&codes, &model.kind, &mean, &model.sigma, m, ep)?;
            finish(raw)
        }
        ModelKind::MultinomialReference { ref_index } => {
            let m = x.nrows();
            if model.dim() != m - 1 {
                return Err(Error::DimensionMismatch {
                    expected: model.dim() + 1,
                    got: m,
                });
            }
            // Identified system: differenced covariates, reduced covariance
            // is the model's own sigma.
            let red = reduce_reference(x, ref_index, ref_index)?;
            let mean = &red.x_tilde * &model.beta;
            let codes: Vec<usize> = (0..=m).filter(|&c| c != ref_index + 1).collect();
            let mut raw =
                masses_for_codes(&codes, &model.kind, &mean, &model.sigma, m - 1, ep)?;
            raw.insert(ref_index + 1, 0.0);
            finish(raw)
        }
    }
}

fn masses_for_codes(
    codes: &[usize],
    kind: &ModelKind,
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    dim: usize,
    ep: &EpConfig,
) -> Result<Vec<f64>> {
    codes
        .par_iter()
        .map(|&code| {
            let cs = build_constraints(kind, &Outcome::Chosen(code), dim)?;
            match ep_log_mass(mean, sigma, &cs, ep) {
                Ok(lm) => Ok(lm.exp()),
                Err(Error::InfeasibleRegion) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn multivariate_marginals(model: &ProbitModel, x: &DMatrix<f64>) -> Result<ChoiceProbabilities> {
    let m = x.nrows();
    if model.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: m,
        });
    }
    let mean = x * &model.beta;
    let mut probs = Vec::with_capacity(m);
    for j in 0..m {
        let um = truncated_moments(mean[j], model.sigma[(j, j)], Interval1D::greater_than(0.0))?;
        probs.push(um.log_mass.exp());
    }
    Ok(ChoiceProbabilities {
        raw_mass: probs.clone(),
        normalized: probs,
        mass_defect: 0.0,
    })
}

fn finish(raw: Vec<f64>) -> Result<ChoiceProbabilities> {
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InfeasibleRegion);
    }
    let normalized = raw.iter().map(|&v| v / total).collect();
    Ok(ChoiceProbabilities {
        mass_defect: (total - 1.0).abs(),
        raw_mass: raw,
        normalized,
    })
}

/// Predicts the gain in choice probability from moving `item` to the top
/// position, holding every other item's relative order fixed.
///
/// Positions carry the covariance (position effects stay put); items carry
/// their fixed-utility rows, so the swap exchanges rows `item` and `0` of the
/// covariate matrix.
pub fn counterfactual_swap_to_top(
    model: &ProbitModel,
    x: &DMatrix<f64>,
    item: usize,
    ep: &EpConfig,
) -> Result<Counterfactual> {
    if matches!(model.kind, ModelKind::Multivariate) {
        return Err(Error::InvalidSpec(
            "counterfactual repositioning requires a multinomial model".into(),
        ));
    }
    let m = x.nrows();
    if item >= m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: item,
        });
    }
    let baseline = choice_probabilities(model, x, ep)?;
    let mut swapped_x = x.clone();
    swapped_x.swap_rows(0, item);
    let swapped = choice_probabilities(model, &swapped_x, ep)?;
    let item_baseline_prob = baseline.normalized[slot_for_position(&model.kind, item)];
    let item_swapped_prob = swapped.normalized[slot_for_position(&model.kind, 0)];
    Ok(Counterfactual {
        baseline,
        swapped,
        item_baseline_prob,
        item_swapped_prob,
        uplift: item_swapped_prob - item_baseline_prob,
    })
}

/// Reduced-truth helper used by tests and examples: covariance of the
/// identified system implied by an original-space (β, Σ) pair.
pub fn identified_sigma(kind: &ModelKind, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    match kind {
        ModelKind::MultinomialReference { ref_index } => reduce_covariance(sigma, *ref_index),
        _ => sigma.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate_with_latents, outcome_of, SigmaKind, SimSpec};

    fn ep() -> EpConfig {
        EpConfig {
            tol: 1e-8,
            max_sweeps: 120,
            ..EpConfig::default()
        }
    }

    #[test]
    fn binary_probit_threshold() {
        // m = 1 multivariate probit with Xβ = 0 and unit variance.
        let model = ProbitModel::new(
            DVector::from_vec(vec![0.7]),
            DMatrix::identity(1, 1),
            ModelKind::Multivariate,
        )
        .unwrap();
        let x = DMatrix::zeros(1, 1);
        let probs = choice_probabilities(&model, &x, &ep()).unwrap();
        assert!((probs.normalized[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_model_gives_equal_alternative_probabilities() {
        let m = 3;
        let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 });
        let model = ProbitModel::new(
            DVector::zeros(2),
            sigma,
            ModelKind::MultinomialOutside,
        )
        .unwrap();
        let x = DMatrix::zeros(m, 2);
        let probs = choice_probabilities(&model, &x, &ep()).unwrap();
        for j in 2..=m {
            assert!(
                (probs.normalized[j] - probs.normalized[1]).abs() < 1e-6,
                "slot {j}: {:?}",
                probs.normalized
            );
        }
        assert!(probs.mass_defect < 0.05);
        let sum: f64 = probs.normalized.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance_of_predictions() {
        let m = 3;
        let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.3 } else { 0.4 });
        let beta = DVector::from_vec(vec![0.8, -0.3]);
        let x = DMatrix::from_fn(m, 2, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64));
        for &c in &[0.5, 2.0, 10.0] {
            let base = ProbitModel::new(beta.clone(), sigma.clone(), ModelKind::MultinomialOutside)
                .unwrap();
            let scaled = ProbitModel::new(
                &beta * c,
                &sigma * (c * c),
                ModelKind::MultinomialOutside,
            )
            .unwrap();
            let p0 = choice_probabilities(&base, &x, &ep()).unwrap();
            let p1 = choice_probabilities(&scaled, &x, &ep()).unwrap();
            for (a, b) in p0.normalized.iter().zip(&p1.normalized) {
                assert!((a - b).abs() < 1e-8, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_simulation_oracle_m2() {
        // Normalized probabilities within 0.01 of a direct argmax simulation.
        let m = 2;
        let beta = DVector::from_vec(vec![1.0, -0.5]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let model =
            ProbitModel::new(beta.clone(), sigma.clone(), ModelKind::MultinomialOutside).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]);
        let probs = choice_probabilities(&model, &x, &ep()).unwrap();

        let spec = SimSpec {
            n: 400_000,
            m,
            p: 2,
            beta_true: beta,
            sigma_kind: SigmaKind::RandomPd { seed: 1 }, // replaced below
            kind: ModelKind::MultinomialOutside,
            seed: 707,
        };
        // Forward-simulate with the exact x by drawing latents directly.
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
        let chol = nalgebra::Cholesky::new(sigma).unwrap();
        let mean = &x * &spec.beta_true;
        let mut counts = vec![0usize; m + 1];
        for _ in 0..spec.n {
            let g = DVector::from_fn(m, |_, _| {
                rand_distr::StandardNormal.sample(&mut rng)
            });
            let z = &mean + chol.l() * g;
            if let Outcome::Chosen(c) = outcome_of(&spec.kind, &z) {
                counts[c] += 1;
            }
        }
        for c in 0..=m {
            let sim = counts[c] as f64 / spec.n as f64;
            assert!(
                (probs.normalized[c] - sim).abs() < 0.01,
                "code {c}: EP {} vs sim {}",
                probs.normalized[c],
                sim
            );
        }
    }

    #[test]
    fn reference_kind_prediction_slots() {
        let m = 3;
        let sigma_full = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 });
        let sigma_reduced = identified_sigma(
            &ModelKind::MultinomialReference { ref_index: 0 },
            &sigma_full,
        );
        let model = ProbitModel::new(
            DVector::zeros(2),
            sigma_reduced,
            ModelKind::MultinomialReference { ref_index: 0 },
        )
        .unwrap();
        let x = DMatrix::zeros(m, 2);
        let probs = choice_probabilities(&model, &x, &ep()).unwrap();
        assert_eq!(probs.raw_mass.len(), m + 1);
        // Reference alternative's own code slot is structurally zero.
        assert_eq!(probs.raw_mass[1], 0.0);
        // Exchangeability: the two non-reference alternatives match.
        assert!((probs.normalized[2] - probs.normalized[3]).abs() < 1e-6);
        let sum: f64 = probs.normalized.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swap_with_item_already_on_top_is_neutral() {
        let m = 3;
        let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.2 });
        let model = ProbitModel::new(
            DVector::from_vec(vec![0.9]),
            sigma,
            ModelKind::MultinomialOutside,
        )
        .unwrap();
        let x = DMatrix::from_column_slice(m, 1, &[0.6, 0.1, -0.4]);
        let cf = counterfactual_swap_to_top(&model, &x, 0, &ep()).unwrap();
        assert!(cf.uplift.abs() < 1e-12);
    }

    #[test]
    fn exchangeable_model_has_zero_uplift() {
        let m = 3;
        let sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 });
        let model =
            ProbitModel::new(DVector::zeros(2), sigma, ModelKind::MultinomialOutside).unwrap();
        let x = DMatrix::zeros(m, 2);
        for item in 0..m {
            let cf = counterfactual_swap_to_top(&model, &x, item, &ep()).unwrap();
            assert!(cf.uplift.abs() < 1e-6, "item {item}: uplift {}", cf.uplift);
        }
    }

    #[test]
    fn reference_kind_counterfactual_slots() {
        // ref_index = 0: after the swap the item occupies the reference
        // position, whose probability lives in code slot 0.
        let m = 3;
        let sigma_full = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 });
        let kind = ModelKind::MultinomialReference { ref_index: 0 };
        let model = ProbitModel::new(
            DVector::zeros(2),
            identified_sigma(&kind, &sigma_full),
            kind,
        )
        .unwrap();
        let x = DMatrix::zeros(m, 2);
        for item in 0..m {
            let cf = counterfactual_swap_to_top(&model, &x, item, &ep()).unwrap();
            assert!(cf.item_baseline_prob > 0.0);
            assert!(cf.item_swapped_prob > 0.0);
            // Full exchangeability: repositioning changes nothing.
            assert!(cf.uplift.abs() < 1e-6, "item {item}: {}", cf.uplift);
        }
    }

    #[test]
    fn top_advantage_uplift_sign_matches_simulation() {
        // Position 0 carries extra variance, which helps a weak item win more
        // often from the top; check the uplift sign against forward
        // simulation.
        let m = 3;
        let mut sigma = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.3 });
        sigma[(0, 0)] = 2.5;
        let beta = DVector::from_vec(vec![1.0]);
        let model =
            ProbitModel::new(beta.clone(), sigma.clone(), ModelKind::MultinomialOutside).unwrap();
        let x = DMatrix::from_column_slice(m, 1, &[0.5, 0.0, -0.8]);
        let item = 2;
        let cf = counterfactual_swap_to_top(&model, &x, item, &ep()).unwrap();

        use rand::SeedableRng;
        use rand_distr::Distribution;
        let chol = nalgebra::Cholesky::new(sigma).unwrap();
        let mut simulate_prob = |xm: &DMatrix<f64>, position: usize, seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mean = xm * &beta;
            let n = 300_000;
            let mut hits = 0usize;
            for _ in 0..n {
                let g = DVector::from_fn(m, |_, _| {
                    rand_distr::StandardNormal.sample(&mut rng)
                });
                let z = &mean + chol.l() * g;
                if let Outcome::Chosen(c) = outcome_of(&ModelKind::MultinomialOutside, &z) {
                    if c == position + 1 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / n as f64
        };
        let base_sim = simulate_prob(&x, item, 5001);
        let mut swapped_x = x.clone();
        swapped_x.swap_rows(0, item);
        let swap_sim = simulate_prob(&swapped_x, 0, 5002);
        let sim_uplift = swap_sim - base_sim;
        assert!(
            cf.uplift.signum() == sim_uplift.signum(),
            "EP uplift {} vs simulated {}",
            cf.uplift,
            sim_uplift
        );
        assert!((cf.uplift - sim_uplift).abs() < 0.01);
    }
}
