//! Deterministic maximum-likelihood estimation of multivariate and
//! multinomial probit models with general covariance.
//!
//! The estimator is an EM algorithm with two custom pieces:
//!
//! * **E-step** — expectation propagation approximates the mean, covariance,
//!   and mass of each observation's truncated multivariate normal, instead of
//!   sampling from it ([`ep`]). Multinomial constraint matrices are
//!   involutory, so every solve runs on an axis-aligned box after a cheap
//!   change of variables ([`constraints`]).
//! * **M-step** — the scale identification constraint `Tr(Σ⁻¹) = c` turns the
//!   covariance update into a one-dimensional secular equation over the
//!   eigenvalues of the conditional sample covariance, solved by safeguarded
//!   bisection + Newton, after which `Σ = Ŝ − y*I` directly ([`mstep`]).
//!
//! [`em::fit`] drives the loop; [`simulate`] provides the data generator and
//! the Monte-Carlo oracles used to validate EP; [`predict`] computes choice
//! probabilities and repositioning counterfactuals from a fitted model.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `probit-ep` binary for the batch CLI (`fit`, `simulate`, `predict`,
//! `ep-check`).

pub mod constraints;
pub mod em;
pub mod ep;
pub mod error;
pub mod io;
pub mod mstep;
pub mod predict;
pub mod simulate;
pub mod truncnorm;

pub use constraints::{
    axis_align, build_constraints, marginalize_model, reduce_reference, untransform_moments,
    ConstraintSystem, ModelKind, Outcome,
};
pub use em::{fit, initialize, lower_bound, ChoiceObservation, EmConfig, EmTrace, ProbitModel};
pub use ep::{ep_log_mass, ep_moments, EpConfig, TmvnMoments};
pub use error::{Error, Result};
pub use mstep::{solve_trace_constrained, ShatSummary, TraceSolveResult};
pub use predict::{choice_probabilities, counterfactual_swap_to_top, ChoiceProbabilities};
pub use simulate::{generate, gibbs_tmvn, rejection_tmvn, SigmaKind, SimSpec};
pub use truncnorm::{truncated_moments, Interval1D, UniMoments};
