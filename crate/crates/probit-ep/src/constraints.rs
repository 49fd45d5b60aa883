//! Linear-constraint regions encoding probit outcomes, the reference
//! reduction, and the involutory axis-alignment transform.
//!
//! Every observation's outcome corresponds to a region `{ l ≤ A z ≤ u }` of
//! the latent utilities. For multivariate (panel) probit the region is an
//! axis-aligned box. For multinomial probit with chosen alternative `j` the
//! constraint matrix combines the pairwise comparisons `z_j ≥ z_k` with the
//! sign condition `z_j ≥ 0`:
//!
//! ```text
//! A = -I + 1 e_jᵀ + e_j e_jᵀ,   l = 0,   u = ∞.
//! ```
//!
//! `A` is involutory (`A·A = I`), which lets `U = A(z − m)` turn the region
//! into a rectangle and back at no more than matrix-multiply cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::ProbitModel;
use crate::ep::TmvnMoments;
use crate::error::{Error, Result};
use crate::truncnorm::Interval1D;

/// Which probit specification an observation or model follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Binary indicator per coordinate (panel probit).
    Multivariate,
    /// Argmax choice with an outside option chosen when all utilities are
    /// negative; the model is already identified in m dimensions.
    MultinomialOutside,
    /// Argmax choice identified by differencing against a designated
    /// reference alternative, reducing the system to m−1 dimensions.
    MultinomialReference { ref_index: usize },
}

impl ModelKind {
    /// Dimension of the identified latent system given `m` alternatives.
    pub fn identified_dim(&self, m: usize) -> usize {
        match self {
            ModelKind::MultinomialReference { .. } => m - 1,
            _ => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Multivariate => "multivariate",
            ModelKind::MultinomialOutside => "multinomial_outside",
            ModelKind::MultinomialReference { .. } => "multinomial_reference",
        }
    }
}

/// Observed response for one decision.
///
/// For multinomial kinds the code convention is `0` for the outside or
/// reference option and `1..=m` for alternative `j` (1-based). For the
/// reference kind the reference alternative itself must be coded `0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// One indicator per coordinate of a multivariate probit.
    Binary(Vec<bool>),
    /// Outcome code of a multinomial probit.
    Chosen(usize),
}

/// The region `{ z : lower ≤ A z ≤ upper }`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSystem {
    pub a_matrix: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// `A·A = I`; enables the axis-alignment transform.
    pub involutory: bool,
    /// `A` is ± a signed permutation of the identity, so the region is a box.
    pub axis_aligned: bool,
}

impl ConstraintSystem {
    pub fn dim(&self) -> usize {
        self.a_matrix.nrows()
    }

    /// Bounds of the `k`-th linear functional as an interval.
    pub fn interval(&self, k: usize) -> Result<Interval1D> {
        Interval1D::new(self.lower[k], self.upper[k])
    }

    /// Membership test for a point, with strict/closed bounds treated
    /// uniformly (the boundary has measure zero for every use here).
    pub fn contains(&self, z: &DVector<f64>) -> bool {
        let az = &self.a_matrix * z;
        az.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// A box region with `A = I` and the given bounds.
    pub fn from_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for k in 0..lower.len() {
            Interval1D::new(lower[k], upper[k])?;
        }
        Ok(Self {
            a_matrix: DMatrix::identity(lower.len(), lower.len()),
            lower,
            upper,
            involutory: true,
            axis_aligned: true,
        })
    }
}

/// Constraint matrix `-I + 1 e_jᵀ + e_j e_jᵀ` for chosen column `j`.
fn multinomial_a(j: usize, dim: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        a[(k, k)] = -1.0;
        a[(k, j)] += 1.0;
    }
    a[(j, j)] += 1.0;
    a
}

/// Builds the constraint region encoding `outcome` under `kind`.
///
/// `dim` is the dimension of the identified latent system: `m` for the
/// multivariate and outside-option kinds, `m − 1` for the reference kind
/// (with the outcome still coded in original alternative labels).
pub fn build_constraints(
    kind: &ModelKind,
    outcome: &Outcome,
    dim: usize,
) -> Result<ConstraintSystem> {
    match (kind, outcome) {
        (ModelKind::Multivariate, Outcome::Binary(y)) => {
            if y.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: y.len(),
                });
            }
            let lower = DVector::from_iterator(
                dim,
                y.iter()
                    .map(|&on| if on { 0.0 } else { f64::NEG_INFINITY }),
            );
            let upper = DVector::from_iterator(
                dim,
                y.iter().map(|&on| if on { f64::INFINITY } else { 0.0 }),
            );
            Ok(ConstraintSystem {
                a_matrix: DMatrix::identity(dim, dim),
                lower,
                upper,
                involutory: true,
                axis_aligned: true,
            })
        }
        (ModelKind::Multivariate, Outcome::Chosen(code)) => Err(Error::InvalidOutcome {
            code: *code,
            kind: kind.name(),
            dim,
        }),
        (_, Outcome::Binary(_)) => Err(Error::InvalidOutcome {
            code: usize::MAX,
            kind: kind.name(),
            dim,
        }),
        (kind, Outcome::Chosen(code)) => {
            let reduced = reduced_choice_index(kind, *code, dim)?;
            let (a_matrix, axis_aligned) = match reduced {
                // Outside/reference chosen: all identified utilities ≤ 0,
                // written as -z ≥ 0 so that A stays involutory.
                None => (-DMatrix::<f64>::identity(dim, dim), true),
                Some(j) => {
                    let a = multinomial_a(j, dim);
                    (a, dim == 1)
                }
            };
            Ok(ConstraintSystem {
                a_matrix,
                lower: DVector::zeros(dim),
                upper: DVector::from_element(dim, f64::INFINITY),
                involutory: true,
                axis_aligned,
            })
        }
    }
}

/// Maps an outcome code to the chosen column of the identified system;
/// `None` means the outside/reference option was chosen.
pub fn reduced_choice_index(
    kind: &ModelKind,
    code: usize,
    dim: usize,
) -> Result<Option<usize>> {
    let invalid = |code| Error::InvalidOutcome {
        code,
        kind: kind.name(),
        dim,
    };
    match kind {
        ModelKind::Multivariate => Err(invalid(code)),
        ModelKind::MultinomialOutside => {
            if code == 0 {
                Ok(None)
            } else if code <= dim {
                Ok(Some(code - 1))
            } else {
                Err(invalid(code))
            }
        }
        ModelKind::MultinomialReference { ref_index } => {
            // dim = m − 1 here, so original alternatives run over 0..=dim.
            if code == 0 {
                return Ok(None);
            }
            let orig = code - 1;
            if orig > dim || orig == *ref_index {
                return Err(invalid(code));
            }
            Ok(Some(if orig < *ref_index { orig } else { orig - 1 }))
        }
    }
}

/// Differenced design produced by the reference reduction.
#[derive(Clone, Debug)]
pub struct ReducedDesign {
    /// Rows are `X_j − X_ref` for `j ≠ ref`, in ascending original order.
    pub x_tilde: DMatrix<f64>,
    /// Outcome in the reduced system; `None` when the reference was chosen.
    pub chosen_reduced: Option<usize>,
    /// Reduction matrix `D` with rows `e_j − e_ref`, so `Σ̃ = D Σ Dᵀ`.
    pub reduction: DMatrix<f64>,
}

/// Subtracts the reference alternative's covariates (and implicitly its
/// latent utility) from all other rows.
///
/// `outcome` and `ref_index` are original alternative indices in `[0, m)`;
/// `outcome == ref_index` maps to the reference-chosen sentinel.
pub fn reduce_reference(
    x: &DMatrix<f64>,
    outcome: usize,
    ref_index: usize,
) -> Result<ReducedDesign> {
    let m = x.nrows();
    if ref_index >= m {
        return Err(Error::InvalidOutcome {
            code: ref_index,
            kind: "multinomial_reference",
            dim: m,
        });
    }
    if outcome >= m {
        return Err(Error::InvalidOutcome {
            code: outcome,
            kind: "multinomial_reference",
            dim: m,
        });
    }
    let p = x.ncols();
    let mut x_tilde = DMatrix::zeros(m - 1, p);
    let mut reduction = DMatrix::zeros(m - 1, m);
    let ref_row = x.row(ref_index);
    let mut chosen_reduced = None;
    let mut r = 0;
    for j in 0..m {
        if j == ref_index {
            continue;
        }
        x_tilde.set_row(r, &(x.row(j) - ref_row));
        reduction[(r, j)] = 1.0;
        reduction[(r, ref_index)] = -1.0;
        if j == outcome {
            chosen_reduced = Some(r);
        }
        r += 1;
    }
    Ok(ReducedDesign {
        x_tilde,
        chosen_reduced,
        reduction,
    })
}

/// Covariance of the reduced system, `Σ̃ = D Σ Dᵀ`.
pub fn reduce_covariance(sigma: &DMatrix<f64>, ref_index: usize) -> DMatrix<f64> {
    let m = sigma.nrows();
    let mut out = DMatrix::zeros(m - 1, m - 1);
    let mut rows: Vec<usize> = (0..m).filter(|&j| j != ref_index).collect();
    rows.shrink_to_fit();
    for (r, &j) in rows.iter().enumerate() {
        for (c, &k) in rows.iter().enumerate() {
            out[(r, c)] =
                sigma[(j, k)] - sigma[(j, ref_index)] - sigma[(ref_index, k)]
                    + sigma[(ref_index, ref_index)];
        }
    }
    out
}

/// Rewrites the constrained problem for `U = A (Z − mean)`, which lives in
/// the axis-aligned box returned here with covariance `A Σ Aᵀ` and mean 0.
pub fn axis_align(
    cs: &ConstraintSystem,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    if !cs.involutory {
        return Err(Error::NotInvolutory);
    }
    let d = cs.dim();
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean.len(),
        });
    }
    let shift = &cs.a_matrix * mean;
    let rect_lower = &cs.lower - &shift;
    let rect_upper = &cs.upper - &shift;
    let mut rect_cov = &cs.a_matrix * cov * cs.a_matrix.transpose();
    symmetrize(&mut rect_cov);
    Ok((rect_lower, rect_upper, rect_cov))
}

/// Maps box-space moments back to the original coordinates:
/// `mean_z = A·mean_u + mean`, `cov_z = A·cov_u·Aᵀ`.
pub fn untransform_moments(
    cs: &ConstraintSystem,
    mean: &DVector<f64>,
    u_moments: &TmvnMoments,
) -> Result<TmvnMoments> {
    if !cs.involutory {
        return Err(Error::NotInvolutory);
    }
    let d = cs.dim();
    if mean.len() != d || u_moments.mean.len() != d || u_moments.cov.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: u_moments.mean.len(),
        });
    }
    let mean_z = &cs.a_matrix * &u_moments.mean + mean;
    let mut cov_z = &cs.a_matrix * &u_moments.cov * cs.a_matrix.transpose();
    symmetrize(&mut cov_z);
    Ok(TmvnMoments {
        log_mass: u_moments.log_mass,
        mean: mean_z,
        cov: cov_z,
    })
}

/// Restricts a model to a subset of positions by truncating the covariance
/// matrix to the kept rows and columns; `beta` is unchanged.
pub fn marginalize_model(model: &ProbitModel, keep: &[usize]) -> Result<ProbitModel> {
    if keep.is_empty() {
        return Err(Error::EmptySubset);
    }
    let sigma = marginalize_covariance(&model.sigma, keep)?;
    ProbitModel::new(model.beta.clone(), sigma, model.kind)
}

/// Submatrix of `sigma` at `keep × keep`.
pub fn marginalize_covariance(sigma: &DMatrix<f64>, keep: &[usize]) -> Result<DMatrix<f64>> {
    if keep.is_empty() {
        return Err(Error::EmptySubset);
    }
    let d = sigma.nrows();
    if let Some(&bad) = keep.iter().find(|&&j| j >= d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad,
        });
    }
    let k = keep.len();
    let mut out = DMatrix::zeros(k, k);
    for (r, &j) in keep.iter().enumerate() {
        for (c, &l) in keep.iter().enumerate() {
            out[(r, c)] = sigma[(j, l)];
        }
    }
    Ok(out)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
