//! The trace-constrained covariance update in isolation: build a random
//! conditional sample covariance, solve the secular equation
//! sum_i 1/(lambda_i − y) = m by safeguarded bisection + Newton, and verify
//! the direct update Sigma = S_hat − y* I satisfies the constraint.
//!
//! Run with `cargo run --example trace_newton`.

use nalgebra::{Cholesky, DMatrix, DVector};
use probit_ep::mstep::{solve_trace_constrained, summarize_spd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let m = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = DMatrix::from_fn(m, m, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    let q = g.qr().q();
    let eigs = DVector::from_fn(m, |_, _| (rng.gen::<f64>() * 3.0 - 1.0f64).exp());
    let mut s_hat = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (s_hat[(i, j)] + s_hat[(j, i)]);
            s_hat[(i, j)] = v;
            s_hat[(j, i)] = v;
        }
    }

    let summary = summarize_spd(s_hat).unwrap();
    println!(
        "eigenvalues of S_hat: {:?}",
        summary
            .eigenvalues
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );

    let target = m as f64;
    let res = solve_trace_constrained(&summary, target).unwrap();
    println!(
        "y* = {:.12} ({} bisection, {} Newton iterations), lambda_min = {:.6}",
        res.y_star, res.bisect_iters, res.newton_iters, summary.eigenvalues[0]
    );

    let omega = Cholesky::new(res.sigma_new.clone()).unwrap().inverse();
    println!(
        "Tr(Sigma_new^-1) = {:.12} (target {target}), residual {:.2e}",
        omega.trace(),
        (omega.trace() - target).abs()
    );

    // The analytic two-eigenvalue case: lambda = (1, 3), target 2 has the
    // closed-form root (3 − sqrt(5))/2.
    let q2 = DMatrix::<f64>::identity(2, 2);
    let s2 = &q2 * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])) * q2.transpose();
    let res2 = solve_trace_constrained(&summarize_spd(s2).unwrap(), 2.0).unwrap();
    println!(
        "\nanalytic check: y* = {:.12}, (3 - sqrt(5))/2 = {:.12}",
        res2.y_star,
        (3.0 - 5.0f64.sqrt()) / 2.0
    );
}
