//! Validates EP moments against Monte-Carlo ground truth on two regions:
//! the classic rho = 1/2 positive orthant (whose probability is exactly 1/3)
//! and a multinomial choice region with a shifted mean.
//!
//! Run with `cargo run --release --example ep_vs_oracle`.

use nalgebra::{DMatrix, DVector};
use probit_ep::{
    build_constraints, ep_moments, gibbs_tmvn, rejection_tmvn, ConstraintSystem, EpConfig,
    ModelKind, Outcome,
};

fn report(
    label: &str,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    cs: &ConstraintSystem,
    truth_mass: Option<f64>,
) {
    let cfg = EpConfig::default();
    let ep = ep_moments(mean, cov, cs, &cfg).unwrap();
    let rej = rejection_tmvn(mean, cov, cs, 200_000, 7).unwrap();
    let gibbs = gibbs_tmvn(mean, cov, cs, 100_000, 1_000, 11).unwrap();

    println!("== {label}");
    print!("   mass: EP {:.5}, rejection {:.5}", ep.log_mass.exp(), rej.acceptance.unwrap());
    match truth_mass {
        Some(t) => println!(", exact {t:.5}"),
        None => println!(),
    }
    for k in 0..cs.dim() {
        println!(
            "   mean[{k}]: EP {:+.4}, rejection {:+.4} (±{:.4}), gibbs {:+.4} (±{:.4})",
            ep.mean[k],
            rej.mean[k],
            3.0 * rej.se_mean[k],
            gibbs.mean[k],
            3.0 * gibbs.se_mean[k],
        );
    }
    println!(
        "   max |EP cov − rejection cov| = {:.4}\n",
        (&ep.cov - &rej.cov).amax()
    );
}

fn main() {
    // rho = 1/2 orthant: P = 1/4 + asin(1/2)/(2*pi) = 1/3.
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let cs = ConstraintSystem::from_box(
        DVector::zeros(2),
        DVector::from_element(2, f64::INFINITY),
    )
    .unwrap();
    report("positive orthant, rho = 0.5", &DVector::zeros(2), &cov, &cs, Some(1.0 / 3.0));

    // Multinomial region: alternative 2 of 4 wins, with a shifted mean.
    let dim = 4;
    let cov = DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            1.0
        } else {
            0.4 / (1.0 + (i as f64 - j as f64).abs())
        }
    });
    let mean = DVector::from_vec(vec![0.3, 0.6, -0.2, 0.1]);
    let cs = build_constraints(&ModelKind::MultinomialOutside, &Outcome::Chosen(2), dim).unwrap();
    report("multinomial region (alternative 2 of 4)", &mean, &cov, &cs, None);
}
