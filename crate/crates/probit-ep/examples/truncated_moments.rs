//! Tour of the univariate truncated-normal kernel: moments across interval
//! shapes, including bounds deep enough in the tail that naive CDF
//! differences would return garbage.
//!
//! Run with `cargo run --example truncated_moments`.

use probit_ep::{truncated_moments, Interval1D};

fn main() {
    let cases = [
        ("half line (0, inf)", 0.0, 1.0, Interval1D::greater_than(0.0)),
        ("symmetric (-1, 1)", 0.0, 1.0, Interval1D::new(-1.0, 1.0).unwrap()),
        ("no truncation", 1.5, 4.0, Interval1D::unbounded()),
        ("left tail (-inf, -3)", 0.0, 1.0, Interval1D::less_than(-3.0)),
        ("deep tail (20, inf)", 0.0, 1.0, Interval1D::greater_than(20.0)),
        ("deep slab (30, 31)", 0.0, 1.0, Interval1D::new(30.0, 31.0).unwrap()),
        ("shifted (2, 5), mu=1, s2=2", 1.0, 2.0, Interval1D::new(2.0, 5.0).unwrap()),
    ];
    println!("{:<28} {:>14} {:>12} {:>12}", "interval", "log mass", "mean", "variance");
    for (label, mu, s2, iv) in cases {
        let m = truncated_moments(mu, s2, iv).unwrap();
        println!(
            "{label:<28} {:>14.6} {:>12.6} {:>12.3e}",
            m.log_mass, m.mean, m.variance
        );
    }

    // The kernel flags regions whose mass underflows entirely.
    match truncated_moments(0.0, 1.0, Interval1D::greater_than(38.0)) {
        Err(e) => println!("\n(38, inf): {e}"),
        Ok(_) => unreachable!(),
    }
}
