//! Shared fixtures for the throughput benchmarks.

use seek_gp::bench::hartmann6;
use seek_gp::bench::sobol_points;
use seek_gp::{Dataset, Points};

/// `n` Sobol points in the six-dimensional unit cube labelled by Hartmann-6.
pub fn hartmann_data(n: usize) -> Dataset {
    let x: Points = sobol_points(6, n, 1).expect("valid Sobol request");
    let y = (0..n)
        .map(|i| hartmann6(&x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    Dataset::new(x, y).expect("finite data")
}
