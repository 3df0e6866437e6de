#![allow(dead_code)]

use proptest::prelude::*;
use upair_core::{Theta, UnorderedDataset};

/// Bivariate normal density written out from the covariance matrix inverse.
pub fn bvn_density(x1: f64, x2: f64, t: &[f64; 5]) -> f64 {
    let [m1, m2, s1, s2, r] = *t;
    let (a, b, d) = (s1 * s1, r * s1 * s2, s2 * s2);
    let det = a * d - b * b;
    let (u, v) = (x1 - m1, x2 - m2);
    let q = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Unordered-pair log-likelihood from the plain density, no log-sum-exp.
pub fn oracle_loglik(rows: &[(f64, f64)], t: &[f64; 5]) -> f64 {
    rows.iter()
        .map(|&(a, b)| (bvn_density(a, b, t) + bvn_density(b, a, t)).ln())
        .sum()
}

pub fn theta_strategy() -> impl Strategy<Value = Theta> {
    (-3.0..3.0f64, -3.0..3.0f64, 0.3..3.0f64, 0.3..3.0f64, -0.9..0.9f64)
        .prop_map(|(m1, m2, s1, s2, r)| Theta::new(m1, m2, s1, s2, r).unwrap())
}

pub fn rows_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-4.0..4.0f64, -4.0..4.0f64), min..max)
}

pub fn dataset(rows: &[(f64, f64)]) -> UnorderedDataset {
    UnorderedDataset::from_rows(rows.iter().copied()).unwrap()
}
