#![allow(dead_code)]

use lossylqr_core::SystemSpec;
use nalgebra::{dmatrix, DMatrix};
use proptest::prelude::*;

pub fn example1() -> SystemSpec {
    SystemSpec::scalar(1.5, 1.0, 1.0, 1.0).unwrap()
}

pub fn example2() -> SystemSpec {
    SystemSpec::new(
        dmatrix![1.5, 0.1; 0.0, 1.0],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
    )
    .unwrap()
}

pub fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

/// `I·floor + G Gᵀ`, well away from singular.
pub fn spd(n: usize, floor: f64) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n, -1.0, 1.0).prop_map(move |g| DMatrix::identity(n, n) * floor + &g * g.transpose())
}

/// Random stabilizable system with `n <= max_n`.
pub fn system(max_n: usize) -> impl Strategy<Value = SystemSpec> {
    (1..=max_n)
        .prop_flat_map(|n| (Just(n), 1..=n))
        .prop_flat_map(|(n, m)| {
            (
                matrix(n, n, -1.6, 1.6),
                matrix(n, m, -1.5, 1.5),
                spd(n, 0.2),
                spd(m, 0.2),
            )
        })
        .prop_filter_map("not stabilizable", |(a, b, q, r)| SystemSpec::new(a, b, q, r).ok())
}

/// Random system with square, well-conditioned `B`.
pub fn invertible_b_system(max_n: usize) -> impl Strategy<Value = SystemSpec> {
    (1..=max_n)
        .prop_flat_map(|n| (matrix(n, n, -1.8, 1.8), matrix(n, n, -1.0, 1.0), spd(n, 0.2), spd(n, 0.2)))
        .prop_filter_map("B near singular", |(a, b, q, r)| {
            let n = b.nrows();
            let b = b + DMatrix::identity(n, n) * 1.5;
            let sv = b.singular_values();
            if sv.min() < 0.3 {
                return None;
            }
            SystemSpec::new(a, b, q, r).ok()
        })
}
