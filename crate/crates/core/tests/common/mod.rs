#![allow(dead_code)]

use std::path::PathBuf;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

/// Reference rows: (sequence, header names, 88 values).
pub fn physchem_reference() -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let mut reader = csv::Reader::from_path(fixture_path("physchem_reference.csv")).unwrap();
    let names = reader
        .headers()
        .unwrap()
        .iter()
        .skip(1)
        .map(str::to_owned)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            let values = r.iter().skip(1).map(|v| v.parse().unwrap()).collect();
            (r[0].to_owned(), values)
        })
        .collect();
    (names, rows)
}

/// Relative error with an absolute floor, so exact zeros compare equal.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}
