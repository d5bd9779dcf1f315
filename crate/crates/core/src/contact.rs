//! Residue–residue contact maps and their upper-triangular flattening.

use thiserror::Error;

pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContactError {
    #[error("contact map is not square: {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("contact map is asymmetric (max deviation {0})")]
    AsymmetricMap(f64),
    #[error("contact map contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("contact map contains a negative entry at ({0}, {1})")]
    Negative(usize, usize),
    #[error("contact map is empty")]
    Empty,
    #[error("flat vector of length {0} is not triangular")]
    NotTriangular(usize),
}

/// Validated symmetric, non-negative square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMap {
    size: usize,
    values: Vec<f64>,
}

impl ContactMap {
    /// Validates a row-major `rows×cols` buffer. Entries within the
    /// symmetry tolerance are averaged with their mirror.
    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self, ContactError> {
        if rows != cols {
            return Err(ContactError::NonSquare { rows, cols });
        }
        if rows == 0 {
            return Err(ContactError::Empty);
        }
        assert_eq!(values.len(), rows * cols, "buffer length");
        let n = rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() {
                    return Err(ContactError::NonFinite(i, j));
                }
                if v < 0.0 {
                    return Err(ContactError::Negative(i, j));
                }
                worst = worst.max((v - values[j * n + i]).abs());
            }
        }
        if worst > SYMMETRY_TOLERANCE {
            return Err(ContactError::AsymmetricMap(worst));
        }
        let mut sym = values.to_vec();
        for i in 0..n {
            for j in i + 1..n {
                let avg = (values[i * n + j] + values[j * n + i]) / 2.0;
                sym[i * n + j] = avg;
                sym[j * n + i] = avg;
            }
        }
        Ok(Self {
            size: n,
            values: sym,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ContactError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(ContactError::NonSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        Self::from_row_major(n, n, &rows.concat())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Embeds the map at the top-left of a `canvas×canvas` zero matrix,
    /// truncating larger maps to their leading block.
    pub fn padded(&self, canvas: usize) -> Vec<f64> {
        let keep = self.size.min(canvas);
        let mut out = vec![0.0; canvas * canvas];
        for i in 0..keep {
            for j in 0..keep {
                out[i * canvas + j] = self.get(i, j);
            }
        }
        out
    }
}

pub fn flat_len(canvas: usize) -> usize {
    canvas * (canvas + 1) / 2
}

/// Row-major upper triangle (diagonal included) of the padded map.
pub fn pad_and_flatten(map: &ContactMap, canvas: usize) -> Vec<f64> {
    assert!(canvas >= 1, "canvas must be positive");
    let padded = map.padded(canvas);
    let mut out = Vec::with_capacity(flat_len(canvas));
    for i in 0..canvas {
        out.extend_from_slice(&padded[i * canvas + i..(i + 1) * canvas]);
    }
    out
}

/// Inverse of [`pad_and_flatten`]: rebuilds the full symmetric
/// `canvas×canvas` matrix, row-major.
pub fn unflatten(flat: &[f64]) -> Result<(usize, Vec<f64>), ContactError> {
    let canvas = ((((8 * flat.len() + 1) as f64).sqrt() as usize).saturating_sub(1)) / 2;
    if flat_len(canvas) != flat.len() || canvas == 0 {
        return Err(ContactError::NotTriangular(flat.len()));
    }
    let mut out = vec![0.0; canvas * canvas];
    let mut k = 0;
    for i in 0..canvas {
        for j in i..canvas {
            out[i * canvas + j] = flat[k];
            out[j * canvas + i] = flat[k];
            k += 1;
        }
    }
    Ok((canvas, out))
}

/// Deterministic stand-in map for sequences without a stored one:
/// entries decay with sequence separation, `1 / (1 + |i − j|)`.
pub fn separation_map(size: usize) -> ContactMap {
    let values: Vec<f64> = (0..size * size)
        .map(|k| {
            let (i, j) = (k / size, k % size);
            1.0 / (1.0 + i.abs_diff(j) as f64)
        })
        .collect();
    ContactMap { size, values }
}
