//! Fixed sinusoidal positional encodings over the patch grid.

use ndarray::Array2;

/// 1-D sin/cos table: `positions.len()` rows of width `dim` (even).
/// First half sin(pos * omega_k), second half cos(pos * omega_k) with
/// omega_k = 1 / 10000^(k / (dim/2)).
fn sincos_1d(dim: usize, positions: &[f64]) -> Array2<f64> {
    assert!(dim % 2 == 0, "sincos dimension must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((positions.len(), dim));
    for (r, &pos) in positions.iter().enumerate() {
        for k in 0..half {
            let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
            out[(r, k)] = (pos * omega).sin();
            out[(r, half + k)] = (pos * omega).cos();
        }
    }
    out
}

/// Positional table for a rows x cols patch grid, one row per patch in
/// row-major grid order.
///
/// When `dim` is divisible by 4 the table is 2-D (half the width encodes
/// the grid row, half the grid column); otherwise it falls back to a 1-D
/// encoding of the flattened patch index.
pub fn grid_pos_embed(dim: usize, rows: usize, cols: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "positional dimension must be even");
    let n = rows * cols;
    if dim % 4 == 0 {
        let half = dim / 2;
        let row_coords: Vec<f64> = (0..n).map(|i| (i / cols) as f64).collect();
        let col_coords: Vec<f64> = (0..n).map(|i| (i % cols) as f64).collect();
        let eh = sincos_1d(half, &row_coords);
        let ew = sincos_1d(half, &col_coords);
        let mut out = Array2::zeros((n, dim));
        for r in 0..n {
            for k in 0..half {
                out[(r, k)] = eh[(r, k)];
                out[(r, half + k)] = ew[(r, k)];
            }
        }
        out
    } else {
        let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
        sincos_1d(dim, &coords)
    }
}
