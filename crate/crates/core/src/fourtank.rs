//! Published data of the four-tank case study.

use nalgebra::{DMatrix, DVector};

use crate::lipschitz::LipschitzMatrices;

pub const HORIZON: usize = 4;
pub const Q_DIAG: [f64; 4] = [5.0, 2.5, 1.0, 1.0];
pub const R_DIAG: [f64; 2] = [0.01, 0.01];
pub const T_DIAG: [f64; 2] = [1e4, 1e4];
pub const RHO: f64 = 0.1273;

pub const K: [[f64; 4]; 2] = [
    [-0.2117, -1.0663, 1.0632, -2.2400],
    [-2.9453, 0.3358, -2.9568, 1.5166],
];

pub const P: [[f64; 4]; 4] = [
    [23.7301, -4.6424, 10.2060, -8.5938],
    [-4.6425, 8.8324, -4.7139, 3.8709],
    [10.2060, -4.7139, 12.6887, -7.8934],
    [-8.5938, 3.8709, -7.8934, 9.4075],
];

pub const L_X: [[f64; 4]; 4] = [
    [0.9388, 0.0250, 0.1375, 0.0500],
    [0.0850, 0.9388, 0.0795, 0.1600],
    [0.1225, 0.0145, 0.8375, 0.0750],
    [0.0125, 0.0600, 0.0600, 0.8500],
];

pub const L_V: [[f64; 2]; 4] = [
    [0.0225, 0.0250],
    [0.0500, 0.0350],
    [0.0100, 0.1700],
    [0.1500, 0.0100],
];

pub const L_W: [[f64; 2]; 4] = [
    [0.2400, 0.0125],
    [0.0088, 0.2638],
    [0.00006, 0.2675],
    [0.2450, 0.0125],
];

/// `F(j)` half-widths, one row per tank, `j = 0..=4`.
pub const TUBE_F: [[f64; 5]; 4] = [
    [0.0019, 0.0022, 0.0025, 0.0028, 0.0032],
    [0.0020, 0.0025, 0.0031, 0.0036, 0.0041],
    [0.0020, 0.0021, 0.0022, 0.0023, 0.0025],
    [0.0019, 0.0019, 0.0020, 0.0020, 0.0021],
];

/// `R(j)` half-widths, one row per tank, `j = 0..=4`.
pub const TUBE_R: [[f64; 5]; 4] = [
    [0.0, 0.0019, 0.0041, 0.0066, 0.0094],
    [0.0, 0.0020, 0.0046, 0.0076, 0.0112],
    [0.0, 0.0020, 0.0041, 0.0063, 0.0086],
    [0.0, 0.0019, 0.0038, 0.0058, 0.0078],
];

/// Disturbance values combined pairwise in the scenario batch.
pub const W_GRID: [f64; 10] = [
    -0.005, -0.0039, -0.0028, -0.0017, -0.00055, 0.00055, 0.0017, 0.0028, 0.0039, 0.005,
];

pub const X0: [f64; 4] = [0.2837, 0.2943, 0.2168, 0.2864];

pub const SETPOINTS: [[f64; 2]; 4] = [[0.65, 0.65], [0.35, 0.35], [0.60, 0.75], [0.90, 0.75]];

pub const RUN_MINUTES: f64 = 100.0;

fn mat<const R: usize, const C: usize>(rows: &[[f64; C]; R]) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| rows[i][j])
}

pub fn k() -> DMatrix<f64> {
    mat(&K)
}

/// Published `P`, symmetrised (the printed matrix differs by 1e-4 in one pair).
pub fn p() -> DMatrix<f64> {
    let p = mat(&P);
    (&p + p.transpose()) * 0.5
}

pub fn q() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&Q_DIAG))
}

pub fn r() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&R_DIAG))
}

pub fn t() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&T_DIAG))
}

pub fn lipschitz() -> LipschitzMatrices {
    LipschitzMatrices::new(mat(&L_X), mat(&L_V), mat(&L_W)).expect("published constants are valid")
}

pub fn published_f0() -> Vec<f64> {
    TUBE_F.iter().map(|row| row[0]).collect()
}

/// Schedule of `(start minute, y_t)` with equal segment lengths.
pub fn schedule() -> Vec<(f64, [f64; 2])> {
    let seg = RUN_MINUTES / SETPOINTS.len() as f64;
    SETPOINTS
        .iter()
        .enumerate()
        .map(|(i, y)| (seg * i as f64, *y))
        .collect()
}

pub fn w_grid_pairs() -> Vec<[f64; 2]> {
    W_GRID
        .iter()
        .flat_map(|a| W_GRID.iter().map(move |b| [*a, *b]))
        .collect()
}
