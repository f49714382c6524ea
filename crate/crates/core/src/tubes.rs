//! Box tubes and tightened constraints.
//!
//! `c[i][j]` bounds the stage-`j` effect of a one-step deviation along state
//! `i`; `d[i][j] = Σ_{k<j} c[i][k]` bounds the accumulated disturbance
//! effect. `F(j)` and `R(j)` are the boxes with those half-widths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::lipschitz::LipschitzMatrices;
use crate::policy::AffinePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSystem {
    /// `c[i][j]`, `j = 0..=horizon`.
    pub c: Vec<Vec<f64>>,
    /// `d[i][j]`, `j = 0..=horizon`.
    pub d: Vec<Vec<f64>>,
    pub f: Vec<Hyperbox>,
    pub r: Vec<Hyperbox>,
    pub horizon: usize,
}

impl TubeSystem {
    pub fn state_dim(&self) -> usize {
        self.c.len()
    }

    /// Column `j` of `c` (half-widths of `F(j)`).
    pub fn c_col(&self, j: usize) -> Vec<f64> {
        self.c.iter().map(|row| row[j]).collect()
    }

    /// Column `j` of `d` (half-widths of `R(j)`).
    pub fn d_col(&self, j: usize) -> Vec<f64> {
        self.d.iter().map(|row| row[j]).collect()
    }

    /// Warning text when the last cross-section is wider than the state box.
    pub fn growth_warning(&self, state_box: &Hyperbox) -> Option<String> {
        let last = self.c_col(self.horizon);
        let half = state_box.half_widths();
        let worst = last
            .iter()
            .zip(&half)
            .enumerate()
            .find(|(_, (c, h))| c > h)?;
        Some(format!(
            "tube cross-section c[{}][{}] = {:.4e} exceeds the state half-width {:.4e}",
            worst.0, self.horizon, worst.1 .0, worst.1 .1
        ))
    }
}

/// `F(0)` half-widths from `L_w` and the worst-case disturbance `|w̆| = w̄`.
pub fn initial_cross_section(l_w: &DMatrix<f64>, w_bar: &[f64]) -> Result<Vec<f64>> {
    check_dim("disturbance bound", l_w.ncols(), w_bar.len())?;
    let w = DVector::from_column_slice(w_bar);
    Ok((l_w * w).iter().cloned().collect())
}

pub fn build_tubes(l: &LipschitzMatrices, w_bar: &[f64], horizon: usize) -> Result<TubeSystem> {
    let f0 = initial_cross_section(&l.l_w, w_bar)?;
    build_tubes_from_f0(&l.l_x, &f0, horizon)
}

/// Runs the `c`/`d` recursions from a given `F(0)`.
pub fn build_tubes_from_f0(l_x: &DMatrix<f64>, f0: &[f64], horizon: usize) -> Result<TubeSystem> {
    let n = f0.len();
    check_dim("L_x rows", n, l_x.nrows())?;
    check_dim("L_x columns", n, l_x.ncols())?;
    if horizon == 0 {
        return Err(MpcError::InvalidParameter("horizon must be at least 1".into()));
    }
    if l_x.iter().chain(f0).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(MpcError::InvalidParameter(
            "tube constants must be finite and non-negative".into(),
        ));
    }
    let mut c = vec![vec![0.0; horizon + 1]; n];
    let mut d = vec![vec![0.0; horizon + 1]; n];
    for i in 0..n {
        c[i][0] = f0[i];
    }
    for j in 1..=horizon {
        for i in 0..n {
            c[i][j] = (0..n).map(|a| l_x[(i, a)] * c[a][j - 1]).sum();
        }
    }
    for i in 0..n {
        for j in 1..=horizon {
            d[i][j] = d[i][j - 1] + c[i][j - 1];
        }
    }
    let f = (0..=horizon)
        .map(|j| Hyperbox::symmetric(&c.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let r = (0..=horizon)
        .map(|j| Hyperbox::symmetric(&d.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TubeSystem {
        c,
        d,
        f,
        r,
        horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedConstraints {
    /// Stage `j` state box, `j = 0..=horizon`.
    pub state_boxes: Vec<Hyperbox>,
    /// Stage `j` input box.
    pub input_boxes: Vec<Hyperbox>,
    /// `|K| d[·][j]` per stage.
    pub input_margins: Vec<Vec<f64>>,
}

impl TightenedConstraints {
    pub fn horizon(&self) -> usize {
        self.state_boxes.len() - 1
    }
}

pub fn tighten(
    state_box: &Hyperbox,
    input_box: &Hyperbox,
    k: &DMatrix<f64>,
    tubes: &TubeSystem,
) -> Result<TightenedConstraints> {
    check_dim("tube dimension", state_box.dim(), tubes.state_dim())?;
    check_dim("gain rows", input_box.dim(), k.nrows())?;
    check_dim("gain columns", state_box.dim(), k.ncols())?;
    if let Some(msg) = tubes.growth_warning(state_box) {
        log::warn!("{msg}");
    }
    let abs_k = k.abs();
    let mut state_boxes = Vec::with_capacity(tubes.horizon + 1);
    let mut input_boxes = Vec::with_capacity(tubes.horizon + 1);
    let mut input_margins = Vec::with_capacity(tubes.horizon + 1);
    for j in 0..=tubes.horizon {
        let dj = tubes.d_col(j);
        let margin: Vec<f64> = (&abs_k * DVector::from_column_slice(&dj))
            .iter()
            .cloned()
            .collect();
        let xs = state_box
            .shrink(&dj)?
            .ok_or(MpcError::HorizonTooLong { stage: j })?;
        let us = input_box
            .shrink(&margin)?
            .ok_or(MpcError::HorizonTooLong { stage: j })?;
        state_boxes.push(xs);
        input_boxes.push(us);
        input_margins.push(margin);
    }
    Ok(TightenedConstraints {
        state_boxes,
        input_boxes,
        input_margins,
    })
}

/// Stage-`j` membership of `(x, v)` for the steady state `x_s`.
pub fn membership(
    constraints: &TightenedConstraints,
    policy: &AffinePolicy,
    j: usize,
    x: &DVector<f64>,
    v: &DVector<f64>,
    x_s: &DVector<f64>,
) -> bool {
    if j >= constraints.state_boxes.len() {
        return false;
    }
    constraints.state_boxes[j].contains_vec(x)
        && constraints.input_boxes[j].contains_vec(&policy.apply(x, x_s, v))
}

/// Smallest slack of the stage-`j` membership test.
pub fn membership_slack(
    constraints: &TightenedConstraints,
    policy: &AffinePolicy,
    j: usize,
    x: &DVector<f64>,
    v: &DVector<f64>,
    x_s: &DVector<f64>,
) -> f64 {
    let u = policy.apply(x, x_s, v);
    constraints.state_boxes[j]
        .min_slack(x.as_slice())
        .min(constraints.input_boxes[j].min_slack(u.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lx_is_memoryless() {
        let lx = DMatrix::zeros(2, 2);
        let t = build_tubes_from_f0(&lx, &[0.1, 0.2], 3).unwrap();
        for j in 1..=3 {
            assert_eq!(t.c_col(j), vec![0.0, 0.0]);
            assert_eq!(t.d_col(j), vec![0.1, 0.2]);
        }
        assert_eq!(t.r[0], Hyperbox::origin(2));
    }

    #[test]
    fn scalar_geometric_series() {
        let t = build_tubes_from_f0(&DMatrix::from_element(1, 1, 0.5), &[1.0], 6).unwrap();
        for j in 0..=6 {
            let cj = 0.5f64.powi(j as i32);
            let dj = 2.0 * (1.0 - 0.5f64.powi(j as i32));
            assert!((t.c[0][j] - cj).abs() < 1e-15);
            assert!((t.d[0][j] - dj).abs() < 1e-15);
        }
    }

    #[test]
    fn tighten_box_arithmetic() {
        let x = Hyperbox::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let u = Hyperbox::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let lx = DMatrix::zeros(4, 4);
        // L_x = 0 makes d[·][2] = c[·][0].
        let t = build_tubes_from_f0(&lx, &[0.1; 4], 2).unwrap();
        let tc = tighten(&x, &u, &DMatrix::zeros(2, 4), &t).unwrap();
        assert_eq!(tc.state_boxes[0], x);
        for i in 0..4 {
            assert!((tc.state_boxes[2].lower()[i] - 0.1).abs() < 1e-15);
            assert!((tc.state_boxes[2].upper()[i] - 0.9).abs() < 1e-15);
        }
        assert_eq!(tc.input_boxes[2], u);
    }

    #[test]
    fn no_disturbance_keeps_constraints() {
        let x = Hyperbox::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let u = Hyperbox::new(vec![-1.0], vec![1.0]).unwrap();
        let t = build_tubes_from_f0(&DMatrix::identity(2, 2), &[0.0, 0.0], 4).unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let tc = tighten(&x, &u, &k, &t).unwrap();
        assert!(tc.state_boxes.iter().all(|b| *b == x));
        assert!(tc.input_boxes.iter().all(|b| *b == u));
    }

    #[test]
    fn empty_stage_is_named() {
        let x = Hyperbox::new(vec![0.0], vec![1.0]).unwrap();
        let u = Hyperbox::new(vec![0.0], vec![1.0]).unwrap();
        let t = build_tubes_from_f0(&DMatrix::from_element(1, 1, 1.0), &[0.2], 4).unwrap();
        // d = 0, 0.2, 0.4, 0.6: stage 3 needs 0.6 per side of a unit box.
        let err = tighten(&x, &u, &DMatrix::zeros(1, 1), &t).unwrap_err();
        assert!(matches!(err, MpcError::HorizonTooLong { stage: 3 }));
    }

    #[test]
    fn membership_strict_box() {
        let x = Hyperbox::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let u = Hyperbox::new(vec![-1.0], vec![1.0]).unwrap();
        let t = build_tubes_from_f0(&DMatrix::zeros(2, 2), &[0.1, 0.1], 2).unwrap();
        let pol = AffinePolicy::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let tc = tighten(&x, &u, &pol.k, &t).unwrap();
        let xs = DVector::from_vec(vec![0.5, 0.5]);
        let v = DVector::from_vec(vec![0.2]);
        assert!(membership(&tc, &pol, 1, &xs, &v, &xs));
        let outside = DVector::from_vec(vec![0.1 - 1e-6, 0.5]);
        assert!(!membership(&tc, &pol, 1, &outside, &v, &xs));
        assert!(membership(&tc, &pol, 0, &outside, &v, &xs));
    }
}
