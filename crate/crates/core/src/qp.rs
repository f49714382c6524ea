//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ H x + gᵀ x
//! subject to  A_eq x  = b_eq
//!             A_in x <= b_in
//! ```
//!
//! with `H` positive definite. The violated constraint entering the active set
//! is the most violated one; ties go to the lowest index.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("degenerate active set at constraint {0}")]
    Degenerate(usize),
    #[error("iteration limit reached")]
    MaxIter,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers with `H x + g + A_eqᵀ λ_eq + A_inᵀ λ_in = 0`, `λ_in ≥ 0`.
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    /// Indices of active inequality constraints.
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Con {
    Eq(usize),
    In(usize),
}

struct Workspace {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    active: Vec<Con>,
    u: Vec<f64>,
    iq: usize,
}

impl Workspace {
    /// `d = Jᵀ np`.
    fn compute_d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction `z = J₂ d₂`.
    fn compute_z(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for k in self.iq..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        z
    }

    /// Dual step direction `r = R⁻¹ d₁`.
    fn compute_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let iq = self.iq;
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in i + 1..iq {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }

    /// Rotates `J` so that `d` has zeros below position `iq`, then appends
    /// `d[0..=iq]` as the new column of `R`. Returns false when the new
    /// normal is numerically dependent on the active ones.
    fn add_constraint(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        let iq = self.iq;
        for jj in (iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, jj - 1)] = new;
                self.j[(k, jj)] = xny * (t1 + new) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        self.iq += 1;
        if d[iq].abs() <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
        true
    }

    /// Removes the active entry at position `pos` and restores the triangular
    /// structure of `R` with Givens rotations (also applied to `J`).
    fn delete_constraint(&mut self, pos: usize) {
        let n = self.n;
        let iq = self.iq;
        // `active` and `u` may hold one extra trailing entry (the candidate).
        self.active.remove(pos);
        self.u.remove(pos);
        for col in pos..iq - 1 {
            for row in 0..n {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..n {
            self.r[(row, iq - 1)] = 0.0;
        }
        self.iq -= 1;
        let iq = self.iq;
        if iq == 0 {
            return;
        }
        for jj in pos..iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let new = t1 * cc + t2 * ss;
                self.r[(jj, k)] = new;
                self.r[(jj + 1, k)] = xny * (t1 + new) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, jj)] = new;
                self.j[(k, jj + 1)] = xny * (new + t1) - t2;
            }
        }
    }
}

/// Solves the QP. Pass zero-row matrices for absent constraint blocks.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g.len();
    let meq = a_eq.nrows();
    let min = a_in.nrows();
    if h.nrows() != n || h.ncols() != n {
        return Err(QpError::Dimension("Hessian".into()));
    }
    if (meq > 0 && a_eq.ncols() != n) || b_eq.len() != meq {
        return Err(QpError::Dimension("equality block".into()));
    }
    if (min > 0 && a_in.ncols() != n) || b_in.len() != min {
        return Err(QpError::Dimension("inequality block".into()));
    }
    let chol = Cholesky::new(h.clone()).ok_or(QpError::NotConvex)?;
    let lt = chol.l().transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotConvex)?;
    let mut x = -chol.solve(g);
    let mut ws = Workspace {
        n,
        j,
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
        active: Vec::with_capacity(n + 1),
        u: Vec::with_capacity(n + 1),
        iq: 0,
    };
    let scale = h.trace().abs().max(1.0) * ws.j.trace().abs().max(1.0);

    // Internal form: npᵀ x + c0 ≥ 0 (inequalities), npᵀ x + c0 = 0 (equalities).
    let in_normal = |i: usize| -> DVector<f64> { -a_in.row(i).transpose() };

    for i in 0..meq {
        let np: DVector<f64> = a_eq.row(i).transpose();
        let mut d = ws.compute_d(&np);
        let z = ws.compute_z(&d);
        let r = ws.compute_r(&d);
        let ztn = z.dot(&np);
        let t2 = if z.norm() > 1e-14 * np.norm() * scale {
            -(np.dot(&x) - b_eq[i]) / ztn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for (uk, rk) in ws.u.iter_mut().zip(&r) {
            *uk -= t2 * rk;
        }
        ws.active.push(Con::Eq(i));
        ws.u.push(t2);
        if !ws.add_constraint(&mut d) {
            return Err(QpError::DependentEqualities);
        }
    }

    let row_norms: Vec<f64> = (0..min).map(|i| a_in.row(i).norm()).collect();
    let max_iter = 50 * (n + min + meq) + 100;
    let mut iterations = 0;
    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::MaxIter);
        }
        let xnorm = x.amax();
        let mut ip = None;
        let mut worst = 0.0;
        for i in 0..min {
            if ws.active.contains(&Con::In(i)) {
                continue;
            }
            let s = b_in[i] - a_in.row(i).dot(&x.transpose());
            let tol = 1e-12 * (1.0 + b_in[i].abs() + row_norms[i] * xnorm);
            if s < -tol && s < worst {
                worst = s;
                ip = Some(i);
            }
        }
        let Some(ip) = ip else {
            break;
        };
        let np = in_normal(ip);
        let mut s_ip = worst;
        ws.active.push(Con::In(ip));
        ws.u.push(0.0);
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIter);
            }
            let mut d = ws.compute_d(&np);
            let z = ws.compute_z(&d);
            let r = ws.compute_r(&d);
            // Largest dual step keeping active inequality multipliers non-negative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..ws.iq {
                if matches!(ws.active[k], Con::In(_)) && r[k] > 0.0 {
                    let ratio = ws.u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let ztn = z.dot(&np);
            let t2 = if z.norm() > 1e-14 * np.norm() * scale && ztn > 0.0 {
                -s_ip / ztn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            let iq = ws.iq;
            if !t2.is_finite() {
                for k in 0..iq {
                    ws.u[k] -= t * r[k];
                }
                ws.u[iq] += t;
                ws.delete_constraint(drop.expect("finite dual step has a blocking index"));
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..iq {
                ws.u[k] -= t * r[k];
            }
            ws.u[iq] += t;
            if t2 <= t1 {
                if !ws.add_constraint(&mut d) {
                    return Err(QpError::Degenerate(ip));
                }
                continue 'outer;
            }
            ws.delete_constraint(drop.expect("partial step has a blocking index"));
            s_ip = b_in[ip] - a_in.row(ip).dot(&x.transpose());
        }
    }

    let mut lambda_eq = DVector::zeros(meq);
    let mut lambda_in = DVector::zeros(min);
    let mut active = Vec::new();
    for (k, con) in ws.active.iter().enumerate().take(ws.iq) {
        match *con {
            Con::Eq(i) => lambda_eq[i] = -ws.u[k],
            Con::In(i) => {
                lambda_in[i] = ws.u[k];
                active.push(i);
            }
        }
    }
    active.sort_unstable();
    let objective = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
    Ok(QpSolution {
        x,
        objective,
        lambda_eq,
        lambda_in,
        active,
        iterations,
    })
}

/// Inequality-only convenience wrapper.
pub fn solve_qp_ineq(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g.len();
    solve_qp(h, g, &DMatrix::zeros(0, n), &DVector::zeros(0), a_in, b_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kkt_residual(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        a_eq: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        a_in: &DMatrix<f64>,
        b_in: &DVector<f64>,
        s: &QpSolution,
    ) -> f64 {
        let mut stat = h * &s.x + g;
        if a_eq.nrows() > 0 {
            stat += a_eq.transpose() * &s.lambda_eq;
        }
        if a_in.nrows() > 0 {
            stat += a_in.transpose() * &s.lambda_in;
        }
        let mut res = stat.amax();
        if a_eq.nrows() > 0 {
            res = res.max((a_eq * &s.x - b_eq).amax());
        }
        for i in 0..a_in.nrows() {
            let slack = b_in[i] - a_in.row(i).dot(&s.x.transpose());
            res = res.max((-slack).max(0.0));
            res = res.max((-s.lambda_in[i]).max(0.0));
            res = res.max((s.lambda_in[i] * slack).abs());
        }
        res
    }

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![-2.0, -4.0]);
        let s = solve_qp_ineq(&h, &g, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn textbook_example() {
        // min ½x² + ½y² + x  s.t.  x + 2y ≥ 1  →  (−0.6, 0.8)
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        let a = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let s = solve_qp_ineq(&h, &g, &a, &b).unwrap();
        assert!((s.x[0] + 0.6).abs() < 1e-12);
        assert!((s.x[1] - 0.8).abs() < 1e-12);
        assert_eq!(s.active, vec![0]);
    }

    #[test]
    fn infeasible_box_detected() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]);
        assert_eq!(solve_qp_ineq(&h, &g, &a, &b).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn equality_and_bounds() {
        // min ‖x‖² s.t. x1 + x2 + x3 = 3, x1 ≤ 0.5
        let h = DMatrix::identity(3, 3) * 2.0;
        let g = DVector::zeros(3);
        let a_eq = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b_eq = DVector::from_vec(vec![3.0]);
        let a_in = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let b_in = DVector::from_vec(vec![0.5]);
        let s = solve_qp(&h, &g, &a_eq, &b_eq, &a_in, &b_in).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12);
        assert!((s.x[1] - 1.25).abs() < 1e-12);
        assert!(kkt_residual(&h, &g, &a_eq, &b_eq, &a_in, &b_in, &s) < 1e-12);
    }

    #[test]
    fn random_problems_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..8);
            let m = rng.random_range(0..20);
            let meq = rng.random_range(0..n.min(3));
            let f = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
            let g = DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            // Constraints built around a known feasible point.
            let x0 = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
            let a_in = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() - 0.5);
            let b_in = &a_in * &x0 + DVector::from_fn(m, |_, _| rng.random::<f64>());
            let a_eq = DMatrix::from_fn(meq, n, |_, _| rng.random::<f64>() - 0.5);
            let b_eq = &a_eq * &x0;
            let s = solve_qp(&h, &g, &a_eq, &b_eq, &a_in, &b_in).unwrap();
            let res = kkt_residual(&h, &g, &a_eq, &b_eq, &a_in, &b_in, &s);
            assert!(res < 1e-9, "KKT residual {res}");
        }
    }

    #[test]
    fn deterministic_active_set() {
        // Two identical constraints: the lower index enters.
        let h = DMatrix::identity(1, 1);
        let g = DVector::from_vec(vec![-2.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let s = solve_qp_ineq(&h, &g, &a, &b).unwrap();
        assert_eq!(s.active, vec![0]);
        assert!((s.x[0] - 1.0).abs() < 1e-14);
    }
}
