//! Tracking optimal control problem and receding-horizon control law.
//!
//! Decision vector `z = (v(0), …, v(N_p−1), y_s)`. The nominal rollout is
//! `x̂(j+1) = f(x̂(j), K(x̂(j) − g_x(y_s)) + v(j), 0)` from `x̂(0) = x`.
//! The cost is
//! `Σ_j ℓ(x̂(j) − x_s, v(j) − v_s) + V_f(x̂(N_p) − x_s) + V_O(y_s − y_t)`
//! with quadratic `ℓ`, `V_f` and `V_O`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibria::{best_setpoint, Equilibrium, EquilibriumMaps, SetpointRegion};
use crate::error::{check_dim, MpcError, Result};
use crate::linalg::{cholesky_lower, quad_form};
use crate::model::Plant;
use crate::policy::AffinePolicy;
use crate::qp::{solve_qp_ineq, QpError};
use crate::terminal::TerminalIngredients;
use crate::tubes::{TightenedConstraints, TubeSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative stationarity tolerance.
    pub stationarity_tol: f64,
    pub feasibility_tol: f64,
    pub hessian_regularization: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            stationarity_tol: 1e-6,
            feasibility_tol: 1e-8,
            hessian_regularization: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    FallbackCandidate,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max-iter",
            SolveStatus::FallbackCandidate => "fallback-candidate",
        })
    }
}

/// Input sequence and artificial reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub v_seq: Vec<DVector<f64>>,
    pub y_s: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub v_seq: Vec<DVector<f64>>,
    pub y_s: DVector<f64>,
    pub x_s: DVector<f64>,
    pub v_s: DVector<f64>,
    pub cost: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    /// Largest constraint value `max_i c_i(z)` (≤ 0 when feasible).
    pub max_violation: f64,
    pub predicted_states: Vec<DVector<f64>>,
    pub iterations: usize,
}

impl Solution {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            v_seq: self.v_seq.clone(),
            y_s: self.y_s.clone(),
        }
    }
}

#[derive(Clone)]
pub struct TrackingProblem {
    pub plant: Arc<dyn Plant>,
    pub maps: EquilibriumMaps,
    pub policy: AffinePolicy,
    pub tubes: TubeSystem,
    pub constraints: TightenedConstraints,
    pub terminal: TerminalIngredients,
    pub region: SetpointRegion,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub options: SolverOptions,
    lq: DMatrix<f64>,
    lr: DMatrix<f64>,
    lp: DMatrix<f64>,
    lt: DMatrix<f64>,
}

impl std::fmt::Debug for TrackingProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrackingProblem")
            .field("horizon", &self.horizon())
            .field("rho", &self.terminal.rho)
            .field("options", &self.options)
            .finish()
    }
}

/// Nominal rollout with stage linearisations.
struct Rollout {
    eq: Equilibrium,
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

/// Cost, constraints and their first-order data at one point.
struct Linearization {
    cost: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    c: DVector<f64>,
    jc: DMatrix<f64>,
    /// Row of the terminal inequality, its Gauss–Newton curvature and the
    /// cost-only Hessian.
    term_row: usize,
    term_curvature: DMatrix<f64>,
    gn_hess: DMatrix<f64>,
}

struct SqpOutcome {
    z: DVector<f64>,
    cost: f64,
    max_violation: f64,
    kkt: f64,
    iterations: usize,
    converged: bool,
}

impl TrackingProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plant: Arc<dyn Plant>,
        maps: EquilibriumMaps,
        policy: AffinePolicy,
        tubes: TubeSystem,
        constraints: TightenedConstraints,
        terminal: TerminalIngredients,
        region: SetpointRegion,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        t: DMatrix<f64>,
        options: SolverOptions,
    ) -> Result<Self> {
        let (n, m, p) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
        policy.check(n, m)?;
        check_dim("Q rows", n, q.nrows())?;
        check_dim("R rows", m, r.nrows())?;
        check_dim("T rows", p, t.nrows())?;
        check_dim("P rows", n, terminal.p.nrows())?;
        check_dim("setpoint region dimension", p, region.dim())?;
        check_dim("tube horizon", constraints.horizon(), tubes.horizon)?;
        if !(terminal.rho > 0.0 && terminal.rho.is_finite()) {
            return Err(MpcError::InvalidParameter(format!(
                "terminal level must be positive, got {}",
                terminal.rho
            )));
        }
        let lq = cholesky_lower(&q, "state weight Q")?;
        let lr = cholesky_lower(&r, "input weight R")?;
        let lp = cholesky_lower(&terminal.p, "terminal weight P")?;
        let lt = cholesky_lower(&t, "offset weight T")?;
        Ok(Self {
            plant,
            maps,
            policy,
            tubes,
            constraints,
            terminal,
            region,
            q,
            r,
            t,
            options,
            lq,
            lr,
            lp,
            lt,
        })
    }

    pub fn horizon(&self) -> usize {
        self.constraints.horizon()
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let n = self.plant.state_dim();
        let m = self.plant.input_dim();
        let p = self.plant.output_dim();
        (n, m, p, self.horizon())
    }

    pub fn decision_dim(&self) -> usize {
        let (_, m, p, np) = self.dims();
        m * np + p
    }

    fn pack(&self, c: &Candidate) -> Result<DVector<f64>> {
        let (_, m, p, np) = self.dims();
        check_dim("input sequence length", np, c.v_seq.len())?;
        check_dim("artificial reference", p, c.y_s.len())?;
        let mut z = DVector::zeros(m * np + p);
        for (j, v) in c.v_seq.iter().enumerate() {
            check_dim("input", m, v.len())?;
            z.rows_mut(j * m, m).copy_from(v);
        }
        z.rows_mut(m * np, p).copy_from(&c.y_s);
        Ok(z)
    }

    fn unpack(&self, z: &DVector<f64>) -> Candidate {
        let (_, m, p, np) = self.dims();
        Candidate {
            v_seq: (0..np).map(|j| z.rows(j * m, m).into_owned()).collect(),
            y_s: z.rows(m * np, p).into_owned(),
        }
    }

    fn rollout(
        &self,
        x0: &DVector<f64>,
        v_seq: &[DVector<f64>],
        y_s: &DVector<f64>,
        jacobians: bool,
    ) -> Result<Rollout> {
        let eq = self
            .maps
            .eval_raw(y_s)
            .map_err(|e| MpcError::CostEvaluation(format!("equilibrium map: {e}")))?;
        let w0 = self.plant.zero_disturbance();
        let np = v_seq.len();
        let mut xs = Vec::with_capacity(np + 1);
        let mut us = Vec::with_capacity(np);
        let mut a = Vec::with_capacity(np);
        let mut b = Vec::with_capacity(np);
        xs.push(x0.clone());
        for (j, v) in v_seq.iter().enumerate() {
            let u = self.policy.apply(&xs[j], &eq.x, v);
            let wrap = |e: MpcError| MpcError::CostEvaluation(format!("rollout stage {j}: {e}"));
            if jacobians {
                let (aj, bj) = self.plant.step_jacobians(&xs[j], &u, &w0).map_err(wrap)?;
                a.push(aj);
                b.push(bj);
            }
            let next = self.plant.step(&xs[j], &u, &w0).map_err(wrap)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(MpcError::CostEvaluation(format!(
                    "rollout stage {j}: non-finite state"
                )));
            }
            xs.push(next);
            us.push(u);
        }
        Ok(Rollout { eq, xs, us, a, b })
    }

    fn cost_of(&self, roll: &Rollout, v_seq: &[DVector<f64>], y_t: &DVector<f64>) -> f64 {
        let np = v_seq.len();
        let mut cost = 0.0;
        for (j, v) in v_seq.iter().enumerate() {
            cost += quad_form(&self.q, &(&roll.xs[j] - &roll.eq.x));
            cost += quad_form(&self.r, &(v - &roll.eq.v));
        }
        cost += quad_form(&self.terminal.p, &(&roll.xs[np] - &roll.eq.x));
        cost + quad_form(&self.t, &(&roll.eq.y - y_t))
    }

    /// Cost and its gradient in `(v_seq, y_s)` by the adjoint recursion.
    pub fn evaluate_cost(
        &self,
        x0: &DVector<f64>,
        y_t: &DVector<f64>,
        v_seq: &[DVector<f64>],
        y_s: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        let (n, m, p, np) = self.dims();
        check_dim("initial state", n, x0.len())?;
        check_dim("target", p, y_t.len())?;
        check_dim("input sequence length", np, v_seq.len())?;
        let roll = self.rollout(x0, v_seq, y_s, true)?;
        let cost = self.cost_of(&roll, v_seq, y_t);
        let (gx, gv) = self
            .maps
            .jacobians(y_s)
            .map_err(|e| MpcError::CostEvaluation(format!("equilibrium Jacobian: {e}")))?;
        let k = &self.policy.k;
        let xs = &roll.eq.x;
        let mut grad = DVector::zeros(m * np + p);
        let e_n = &roll.xs[np] - xs;
        let mut lambda = &self.terminal.p * &e_n * 2.0;
        let mut gy = -(gx.transpose() * &lambda);
        for j in (0..np).rev() {
            let e_j = &roll.xs[j] - xs;
            let dv = &v_seq[j] - &roll.eq.v;
            let r_term = &self.r * &dv * 2.0;
            let bt_l = roll.b[j].transpose() * &lambda;
            grad.rows_mut(j * m, m).copy_from(&(&r_term + &bt_l));
            let q_term = &self.q * &e_j * 2.0;
            gy -= gx.transpose() * &q_term;
            gy -= gv.transpose() * &r_term;
            gy -= gx.transpose() * (k.transpose() * &bt_l);
            let a_cl = &roll.a[j] + &roll.b[j] * k;
            lambda = q_term + a_cl.transpose() * &lambda;
        }
        gy += &self.t * (y_s - y_t) * 2.0;
        grad.rows_mut(m * np, p).copy_from(&gy);
        Ok((cost, grad))
    }

    fn linearize(&self, x0: &DVector<f64>, y_t: &DVector<f64>, z: &DVector<f64>) -> Result<Linearization> {
        let (n, m, p, np) = self.dims();
        let nz = m * np + p;
        let cand = self.unpack(z);
        let roll = self.rollout(x0, &cand.v_seq, &cand.y_s, true)?;
        let (gx, gv) = self
            .maps
            .jacobians(&cand.y_s)
            .map_err(|e| MpcError::CostEvaluation(format!("equilibrium Jacobian: {e}")))?;
        let k = &self.policy.k;
        let xs = &roll.eq.x;
        // dx_s/dz and dv_s/dz.
        let mut dxs = DMatrix::zeros(n, nz);
        dxs.columns_mut(m * np, p).copy_from(&gx);
        let mut dvs = DMatrix::zeros(m, nz);
        dvs.columns_mut(m * np, p).copy_from(&gv);
        let n_res = n * np + m * np + n + p;
        let mut res = DVector::zeros(n_res);
        let mut jr = DMatrix::zeros(n_res, nz);
        let mut s = DMatrix::zeros(n, nz);
        let mut sens = Vec::with_capacity(np + 1);
        let mut du = Vec::with_capacity(np);
        let mut row = 0;
        for j in 0..np {
            sens.push(s.clone());
            let de = &s - &dxs;
            res.rows_mut(row, n)
                .copy_from(&(self.lq.transpose() * (&roll.xs[j] - xs)));
            jr.rows_mut(row, n).copy_from(&(self.lq.transpose() * &de));
            row += n;
            let mut dvj = -&dvs;
            for c in 0..m {
                dvj[(c, j * m + c)] += 1.0;
            }
            res.rows_mut(row, m)
                .copy_from(&(self.lr.transpose() * (&cand.v_seq[j] - &roll.eq.v)));
            jr.rows_mut(row, m).copy_from(&(self.lr.transpose() * &dvj));
            row += m;
            let mut duj = k * &de;
            for c in 0..m {
                duj[(c, j * m + c)] += 1.0;
            }
            s = &roll.a[j] * &s + &roll.b[j] * &duj;
            du.push(duj);
        }
        sens.push(s.clone());
        let de_n = &s - &dxs;
        let e_n = &roll.xs[np] - xs;
        res.rows_mut(row, n).copy_from(&(self.lp.transpose() * &e_n));
        jr.rows_mut(row, n).copy_from(&(self.lp.transpose() * &de_n));
        row += n;
        res.rows_mut(row, p)
            .copy_from(&(self.lt.transpose() * (&cand.y_s - y_t)));
        for i in 0..p {
            for c in 0..p {
                jr[(row + i, m * np + c)] = self.lt[(c, i)];
            }
        }
        let cost = res.norm_squared();
        let grad = jr.transpose() * &res * 2.0;
        let mut hess = jr.transpose() * &jr * 2.0;
        for i in 0..nz {
            hess[(i, i)] += self.options.hessian_regularization;
        }

        let n_con = 2 * m * np + 2 * n * np.saturating_sub(1) + 1 + self.region.a.len();
        let mut c = DVector::zeros(n_con);
        let mut jc = DMatrix::zeros(n_con, nz);
        let mut ri = 0;
        for j in 0..np {
            let ub = &self.constraints.input_boxes[j];
            for i in 0..m {
                c[ri] = roll.us[j][i] - ub.upper()[i];
                jc.row_mut(ri).copy_from(&du[j].row(i));
                c[ri + 1] = ub.lower()[i] - roll.us[j][i];
                jc.row_mut(ri + 1).copy_from(&(-du[j].row(i)));
                ri += 2;
            }
        }
        for j in 1..np {
            let xb = &self.constraints.state_boxes[j];
            for i in 0..n {
                c[ri] = roll.xs[j][i] - xb.upper()[i];
                jc.row_mut(ri).copy_from(&sens[j].row(i));
                c[ri + 1] = xb.lower()[i] - roll.xs[j][i];
                jc.row_mut(ri + 1).copy_from(&(-sens[j].row(i)));
                ri += 2;
            }
        }
        c[ri] = quad_form(&self.terminal.p, &e_n) - self.terminal.rho;
        let pe = &self.terminal.p * &e_n * 2.0;
        jc.row_mut(ri).copy_from(&(pe.transpose() * &de_n));
        ri += 1;
        for (h, b) in self.region.a.iter().zip(&self.region.b) {
            c[ri] = cand
                .y_s
                .iter()
                .zip(h)
                .map(|(y, a)| y * a)
                .sum::<f64>()
                - b;
            for (col, a) in h.iter().enumerate() {
                jc[(ri, m * np + col)] = *a;
            }
            ri += 1;
        }
        let term_curvature = de_n.transpose() * &self.terminal.p * &de_n * 2.0;
        Ok(Linearization {
            cost,
            grad,
            gn_hess: hess.clone(),
            hess,
            c,
            jc,
            term_row: ri - self.region.a.len() - 1,
            term_curvature,
        })
    }

    /// Cost and largest constraint value, or `None` outside the model domain.
    fn merit_parts(&self, x0: &DVector<f64>, y_t: &DVector<f64>, z: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let cand = self.unpack(z);
        let roll = self.rollout(x0, &cand.v_seq, &cand.y_s, false).ok()?;
        let cost = self.cost_of(&roll, &cand.v_seq, y_t);
        Some((cost, self.constraint_values(&roll, &cand)))
    }

    fn constraint_values(&self, roll: &Rollout, cand: &Candidate) -> DVector<f64> {
        let (n, m, _, np) = self.dims();
        let mut c = Vec::with_capacity(2 * m * np + 2 * n * np + 1 + self.region.a.len());
        for j in 0..np {
            let ub = &self.constraints.input_boxes[j];
            for i in 0..m {
                c.push(roll.us[j][i] - ub.upper()[i]);
                c.push(ub.lower()[i] - roll.us[j][i]);
            }
        }
        for j in 1..np {
            let xb = &self.constraints.state_boxes[j];
            for i in 0..n {
                c.push(roll.xs[j][i] - xb.upper()[i]);
                c.push(xb.lower()[i] - roll.xs[j][i]);
            }
        }
        c.push(quad_form(&self.terminal.p, &(&roll.xs[np] - &roll.eq.x)) - self.terminal.rho);
        for (h, b) in self.region.a.iter().zip(&self.region.b) {
            c.push(cand.y_s.iter().zip(h).map(|(y, a)| y * a).sum::<f64>() - b);
        }
        DVector::from_vec(c)
    }

    /// Cost and largest constraint value of a candidate.
    pub fn assess(&self, x0: &DVector<f64>, y_t: &DVector<f64>, cand: &Candidate) -> Result<(f64, f64)> {
        let roll = self.rollout(x0, &cand.v_seq, &cand.y_s, false)?;
        let cost = self.cost_of(&roll, &cand.v_seq, y_t);
        let c = self.constraint_values(&roll, cand);
        Ok((cost, c.max()))
    }

    /// Per-coordinate step scale: input range for `v`, region width for `y_s`.
    fn step_scale(&self) -> DVector<f64> {
        let (_, m, p, np) = self.dims();
        let ib = self.plant.input_box();
        let rb = self.region.bounding_box();
        let mut s = DVector::zeros(m * np + p);
        for j in 0..np {
            for i in 0..m {
                s[j * m + i] = ib.upper()[i] - ib.lower()[i];
            }
        }
        for i in 0..p {
            s[m * np + i] = (rb.upper()[i] - rb.lower()[i]).max(1e-3);
        }
        s
    }

    /// QP step inside the box `|dᵢ| ≤ radius·scaleᵢ`; falls back to the
    /// elastic QP when the linearised constraints cannot be met.
    fn step_qp(
        &self,
        lin: &Linearization,
        c: &DVector<f64>,
        radius: f64,
        scale: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let nz = lin.grad.len();
        let nc = c.len();
        let mut a = DMatrix::zeros(nc + 2 * nz, nz);
        let mut b = DVector::zeros(nc + 2 * nz);
        a.view_mut((0, 0), (nc, nz)).copy_from(&lin.jc);
        b.rows_mut(0, nc).copy_from(&(-c));
        for i in 0..nz {
            a[(nc + 2 * i, i)] = 1.0;
            a[(nc + 2 * i + 1, i)] = -1.0;
            b[nc + 2 * i] = radius * scale[i];
            b[nc + 2 * i + 1] = radius * scale[i];
        }
        match solve_qp_ineq(&lin.hess, &lin.grad, &a, &b) {
            Ok(sol) => Some((sol.x, sol.lambda_in.rows(0, nc).into_owned())),
            Err(QpError::Infeasible) | Err(QpError::MaxIter) | Err(QpError::Degenerate(_)) => {
                self.elastic_qp(lin, c, radius, scale)
            }
            Err(_) => None,
        }
    }

    /// Linearised constraints relaxed by non-negative slacks with an ℓ1 price.
    fn elastic_qp(
        &self,
        lin: &Linearization,
        c: &DVector<f64>,
        radius: f64,
        scale: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let nz = lin.grad.len();
        let nc = c.len();
        let price = 1e3 * (1.0 + lin.grad.amax());
        let mut h = DMatrix::zeros(nz + nc, nz + nc);
        h.view_mut((0, 0), (nz, nz)).copy_from(&lin.hess);
        for i in 0..nc {
            h[(nz + i, nz + i)] = 1e-6 * price;
        }
        let mut g = DVector::from_element(nz + nc, price);
        g.rows_mut(0, nz).copy_from(&lin.grad);
        let rows = 2 * nc + 2 * nz;
        let mut a = DMatrix::zeros(rows, nz + nc);
        let mut b = DVector::zeros(rows);
        a.view_mut((0, 0), (nc, nz)).copy_from(&lin.jc);
        for i in 0..nc {
            a[(i, nz + i)] = -1.0;
            b[i] = -c[i];
            a[(nc + i, nz + i)] = -1.0;
        }
        for i in 0..nz {
            a[(2 * nc + 2 * i, i)] = 1.0;
            a[(2 * nc + 2 * i + 1, i)] = -1.0;
            b[2 * nc + 2 * i] = radius * scale[i];
            b[2 * nc + 2 * i + 1] = radius * scale[i];
        }
        let sol = solve_qp_ineq(&h, &g, &a, &b).ok()?;
        Some((sol.x.rows(0, nz).into_owned(), sol.lambda_in.rows(0, nc).into_owned()))
    }

    /// Trust-region SQP on the ℓ1 merit with a second-order correction.
    /// Returns the best feasible iterate when one was met.
    fn sqp(&self, x0: &DVector<f64>, y_t: &DVector<f64>, z0: DVector<f64>, max_iter: usize) -> SqpOutcome {
        let opts = &self.options;
        let tol = opts.feasibility_tol;
        let pen = |c: &DVector<f64>| c.iter().map(|v| v.max(0.0)).sum::<f64>();
        let scale = self.step_scale();
        let mut z = z0;
        let mut mu: f64 = 1.0;
        let mut radius = 0.25;
        let mut out = SqpOutcome {
            z: z.clone(),
            cost: f64::INFINITY,
            max_violation: f64::INFINITY,
            kkt: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
        let mut best: Option<(DVector<f64>, f64, f64)> = None;
        if let Some((cost, c)) = self.merit_parts(x0, y_t, &z) {
            out.cost = cost;
            out.max_violation = c.max();
            if c.max() <= tol {
                best = Some((z.clone(), cost, c.max()));
            }
        }
        let mut lin = match self.linearize(x0, y_t, &z) {
            Ok(l) => l,
            Err(_) => return out,
        };
        let mut lambda_term = 0.0;
        for it in 0..max_iter {
            let viol = lin.c.max();
            lin.hess = &lin.gn_hess + &lin.term_curvature * lambda_term;
            let Some((d, lambda)) = self.step_qp(&lin, &lin.c, radius, &scale) else {
                break;
            };
            let kkt = (&lin.grad + lin.jc.transpose() * &lambda).amax();
            out.kkt = kkt;
            if viol <= tol
                && (kkt <= opts.stationarity_tol * (1.0 + lin.cost.abs()) || d.amax() <= 1e-12 * (1.0 + z.amax()))
            {
                out.converged = true;
                break;
            }
            out.iterations = it + 1;
            lambda_term = lambda[lin.term_row].max(0.0);
            mu = mu.max(1.5 * lambda.amax() + 1.0);
            let phi0 = lin.cost + mu * pen(&lin.c);
            let model = |d: &DVector<f64>| {
                lin.cost + lin.grad.dot(d) + 0.5 * d.dot(&(&lin.hess * d)) + mu * pen(&(&lin.c + &lin.jc * d))
            };
            let mut accepted = None;
            let mut trial_d = d.clone();
            for attempt in 0..2 {
                let trial = &z + &trial_d;
                let pred = phi0 - model(&d);
                if let Some((cost, c)) = self.merit_parts(x0, y_t, &trial) {
                    let phi = cost + mu * pen(&c);
                    if pred > 0.0 && (phi0 - phi) >= 0.1 * pred {
                        accepted = Some((trial, cost, c));
                        break;
                    }
                    if attempt == 0 {
                        // Second-order correction: re-solve with the constraint
                        // values observed at the trial point.
                        let corrected = &c - &lin.jc * &d;
                        match self.step_qp(&lin, &corrected, radius, &scale) {
                            Some((dc, _)) => trial_d = dc,
                            None => break,
                        }
                    }
                } else {
                    break;
                }
            }
            let Some((trial, cost, c)) = accepted else {
                radius *= 0.25;
                if radius < 1e-10 {
                    break;
                }
                continue;
            };
            let step = trial_d
                .iter()
                .zip(scale.iter())
                .map(|(di, si)| di.abs() / si)
                .fold(0.0, f64::max);
            if step >= 0.9 * radius {
                radius = (2.0 * radius).min(1.0);
            }
            z = trial;
            out.cost = cost;
            out.max_violation = c.max();
            if c.max() <= tol && best.as_ref().is_none_or(|(_, bc, _)| cost < *bc) {
                best = Some((z.clone(), cost, c.max()));
            }
            lin = match self.linearize(x0, y_t, &z) {
                Ok(l) => l,
                Err(_) => break,
            };
        }
        out.z = z;
        if out.max_violation > tol || !out.converged {
            if let Some((bz, bc, bv)) = best {
                if out.max_violation > tol || bc < out.cost {
                    out.z = bz;
                    out.cost = bc;
                    out.max_violation = bv;
                }
            }
        }
        out
    }

    fn solution_from(&self, x0: &DVector<f64>, z: &DVector<f64>, y_t: &DVector<f64>) -> Result<(Candidate, Rollout, f64, f64)> {
        let cand = self.unpack(z);
        let roll = self.rollout(x0, &cand.v_seq, &cand.y_s, false)?;
        let cost = self.cost_of(&roll, &cand.v_seq, y_t);
        let viol = self.constraint_values(&roll, &cand).max();
        Ok((cand, roll, cost, viol))
    }

    fn make_solution(
        &self,
        x0: &DVector<f64>,
        y_t: &DVector<f64>,
        z: &DVector<f64>,
        status: SolveStatus,
        kkt: f64,
        iterations: usize,
    ) -> Result<Solution> {
        let (cand, roll, cost, viol) = self.solution_from(x0, z, y_t)?;
        Ok(Solution {
            v_seq: cand.v_seq,
            y_s: cand.y_s,
            x_s: roll.eq.x,
            v_s: roll.eq.v,
            cost,
            status,
            kkt_residual: kkt,
            max_violation: viol,
            predicted_states: roll.xs,
            iterations,
        })
    }

    /// Steady candidate `v ≡ g_v(y_s)` at `y_s`.
    pub fn steady_candidate(&self, y_s: &DVector<f64>) -> Result<Candidate> {
        let eq = self.maps.eval_raw(y_s)?;
        Ok(Candidate {
            v_seq: vec![eq.v; self.horizon()],
            y_s: y_s.clone(),
        })
    }

    /// Local solution of the tracking problem from `x0`.
    ///
    /// With a warm start the optimiser never returns anything worse than the
    /// warm start when the latter is feasible.
    pub fn solve(&self, x0: &DVector<f64>, y_t: &DVector<f64>, warm_start: Option<&Candidate>) -> Result<Solution> {
        let (n, _, p, _) = self.dims();
        check_dim("initial state", n, x0.len())?;
        check_dim("target", p, y_t.len())?;
        let tol = self.options.feasibility_tol;
        let starts: Vec<Candidate> = match warm_start {
            Some(w) => vec![w.clone()],
            None => {
                let mut s = Vec::new();
                if let Ok(y) = best_setpoint(y_t, &self.region, &self.t) {
                    if let Ok(c) = self.steady_candidate(&y) {
                        s.push(c);
                    }
                }
                let y0 = self.plant.output(x0, &DVector::zeros(self.plant.input_dim()));
                if let Ok(y) = best_setpoint(&y0, &self.region, &self.t) {
                    if let Ok(c) = self.steady_candidate(&y) {
                        s.push(c);
                    }
                }
                s
            }
        };
        let warm = match warm_start {
            Some(w) => {
                let z = self.pack(w)?;
                self.merit_parts(x0, y_t, &z)
                    .filter(|(_, c)| c.max() <= tol)
                    .map(|(cost, _)| (z, cost))
            }
            None => None,
        };
        for start in &starts {
            let z0 = self.pack(start)?;
            let out = self.sqp(x0, y_t, z0, self.options.max_iter);
            let feasible = out.max_violation <= tol && out.cost.is_finite();
            if let Some((wz, wcost)) = &warm {
                let stalled = out.iterations == 0 && !out.converged;
                if !feasible || out.cost > *wcost || stalled {
                    return self.make_solution(x0, y_t, wz, SolveStatus::FallbackCandidate, out.kkt, out.iterations);
                }
            }
            if feasible {
                let status = if out.converged {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::MaxIter
                };
                return self.make_solution(x0, y_t, &out.z, status, out.kkt, out.iterations);
            }
        }
        Err(MpcError::InfeasibleProblem)
    }

    /// Shifted candidate `(v(1), …, v(N_p−1), v_f(y_s))` with the same `y_s`.
    pub fn shift_candidate(&self, previous: &Solution) -> Result<Candidate> {
        let v_f = self.maps.g_v(&previous.y_s)?;
        let mut v_seq: Vec<DVector<f64>> = previous.v_seq.iter().skip(1).cloned().collect();
        v_seq.push(v_f);
        Ok(Candidate {
            v_seq,
            y_s: previous.y_s.clone(),
        })
    }

    /// `u = K(x − g_x(y_s⁰)) + v⁰(0)` and the underlying solution.
    pub fn control_law(
        &self,
        x: &DVector<f64>,
        y_t: &DVector<f64>,
        warm_start: Option<&Candidate>,
    ) -> Result<(DVector<f64>, Solution)> {
        let sol = self.solve(x, y_t, warm_start)?;
        let u = self.policy.apply(x, &sol.x_s, &sol.v_seq[0]);
        Ok((u, sol))
    }

    /// `V_O(y_s* − y_t)` with `y_s*` the best admissible setpoint.
    pub fn best_offset_cost(&self, y_t: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let y = best_setpoint(y_t, &self.region, &self.t)?;
        let c = quad_form(&self.t, &(&y - y_t));
        Ok((y, c))
    }
}
