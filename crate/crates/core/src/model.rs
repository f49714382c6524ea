//! Discrete-time perturbed plants.
//!
//! A [`Plant`] maps `(x, u, w)` to the successor state and `(x, u)` to the
//! output. Continuous-time models are discretised with a fixed-step RK4
//! integrator ([`rk4_step`]); [`FourTank`] is the quadruple-tank benchmark.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::linalg::central_jacobian;

/// Relative finite-difference step used wherever Jacobians are not analytic.
pub const FD_REL_STEP: f64 = 1e-6;

pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn dist_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>;

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn state_box(&self) -> &Hyperbox;
    fn input_box(&self) -> &Hyperbox;
    fn dist_box(&self) -> &Hyperbox;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u, w)`. Central differences unless overridden.
    fn step_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = central_jacobian(|xx| self.step(xx, u, w), x, FD_REL_STEP)?;
        let b = central_jacobian(|uu| self.step(x, uu, w), u, FD_REL_STEP)?;
        Ok((a, b))
    }

    /// `(∂h/∂x, ∂h/∂u)`.
    fn output_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let c = central_jacobian(|xx| Ok(self.output(xx, u)), x, FD_REL_STEP)?;
        let d = central_jacobian(|uu| Ok(self.output(x, uu)), u, FD_REL_STEP)?;
        Ok((c, d))
    }

    /// Closed-form steady state `(x_s, u_s)` for output `y`, if the plant has one.
    fn steady_state(&self, _y: &DVector<f64>) -> Option<Result<(DVector<f64>, DVector<f64>)>> {
        None
    }

    fn zero_disturbance(&self) -> DVector<f64> {
        DVector::zeros(self.dist_dim())
    }
}

/// Continuous-time vector field `ẋ = F(x, u, w)` with its Jacobians.
pub trait VectorField {
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>;

    fn rhs_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = central_jacobian(|xx| self.rhs(xx, u, w), x, FD_REL_STEP)?;
        let b = central_jacobian(|uu| self.rhs(x, uu, w), u, FD_REL_STEP)?;
        Ok((a, b))
    }
}

impl<F> VectorField for F
where
    F: Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self(x, u, w)
    }
}

fn finite_or_fail(k: DVector<f64>, stage: usize) -> Result<DVector<f64>> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(MpcError::Integration { stage })
    }
}

/// One classical fourth-order Runge–Kutta step of length `ts`.
pub fn rk4_step<V: VectorField + ?Sized>(
    ode: &V,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    ts: f64,
) -> Result<DVector<f64>> {
    if !(ts > 0.0) {
        return Err(MpcError::InvalidParameter(format!(
            "RK4 step length must be positive, got {ts}"
        )));
    }
    let k1 = finite_or_fail(ode.rhs(x, u, w)?, 1)?;
    let k2 = finite_or_fail(ode.rhs(&(x + &k1 * (0.5 * ts)), u, w)?, 2)?;
    let k3 = finite_or_fail(ode.rhs(&(x + &k2 * (0.5 * ts)), u, w)?, 3)?;
    let k4 = finite_or_fail(ode.rhs(&(x + &k3 * ts), u, w)?, 4)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0))
}

/// `substeps` RK4 steps of length `ts / substeps`.
pub fn rk4_integrate<V: VectorField + ?Sized>(
    ode: &V,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    ts: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let h = ts / substeps.max(1) as f64;
    let mut xk = x.clone();
    for _ in 0..substeps.max(1) {
        xk = rk4_step(ode, &xk, u, w, h)?;
    }
    Ok(xk)
}

/// RK4 step together with its exact tangent `(∂x⁺/∂x, ∂x⁺/∂u)`, obtained by
/// differentiating every stage.
pub fn rk4_step_with_jacobians<V: VectorField + ?Sized>(
    ode: &V,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    ts: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = x.len();
    let m = u.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let coeffs = [0.0, 0.5, 0.5, 1.0];
    let weights = [1.0, 2.0, 2.0, 1.0];
    let mut k_prev = DVector::zeros(n);
    let mut dk_dx_prev = DMatrix::zeros(n, n);
    let mut dk_du_prev = DMatrix::zeros(n, m);
    let mut acc = DVector::zeros(n);
    let mut acc_dx = DMatrix::zeros(n, n);
    let mut acc_du = DMatrix::zeros(n, m);
    for (stage, (&c, &wt)) in coeffs.iter().zip(&weights).enumerate() {
        let xs = x + &k_prev * (c * ts);
        let dxs_dx = &eye + &dk_dx_prev * (c * ts);
        let dxs_du = &dk_du_prev * (c * ts);
        let k = finite_or_fail(ode.rhs(&xs, u, w)?, stage + 1)?;
        let (fx, fu) = ode.rhs_jacobians(&xs, u, w)?;
        let dk_dx = &fx * dxs_dx;
        let dk_du = &fx * dxs_du + fu;
        acc += &k * wt;
        acc_dx += &dk_dx * wt;
        acc_du += &dk_du * wt;
        k_prev = k;
        dk_dx_prev = dk_dx;
        dk_du_prev = dk_du;
    }
    let next = x + acc * (ts / 6.0);
    let a = eye + acc_dx * (ts / 6.0);
    let b = acc_du * (ts / 6.0);
    Ok((next, a, b))
}

/// `x⁺ = A x + B u + E w`, `y = C x + D u` with box constraints.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    state_box: Hyperbox,
    input_box: Hyperbox,
    dist_box: Hyperbox,
}

impl LinearPlant {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        state_box: Hyperbox,
        input_box: Hyperbox,
        dist_box: Hyperbox,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("E rows", n, e.nrows())?;
        check_dim("C columns", n, c.ncols())?;
        check_dim("D rows", c.nrows(), d.nrows())?;
        check_dim("D columns", b.ncols(), d.ncols())?;
        check_dim("state box", n, state_box.dim())?;
        check_dim("input box", b.ncols(), input_box.dim())?;
        check_dim("disturbance box", e.ncols(), dist_box.dim())?;
        Ok(Self {
            a,
            b,
            e,
            c,
            d,
            state_box,
            input_box,
            dist_box,
        })
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn output_dim(&self) -> usize {
        self.c.nrows()
    }
    fn dist_dim(&self) -> usize {
        self.e.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u + &self.e * w)
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    fn state_box(&self) -> &Hyperbox {
        &self.state_box
    }
    fn input_box(&self) -> &Hyperbox {
        &self.input_box
    }
    fn dist_box(&self) -> &Hyperbox {
        &self.dist_box
    }

    fn step_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }

    fn output_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.c.clone(), self.d.clone()))
    }
}

/// Physical parameters of the quadruple-tank process.
///
/// Defaults follow the laboratory plant commonly used with this benchmark:
/// tank section 0.06 m², hole sections (1.31, 1.51, 0.927, 0.882)·10⁻⁴ m²,
/// valve splits 0.3 / 0.4, levels in [0.2, 1.2] m, pump flows in
/// [0, 3.6] × [0, 4.0] m³/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourTankParams {
    pub tank_section: f64,
    pub hole_sections: [f64; 4],
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gravity: f64,
    pub sample_time: f64,
    pub rk4_substeps: usize,
    pub h_min: [f64; 4],
    pub h_max: [f64; 4],
    pub q_min: [f64; 2],
    pub q_max: [f64; 2],
    pub w_bar: [f64; 2],
}

impl Default for FourTankParams {
    fn default() -> Self {
        Self {
            tank_section: 0.06,
            hole_sections: [1.31e-4, 1.51e-4, 9.27e-5, 8.82e-5],
            gamma_a: 0.3,
            gamma_b: 0.4,
            gravity: 9.81,
            sample_time: 15.0,
            rk4_substeps: 1,
            h_min: [0.2; 4],
            h_max: [1.2; 4],
            q_min: [0.0, 0.0],
            q_max: [3.6, 4.0],
            w_bar: [0.005, 0.005],
        }
    }
}

impl FourTankParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MpcError::InvalidParameter(msg));
        if !(self.tank_section > 0.0) {
            return bad("tank section must be positive".into());
        }
        if self.hole_sections.iter().any(|a| !(*a > 0.0)) {
            return bad("hole sections must be positive".into());
        }
        for (name, g, wb) in [
            ("gamma_a", self.gamma_a, self.w_bar[0]),
            ("gamma_b", self.gamma_b, self.w_bar[1]),
        ] {
            if wb < 0.0 || !(g - wb > 0.0 && g + wb < 1.0) {
                return bad(format!("{name} ± w_bar must stay inside (0, 1)"));
            }
        }
        if !(self.gravity > 0.0 && self.sample_time > 0.0) || self.rk4_substeps == 0 {
            return bad("gravity, sample time and substeps must be positive".into());
        }
        if self.h_min.iter().zip(&self.h_max).any(|(l, u)| !(l < u)) {
            return bad("h_min must be below h_max".into());
        }
        if self.h_min.iter().any(|h| *h < 0.0) {
            return bad("levels cannot be negative".into());
        }
        if self.q_min.iter().zip(&self.q_max).any(|(l, u)| !(l < u)) {
            return bad("q_min must be below q_max".into());
        }
        if (self.gamma_a + self.gamma_b - 1.0).abs() < 1e-9 {
            return bad("gamma_a + gamma_b = 1 makes the steady-state map singular".into());
        }
        Ok(())
    }
}

/// Continuous-time four-tank vector field. Levels in m, flows in m³/h.
#[derive(Debug, Clone)]
pub struct FourTankOde {
    pub params: FourTankParams,
}

impl FourTankOde {
    fn torricelli(&self, h: f64, tank: usize) -> Result<f64> {
        if h < 0.0 || !h.is_finite() {
            return Err(MpcError::Domain(format!(
                "level of tank {} is {h:.6} m; sqrt requires a non-negative level",
                tank + 1
            )));
        }
        Ok((2.0 * self.params.gravity * h).sqrt())
    }
}

impl VectorField for FourTankOde {
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.params;
        let s = p.tank_section;
        let a = &p.hole_sections;
        let ga = p.gamma_a + w[0];
        let gb = p.gamma_b + w[1];
        let mut sq = [0.0; 4];
        for (i, v) in sq.iter_mut().enumerate() {
            *v = self.torricelli(x[i], i)?;
        }
        let c = 3600.0 * s;
        Ok(DVector::from_vec(vec![
            -a[0] / s * sq[0] + a[2] / s * sq[2] + ga / c * u[0],
            -a[1] / s * sq[1] + a[3] / s * sq[3] + gb / c * u[1],
            -a[2] / s * sq[2] + (1.0 - gb) / c * u[1],
            -a[3] / s * sq[3] + (1.0 - ga) / c * u[0],
        ]))
    }

    fn rhs_jacobians(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.params;
        let s = p.tank_section;
        let a = &p.hole_sections;
        let ga = p.gamma_a + w[0];
        let gb = p.gamma_b + w[1];
        // d/dh sqrt(2 g h) = g / sqrt(2 g h)
        let mut ds = [0.0; 4];
        for (i, v) in ds.iter_mut().enumerate() {
            let r = self.torricelli(x[i], i)?;
            if r == 0.0 {
                return Err(MpcError::Domain(format!(
                    "level of tank {} is zero; Jacobian undefined",
                    i + 1
                )));
            }
            *v = p.gravity / r;
        }
        let mut fx = DMatrix::zeros(4, 4);
        fx[(0, 0)] = -a[0] / s * ds[0];
        fx[(0, 2)] = a[2] / s * ds[2];
        fx[(1, 1)] = -a[1] / s * ds[1];
        fx[(1, 3)] = a[3] / s * ds[3];
        fx[(2, 2)] = -a[2] / s * ds[2];
        fx[(3, 3)] = -a[3] / s * ds[3];
        let c = 3600.0 * s;
        let mut fu = DMatrix::zeros(4, 2);
        fu[(0, 0)] = ga / c;
        fu[(1, 1)] = gb / c;
        fu[(2, 1)] = (1.0 - gb) / c;
        fu[(3, 0)] = (1.0 - ga) / c;
        Ok((fx, fu))
    }
}

/// RK4-discretised quadruple-tank plant. `w = (δγ_a, δγ_b)`, `y = (h₁, h₂)`.
#[derive(Debug, Clone)]
pub struct FourTank {
    ode: FourTankOde,
    state_box: Hyperbox,
    input_box: Hyperbox,
    dist_box: Hyperbox,
}

impl FourTank {
    pub fn new(params: FourTankParams) -> Result<Self> {
        params.validate()?;
        let state_box = Hyperbox::new(params.h_min.to_vec(), params.h_max.to_vec())?;
        let input_box = Hyperbox::new(params.q_min.to_vec(), params.q_max.to_vec())?;
        let dist_box = Hyperbox::symmetric(&params.w_bar)?;
        Ok(Self {
            ode: FourTankOde { params },
            state_box,
            input_box,
            dist_box,
        })
    }

    pub fn params(&self) -> &FourTankParams {
        &self.ode.params
    }

    pub fn ode(&self) -> &FourTankOde {
        &self.ode
    }
}

/// Builds the four-tank [`Plant`] from its parameters.
pub fn fourtank_dynamics(params: FourTankParams) -> Result<FourTank> {
    FourTank::new(params)
}

impl Plant for FourTank {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn dist_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.ode.params;
        if p.rk4_substeps == 1 {
            rk4_step(&self.ode, x, u, w, p.sample_time)
        } else {
            rk4_integrate(&self.ode, x, u, w, p.sample_time, p.rk4_substeps)
        }
    }

    fn output(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0], x[1]])
    }

    fn state_box(&self) -> &Hyperbox {
        &self.state_box
    }
    fn input_box(&self) -> &Hyperbox {
        &self.input_box
    }
    fn dist_box(&self) -> &Hyperbox {
        &self.dist_box
    }

    fn step_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.ode.params;
        let h = p.sample_time / p.rk4_substeps as f64;
        let mut xk = x.clone();
        let mut a = DMatrix::<f64>::identity(4, 4);
        let mut b = DMatrix::<f64>::zeros(4, 2);
        for _ in 0..p.rk4_substeps {
            let (next, ak, bk) = rk4_step_with_jacobians(&self.ode, &xk, u, w, h)?;
            b = &ak * b + bk;
            a = ak * a;
            xk = next;
        }
        Ok((a, b))
    }

    fn output_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut c = DMatrix::zeros(2, 4);
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        Ok((c, DMatrix::zeros(2, 2)))
    }

    /// Tanks 3–4 balances and the hole equations of tanks 1–2 give a 2×2
    /// linear system in the pump flows; levels 3–4 then follow.
    fn steady_state(&self, y: &DVector<f64>) -> Option<Result<(DVector<f64>, DVector<f64>)>> {
        Some(self.closed_form_equilibrium(y))
    }
}

impl FourTank {
    fn closed_form_equilibrium(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = &self.ode.params;
        let no_eq = |reason: &str| MpcError::NoEquilibrium {
            output: y.iter().cloned().collect(),
            reason: reason.to_string(),
        };
        if y.len() != 2 {
            return Err(no_eq("output must have two entries"));
        }
        if y[0] <= 0.0 || y[1] <= 0.0 || !y.iter().all(|v| v.is_finite()) {
            return Err(no_eq("levels must be positive"));
        }
        let a = &p.hole_sections;
        let g2 = 2.0 * p.gravity;
        let out1 = a[0] * (g2 * y[0]).sqrt() * 3600.0;
        let out2 = a[1] * (g2 * y[1]).sqrt() * 3600.0;
        let (ga, gb) = (p.gamma_a, p.gamma_b);
        // [ga, 1-gb; 1-ga, gb] [qa; qb] = [out1; out2]
        let det = ga * gb - (1.0 - ga) * (1.0 - gb);
        let qa = (gb * out1 - (1.0 - gb) * out2) / det;
        let qb = (ga * out2 - (1.0 - ga) * out1) / det;
        if qa < 0.0 || qb < 0.0 {
            return Err(no_eq("steady pump flows would be negative"));
        }
        let h3 = ((1.0 - gb) * qb / (3600.0 * a[2])).powi(2) / g2;
        let h4 = ((1.0 - ga) * qa / (3600.0 * a[3])).powi(2) / g2;
        Ok((
            DVector::from_vec(vec![y[0], y[1], h3, h4]),
            DVector::from_vec(vec![qa, qb]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_field(
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(DVector::zeros(x.len()))
    }

    fn decay(x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-x)
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let x = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let u = DVector::zeros(1);
        let x1 = rk4_step(&zero_field, &x, &u, &u, 0.7).unwrap();
        assert_eq!(x1, x);
    }

    #[test]
    fn decay_matches_rk4_polynomial() {
        let h: f64 = 0.1;
        let oracle = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(1);
        let x1 = rk4_step(&decay, &x, &u, &u, h).unwrap();
        assert_relative_eq!(x1[0], oracle, epsilon = 1e-15);
        assert_relative_eq!(x1[0], 0.904_837_5, epsilon = 1e-15);
        // Local truncation error is h⁵/120 to leading order.
        let err = (x1[0] - (-h).exp()).abs();
        assert!(err < h.powi(5) / 120.0 && err > 0.9 * h.powi(5) / 120.0);
    }

    #[test]
    fn non_finite_stage_is_reported() {
        let blow = |x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>| -> Result<DVector<f64>> {
            if x[0] > 1.5 {
                Ok(DVector::from_element(1, f64::NAN))
            } else {
                Ok(DVector::from_element(1, 1.0))
            }
        };
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(1);
        // Stage 2 evaluates at x + 0.5 h k1 = 2.0 for h = 2.
        let err = rk4_step(&blow, &x, &u, &u, 2.0).unwrap_err();
        assert!(matches!(err, MpcError::Integration { stage: 2 }));
    }

    #[test]
    fn rk4_is_linear_for_linear_fields() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                -1.0 - rng.random::<f64>()
            } else {
                0.3 * (rng.random::<f64>() - 0.5)
            }
        });
        let field = move |x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>| Ok(&a * x);
        let u = DVector::zeros(1);
        let x = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let (alpha, beta) = (0.7, -1.3);
        let lhs = rk4_step(&field, &(&x * alpha + &y * beta), &u, &u, 0.2).unwrap();
        let rhs = rk4_step(&field, &x, &u, &u, 0.2).unwrap() * alpha
            + rk4_step(&field, &y, &u, &u, 0.2).unwrap() * beta;
        assert!((lhs - rhs).abs().max() < 1e-14);
    }

    #[test]
    fn fourtank_zero_disturbance_is_nominal() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.6, 0.4, 0.45]);
        let u = DVector::from_vec(vec![1.5, 2.0]);
        let a = plant.step(&x, &u, &plant.zero_disturbance()).unwrap();
        let b = rk4_step(plant.ode(), &x, &u, &DVector::zeros(2), 15.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fourtank_steady_state_is_fixed_point() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let y = DVector::from_vec(vec![0.65, 0.65]);
        let (xs, us) = plant.steady_state(&y).unwrap().unwrap();
        let x1 = plant.step(&xs, &us, &plant.zero_disturbance()).unwrap();
        assert!((x1 - &xs).amax() <= 1e-12);
    }

    #[test]
    fn fourtank_negative_level_is_domain_error() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let x = DVector::from_vec(vec![-0.01, 0.6, 0.4, 0.45]);
        let u = DVector::from_vec(vec![1.5, 2.0]);
        assert!(matches!(
            plant.step(&x, &u, &plant.zero_disturbance()),
            Err(MpcError::Domain(_))
        ));
    }

    #[test]
    fn fourtank_pump_a_raises_tanks_one_and_four() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.6, 0.4, 0.45]);
        let w = plant.zero_disturbance();
        let lo = plant.step(&x, &DVector::from_vec(vec![1.0, 2.0]), &w).unwrap();
        let hi = plant.step(&x, &DVector::from_vec(vec![1.2, 2.0]), &w).unwrap();
        assert!(hi[0] >= lo[0] && hi[3] >= lo[3]);
        // Sign of ∂f/∂u confirmed by finite differences.
        let (_, b) = plant.step_jacobians(&x, &DVector::from_vec(vec![1.1, 2.0]), &w).unwrap();
        assert!(b[(0, 0)] > 0.0 && b[(3, 0)] > 0.0);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.5, 0.6, 0.4, 0.45]);
        let u = DVector::from_vec(vec![1.5, 2.0]);
        let w = DVector::from_vec(vec![0.003, -0.002]);
        let (a, b) = plant.step_jacobians(&x, &u, &w).unwrap();
        let a_fd = central_jacobian(|xx| plant.step(xx, &u, &w), &x, 1e-6).unwrap();
        let b_fd = central_jacobian(|uu| plant.step(&x, uu, &w), &u, 1e-6).unwrap();
        assert!((a - a_fd).amax() < 1e-8);
        assert!((b - b_fd).amax() < 1e-8);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = FourTankParams {
            gamma_a: 0.998,
            ..FourTankParams::default()
        };
        assert!(FourTank::new(p).is_err());
        let p = FourTankParams {
            tank_section: 0.0,
            ..FourTankParams::default()
        };
        assert!(FourTank::new(p).is_err());
    }
}
