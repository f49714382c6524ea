#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tubempc::config::Config;
use tubempc::design::{build_design, Design};
use tubempc::equilibria::{EquilibriumMaps, SetpointRegion};
use tubempc::hyperbox::Hyperbox;
use tubempc::lipschitz::LipschitzMatrices;
use tubempc::model::{LinearPlant, Plant};
use tubempc::ocp::{SolverOptions, TrackingProblem};
use tubempc::policy::AffinePolicy;
use tubempc::terminal::TerminalIngredients;
use tubempc::tubes::{build_tubes, tighten};

/// Design of the default four-tank configuration, built once per binary.
pub fn default_design() -> &'static Design {
    static DESIGN: OnceLock<Design> = OnceLock::new();
    DESIGN.get_or_init(|| build_design(&Config::default()).expect("default design"))
}

/// Uniform point of the region, by rejection from its bounding box.
pub fn draw_in_region(region: &SetpointRegion, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let bbox = region.bounding_box();
    loop {
        let unit: Vec<f64> = (0..bbox.dim()).map(|_| rng.random::<f64>()).collect();
        let y = bbox.from_unit(&unit);
        if region.contains(&y, 0.0) {
            return DVector::from_vec(y);
        }
    }
}

pub fn draw_box(b: &Hyperbox, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let unit: Vec<f64> = (0..b.dim()).map(|_| rng.random::<f64>()).collect();
    DVector::from_vec(b.from_unit(&unit))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unconstrained LTI tracking problem: every box, the terminal level and the
/// setpoint region are far from active, and there is no disturbance.
pub struct Lti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub horizon: usize,
    pub problem: TrackingProblem,
}

pub fn lti() -> Lti {
    let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.9]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let e = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let d = DMatrix::zeros(1, 1);
    let k = DMatrix::from_row_slice(1, 2, &[-0.5, -0.5]);
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::from_element(1, 1, 0.1);
    let p = DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 3.0]);
    let t = DMatrix::from_element(1, 1, 10.0);
    let horizon = 5;
    let big = |n: usize| Hyperbox::symmetric(&vec![100.0; n]).unwrap();
    let plant = LinearPlant::new(
        a.clone(),
        b.clone(),
        e.clone(),
        c.clone(),
        d,
        big(2),
        big(1),
        Hyperbox::symmetric(&[0.0]).unwrap(),
    )
    .unwrap();
    let plant: Arc<dyn Plant> = Arc::new(plant);
    let maps = EquilibriumMaps::new(plant.clone());
    let a_k = &a + &b * &k;
    let l = LipschitzMatrices::new(a_k.abs(), b.abs(), e.abs()).unwrap();
    let tubes = build_tubes(&l, &[0.0], horizon).unwrap();
    let constraints = tighten(plant.state_box(), plant.input_box(), &k, &tubes).unwrap();
    let terminal = TerminalIngredients::new(k.clone(), p.clone(), 1e9, 0.95).unwrap();
    let region = SetpointRegion::from_box(&Hyperbox::symmetric(&[10.0]).unwrap(), 0.0);
    let options = SolverOptions {
        stationarity_tol: 1e-12,
        ..SolverOptions::default()
    };
    let problem = TrackingProblem::new(
        plant,
        maps,
        AffinePolicy::new(k.clone()),
        tubes,
        constraints,
        terminal,
        region,
        q.clone(),
        r.clone(),
        t.clone(),
        options,
    )
    .unwrap();
    Lti {
        a,
        b,
        c,
        k,
        q,
        r,
        p,
        t,
        horizon,
        problem,
    }
}

impl Lti {
    /// Optimal `(v_seq, y_s)` by the backward Riccati recursion on the
    /// deviation system `e⁺ = (A + BK)e + B(v − v_s)`, with `y_s` from the
    /// resulting quadratic in `y_s`.
    pub fn riccati_optimum(&self, x0: &DVector<f64>, y_t: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let (n, m, p) = (self.a.nrows(), self.b.ncols(), self.c.nrows());
        let a_k = &self.a + &self.b * &self.k;
        let mut pj = self.p.clone();
        let mut gains = vec![DMatrix::zeros(m, n); self.horizon];
        for j in (0..self.horizon).rev() {
            let s = &self.r + self.b.transpose() * &pj * &self.b;
            let g = s.try_inverse().unwrap() * self.b.transpose() * &pj * &a_k;
            pj = &self.q + a_k.transpose() * &pj * &a_k - a_k.transpose() * &pj * &self.b * &g;
            gains[j] = g;
        }
        // Steady state: [A − I, B; C, 0] [x; u] = [0; y].
        let mut blk = DMatrix::zeros(n + p, n + m);
        blk.view_mut((0, 0), (n, n)).copy_from(&(&self.a - DMatrix::identity(n, n)));
        blk.view_mut((0, n), (n, m)).copy_from(&self.b);
        blk.view_mut((n, 0), (p, n)).copy_from(&self.c);
        let inv = blk.try_inverse().unwrap();
        let m_x = inv.view((0, n), (n, p)).into_owned();
        let m_u = inv.view((n, n), (m, p)).into_owned();
        let lhs = m_x.transpose() * &pj * &m_x + &self.t;
        let rhs = m_x.transpose() * &pj * x0 + &self.t * y_t;
        let y_s = lhs.try_inverse().unwrap() * rhs;
        let x_s = &m_x * &y_s;
        let v_s = &m_u * &y_s;
        let mut e = x0 - &x_s;
        let mut v_seq = Vec::with_capacity(self.horizon);
        for g in &gains {
            let dv = -(g * &e);
            v_seq.push(&v_s + &dv);
            e = &a_k * &e + &self.b * &dv;
        }
        (v_seq, y_s)
    }
}
