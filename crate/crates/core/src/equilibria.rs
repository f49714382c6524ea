//! Steady-state maps, the admissible setpoint region and its projection.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::linalg::{central_jacobian, min_singular_value};
use crate::model::{Plant, FD_REL_STEP};
use crate::policy::AffinePolicy;
use crate::qp::{solve_qp_ineq, QpError};
use crate::terminal::LevelSetReservation;
use crate::tubes::{membership_slack, TightenedConstraints};

/// Default constraint margin `ε` for admissible equilibria.
pub const DEFAULT_MARGIN: f64 = 1e-6;

const NEWTON_MAX_ITER: usize = 100;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Steady free input; equals `u` under the affine policy.
    pub v: DVector<f64>,
}

fn steady_residual(
    plant: &dyn Plant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = plant.state_dim();
    let p = plant.output_dim();
    let fx = plant.step(x, u, &plant.zero_disturbance())?;
    let hy = plant.output(x, u);
    let mut r = DVector::zeros(n + p);
    r.rows_mut(0, n).copy_from(&(fx - x));
    r.rows_mut(n, p).copy_from(&(hy - y));
    Ok(r)
}

/// Damped Newton (Gauss–Newton when non-square) on the steady-state equations.
pub fn newton_equilibrium(
    plant: &dyn Plant,
    y: &DVector<f64>,
    guess: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    check_dim("setpoint", plant.output_dim(), y.len())?;
    let (mut x, mut u) = guess.unwrap_or_else(|| {
        (
            DVector::from_vec(plant.state_box().center()),
            DVector::from_vec(plant.input_box().center()),
        )
    });
    let no_eq = |reason: String| MpcError::NoEquilibrium {
        output: y.iter().cloned().collect(),
        reason,
    };
    let mut res = steady_residual(plant, &x, &u, y)?;
    for _ in 0..NEWTON_MAX_ITER {
        if res.amax() <= 1e-13 {
            break;
        }
        let z = DVector::from_iterator(n + m, x.iter().chain(u.iter()).cloned());
        let jac = central_jacobian(
            |zz| {
                let xx = zz.rows(0, n).into_owned();
                let uu = zz.rows(n, m).into_owned();
                steady_residual(plant, &xx, &uu, y)
            },
            &z,
            FD_REL_STEP,
        )?;
        let step = jac
            .svd(true, true)
            .solve(&(-&res), 1e-14)
            .map_err(|e| no_eq(format!("singular Newton system: {e}")))?;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let trial = &z + &step * alpha;
            let xt = trial.rows(0, n).into_owned();
            let ut = trial.rows(n, m).into_owned();
            if let Ok(rt) = steady_residual(plant, &xt, &ut, y) {
                if rt.norm() < res.norm() || rt.amax() <= 1e-13 {
                    x = xt;
                    u = ut;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res.amax() > RESIDUAL_TOL {
        return Err(no_eq(format!(
            "Newton iteration did not converge (residual {:.3e})",
            res.amax()
        )));
    }
    Ok((x, u))
}

/// Steady state `(x_s, u_s)` for output `y`, without constraint checks.
pub fn steady_state_unchecked(
    plant: &dyn Plant,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    match plant.steady_state(y) {
        Some(r) => r,
        None => newton_equilibrium(plant, y, None),
    }
}

/// Steady state for `y`; rejects points outside the constraint boxes and
/// points closer than `margin` to their faces.
pub fn solve_equilibrium_with_margin(
    plant: &dyn Plant,
    y: &DVector<f64>,
    margin: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (x, u) = steady_state_unchecked(plant, y)?;
    let res = steady_residual(plant, &x, &u, y)?;
    if res.amax() > RESIDUAL_TOL {
        return Err(MpcError::NoEquilibrium {
            output: y.iter().cloned().collect(),
            reason: format!("steady-state residual {:.3e}", res.amax()),
        });
    }
    let slack = plant
        .state_box()
        .min_slack(x.as_slice())
        .min(plant.input_box().min_slack(u.as_slice()));
    if slack < 0.0 {
        return Err(MpcError::NoEquilibrium {
            output: y.iter().cloned().collect(),
            reason: "steady state lies outside the constraint boxes".into(),
        });
    }
    if slack < margin {
        return Err(MpcError::InfeasibleEquilibrium {
            output: y.iter().cloned().collect(),
        });
    }
    Ok((x, u))
}

pub fn solve_equilibrium(
    plant: &dyn Plant,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    solve_equilibrium_with_margin(plant, y, DEFAULT_MARGIN)
}

/// `g_x`, `g_u`, `g_v` and the Lipschitz constant of `g_x`.
#[derive(Clone)]
pub struct EquilibriumMaps {
    plant: Arc<dyn Plant>,
    pub margin: f64,
    pub l_g: f64,
}

impl std::fmt::Debug for EquilibriumMaps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EquilibriumMaps")
            .field("margin", &self.margin)
            .field("l_g", &self.l_g)
            .finish()
    }
}

impl EquilibriumMaps {
    pub fn new(plant: Arc<dyn Plant>) -> Self {
        Self {
            plant,
            margin: DEFAULT_MARGIN,
            l_g: f64::NAN,
        }
    }

    pub fn plant(&self) -> &Arc<dyn Plant> {
        &self.plant
    }

    /// Checked evaluation (constraint boxes and margin).
    pub fn eval(&self, y: &DVector<f64>) -> Result<Equilibrium> {
        let (x, u) = solve_equilibrium_with_margin(self.plant.as_ref(), y, self.margin)?;
        Ok(Equilibrium {
            y: y.clone(),
            v: u.clone(),
            x,
            u,
        })
    }

    /// Evaluation without constraint checks, used inside the optimiser.
    pub fn eval_raw(&self, y: &DVector<f64>) -> Result<Equilibrium> {
        let (x, u) = steady_state_unchecked(self.plant.as_ref(), y)?;
        Ok(Equilibrium {
            y: y.clone(),
            v: u.clone(),
            x,
            u,
        })
    }

    pub fn g_x(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval_raw(y)?.x)
    }

    pub fn g_u(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval_raw(y)?.u)
    }

    pub fn g_v(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval_raw(y)?.v)
    }

    /// `(∂g_x/∂y, ∂g_v/∂y)` by central differences.
    pub fn jacobians(&self, y: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.plant.state_dim();
        let m = self.plant.input_dim();
        let both = central_jacobian(
            |yy| {
                let e = self.eval_raw(yy)?;
                Ok(DVector::from_iterator(
                    n + m,
                    e.x.iter().chain(e.v.iter()).cloned(),
                ))
            },
            y,
            FD_REL_STEP,
        )?;
        Ok((
            both.rows(0, n).into_owned(),
            both.rows(n, m).into_owned(),
        ))
    }

    /// Sampled Lipschitz constant of `g_x` over `region`, inflated by 5 %.
    pub fn estimate_lg(&self, region: &SetpointRegion, pairs: usize, seed: u64) -> Result<f64> {
        let bbox = region.bounding_box();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: f64 = 0.0;
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < pairs && attempts < 100 * pairs.max(1) {
            attempts += 1;
            let a = sample_in(&bbox, &mut rng);
            let b = sample_in(&bbox, &mut rng);
            if !region.contains(a.as_slice(), 0.0) || !region.contains(b.as_slice(), 0.0) {
                continue;
            }
            let dy = (&a - &b).norm();
            if dy < 1e-9 {
                continue;
            }
            let dx = (self.g_x(&a)? - self.g_x(&b)?).norm();
            best = best.max(dx / dy);
            drawn += 1;
        }
        if drawn == 0 {
            return Err(MpcError::EmptyRegion);
        }
        Ok(1.05 * best)
    }

    pub fn with_lg(mut self, l_g: f64) -> Self {
        self.l_g = l_g;
        self
    }
}

fn sample_in(b: &Hyperbox, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let unit: Vec<f64> = (0..b.dim()).map(|_| rng.random::<f64>()).collect();
    DVector::from_vec(b.from_unit(&unit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateRankReport {
    pub min_singular_value: f64,
    /// `|det|` of the block matrix when it is square.
    pub min_abs_det: Option<f64>,
    pub offending: Vec<Vec<f64>>,
    pub passed: bool,
}

/// Smallest singular value of `[[A − I, B], [C, D]]` over `grid`.
pub fn check_steady_state_rank(plant: &dyn Plant, grid: &[DVector<f64>]) -> Result<SteadyStateRankReport> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    let p = plant.output_dim();
    let w0 = plant.zero_disturbance();
    let mut min_sv = f64::INFINITY;
    let mut min_det: Option<f64> = None;
    let mut offending = Vec::new();
    for y in grid {
        let (x, u) = steady_state_unchecked(plant, y)?;
        let a = central_jacobian(|xx| plant.step(xx, &u, &w0), &x, FD_REL_STEP)?;
        let b = central_jacobian(|uu| plant.step(&x, uu, &w0), &u, FD_REL_STEP)?;
        let c = central_jacobian(|xx| Ok(plant.output(xx, &u)), &x, FD_REL_STEP)?;
        let d = central_jacobian(|uu| Ok(plant.output(&x, uu)), &u, FD_REL_STEP)?;
        let mut blk = DMatrix::zeros(n + p, n + m);
        blk.view_mut((0, 0), (n, n))
            .copy_from(&(a - DMatrix::identity(n, n)));
        blk.view_mut((0, n), (n, m)).copy_from(&b);
        blk.view_mut((n, 0), (p, n)).copy_from(&c);
        blk.view_mut((n, n), (p, m)).copy_from(&d);
        let sv = if n + p == n + m {
            min_singular_value(&blk)
        } else {
            blk.clone()
                .svd(false, false)
                .singular_values
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        };
        if m == p {
            let det = blk.determinant().abs();
            min_det = Some(min_det.map_or(det, |v: f64| v.min(det)));
        }
        if sv < 1e-8 {
            offending.push(y.iter().cloned().collect());
        }
        min_sv = min_sv.min(sv);
    }
    Ok(SteadyStateRankReport {
        min_singular_value: min_sv,
        min_abs_det: min_det,
        passed: offending.is_empty(),
        offending,
    })
}

/// Convex polytope `{y : A y ≤ b}` with its vertex list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointRegion {
    pub vertices: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    #[default]
    Hull,
    Box,
}

fn cross(o: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull without collinear points (monotone chain).
pub fn convex_hull_2d(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Vec<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p.clone());
    }
    let mut upper: Vec<Vec<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p.clone());
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

impl SetpointRegion {
    /// Axis-aligned box region.
    pub fn from_box(b: &Hyperbox, margin: f64) -> Self {
        let p = b.dim();
        let mut a = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..p {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            a.push(e.clone());
            rhs.push(b.upper()[i]);
            e[i] = -1.0;
            a.push(e);
            rhs.push(-b.lower()[i]);
        }
        Self {
            vertices: b.vertices(),
            a,
            b: rhs,
            margin,
        }
    }

    /// Convex hull of `points` (output dimension 1 or 2).
    pub fn from_points(points: &[Vec<f64>], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(MpcError::EmptyRegion);
        }
        let p = points[0].len();
        if points.iter().any(|q| q.len() != p) {
            return Err(MpcError::Config("setpoint points of mixed dimension".into()));
        }
        match p {
            1 => {
                let lo = points.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
                Ok(Self::from_box(&Hyperbox::new(vec![lo], vec![hi])?, margin))
            }
            2 => {
                let hull = convex_hull_2d(points);
                let mut a = Vec::new();
                let mut b = Vec::new();
                match hull.len() {
                    1 => {
                        return Ok(Self::from_box(
                            &Hyperbox::new(hull[0].clone(), hull[0].clone())?,
                            margin,
                        ))
                    }
                    2 => {
                        let (p0, p1) = (&hull[0], &hull[1]);
                        let dir = [p1[0] - p0[0], p1[1] - p0[1]];
                        let len = dir[0].hypot(dir[1]);
                        let t = [dir[0] / len, dir[1] / len];
                        let nrm = [-t[1], t[0]];
                        for (row, pt) in [
                            (nrm.to_vec(), p0),
                            (vec![-nrm[0], -nrm[1]], p0),
                            (t.to_vec(), p1),
                            (vec![-t[0], -t[1]], p0),
                        ] {
                            b.push(row[0] * pt[0] + row[1] * pt[1]);
                            a.push(row);
                        }
                    }
                    _ => {
                        for k in 0..hull.len() {
                            let p0 = &hull[k];
                            let p1 = &hull[(k + 1) % hull.len()];
                            let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
                            let len = dx.hypot(dy);
                            let row = vec![dy / len, -dx / len];
                            b.push(row[0] * p0[0] + row[1] * p0[1]);
                            a.push(row);
                        }
                    }
                }
                Ok(Self {
                    vertices: hull,
                    a,
                    b,
                    margin,
                })
            }
            _ => Err(MpcError::InvalidParameter(format!(
                "hull construction supports output dimension 1 or 2, got {p}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.vertices.first().map_or(0, |v| v.len())
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.a
            .iter()
            .zip(&self.b)
            .all(|(row, bi)| row.iter().zip(y).map(|(r, v)| r * v).sum::<f64>() <= bi + tol)
    }

    /// Largest violation of the half-planes (negative inside).
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| row.iter().zip(y).map(|(r, v)| r * v).sum::<f64>() - bi)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.len(), self.dim(), |i, j| self.a[i][j])
    }

    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.b)
    }

    pub fn bounding_box(&self) -> Hyperbox {
        let p = self.dim();
        let lo: Vec<f64> = (0..p)
            .map(|i| self.vertices.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi: Vec<f64> = (0..p)
            .map(|i| {
                self.vertices
                    .iter()
                    .map(|v| v[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Hyperbox::new(lo, hi).expect("vertex bounds are ordered")
    }

    /// Vertices plus the points of a `density`-per-axis grid that lie inside.
    pub fn sample_points(&self, density: usize) -> Vec<Vec<f64>> {
        let mut pts = self.vertices.clone();
        let bbox = self.bounding_box();
        for unit in grid_units(bbox.dim(), density) {
            let y = bbox.from_unit(&unit);
            if self.contains(&y, 1e-12) {
                pts.push(y);
            }
        }
        pts
    }
}

/// Unit-cube grid with `density` points per axis, last axis fastest.
pub fn grid_units(dim: usize, density: usize) -> Vec<Vec<f64>> {
    let density = density.max(1);
    let coord = |k: usize| {
        if density == 1 {
            0.5
        } else {
            k as f64 / (density - 1) as f64
        }
    };
    let total = density.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut unit = vec![0.0; dim];
            for slot in unit.iter_mut().rev() {
                *slot = coord(idx % density);
                idx /= density;
            }
            unit
        })
        .collect()
}

/// Outcome of the setpoint-region construction.
#[derive(Debug, Clone)]
pub struct YtBuild {
    pub region: SetpointRegion,
    pub kept: Vec<Vec<f64>>,
    pub rejected: Vec<Vec<f64>>,
    /// Grid points inside the region that failed the membership test.
    pub interior_failures: Vec<Vec<f64>>,
}

/// Options for [`build_yt`].
#[derive(Debug, Clone)]
pub struct YtOptions<'a> {
    pub candidate: Hyperbox,
    pub grid_density: usize,
    pub margin: f64,
    pub shape: RegionShape,
    pub reservation: Option<&'a LevelSetReservation>,
}

/// Whether the equilibrium at `y` satisfies the stage-`N_p` membership with
/// margin (and fits the terminal reservation, if any).
pub fn setpoint_admissible(
    maps: &EquilibriumMaps,
    constraints: &TightenedConstraints,
    policy: &AffinePolicy,
    y: &DVector<f64>,
    margin: f64,
    reservation: Option<&LevelSetReservation>,
) -> bool {
    let Ok(eq) = maps.eval(y) else {
        return false;
    };
    let np = constraints.horizon();
    if membership_slack(constraints, policy, np, &eq.x, &eq.v, &eq.x) < margin {
        return false;
    }
    match reservation {
        Some(res) => res.fits(constraints, &eq.x, &eq.v) >= 0.0,
        None => true,
    }
}

pub fn build_yt(
    maps: &EquilibriumMaps,
    constraints: &TightenedConstraints,
    policy: &AffinePolicy,
    opts: &YtOptions<'_>,
) -> Result<YtBuild> {
    let p = opts.candidate.dim();
    let density = opts.grid_density.max(2);
    let units = grid_units(p, density);
    let points: Vec<Vec<f64>> = units.iter().map(|u| opts.candidate.from_unit(u)).collect();
    let flags: Vec<bool> = points
        .par_iter()
        .map(|y| {
            setpoint_admissible(
                maps,
                constraints,
                policy,
                &DVector::from_column_slice(y),
                opts.margin,
                opts.reservation,
            )
        })
        .collect();
    let kept: Vec<Vec<f64>> = points
        .iter()
        .zip(&flags)
        .filter(|(_, f)| **f)
        .map(|(y, _)| y.clone())
        .collect();
    let rejected: Vec<Vec<f64>> = points
        .iter()
        .zip(&flags)
        .filter(|(_, f)| !**f)
        .map(|(y, _)| y.clone())
        .collect();
    if kept.is_empty() {
        return Err(MpcError::EmptyRegion);
    }
    let region = match opts.shape {
        RegionShape::Hull => SetpointRegion::from_points(&kept, opts.margin)?,
        RegionShape::Box => {
            let b = largest_inscribed_box(&opts.candidate, density, &flags)?;
            SetpointRegion::from_box(&b, opts.margin)
        }
    };
    let interior_failures: Vec<Vec<f64>> = rejected
        .iter()
        .filter(|y| region.contains(y, -1e-12))
        .cloned()
        .collect();
    if !interior_failures.is_empty() {
        log::warn!(
            "{} grid points inside the setpoint region fail the membership test",
            interior_failures.len()
        );
    }
    Ok(YtBuild {
        region,
        kept,
        rejected,
        interior_failures,
    })
}

/// Largest axis-aligned box of admissible grid points (dimensions 1 and 2).
fn largest_inscribed_box(candidate: &Hyperbox, density: usize, flags: &[bool]) -> Result<Hyperbox> {
    let p = candidate.dim();
    let coord = |axis: usize, k: usize| {
        candidate.from_unit(&vec![k as f64 / (density - 1) as f64; p])[axis]
    };
    match p {
        1 => {
            let mut best: Option<(usize, usize)> = None;
            let mut start = None;
            for (k, f) in flags.iter().enumerate() {
                if *f {
                    let s = *start.get_or_insert(k);
                    if best.is_none_or(|(a, b)| k - s > b - a) {
                        best = Some((s, k));
                    }
                } else {
                    start = None;
                }
            }
            let (a, b) = best.ok_or(MpcError::EmptyRegion)?;
            Hyperbox::new(vec![coord(0, a)], vec![coord(0, b)])
        }
        2 => {
            // Prefix sums over the admissible indicator (row = first axis).
            let g = density;
            let mut pre = vec![vec![0usize; g + 1]; g + 1];
            for i in 0..g {
                for j in 0..g {
                    pre[i + 1][j + 1] = pre[i][j + 1] + pre[i + 1][j] - pre[i][j]
                        + usize::from(flags[i * g + j]);
                }
            }
            let mut best: Option<(f64, [usize; 4])> = None;
            for i0 in 0..g {
                for i1 in i0..g {
                    for j0 in 0..g {
                        for j1 in j0..g {
                            let cnt = pre[i1 + 1][j1 + 1] - pre[i0][j1 + 1] - pre[i1 + 1][j0]
                                + pre[i0][j0];
                            if cnt != (i1 - i0 + 1) * (j1 - j0 + 1) {
                                break;
                            }
                            let area = (coord(0, i1) - coord(0, i0)) * (coord(1, j1) - coord(1, j0));
                            if best.is_none_or(|(a, _)| area > a) {
                                best = Some((area, [i0, i1, j0, j1]));
                            }
                        }
                    }
                }
            }
            let (_, [i0, i1, j0, j1]) = best.ok_or(MpcError::EmptyRegion)?;
            Hyperbox::new(
                vec![coord(0, i0), coord(1, j0)],
                vec![coord(0, i1), coord(1, j1)],
            )
        }
        _ => Err(MpcError::InvalidParameter(format!(
            "inscribed box supports output dimension 1 or 2, got {p}"
        ))),
    }
}

/// Minimiser of `(y − y_t)ᵀ T (y − y_t)` over the region.
pub fn best_setpoint(
    y_t: &DVector<f64>,
    region: &SetpointRegion,
    t: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dim("target", region.dim(), y_t.len())?;
    if region.a.is_empty() || region.vertices.is_empty() {
        return Err(MpcError::EmptyRegion);
    }
    if region.contains(y_t.as_slice(), 0.0) {
        return Ok(y_t.clone());
    }
    let h = t * 2.0;
    let g = -(t * y_t) * 2.0;
    let sol = solve_qp_ineq(&h, &g, &region.a_matrix(), &region.b_vector()).map_err(|e| match e {
        QpError::Infeasible => MpcError::EmptyRegion,
        QpError::NotConvex => {
            MpcError::InvalidParameter("offset weight is not positive definite".into())
        }
        other => MpcError::LinearAlgebra(format!("setpoint projection: {other}")),
    })?;
    Ok(sol.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FourTank, FourTankParams, LinearPlant};
    use crate::tubes::{build_tubes_from_f0, tighten};

    fn scalar_plant() -> LinearPlant {
        LinearPlant::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            Hyperbox::new(vec![-10.0], vec![10.0]).unwrap(),
            Hyperbox::new(vec![-10.0], vec![10.0]).unwrap(),
            Hyperbox::new(vec![0.0], vec![0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn linear_steady_state() {
        let (x, u) = solve_equilibrium(&scalar_plant(), &DVector::from_element(1, 1.0)).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (u[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fourtank_closed_form_matches_newton() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let y = DVector::from_vec(vec![0.65, 0.65]);
        let (x, u) = solve_equilibrium(&plant, &y).unwrap();
        let res = steady_residual(&plant, &x, &u, &y).unwrap();
        assert!(res.amax() <= 1e-10);
        let (xn, un) = newton_equilibrium(&plant, &y, None).unwrap();
        assert!((xn - &x).amax() < 1e-8 && (un - &u).amax() < 1e-8);
    }

    #[test]
    fn unreachable_output_has_no_equilibrium() {
        let plant = FourTank::new(FourTankParams::default()).unwrap();
        let err = solve_equilibrium(&plant, &DVector::from_vec(vec![1.3, 0.6])).unwrap_err();
        assert!(matches!(err, MpcError::NoEquilibrium { .. }));
    }

    #[test]
    fn steady_state_rank_scalar_and_degenerate() {
        let rep = check_steady_state_rank(&scalar_plant(), &[DVector::from_element(1, 1.0)]).unwrap();
        assert!((rep.min_abs_det.unwrap() - 1.0).abs() < 1e-8);
        assert!(rep.passed);
        let flat = LinearPlant::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            Hyperbox::new(vec![-10.0], vec![10.0]).unwrap(),
            Hyperbox::new(vec![-10.0], vec![10.0]).unwrap(),
            Hyperbox::new(vec![0.0], vec![0.0]).unwrap(),
        )
        .unwrap();
        // y ≡ 0: any state with u = x/2 is steady; probe the zero output.
        let rep = check_steady_state_rank(&flat, &[DVector::from_element(1, 0.0)]).unwrap();
        assert!(!rep.passed && rep.offending.len() == 1);
    }

    #[test]
    fn best_setpoint_axis_projection() {
        let unit = SetpointRegion::from_box(
            &Hyperbox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            0.0,
        );
        let y = best_setpoint(
            &DVector::from_vec(vec![2.0, 0.5]),
            &unit,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 0.5).abs() < 1e-12);
        let inside = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(best_setpoint(&inside, &unit, &DMatrix::identity(2, 2)).unwrap(), inside);
    }

    #[test]
    fn hull_of_square_grid() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![0.5, 1.0],
        ];
        let r = SetpointRegion::from_points(&pts, 0.0).unwrap();
        assert_eq!(r.vertices.len(), 4);
        assert!(r.contains(&[0.5, 0.5], 0.0));
        assert!(!r.contains(&[1.1, 0.5], 1e-12));
    }

    #[test]
    fn no_disturbance_gives_shrunk_range() {
        let plant: Arc<dyn Plant> = Arc::new(scalar_plant());
        let maps = EquilibriumMaps::new(plant.clone());
        let tubes = build_tubes_from_f0(&DMatrix::from_element(1, 1, 0.5), &[0.0], 3).unwrap();
        let k = DMatrix::zeros(1, 1);
        let tc = tighten(plant.state_box(), plant.input_box(), &k, &tubes).unwrap();
        let opts = YtOptions {
            candidate: Hyperbox::new(vec![-12.0], vec![12.0]).unwrap(),
            grid_density: 241,
            margin: 1e-6,
            shape: RegionShape::Hull,
            reservation: None,
        };
        let b = build_yt(&maps, &tc, &AffinePolicy::new(k), &opts).unwrap();
        // y = x_s ∈ (−10, 10) and u_s = y/2 ∈ (−10, 10): grid step 0.1.
        let bb = b.region.bounding_box();
        assert!((bb.lower()[0] + 9.9).abs() < 1e-9 && (bb.upper()[0] - 9.9).abs() < 1e-9);
    }
}
