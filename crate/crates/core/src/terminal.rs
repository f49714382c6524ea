//! Terminal ingredients: gain `K`, cost `V_f(e) = eᵀPe`, level `ρ`.
//!
//! The terminal set is `X_f(y_s) = {x : V_f(x − x_s) ≤ ρ}` and the inflated
//! set is `Ω(y_s) = {x : V_f(x − x_s) ≤ ρ_Ω}` with
//! `√ρ_Ω = √ρ + δ`, `δ = max_{e ∈ vert F(N_p−1)} √(eᵀPe)`, so that
//! `X_f ⊕ F(N_p−1) ⊆ Ω` by the triangle inequality for the `P`-norm.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibria::{EquilibriumMaps, SetpointRegion};
use crate::error::{MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::linalg::{
    cholesky_lower, max_sym_eig, min_sym_eig, quad_form, solve_dare, spectral_radius, symmetrize,
};
use crate::model::Plant;
use crate::tubes::{TightenedConstraints, TubeSystem};

/// Default contraction factor `ζ`.
pub const DEFAULT_ZETA: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub rho: f64,
    pub zeta: f64,
    pub alpha_f_bar: f64,
}

impl TerminalIngredients {
    pub fn new(k: DMatrix<f64>, p: DMatrix<f64>, rho: f64, zeta: f64) -> Result<Self> {
        let p = symmetrize(&p);
        cholesky_lower(&p, "terminal cost matrix P")?;
        let alpha_f_bar = max_sym_eig(&p);
        Ok(Self {
            k,
            p,
            rho,
            zeta,
            alpha_f_bar,
        })
    }

    pub fn v_f(&self, e: &DVector<f64>) -> f64 {
        quad_form(&self.p, e)
    }
}

/// Finite-difference linearisation at one steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexLinearization {
    pub y: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub fn linearize_vertices(
    plant: &dyn Plant,
    maps: &EquilibriumMaps,
    setpoints: &[DVector<f64>],
) -> Result<Vec<VertexLinearization>> {
    setpoints
        .iter()
        .map(|y| {
            let eq = maps.eval_raw(y)?;
            let w0 = plant.zero_disturbance();
            let a = crate::linalg::central_jacobian(
                |xx| plant.step(xx, &eq.u, &w0),
                &eq.x,
                crate::model::FD_REL_STEP,
            )?;
            let b = crate::linalg::central_jacobian(
                |uu| plant.step(&eq.x, uu, &w0),
                &eq.u,
                crate::model::FD_REL_STEP,
            )?;
            Ok(VertexLinearization { y: y.clone(), a, b })
        })
        .collect()
}

/// Index of the vertex closest to the centroid of the setpoints.
pub fn central_vertex(vertices: &[VertexLinearization]) -> usize {
    let p = vertices[0].y.len();
    let mean = vertices
        .iter()
        .fold(DVector::zeros(p), |acc, v| acc + &v.y)
        / vertices.len() as f64;
    vertices
        .iter()
        .enumerate()
        .min_by(|a, b| (&a.1.y - &mean).norm().total_cmp(&(&b.1.y - &mean).norm()))
        .map_or(0, |(i, _)| i)
}

/// Eigenvalue report of the vertex matrix inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexCheck {
    /// Max eigenvalue of `A_KᵀPA_K − P + Q + KᵀRK` over the vertices.
    pub max_decrease_eig: f64,
    /// Max generalised eigenvalue of `A_KᵀPA_K` relative to `P`.
    pub contraction: f64,
    pub max_spectral_radius: f64,
    pub worst_vertex: usize,
    pub decrease_ok: bool,
    pub contraction_ok: bool,
}

pub fn check_vertex_inequalities(
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    vertices: &[VertexLinearization],
    zeta: f64,
    tol: f64,
) -> Result<VertexCheck> {
    let l = cholesky_lower(p, "P")?;
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| MpcError::LinearAlgebra("singular Cholesky factor".into()))?;
    let stage = q + k.transpose() * r * k;
    let mut max_dec = f64::NEG_INFINITY;
    let mut contraction: f64 = 0.0;
    let mut rad: f64 = 0.0;
    let mut worst = 0;
    for (idx, v) in vertices.iter().enumerate() {
        let ak = &v.a + &v.b * k;
        let apa = ak.transpose() * p * &ak;
        let dec = max_sym_eig(&(&apa - p + &stage));
        if dec > max_dec {
            max_dec = dec;
            worst = idx;
        }
        contraction = contraction.max(max_sym_eig(&(&l_inv * &apa * l_inv.transpose())));
        rad = rad.max(spectral_radius(&ak));
    }
    Ok(VertexCheck {
        max_decrease_eig: max_dec,
        contraction,
        max_spectral_radius: rad,
        worst_vertex: worst,
        decrease_ok: max_dec <= tol,
        contraction_ok: contraction <= zeta,
    })
}

/// DARE at the central vertex, verified at every vertex; on failure `Q` is
/// doubled and the synthesis retried (at most 10 retries).
pub fn synthesize_gain(
    vertices: &[VertexLinearization],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    zeta_target: f64,
) -> Result<(TerminalIngredients, VertexCheck)> {
    if vertices.is_empty() {
        return Err(MpcError::SynthesisFailed("no vertices supplied".into()));
    }
    let c = central_vertex(vertices);
    let mut scale = 1.0;
    let mut last = None;
    for _ in 0..=10 {
        let (p, k) = solve_dare(&vertices[c].a, &vertices[c].b, &(q * scale), r)?;
        let check = check_vertex_inequalities(&k, &p, q, r, vertices, zeta_target, 1e-9)?;
        if check.decrease_ok && check.contraction_ok {
            return Ok((TerminalIngredients::new(k, p, f64::NAN, zeta_target)?, check));
        }
        last = Some(check);
        scale *= 2.0;
    }
    let check = last.expect("at least one attempt");
    Err(MpcError::SynthesisFailed(format!(
        "worst vertex {}: decrease eigenvalue {:.4e}, contraction {:.4}",
        check.worst_vertex, check.max_decrease_eig, check.contraction
    )))
}

/// Solves `P − Σ μᵢ A_iᵀ P A_i = S` by vectorisation.
fn weighted_lyapunov(aks: &[DMatrix<f64>], mu: &[f64], s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let mut m = DMatrix::<f64>::identity(n * n, n * n);
    for (a, w) in aks.iter().zip(mu) {
        m -= a.transpose().kronecker(&a.transpose()) * *w;
    }
    let x = m
        .lu()
        .solve(&DVector::from_column_slice(s.as_slice()))
        .ok_or_else(|| MpcError::LinearAlgebra("weighted Lyapunov equation is singular".into()))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

fn vertex_contractions(p: &DMatrix<f64>, aks: &[DMatrix<f64>]) -> Option<Vec<f64>> {
    let l_inv = Cholesky::new(p.clone())?.l().try_inverse()?;
    Some(
        aks.iter()
            .map(|a| max_sym_eig(&(&l_inv * a.transpose() * p * a * l_inv.transpose())))
            .collect(),
    )
}

/// Terminal cost for a fixed gain.
///
/// A common `P̄` is found by solving the discounted vertex-weighted Lyapunov
/// equation `P − Σ μᵢ A_iᵀPA_i / γ² = Q + KᵀRK` for `γ = 1, 0.99, …, 0.71`
/// while multiplicative weights move towards the least contractive vertex
/// (200 rounds per `γ`); the most contractive candidate is kept. `P = s P̄` with the smallest `s` (plus 1 %) that makes
/// `A_KᵀPA_K − P + Q + KᵀRK ≼ 0` at every vertex. Returns the scale `s`.
pub fn cost_for_gain(
    k: &DMatrix<f64>,
    vertices: &[VertexLinearization],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    zeta_target: f64,
) -> Result<(TerminalIngredients, VertexCheck, f64)> {
    if vertices.is_empty() {
        return Err(MpcError::SynthesisFailed("no vertices supplied".into()));
    }
    let stage = q + k.transpose() * r * k;
    let aks: Vec<DMatrix<f64>> = vertices.iter().map(|v| &v.a + &v.b * k).collect();
    let nv = aks.len();
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for step in 0..30 {
        let gamma = 1.0 - 0.01 * step as f64;
        let scaled: Vec<DMatrix<f64>> = aks.iter().map(|a| a / gamma).collect();
        let mut mu = vec![1.0 / nv as f64; nv];
        for _ in 0..200 {
            let Ok(p) = weighted_lyapunov(&scaled, &mu, &stage) else {
                break;
            };
            let Some(c) = vertex_contractions(&p, &aks) else {
                break;
            };
            let worst = c.iter().cloned().fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, p));
            }
            for (m, ci) in mu.iter_mut().zip(&c) {
                *m *= (20.0 * (ci - worst)).exp();
            }
            let sum: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|m| *m /= sum);
        }
    }
    let (contraction, p_bar) = best.ok_or_else(|| {
        MpcError::SynthesisFailed("the gain does not stabilise the vertex linearisations".into())
    })?;
    if contraction >= 1.0 {
        return Err(MpcError::SynthesisFailed(format!(
            "no common quadratic Lyapunov function found (best contraction {contraction:.4})"
        )));
    }
    let mut scale: f64 = 0.0;
    for a in &aks {
        let m = symmetrize(&(&p_bar - a.transpose() * &p_bar * a));
        let l_inv = cholesky_lower(&m, "vertex decrease matrix")?
            .try_inverse()
            .ok_or_else(|| MpcError::LinearAlgebra("singular Cholesky factor".into()))?;
        scale = scale.max(max_sym_eig(&(&l_inv * &stage * l_inv.transpose())));
    }
    let scale = 1.01 * scale;
    let p = &p_bar * scale;
    let check = check_vertex_inequalities(k, &p, q, r, vertices, zeta_target, 1e-9)?;
    if !(check.decrease_ok && check.contraction_ok) {
        return Err(MpcError::SynthesisFailed(format!(
            "worst vertex {}: decrease eigenvalue {:.4e}, contraction {:.4}",
            check.worst_vertex, check.max_decrease_eig, check.contraction
        )));
    }
    Ok((
        TerminalIngredients::new(k.clone(), p, f64::NAN, zeta_target)?,
        check,
        scale,
    ))
}

/// Points on (and inside) the level set `{eᵀPe ≤ level}`, returned as offsets.
///
/// The `2n` support points `±√level · P⁻¹eᵢ / √(P⁻¹)ᵢᵢ` come first, then
/// `boundary` random boundary points, then `interior` random interior points.
pub fn level_set_offsets(
    p: &DMatrix<f64>,
    level: f64,
    boundary: usize,
    interior: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let n = p.nrows();
    let chol = Cholesky::new(symmetrize(p))
        .ok_or_else(|| MpcError::LinearAlgebra("P is not positive definite".into()))?;
    let p_inv = chol.inverse();
    let lt = chol.l().transpose();
    let scale = level.max(0.0).sqrt();
    let mut out = Vec::with_capacity(2 * n + boundary + interior);
    for i in 0..n {
        let col = p_inv.column(i) * (scale / p_inv[(i, i)].sqrt());
        out.push(col.clone_owned());
        out.push(-col);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(0.0f64, 1.0).expect("valid range");
    for idx in 0..boundary + interior {
        let dir = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = dir.norm().max(1e-300);
        let radius = if idx < boundary {
            1.0
        } else {
            unif.sample(&mut rng).powf(1.0 / n as f64)
        };
        // Lᵀ e = s with ‖s‖ = r gives eᵀPe = r².
        let s = dir * (scale * radius / norm);
        let e = lt
            .solve_upper_triangular(&s)
            .ok_or_else(|| MpcError::LinearAlgebra("singular Cholesky factor".into()))?;
        out.push(e);
    }
    Ok(out)
}

/// Worst residual `V_f(x⁺ − x_s) − V_f(x − x_s) + ℓ(x − x_s, 0)` over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    pub worst: f64,
    pub worst_setpoint: Vec<f64>,
    pub worst_state: Vec<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Samples the terminal decrease inside the level sets `{V_f ≤ level}`.
#[allow(clippy::too_many_arguments)]
pub fn verify_lyapunov_decrease(
    plant: &dyn Plant,
    maps: &EquilibriumMaps,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    level: f64,
    setpoints: &[DVector<f64>],
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<DecreaseReport> {
    let per = samples.div_ceil(setpoints.len().max(1));
    let results: Vec<Result<(f64, Vec<f64>, Vec<f64>, usize, usize)>> = setpoints
        .par_iter()
        .enumerate()
        .map(|(idx, y)| {
            let eq = maps.eval_raw(y)?;
            let n_b = per / 2;
            let offsets = level_set_offsets(p, level, n_b, per.saturating_sub(n_b), seed + idx as u64)?;
            let w0 = plant.zero_disturbance();
            let mut worst = f64::NEG_INFINITY;
            let mut wx = Vec::new();
            let mut count = 0;
            let mut skipped = 0;
            for e in offsets.iter().take(per.max(1)) {
                let x = &eq.x + e;
                let u = k * e + &eq.v;
                let Ok(xn) = plant.step(&x, &u, &w0) else {
                    skipped += 1;
                    continue;
                };
                let res = quad_form(p, &(xn - &eq.x)) - quad_form(p, e) + quad_form(q, e);
                count += 1;
                if res > worst {
                    worst = res;
                    wx = x.iter().cloned().collect();
                }
            }
            Ok((worst, y.iter().cloned().collect(), wx, count, skipped))
        })
        .collect();
    let mut rep = DecreaseReport {
        worst: f64::NEG_INFINITY,
        worst_setpoint: Vec::new(),
        worst_state: Vec::new(),
        samples: 0,
        skipped: 0,
        passed: false,
    };
    for r in results {
        let (w, y, x, c, s) = r?;
        rep.samples += c;
        rep.skipped += s;
        if w > rep.worst {
            rep.worst = w;
            rep.worst_setpoint = y;
            rep.worst_state = x;
        }
    }
    rep.passed = rep.worst <= tol;
    Ok(rep)
}

/// Exact slack of the level set `{V_f ≤ level}` around `(x_s, v_s)` against
/// a state box and an input box under `u = K(x − x_s) + v_s`.
pub fn level_set_slack(
    p_inv: &DMatrix<f64>,
    k: &DMatrix<f64>,
    level: f64,
    x_s: &DVector<f64>,
    v_s: &DVector<f64>,
    state_box: &Hyperbox,
    input_box: &Hyperbox,
) -> f64 {
    let level = level.max(0.0);
    let mut slack = f64::INFINITY;
    for i in 0..x_s.len() {
        let h = (level * p_inv[(i, i)]).sqrt();
        slack = slack
            .min(x_s[i] - h - state_box.lower()[i])
            .min(state_box.upper()[i] - x_s[i] - h);
    }
    let kp = k * p_inv * k.transpose();
    for i in 0..v_s.len() {
        let h = (level * kp[(i, i)]).sqrt();
        slack = slack
            .min(v_s[i] - h - input_box.lower()[i])
            .min(input_box.upper()[i] - v_s[i] - h);
    }
    slack
}

/// `δ = max_{e ∈ vert F(j)} √(eᵀPe)`.
pub fn inflation(p: &DMatrix<f64>, f: &Hyperbox) -> f64 {
    f.vertices()
        .iter()
        .map(|e| quad_form(p, &DVector::from_column_slice(e)).sqrt())
        .fold(0.0, f64::max)
}

pub fn omega_level(rho: f64, delta: f64) -> f64 {
    (rho.max(0.0).sqrt() + delta).powi(2)
}

/// Terminal level reserved while the setpoint region is being built.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetReservation {
    pub p_inv: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub rho: f64,
    pub rho_omega: f64,
}

impl LevelSetReservation {
    pub fn new(p: &DMatrix<f64>, k: &DMatrix<f64>, rho: f64, tubes: &TubeSystem) -> Result<Self> {
        let p_inv = Cholesky::new(symmetrize(p))
            .ok_or_else(|| MpcError::LinearAlgebra("P is not positive definite".into()))?
            .inverse();
        let delta = inflation(p, &tubes.f[tubes.horizon - 1]);
        Ok(Self {
            p_inv,
            k: k.clone(),
            rho,
            rho_omega: omega_level(rho, delta),
        })
    }

    /// Smallest slack of items (a) and (b) at this steady state.
    pub fn fits(&self, constraints: &TightenedConstraints, x_s: &DVector<f64>, v_s: &DVector<f64>) -> f64 {
        let np = constraints.horizon();
        let a = level_set_slack(
            &self.p_inv,
            &self.k,
            self.rho,
            x_s,
            v_s,
            &constraints.state_boxes[np],
            &constraints.input_boxes[np],
        );
        let b = level_set_slack(
            &self.p_inv,
            &self.k,
            self.rho_omega,
            x_s,
            v_s,
            &constraints.state_boxes[np - 1],
            &constraints.input_boxes[np - 1],
        );
        a.min(b)
    }
}

/// Controls for [`size_terminal_level`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizingOptions {
    pub setpoint_density: usize,
    pub samples: usize,
    pub rho_min: f64,
    pub seed: u64,
}

impl Default for SizingOptions {
    fn default() -> Self {
        Self {
            setpoint_density: 7,
            samples: 10_000,
            rho_min: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSizing {
    pub rho: f64,
    pub rho_omega: f64,
    pub delta: f64,
    /// Largest level allowed by the containment items alone.
    pub rho_containment: f64,
    /// Worst `V_f(x⁺ − x_s) / ρ` over the invariance samples (≤ 1 passes).
    pub invariance_ratio: f64,
    pub setpoints_checked: usize,
}

fn containment_ok(
    p_inv: &DMatrix<f64>,
    k: &DMatrix<f64>,
    rho: f64,
    delta: f64,
    eqs: &[(DVector<f64>, DVector<f64>)],
    constraints: &TightenedConstraints,
) -> bool {
    let np = constraints.horizon();
    let ro = omega_level(rho, delta);
    eqs.iter().all(|(x, v)| {
        level_set_slack(
            p_inv,
            k,
            rho,
            x,
            v,
            &constraints.state_boxes[np],
            &constraints.input_boxes[np],
        ) >= 0.0
            && level_set_slack(
                p_inv,
                k,
                ro,
                x,
                v,
                &constraints.state_boxes[np - 1],
                &constraints.input_boxes[np - 1],
            ) >= 0.0
    })
}

fn invariance_ratio(
    plant: &dyn Plant,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    rho: f64,
    rho_omega: f64,
    eqs: &[(DVector<f64>, DVector<f64>)],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let per = samples.div_ceil(eqs.len().max(1)).max(1);
    let ratios: Vec<Result<f64>> = eqs
        .par_iter()
        .enumerate()
        .map(|(idx, (xs, vs))| {
            let offs = level_set_offsets(p, rho_omega, per / 2, per - per / 2, seed + idx as u64)?;
            let w0 = plant.zero_disturbance();
            let mut worst: f64 = 0.0;
            for e in &offs {
                let x = xs + e;
                let u = k * e + vs;
                let xn = plant.step(&x, &u, &w0).map_err(|err| {
                    MpcError::TerminalDesignFailed(format!("invariance sample left the model domain: {err}"))
                })?;
                worst = worst.max(quad_form(p, &(xn - xs)) / rho);
            }
            Ok(worst)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in ratios {
        worst = worst.max(r?);
    }
    Ok(worst)
}

/// Smallest level whose inflated set maps into itself at the given steady
/// states, by bisection on the invariance ratio (40 iterations).
#[allow(clippy::too_many_arguments)]
pub fn min_invariant_level(
    plant: &dyn Plant,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    delta: f64,
    eqs: &[(DVector<f64>, DVector<f64>)],
    samples: usize,
    seed: u64,
    rho_max: f64,
) -> Result<f64> {
    let passes = |rho: f64| -> Result<bool> {
        Ok(invariance_ratio(plant, k, p, rho, omega_level(rho, delta), eqs, samples, seed)? <= 1.0)
    };
    if !passes(rho_max)? {
        return Err(MpcError::TerminalDesignFailed(format!(
            "no level up to {rho_max:.4e} is invariant"
        )));
    }
    let (mut lo, mut hi) = (0.0, rho_max);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if passes(mid).unwrap_or(false) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Largest `ρ` passing the containment items by bisection, then the
/// invariance item by sampling; `ρ` shrinks by 10 % while invariance fails.
#[allow(clippy::too_many_arguments)]
pub fn size_terminal_level(
    plant: &dyn Plant,
    maps: &EquilibriumMaps,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    constraints: &TightenedConstraints,
    tubes: &TubeSystem,
    region: &SetpointRegion,
    opts: &SizingOptions,
) -> Result<TerminalSizing> {
    let np = constraints.horizon();
    if np == 0 || tubes.horizon < np {
        return Err(MpcError::TerminalDesignFailed("horizon must be at least 1".into()));
    }
    let p_inv = Cholesky::new(symmetrize(p))
        .ok_or_else(|| MpcError::LinearAlgebra("P is not positive definite".into()))?
        .inverse();
    let delta = inflation(p, &tubes.f[np - 1]);
    let ys = region.sample_points(opts.setpoint_density);
    let eqs: Vec<(DVector<f64>, DVector<f64>)> = ys
        .iter()
        .map(|y| {
            let e = maps.eval_raw(&DVector::from_column_slice(y))?;
            Ok((e.x, e.v))
        })
        .collect::<Result<_>>()?;
    let ok = |rho: f64| containment_ok(&p_inv, k, rho, delta, &eqs, constraints);
    if !ok(opts.rho_min) {
        return Err(MpcError::TerminalDesignFailed(format!(
            "no level above {:.1e} fits the tightened constraints",
            opts.rho_min
        )));
    }
    let mut lo = opts.rho_min;
    let mut hi = 1.0;
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho_containment = lo;
    let mut rho = rho_containment;
    loop {
        let ratio = invariance_ratio(
            plant,
            k,
            p,
            rho,
            omega_level(rho, delta),
            &eqs,
            opts.samples,
            opts.seed,
        )?;
        if ratio <= 1.0 {
            return Ok(TerminalSizing {
                rho,
                rho_omega: omega_level(rho, delta),
                delta,
                rho_containment,
                invariance_ratio: ratio,
                setpoints_checked: eqs.len(),
            });
        }
        rho *= 0.9;
        if rho < opts.rho_min {
            return Err(MpcError::TerminalDesignFailed(format!(
                "invariance fails at every level up to {rho_containment:.4e} (ratio {ratio:.4})"
            )));
        }
    }
}

/// `b₁ = b₂ = λ_min(T) / (4 ᾱ_f L_g²)` for quadratic offset and terminal costs.
pub fn check_offset_bound(t: &DMatrix<f64>, alpha_f_bar: f64, l_g: f64) -> (f64, f64, bool) {
    let lam = min_sym_eig(t).max(0.0);
    let b = lam / (4.0 * alpha_f_bar * l_g * l_g);
    (b, b, b > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_bound_formula() {
        let (b1, b2, ok) = check_offset_bound(&DMatrix::identity(2, 2), 1.0, 0.5);
        assert!((b1 - 1.0).abs() < 1e-15 && b1 == b2 && ok);
        let (b, _, ok) = check_offset_bound(&DMatrix::zeros(2, 2), 1.0, 0.5);
        assert!(b == 0.0 && !ok);
    }

    #[test]
    fn single_vertex_synthesis_is_dare() {
        let v = VertexLinearization {
            y: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        };
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1) * 0.1;
        let (ing, check) = synthesize_gain(&[v.clone()], &q, &r, 0.99).unwrap();
        let (p, k) = solve_dare(&v.a, &v.b, &q, &r).unwrap();
        assert!((ing.p - p).amax() < 1e-9 && (ing.k - k).amax() < 1e-9);
        assert!(check.max_decrease_eig <= 1e-9);
    }

    #[test]
    fn unstabilizable_synthesis_fails() {
        let v = VertexLinearization {
            y: DVector::zeros(1),
            a: DMatrix::from_element(1, 1, 2.0),
            b: DMatrix::from_element(1, 1, 0.0),
        };
        let err = synthesize_gain(&[v], &DMatrix::identity(1, 1), &DMatrix::identity(1, 1), 0.95);
        assert!(matches!(err, Err(MpcError::SynthesisFailed(_))));
    }

    #[test]
    fn level_set_offsets_on_boundary() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let offs = level_set_offsets(&p, 0.3, 50, 50, 3).unwrap();
        for e in &offs[..54] {
            assert!((quad_form(&p, e) - 0.3).abs() < 1e-12);
        }
        for e in &offs[54..] {
            assert!(quad_form(&p, e) <= 0.3 + 1e-12);
        }
        // Support points attain the coordinate extent √(ρ (P⁻¹)ᵢᵢ).
        let p_inv = p.clone().try_inverse().unwrap();
        assert!((offs[0][0] - (0.3 * p_inv[(0, 0)]).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn omega_contains_inflated_terminal_set() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let f = Hyperbox::symmetric(&[0.05, 0.02]).unwrap();
        let delta = inflation(&p, &f);
        let ro = omega_level(0.2, delta);
        for e in level_set_offsets(&p, 0.2, 200, 0, 1).unwrap() {
            for vtx in f.vertices() {
                let z = &e + DVector::from_vec(vtx);
                assert!(quad_form(&p, &z) <= ro + 1e-12);
            }
        }
    }

    #[test]
    fn fixed_gain_cost_certifies_switching_pair() {
        let mk = |a: [f64; 4]| VertexLinearization {
            y: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 2, &a),
            b: DMatrix::zeros(2, 1),
        };
        let verts = [mk([0.6, 0.5, 0.0, 0.6]), mk([0.6, 0.0, 0.5, 0.6])];
        let k = DMatrix::zeros(1, 2);
        let (ing, check, _) =
            cost_for_gain(&k, &verts, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), 0.95)
                .unwrap();
        assert!(check.decrease_ok && check.contraction_ok);
        for v in &verts {
            let m = v.a.transpose() * &ing.p * &v.a - &ing.p + DMatrix::identity(2, 2);
            assert!(max_sym_eig(&m) <= 1e-9);
        }
    }
}
