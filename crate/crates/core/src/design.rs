//! Offline design pipeline: constants, tubes, terminal ingredients,
//! setpoint region and the assembled tracking problem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::equilibria::{build_yt, EquilibriumMaps, SetpointRegion, YtBuild, YtOptions};
use crate::error::{MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::lipschitz::{estimate_constants, EstimationBudget, LipschitzMatrices, SamplingRegion};
use crate::model::{FourTank, Plant};
use crate::ocp::TrackingProblem;
use crate::policy::AffinePolicy;
use crate::terminal::{
    check_offset_bound, check_vertex_inequalities, cost_for_gain, inflation, level_set_slack,
    linearize_vertices, min_invariant_level, omega_level, verify_lyapunov_decrease, DecreaseReport,
    size_terminal_level, synthesize_gain, LevelSetReservation, SizingOptions, TerminalIngredients,
    TerminalSizing, VertexCheck, VertexLinearization,
};
use crate::tubes::{build_tubes, build_tubes_from_f0, initial_cross_section, tighten, TubeSystem};

/// Summary of the terminal design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalReport {
    pub vertex_check: VertexCheck,
    /// Scale applied to the common Lyapunov matrix, when `P` was computed.
    pub p_scale: Option<f64>,
    pub sizing: Option<TerminalSizing>,
    pub l_g: f64,
    pub offset_bound: f64,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub problem: TrackingProblem,
    pub vertices: Vec<VertexLinearization>,
    pub yt: Option<YtBuild>,
    pub artifacts: Artifacts,
}

pub fn make_plant(cfg: &Config) -> Result<Arc<FourTank>> {
    Ok(Arc::new(FourTank::new(cfg.plant.clone())?))
}

pub fn candidate_box(cfg: &Config) -> Result<Hyperbox> {
    Hyperbox::new(
        cfg.setpoints.candidate_lower.clone(),
        cfg.setpoints.candidate_upper.clone(),
    )
}

/// Grid points of the candidate rectangle with admissible equilibria.
pub fn vertex_setpoints(cfg: &Config, maps: &EquilibriumMaps) -> Result<Vec<DVector<f64>>> {
    let b = candidate_box(cfg)?;
    let g = cfg.terminal.vertex_grid;
    let pts: Vec<DVector<f64>> = crate::equilibria::grid_units(2, g.max(1))
        .iter()
        .map(|u| DVector::from_vec(b.from_unit(u)))
        .filter(|y| maps.eval(y).is_ok())
        .collect();
    if pts.is_empty() {
        return Err(MpcError::EmptyRegion);
    }
    Ok(pts)
}

/// Injected constants or a certified estimate over the candidate rectangle.
pub fn lipschitz_stage(
    cfg: &Config,
    plant: &dyn Plant,
    policy: &AffinePolicy,
    maps: &EquilibriumMaps,
) -> Result<LipschitzMatrices> {
    if let Some((l_x, l_v, l_w)) = cfg.lipschitz_matrices()? {
        return LipschitzMatrices::new(l_x, l_v, l_w);
    }
    let region = SamplingRegion::from_plant(plant, candidate_box(cfg)?);
    let budget = EstimationBudget {
        pairs: cfg.lipschitz.pairs,
        verify_pairs: cfg.lipschitz.verify_pairs,
        safety_margin: cfg.lipschitz.safety_margin,
        seed: cfg.seed,
    };
    estimate_constants(plant, policy, maps, &region, &budget)
}

pub fn tube_stage(cfg: &Config, l: &LipschitzMatrices) -> Result<TubeSystem> {
    let np = cfg.controller.horizon;
    match &cfg.lipschitz.f0 {
        Some(f0) => build_tubes_from_f0(&l.l_x, f0, np),
        None => build_tubes(l, &cfg.plant.w_bar, np),
    }
}

pub fn tube_f0(cfg: &Config, l: &LipschitzMatrices) -> Result<Vec<f64>> {
    match &cfg.lipschitz.f0 {
        Some(f0) => Ok(f0.clone()),
        None => initial_cross_section(&l.l_w, &cfg.plant.w_bar),
    }
}

/// Gain from the configuration or by synthesis at the vertices.
pub fn gain_stage(cfg: &Config, vertices: &[VertexLinearization]) -> Result<DMatrix<f64>> {
    match cfg.k()? {
        Some(k) => Ok(k),
        None => Ok(synthesize_gain(vertices, &cfg.q()?, &cfg.r()?, cfg.terminal.zeta)?.0.k),
    }
}

/// Injected `P` (checked) or the certified common Lyapunov matrix.
pub fn cost_stage(
    cfg: &Config,
    k: &DMatrix<f64>,
    vertices: &[VertexLinearization],
) -> Result<(DMatrix<f64>, VertexCheck, Option<f64>)> {
    let (q, r) = (cfg.q()?, cfg.r()?);
    match cfg.p()? {
        Some(p) => {
            let p = crate::linalg::symmetrize(&p);
            let check = check_vertex_inequalities(k, &p, &q, &r, vertices, cfg.terminal.zeta, 1e-6)?;
            if !(check.decrease_ok && check.contraction_ok) {
                log::warn!(
                    "injected P fails the vertex inequalities (decrease {:.3e}, contraction {:.4})",
                    check.max_decrease_eig,
                    check.contraction
                );
            }
            Ok((p, check, None))
        }
        None => {
            let (ing, check, scale) = cost_for_gain(k, vertices, &q, &r, cfg.terminal.zeta)?;
            Ok((ing.p, check, Some(scale)))
        }
    }
}

/// Largest smallest-invariant-level over the vertex setpoints. Each search
/// is capped by the largest level whose inflated set stays inside the raw
/// boxes; vertices that cannot host an invariant level are skipped.
pub fn reservation_base(
    cfg: &Config,
    plant: &dyn Plant,
    maps: &EquilibriumMaps,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    tubes: &TubeSystem,
    ys: &[DVector<f64>],
) -> Result<f64> {
    let delta = inflation(p, &tubes.f[tubes.horizon - 1]);
    let l_inv = crate::linalg::cholesky_lower(p, "P")?
        .try_inverse()
        .ok_or_else(|| MpcError::LinearAlgebra("singular Cholesky factor".into()))?;
    let p_inv = l_inv.transpose() * l_inv;
    let per = cfg.terminal.samples.div_ceil(ys.len().max(1)).max(1);
    let mut base: Option<f64> = None;
    for y in ys {
        let e = maps.eval(y)?;
        let fits = |rho: f64| {
            level_set_slack(&p_inv, k, omega_level(rho, delta), &e.x, &e.v, plant.state_box(), plant.input_box())
                >= 0.0
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while fits(hi) && hi < 1e12 {
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eqs = [(e.x.clone(), e.v.clone())];
        if let Ok(level) = min_invariant_level(plant, k, p, delta, &eqs, per, cfg.seed, lo) {
            base = Some(base.map_or(level, |b: f64| b.max(level)));
        }
    }
    base.ok_or_else(|| {
        MpcError::TerminalDesignFailed("no vertex setpoint hosts an invariant level".into())
    })
}

pub fn build_design(cfg: &Config) -> Result<Design> {
    cfg.validate()?;
    let four = make_plant(cfg)?;
    let plant: Arc<dyn Plant> = four;
    let maps = EquilibriumMaps::new(plant.clone());
    let ys = vertex_setpoints(cfg, &maps)?;
    let vertices = linearize_vertices(plant.as_ref(), &maps, &ys)?;
    let k = gain_stage(cfg, &vertices)?;
    let policy = AffinePolicy::new(k.clone());
    let lipschitz = lipschitz_stage(cfg, plant.as_ref(), &policy, &maps)?;
    let tubes = tube_stage(cfg, &lipschitz)?;
    let constraints = tighten(plant.state_box(), plant.input_box(), &k, &tubes)?;
    let (p, vertex_check, p_scale) = cost_stage(cfg, &k, &vertices)?;

    let (region, yt) = match &cfg.setpoints.vertices {
        Some(v) => (SetpointRegion::from_points(v, cfg.setpoints.margin)?, None),
        None => {
            let reserve = match cfg.setpoints.reserve_rho {
                Some(r) => r,
                None => {
                    cfg.setpoints.reserve_factor
                        * reservation_base(cfg, plant.as_ref(), &maps, &k, &p, &tubes, &ys)?
                }
            };
            log::info!("reserving terminal level {reserve:.4e} while building the setpoint region");
            let reservation = LevelSetReservation::new(&p, &k, reserve, &tubes)?;
            let opts = YtOptions {
                candidate: candidate_box(cfg)?,
                grid_density: cfg.setpoints.grid_density,
                margin: cfg.setpoints.margin,
                shape: cfg.setpoints.shape,
                reservation: (reserve > 0.0).then_some(&reservation),
            };
            let b = build_yt(&maps, &constraints, &policy, &opts)?;
            (b.region.clone(), Some(b))
        }
    };

    let (rho, sizing) = match cfg.terminal.rho {
        Some(rho) => (rho, None),
        None => {
            let opts = SizingOptions {
                setpoint_density: cfg.terminal.setpoint_density,
                samples: cfg.terminal.samples,
                rho_min: cfg.terminal.rho_min,
                seed: cfg.seed,
            };
            let s = size_terminal_level(plant.as_ref(), &maps, &k, &p, &constraints, &tubes, &region, &opts)?;
            (s.rho, Some(s))
        }
    };
    let terminal = TerminalIngredients::new(k.clone(), p.clone(), rho, cfg.terminal.zeta)?;
    let l_g = maps.estimate_lg(&region, 2000, cfg.seed)?;
    let (b, _, _) = check_offset_bound(&cfg.t()?, terminal.alpha_f_bar, l_g);
    let artifacts = Artifacts {
        k,
        p,
        rho,
        lipschitz,
        region,
        l_g,
        terminal: TerminalReport {
            vertex_check,
            p_scale,
            sizing,
            l_g,
            offset_bound: b,
        },
        yt_kept: yt.as_ref().map(|b| b.kept.clone()),
        yt_rejected: yt.as_ref().map(|b| b.rejected.clone()),
    };
    let problem = assemble_problem(cfg, plant, maps, &artifacts)?;
    Ok(Design {
        problem,
        vertices,
        yt,
        artifacts,
    })
}

/// Everything the online controller needs, in serialisable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub rho: f64,
    pub lipschitz: LipschitzMatrices,
    pub region: SetpointRegion,
    pub l_g: f64,
    pub terminal: TerminalReport,
    pub yt_kept: Option<Vec<Vec<f64>>>,
    pub yt_rejected: Option<Vec<Vec<f64>>>,
}

fn assemble_problem(
    cfg: &Config,
    plant: Arc<dyn Plant>,
    maps: EquilibriumMaps,
    art: &Artifacts,
) -> Result<TrackingProblem> {
    let policy = AffinePolicy::new(art.k.clone());
    let tubes = tube_stage(cfg, &art.lipschitz)?;
    let constraints = tighten(plant.state_box(), plant.input_box(), &art.k, &tubes)?;
    let terminal = TerminalIngredients::new(art.k.clone(), art.p.clone(), art.rho, cfg.terminal.zeta)?;
    TrackingProblem::new(
        plant,
        maps.with_lg(art.l_g),
        policy,
        tubes,
        constraints,
        terminal,
        art.region.clone(),
        cfg.q()?,
        cfg.r()?,
        cfg.t()?,
        cfg.solver,
    )
}

/// Rebuilds a design from stored artifacts without re-running the offline
/// computations.
pub fn design_from_artifacts(cfg: &Config, artifacts: Artifacts) -> Result<Design> {
    cfg.validate()?;
    let plant: Arc<dyn Plant> = make_plant(cfg)?;
    let maps = EquilibriumMaps::new(plant.clone());
    let ys = vertex_setpoints(cfg, &maps)?;
    let vertices = linearize_vertices(plant.as_ref(), &maps, &ys)?;
    let problem = assemble_problem(cfg, plant, maps, &artifacts)?;
    Ok(Design {
        problem,
        vertices,
        yt: None,
        artifacts,
    })
}

/// Sampled terminal decrease of a design inside `Ω` at the setpoint grid.
pub fn verify_terminal_decrease(cfg: &Config, design: &Design, tol: f64) -> Result<DecreaseReport> {
    let pr = &design.problem;
    let delta = inflation(&pr.terminal.p, &pr.tubes.f[pr.tubes.horizon - 1]);
    let level = omega_level(pr.terminal.rho, delta);
    let ys: Vec<DVector<f64>> = pr
        .region
        .sample_points(cfg.terminal.setpoint_density)
        .iter()
        .map(|y| DVector::from_column_slice(y))
        .collect();
    verify_lyapunov_decrease(
        pr.plant.as_ref(),
        &pr.maps,
        &pr.terminal.k,
        &pr.terminal.p,
        &pr.q,
        level,
        &ys,
        cfg.terminal.samples,
        cfg.seed,
        tol,
    )
}
