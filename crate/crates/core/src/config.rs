//! TOML configuration of the four-tank pipeline.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equilibria::RegionShape;
use crate::error::{MpcError, Result};
use crate::fourtank;
use crate::linalg::from_rows;
use crate::model::FourTankParams;
use crate::ocp::SolverOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub plant: FourTankParams,
    pub controller: ControllerConfig,
    pub lipschitz: LipschitzConfig,
    pub setpoints: SetpointConfig,
    pub terminal: TerminalConfig,
    pub solver: SolverOptions,
    pub scenario: ScenarioConfig,
    pub batch: BatchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            plant: FourTankParams::default(),
            controller: ControllerConfig::default(),
            lipschitz: LipschitzConfig::default(),
            setpoints: SetpointConfig::default(),
            terminal: TerminalConfig::default(),
            solver: SolverOptions::default(),
            scenario: ScenarioConfig::default(),
            batch: BatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub t_diag: Vec<f64>,
    /// Feedback gain rows; synthesised when absent.
    pub k: Option<Vec<Vec<f64>>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: fourtank::HORIZON,
            q_diag: fourtank::Q_DIAG.to_vec(),
            r_diag: fourtank::R_DIAG.to_vec(),
            t_diag: fourtank::T_DIAG.to_vec(),
            k: Some(fourtank::K.iter().map(|r| r.to_vec()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LipschitzConfig {
    pub pairs: usize,
    pub verify_pairs: usize,
    pub safety_margin: f64,
    pub l_x: Option<Vec<Vec<f64>>>,
    pub l_v: Option<Vec<Vec<f64>>>,
    pub l_w: Option<Vec<Vec<f64>>>,
    /// Overrides `F(0) = L_w w̄` when present.
    pub f0: Option<Vec<f64>>,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            pairs: 20_000,
            verify_pairs: 100_000,
            safety_margin: 0.05,
            l_x: None,
            l_v: None,
            l_w: None,
            f0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetpointConfig {
    pub candidate_lower: Vec<f64>,
    pub candidate_upper: Vec<f64>,
    pub grid_density: usize,
    pub margin: f64,
    pub shape: RegionShape,
    /// Terminal level every kept setpoint must be able to host; when absent
    /// it is `reserve_factor` times the smallest invariant level.
    pub reserve_rho: Option<f64>,
    pub reserve_factor: f64,
    /// Region vertices; built from the grid when absent.
    pub vertices: Option<Vec<Vec<f64>>>,
}

impl Default for SetpointConfig {
    fn default() -> Self {
        Self {
            candidate_lower: vec![0.25, 0.25],
            candidate_upper: vec![0.85, 0.85],
            grid_density: 25,
            margin: 1e-6,
            shape: RegionShape::Hull,
            reserve_rho: None,
            reserve_factor: 1.5,
            vertices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    pub zeta: f64,
    /// Points per axis of the linearisation grid over the candidate rectangle.
    pub vertex_grid: usize,
    pub setpoint_density: usize,
    pub samples: usize,
    pub rho_min: f64,
    pub p: Option<Vec<Vec<f64>>>,
    pub rho: Option<f64>,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        Self {
            zeta: crate::terminal::DEFAULT_ZETA,
            vertex_grid: 5,
            setpoint_density: 7,
            samples: 10_000,
            rho_min: 1e-6,
            p: None,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start_min: f64,
    pub y_t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub x0: Vec<f64>,
    pub duration_min: f64,
    pub schedule: Vec<ScheduleEntry>,
    /// Constant disturbance of a single run.
    pub w: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            x0: fourtank::X0.to_vec(),
            duration_min: fourtank::RUN_MINUTES,
            schedule: fourtank::schedule()
                .into_iter()
                .map(|(t, y)| ScheduleEntry {
                    start_min: t,
                    y_t: y.to_vec(),
                })
                .collect(),
            w: vec![0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Values combined pairwise into `(w₁, w₂)`.
    pub w_values: Vec<f64>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            w_values: fourtank::W_GRID.to_vec(),
        }
    }
}

fn matrix(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    let m = from_rows(rows).map_err(|e| MpcError::Config(format!("{name}: {e}")))?;
    if m.nrows() != nrows || m.ncols() != ncols {
        return Err(MpcError::Config(format!(
            "{name} must be {nrows}×{ncols}, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

fn diag(name: &str, d: &[f64], len: usize) -> Result<DMatrix<f64>> {
    if d.len() != len {
        return Err(MpcError::Config(format!("{name} needs {len} entries, got {}", d.len())));
    }
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(MpcError::Config(format!("{name} entries must be positive")));
    }
    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| MpcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MpcError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MpcError::Config(e.to_string()))
    }

    /// Injects the published gain, cost, level and Lipschitz constants.
    pub fn inject_published_values(&mut self) {
        let rows = |m: &DMatrix<f64>| crate::linalg::to_rows(m);
        self.controller.k = Some(rows(&fourtank::k()));
        self.terminal.p = Some(rows(&fourtank::p()));
        self.terminal.rho = Some(fourtank::RHO);
        let l = fourtank::lipschitz();
        self.lipschitz.l_x = Some(rows(&l.l_x));
        self.lipschitz.l_v = Some(rows(&l.l_v));
        self.lipschitz.l_w = Some(rows(&l.l_w));
    }

    pub fn q(&self) -> Result<DMatrix<f64>> {
        diag("controller.q_diag", &self.controller.q_diag, 4)
    }

    pub fn r(&self) -> Result<DMatrix<f64>> {
        diag("controller.r_diag", &self.controller.r_diag, 2)
    }

    pub fn t(&self) -> Result<DMatrix<f64>> {
        diag("controller.t_diag", &self.controller.t_diag, 2)
    }

    pub fn k(&self) -> Result<Option<DMatrix<f64>>> {
        self.controller
            .k
            .as_ref()
            .map(|k| matrix("controller.k", k, 2, 4))
            .transpose()
    }

    pub fn p(&self) -> Result<Option<DMatrix<f64>>> {
        self.terminal
            .p
            .as_ref()
            .map(|p| matrix("terminal.p", p, 4, 4))
            .transpose()
    }

    /// Injected `(L_x, L_v, L_w)`, all three or none.
    pub fn lipschitz_matrices(&self) -> Result<Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>> {
        let l = &self.lipschitz;
        match (&l.l_x, &l.l_v, &l.l_w) {
            (None, None, None) => Ok(None),
            (Some(x), Some(v), Some(w)) => Ok(Some((
                matrix("lipschitz.l_x", x, 4, 4)?,
                matrix("lipschitz.l_v", v, 4, 2)?,
                matrix("lipschitz.l_w", w, 4, 2)?,
            ))),
            _ => Err(MpcError::Config(
                "lipschitz.l_x, l_v and l_w must be given together".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(MpcError::Config(m));
        self.plant
            .validate()
            .map_err(|e| MpcError::Config(format!("plant: {e}")))?;
        if self.controller.horizon == 0 {
            return cfg_err("controller.horizon must be at least 1".into());
        }
        self.q()?;
        self.r()?;
        self.t()?;
        self.k()?;
        self.p()?;
        self.lipschitz_matrices()?;
        if let Some(f0) = &self.lipschitz.f0 {
            if f0.len() != 4 || f0.iter().any(|v| !(*v >= 0.0)) {
                return cfg_err("lipschitz.f0 needs 4 non-negative entries".into());
            }
        }
        if !(self.lipschitz.safety_margin >= 0.0) || self.lipschitz.pairs == 0 {
            return cfg_err("lipschitz budget must be positive".into());
        }
        let sp = &self.setpoints;
        if sp.candidate_lower.len() != 2
            || sp.candidate_upper.len() != 2
            || sp.candidate_lower.iter().zip(&sp.candidate_upper).any(|(l, u)| !(l < u))
        {
            return cfg_err("setpoints candidate rectangle must be 2-D with lower < upper".into());
        }
        if sp.grid_density < 2
            || !(sp.margin > 0.0)
            || sp.reserve_rho.is_some_and(|r| !(r >= 0.0))
            || !(sp.reserve_factor >= 1.0)
        {
            return cfg_err("setpoints grid_density ≥ 2, margin > 0, reserve_rho ≥ 0, reserve_factor ≥ 1".into());
        }
        if let Some(v) = &sp.vertices {
            if v.len() < 3 || v.iter().any(|p| p.len() != 2) {
                return cfg_err("setpoints.vertices needs at least 3 points in 2-D".into());
            }
        }
        let t = &self.terminal;
        if !(t.zeta > 0.0 && t.zeta < 1.0) {
            return cfg_err("terminal.zeta must lie in (0, 1)".into());
        }
        if t.vertex_grid == 0 || t.setpoint_density == 0 || !(t.rho_min > 0.0) {
            return cfg_err("terminal grid sizes and rho_min must be positive".into());
        }
        if let Some(rho) = t.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return cfg_err("terminal.rho must be positive".into());
            }
        }
        let s = &self.scenario;
        if s.x0.len() != 4 {
            return cfg_err("scenario.x0 needs 4 entries".into());
        }
        if s.w.len() != 2 {
            return cfg_err("scenario.w needs 2 entries".into());
        }
        if s.w.iter().zip(&self.plant.w_bar).any(|(w, b)| w.abs() > *b) {
            return cfg_err("scenario.w lies outside the disturbance box".into());
        }
        if s.schedule.is_empty() || s.schedule[0].start_min != 0.0 {
            return cfg_err("scenario.schedule must start at minute 0".into());
        }
        if s.schedule.windows(2).any(|w| !(w[1].start_min > w[0].start_min)) {
            return cfg_err("scenario.schedule times must increase strictly".into());
        }
        if s.schedule.iter().any(|e| e.y_t.len() != 2) {
            return cfg_err("scenario.schedule targets need 2 entries".into());
        }
        if !(s.duration_min > s.schedule.last().map_or(0.0, |e| e.start_min)) {
            return cfg_err("scenario.duration_min must exceed the last schedule time".into());
        }
        if self.batch.w_values.is_empty()
            || self
                .batch
                .w_values
                .iter()
                .any(|w| w.abs() > self.plant.w_bar[0].min(self.plant.w_bar[1]))
        {
            return cfg_err("batch.w_values must be non-empty and inside the disturbance box".into());
        }
        if self.solver.feasibility_tol <= 0.0 || self.solver.stationarity_tol <= 0.0 {
            return cfg_err("solver tolerances must be positive".into());
        }
        Ok(())
    }
}
