//! Closed-loop simulation harness, scenario batches and trace metrics.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{check_dim, MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::ocp::{Candidate, SolveStatus, TrackingProblem};

/// `W(k+1) ≤ W(k) + W_DESCENT_TOL` is required along nominal runs.
pub const W_DESCENT_TOL: f64 = 1e-8;
/// States this close to `g_x(y_s*)` are treated as converged.
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Disturbance {
    Constant(Vec<f64>),
    Sequence(Vec<Vec<f64>>),
}

impl Disturbance {
    /// Independent uniform draws from the disturbance box.
    pub fn random_sequence(w_box: &Hyperbox, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = (0..steps)
            .map(|_| {
                w_box
                    .lower()
                    .iter()
                    .zip(w_box.upper())
                    .map(|(l, u)| if u > l { rng.random_range(*l..=*u) } else { *l })
                    .collect()
            })
            .collect();
        Disturbance::Sequence(seq)
    }

    fn at(&self, k: usize) -> &[f64] {
        match self {
            Disturbance::Constant(w) => w,
            Disturbance::Sequence(s) => &s[k.min(s.len() - 1)],
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Disturbance::Constant(w) => w.iter().all(|v| *v == 0.0),
            Disturbance::Sequence(s) => s.iter().flatten().all(|v| *v == 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub w: Disturbance,
    pub x0: Vec<f64>,
    /// `(start minute, y_t)`, strictly increasing from minute 0.
    pub schedule: Vec<(f64, Vec<f64>)>,
    pub duration_min: f64,
    /// Sampling period in seconds.
    pub sample_time: f64,
}

impl Scenario {
    pub fn new(
        w: Disturbance,
        x0: Vec<f64>,
        schedule: Vec<(f64, Vec<f64>)>,
        duration_min: f64,
        sample_time: f64,
    ) -> Result<Self> {
        let s = Self {
            w,
            x0,
            schedule,
            duration_min,
            sample_time,
        };
        if s.schedule.is_empty() || s.schedule[0].0 != 0.0 {
            return Err(MpcError::InvalidParameter("schedule must start at minute 0".into()));
        }
        if s.schedule.windows(2).any(|p| !(p[1].0 > p[0].0)) {
            return Err(MpcError::InvalidParameter("schedule times must increase strictly".into()));
        }
        if !(s.sample_time > 0.0 && s.duration_min > 0.0) {
            return Err(MpcError::InvalidParameter("duration and sample time must be positive".into()));
        }
        if let Disturbance::Sequence(seq) = &s.w {
            if seq.len() < s.steps() {
                return Err(MpcError::InvalidParameter(format!(
                    "disturbance sequence has {} entries for {} steps",
                    seq.len(),
                    s.steps()
                )));
            }
        }
        Ok(s)
    }

    /// Base scenario of a configuration with the constant disturbance `w`.
    pub fn from_config(cfg: &Config, w: Vec<f64>) -> Result<Self> {
        Self::new(
            Disturbance::Constant(w),
            cfg.scenario.x0.clone(),
            cfg.scenario
                .schedule
                .iter()
                .map(|e| (e.start_min, e.y_t.clone()))
                .collect(),
            cfg.scenario.duration_min,
            cfg.plant.sample_time,
        )
    }

    pub fn steps(&self) -> usize {
        (self.duration_min * 60.0 / self.sample_time).round() as usize
    }

    /// Schedule segment active at step `k` (changes apply at the start of a step).
    pub fn segment_at(&self, k: usize) -> usize {
        let t = k as f64 * self.sample_time / 60.0;
        self.schedule
            .iter()
            .rposition(|(start, _)| *start <= t + 1e-9)
            .unwrap_or(0)
    }

    /// Step index at which each segment starts.
    pub fn segment_starts(&self) -> Vec<usize> {
        self.schedule
            .iter()
            .map(|(start, _)| (start * 60.0 / self.sample_time).round() as usize)
            .collect()
    }

    fn check(&self, problem: &TrackingProblem) -> Result<()> {
        let plant = &problem.plant;
        check_dim("scenario x0", plant.state_dim(), self.x0.len())?;
        let w_box = plant.dist_box();
        let steps = self.steps();
        for k in 0..steps {
            let w = self.w.at(k);
            check_dim("scenario disturbance", plant.dist_dim(), w.len())?;
            if !w_box.contains(w) {
                return Err(MpcError::InvalidParameter(format!(
                    "disturbance {w:?} at step {k} lies outside W"
                )));
            }
        }
        for (_, y) in &self.schedule {
            check_dim("scenario target", plant.output_dim(), y.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    Optimal,
    MaxIter,
    FallbackCandidate,
    /// The solver failed; the shifted candidate was applied.
    Infeasible,
}

impl From<SolveStatus> for StepStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Optimal => StepStatus::Optimal,
            SolveStatus::MaxIter => StepStatus::MaxIter,
            SolveStatus::FallbackCandidate => StepStatus::FallbackCandidate,
        }
    }
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIter => "max-iter",
            StepStatus::FallbackCandidate => "fallback-candidate",
            StepStatus::Infeasible => "infeasible",
        })
    }
}

impl std::str::FromStr for StepStatus {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(StepStatus::Optimal),
            "max-iter" => Ok(StepStatus::MaxIter),
            "fallback-candidate" => Ok(StepStatus::FallbackCandidate),
            "infeasible" => Ok(StepStatus::Infeasible),
            other => Err(MpcError::InvalidParameter(format!("unknown step status {other:?}"))),
        }
    }
}

/// One closed-loop step: the state `x(k)`, the applied input `u(k)` and the
/// optimiser data behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t_min: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_t: Vec<f64>,
    pub y_s: Vec<f64>,
    pub cost: f64,
    pub w_value: f64,
    pub status: StepStatus,
    /// Smallest slack of `x(k)` and `u(k)` in the raw constraint boxes.
    pub min_slack: f64,
    pub disturbance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<StepRecord>,
    pub final_state: Vec<f64>,
}

impl Trace {
    /// State sequence `x(0), …, x(K)`.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut s: Vec<Vec<f64>> = self.records.iter().map(|r| r.x.clone()).collect();
        s.push(self.final_state.clone());
        s
    }
}

/// Applied input: the policy output, with excursions no larger than the
/// solver feasibility tolerance projected back onto the raw input box.
fn applied_input(u: DVector<f64>, input_box: &Hyperbox, tol: f64) -> DVector<f64> {
    let clamped = DVector::from_vec(input_box.clamp(u.as_slice()));
    if (&clamped - &u).amax() <= tol {
        clamped
    } else {
        u
    }
}

/// Runs the receding-horizon loop of a scenario.
pub fn run_closed_loop(problem: &TrackingProblem, scenario: &Scenario) -> Result<Trace> {
    scenario.check(problem)?;
    let plant = &problem.plant;
    let zero_u = DVector::zeros(plant.input_dim());
    let steps = scenario.steps();
    let targets: Vec<DVector<f64>> = scenario
        .schedule
        .iter()
        .map(|(_, y)| DVector::from_column_slice(y))
        .collect();
    let offsets: Vec<f64> = targets
        .iter()
        .map(|y| problem.best_offset_cost(y).map(|(_, c)| c))
        .collect::<Result<_>>()?;
    let mut x = DVector::from_column_slice(&scenario.x0);
    let mut warm: Option<Candidate> = None;
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let seg = scenario.segment_at(k);
        let y_t = &targets[seg];
        let (u, y_s, cost, status) = match problem.control_law(&x, y_t, warm.as_ref()) {
            Ok((u, sol)) => {
                warm = Some(problem.shift_candidate(&sol)?);
                (u, sol.y_s.clone(), sol.cost, StepStatus::from(sol.status))
            }
            Err(e) => {
                let Some(cand) = warm.clone() else {
                    return Err(MpcError::ScenarioInfeasible(format!("first solve failed: {e}")));
                };
                log::warn!("step {k}: solver failed ({e}); applying the shifted candidate");
                let x_s = problem.maps.g_x(&cand.y_s)?;
                let u = problem.policy.apply(&x, &x_s, &cand.v_seq[0]);
                let (cost, _) = problem.assess(&x, y_t, &cand).unwrap_or((f64::NAN, f64::NAN));
                let mut v_seq: Vec<DVector<f64>> = cand.v_seq.iter().skip(1).cloned().collect();
                v_seq.push(problem.maps.g_v(&cand.y_s)?);
                warm = Some(Candidate {
                    v_seq,
                    y_s: cand.y_s.clone(),
                });
                (u, cand.y_s, cost, StepStatus::Infeasible)
            }
        };
        let u = applied_input(u, plant.input_box(), problem.options.feasibility_tol);
        let w = DVector::from_column_slice(scenario.w.at(k));
        let min_slack = plant
            .state_box()
            .min_slack(x.as_slice())
            .min(plant.input_box().min_slack(u.as_slice()));
        let next = plant.step(&x, &u, &w)?;
        records.push(StepRecord {
            k,
            t_min: k as f64 * scenario.sample_time / 60.0,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            y: plant.output(&x, &zero_u).as_slice().to_vec(),
            y_t: y_t.as_slice().to_vec(),
            y_s: y_s.as_slice().to_vec(),
            cost,
            w_value: cost - offsets[seg],
            status,
            min_slack,
            disturbance: w.as_slice().to_vec(),
        });
        x = next;
    }
    Ok(Trace {
        records,
        final_state: x.as_slice().to_vec(),
    })
}

/// Re-runs the recorded inputs and disturbances through the plant; true iff
/// every state is reproduced bit for bit.
pub fn replay(problem: &TrackingProblem, trace: &Trace) -> Result<bool> {
    let states = trace.states();
    for (i, r) in trace.records.iter().enumerate() {
        let next = problem.plant.step(
            &DVector::from_column_slice(&r.x),
            &DVector::from_column_slice(&r.u),
            &DVector::from_column_slice(&r.disturbance),
        )?;
        if next.as_slice() != states[i + 1].as_slice() {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub y_t: Vec<f64>,
    pub y_s_star: Vec<f64>,
    pub start_step: usize,
    pub end_step: usize,
    /// `‖y − y_s*‖` at the end of the segment.
    pub final_error: f64,
    /// Largest raw-constraint excess (0 when all constraints hold).
    pub max_violation: f64,
    pub violations: usize,
    pub fallback_steps: usize,
    pub infeasible_steps: usize,
    pub w_descent_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub segments: Vec<SegmentMetrics>,
    pub steps: usize,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub fallback_steps: usize,
    pub feasible_to_infeasible: usize,
    /// Counted on nominal runs only.
    pub w_descent_violations: usize,
    pub nominal: bool,
}

pub fn compute_metrics(trace: &Trace, scenario: &Scenario, problem: &TrackingProblem) -> Result<Metrics> {
    let states = trace.states();
    let zero_u = DVector::zeros(problem.plant.input_dim());
    let nominal = scenario.w.is_zero();
    let starts = scenario.segment_starts();
    let total = trace.records.len();
    let mut segments = Vec::with_capacity(starts.len());
    for (i, (_, y)) in scenario.schedule.iter().enumerate() {
        let start = starts[i].min(total);
        let end = starts.get(i + 1).copied().unwrap_or(total).min(total);
        if start >= end {
            continue;
        }
        let y_t = DVector::from_column_slice(y);
        let (y_star, _) = problem.best_offset_cost(&y_t)?;
        let x_star = problem.maps.g_x(&y_star)?;
        let y_end = problem
            .plant
            .output(&DVector::from_column_slice(&states[end]), &zero_u);
        let recs = &trace.records[start..end];
        let mut w_viol = 0;
        if nominal {
            for pair in recs.windows(2) {
                let dist = (DVector::from_column_slice(&pair[0].x) - &x_star).norm();
                if dist > CONVERGENCE_TOL && pair[1].w_value > pair[0].w_value + W_DESCENT_TOL {
                    w_viol += 1;
                }
            }
        }
        segments.push(SegmentMetrics {
            y_t: y.clone(),
            y_s_star: y_star.as_slice().to_vec(),
            start_step: start,
            end_step: end,
            final_error: (y_end - &y_star).norm(),
            max_violation: recs.iter().map(|r| (-r.min_slack).max(0.0)).fold(0.0, f64::max),
            violations: recs.iter().filter(|r| r.min_slack < 0.0).count(),
            fallback_steps: recs
                .iter()
                .filter(|r| r.status == StepStatus::FallbackCandidate)
                .count(),
            infeasible_steps: recs.iter().filter(|r| r.status == StepStatus::Infeasible).count(),
            w_descent_violations: w_viol,
        });
    }
    let final_ok = problem
        .plant
        .state_box()
        .min_slack(&trace.final_state)
        >= 0.0;
    let violations = trace.records.iter().filter(|r| r.min_slack < 0.0).count() + usize::from(!final_ok);
    let feasible_to_infeasible = trace
        .records
        .windows(2)
        .filter(|p| p[0].status != StepStatus::Infeasible && p[1].status == StepStatus::Infeasible)
        .count();
    Ok(Metrics {
        steps: total,
        violations,
        infeasible_steps: segments.iter().map(|s| s.infeasible_steps).sum(),
        fallback_steps: segments.iter().map(|s| s.fallback_steps).sum(),
        feasible_to_infeasible,
        w_descent_violations: segments.iter().map(|s| s.w_descent_violations).sum(),
        nominal,
        segments,
    })
}

/// Per-step minimum and maximum of every state and input over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub t_min: Vec<f64>,
    pub x_min: Vec<Vec<f64>>,
    pub x_max: Vec<Vec<f64>>,
    pub u_min: Vec<Vec<f64>>,
    pub u_max: Vec<Vec<f64>>,
}

impl Envelope {
    fn from_traces(traces: &[Trace]) -> Self {
        let steps = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
        let mut env = Envelope {
            t_min: Vec::with_capacity(steps),
            x_min: Vec::with_capacity(steps),
            x_max: Vec::with_capacity(steps),
            u_min: Vec::with_capacity(steps),
            u_max: Vec::with_capacity(steps),
        };
        let fold = |vals: &mut dyn Iterator<Item = &Vec<f64>>, pick: fn(f64, f64) -> f64| {
            let mut acc: Option<Vec<f64>> = None;
            for v in vals {
                acc = Some(match acc {
                    None => v.clone(),
                    Some(a) => a.iter().zip(v).map(|(a, b)| pick(*a, *b)).collect(),
                });
            }
            acc.unwrap_or_default()
        };
        for k in 0..steps {
            env.t_min.push(traces[0].records[k].t_min);
            env.x_min.push(fold(&mut traces.iter().map(|t| &t.records[k].x), f64::min));
            env.x_max.push(fold(&mut traces.iter().map(|t| &t.records[k].x), f64::max));
            env.u_min.push(fold(&mut traces.iter().map(|t| &t.records[k].u), f64::min));
            env.u_max.push(fold(&mut traces.iter().map(|t| &t.records[k].u), f64::max));
        }
        env
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub w: Vec<f64>,
    pub trace: Trace,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub runs: Vec<BatchRun>,
    pub total_steps: usize,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub fallback_steps: usize,
    pub feasible_to_infeasible: usize,
    /// Share of steps whose optimiser returned a feasible solution.
    pub feasibility_rate: f64,
    pub nominal_w_descent_violations: usize,
    /// Per segment, the largest final `‖y − y_s*‖` over the batch.
    pub max_final_error: Vec<f64>,
    pub envelope: Envelope,
}

/// All `(w₁, w₂)` combinations of a value grid.
pub fn grid_pairs(values: &[f64]) -> Vec<Vec<f64>> {
    values
        .iter()
        .flat_map(|a| values.iter().map(move |b| vec![*a, *b]))
        .collect()
}

/// Runs the base scenario once per disturbance, in parallel.
pub fn run_batch(problem: &TrackingProblem, base: &Scenario, w_grid: &[Vec<f64>]) -> Result<BatchReport> {
    let runs: Vec<BatchRun> = w_grid
        .par_iter()
        .map(|w| {
            let mut sc = base.clone();
            sc.w = Disturbance::Constant(w.clone());
            let trace = run_closed_loop(problem, &sc)?;
            let metrics = compute_metrics(&trace, &sc, problem)?;
            Ok(BatchRun {
                w: w.clone(),
                trace,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let total_steps: usize = runs.iter().map(|r| r.metrics.steps).sum();
    let infeasible_steps: usize = runs.iter().map(|r| r.metrics.infeasible_steps).sum();
    let nseg = runs.first().map_or(0, |r| r.metrics.segments.len());
    let max_final_error = (0..nseg)
        .map(|i| {
            runs.iter()
                .filter_map(|r| r.metrics.segments.get(i).map(|s| s.final_error))
                .fold(0.0, f64::max)
        })
        .collect();
    let traces: Vec<Trace> = runs.iter().map(|r| r.trace.clone()).collect();
    Ok(BatchReport {
        total_steps,
        violations: runs.iter().map(|r| r.metrics.violations).sum(),
        infeasible_steps,
        fallback_steps: runs.iter().map(|r| r.metrics.fallback_steps).sum(),
        feasible_to_infeasible: runs.iter().map(|r| r.metrics.feasible_to_infeasible).sum(),
        feasibility_rate: if total_steps == 0 {
            1.0
        } else {
            1.0 - infeasible_steps as f64 / total_steps as f64
        },
        nominal_w_descent_violations: runs
            .iter()
            .filter(|r| r.metrics.nominal)
            .map(|r| r.metrics.w_descent_violations)
            .sum(),
        max_final_error,
        envelope: Envelope::from_traces(&traces),
        runs,
    })
}
