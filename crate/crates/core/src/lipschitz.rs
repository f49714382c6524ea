//! Component-wise Lipschitz constants of the closed-loop prediction map.
//!
//! For the map `φ(x, v, w) = f(x, π(y_s, x, v), w)` the constants satisfy,
//! row by row,
//!
//! ```text
//! |φ_i(x,v,w) − φ_i(x',v',w')| ≤ Σ_a Lx[i][a]|Δx_a| + Σ_b Lv[i][b]|Δv_b| + Σ_c Lw[i][c]|Δw_c|
//! ```
//!
//! The residual `e_i` is the largest left-minus-right gap over a pair sample;
//! a candidate is certified when every `e_i ≤ 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibria::EquilibriumMaps;
use crate::error::{check_dim, MpcError, Result};
use crate::hyperbox::Hyperbox;
use crate::model::Plant;
use crate::policy::AffinePolicy;

/// Certification tolerance on the residual.
pub const CERT_TOL: f64 = 1e-9;

const DECAY: f64 = 0.95;
const BISECTION_STEPS: usize = 8;
const BOUNDARY_PROB: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub samples: usize,
    pub max_residual: Vec<f64>,
    pub seed: u64,
    pub safety_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzMatrices {
    pub l_x: DMatrix<f64>,
    pub l_v: DMatrix<f64>,
    pub l_w: DMatrix<f64>,
    pub certificate: Option<Certificate>,
}

impl LipschitzMatrices {
    pub fn new(l_x: DMatrix<f64>, l_v: DMatrix<f64>, l_w: DMatrix<f64>) -> Result<Self> {
        let n = l_x.nrows();
        check_dim("L_x columns", n, l_x.ncols())?;
        check_dim("L_v rows", n, l_v.nrows())?;
        check_dim("L_w rows", n, l_w.nrows())?;
        if l_x.iter().chain(l_v.iter()).chain(l_w.iter()).any(|v| !(*v >= 0.0)) {
            return Err(MpcError::InvalidParameter(
                "Lipschitz constants must be non-negative".into(),
            ));
        }
        Ok(Self {
            l_x,
            l_v,
            l_w,
            certificate: None,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            l_x: &self.l_x * factor,
            l_v: &self.l_v * factor,
            l_w: &self.l_w * factor,
            certificate: None,
        }
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.l_x
            .row(i)
            .iter()
            .chain(self.l_v.row(i).iter())
            .chain(self.l_w.row(i).iter())
            .cloned()
            .collect()
    }
}

/// Sampling domain: states in `state_box`, plant inputs in `input_box`,
/// disturbances in `dist_box` and setpoints in `setpoints`.
#[derive(Debug, Clone)]
pub struct SamplingRegion {
    pub state_box: Hyperbox,
    pub input_box: Hyperbox,
    pub dist_box: Hyperbox,
    pub setpoints: Hyperbox,
}

impl SamplingRegion {
    pub fn from_plant(plant: &dyn Plant, setpoints: Hyperbox) -> Self {
        Self {
            state_box: plant.state_box().clone(),
            input_box: plant.input_box().clone(),
            dist_box: plant.dist_box().clone(),
            setpoints,
        }
    }
}

/// One sampled point of the closed-loop map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub y_s: Vec<f64>,
    pub first: SamplePoint,
    pub second: SamplePoint,
}

/// Pair sample stored as absolute differences, one column per pair.
#[derive(Debug, Clone)]
pub struct PairSet {
    /// `[|Δx|; |Δv|; |Δw|]`, one column per pair.
    pub features: DMatrix<f64>,
    /// `|Δφ|`, one column per pair.
    pub targets: DMatrix<f64>,
    pub witnesses: Vec<Witness>,
    pub dims: (usize, usize, usize),
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn draw_coord(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<f64>() < BOUNDARY_PROB {
        if rng.random::<bool>() {
            lo
        } else {
            hi
        }
    } else {
        lo + rng.random::<f64>() * (hi - lo)
    }
}

fn draw_box(b: &Hyperbox, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        b.dim(),
        b.lower()
            .iter()
            .zip(b.upper())
            .map(|(l, u)| draw_coord(*l, *u, rng)),
    )
}

fn local_perturb(b: &Hyperbox, base: &DVector<f64>, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let widths: Vec<f64> = b.lower().iter().zip(b.upper()).map(|(l, u)| u - l).collect();
    let p: Vec<f64> = base
        .iter()
        .zip(&widths)
        .map(|(x, w)| x + scale * w * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    DVector::from_vec(b.clamp(&p))
}

#[derive(Clone, Copy)]
enum PairKind {
    AlignedX(usize),
    AlignedV(usize),
    AlignedW(usize),
    Random,
    Local,
}

/// Draws `count` admissible pairs deterministically from `seed`.
pub fn sample_pairs(
    plant: &dyn Plant,
    policy: &AffinePolicy,
    maps: &EquilibriumMaps,
    region: &SamplingRegion,
    count: usize,
    seed: u64,
) -> Result<PairSet> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    let r = plant.dist_dim();
    policy.check(n, m)?;
    check_dim("sampling state box", n, region.state_box.dim())?;
    check_dim("sampling input box", m, region.input_box.dim())?;
    check_dim("sampling disturbance box", r, region.dist_box.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(n + m + r, count);
    let mut targets = DMatrix::zeros(n, count);
    let mut witnesses = Vec::with_capacity(count);
    let mut filled = 0;
    let mut attempts = 0usize;
    let max_attempts = 200 * count.max(100);
    let ubox = &region.input_box;
    while filled < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(MpcError::InvalidParameter(format!(
                "could only draw {filled} of {count} admissible sample pairs"
            )));
        }
        let ys = draw_box(&region.setpoints, &mut rng);
        let Ok(eq) = maps.eval_raw(&ys) else {
            continue;
        };
        let xs = eq.x;
        let x1 = draw_box(&region.state_box, &mut rng);
        let u1 = draw_box(ubox, &mut rng);
        let v1 = policy.free_input(&u1, &x1, &xs);
        let w1 = draw_box(&region.dist_box, &mut rng);

        let roll = rng.random::<f64>();
        let kind = if roll < 0.4 {
            let k = rng.random_range(0..n + m + r);
            if k < n {
                PairKind::AlignedX(k)
            } else if k < n + m {
                PairKind::AlignedV(k - n)
            } else {
                PairKind::AlignedW(k - n - m)
            }
        } else if roll < 0.7 {
            PairKind::Random
        } else {
            PairKind::Local
        };
        // Half of the aligned pairs move a short distance.
        let short = rng.random::<bool>();
        let scale = 10f64.powf(-3.0 + 2.0 * rng.random::<f64>());
        let (mut x2, mut v2, mut w2) = (x1.clone(), v1.clone(), w1.clone());
        match kind {
            PairKind::AlignedX(a) => {
                let (lo, hi) = (region.state_box.lower()[a], region.state_box.upper()[a]);
                x2[a] = if short {
                    (x1[a] + scale * (hi - lo) * (2.0 * rng.random::<f64>() - 1.0)).clamp(lo, hi)
                } else {
                    draw_coord(lo, hi, &mut rng)
                };
            }
            PairKind::AlignedV(b) => {
                let (lo, hi) = (ubox.lower()[b], ubox.upper()[b]);
                let target = if short {
                    (u1[b] + scale * (hi - lo) * (2.0 * rng.random::<f64>() - 1.0)).clamp(lo, hi)
                } else {
                    draw_coord(lo, hi, &mut rng)
                };
                v2[b] += target - u1[b];
            }
            PairKind::AlignedW(c) => {
                let (lo, hi) = (region.dist_box.lower()[c], region.dist_box.upper()[c]);
                w2[c] = if short {
                    (w1[c] + scale * (hi - lo) * (2.0 * rng.random::<f64>() - 1.0)).clamp(lo, hi)
                } else {
                    draw_coord(lo, hi, &mut rng)
                };
            }
            PairKind::Random => {
                x2 = draw_box(&region.state_box, &mut rng);
                let u2 = draw_box(ubox, &mut rng);
                v2 = policy.free_input(&u2, &x2, &xs);
                w2 = draw_box(&region.dist_box, &mut rng);
            }
            PairKind::Local => {
                x2 = local_perturb(&region.state_box, &x1, scale, &mut rng);
                let u2 = local_perturb(ubox, &u1, scale, &mut rng);
                v2 = v1.clone() + (u2 - &u1);
                w2 = local_perturb(&region.dist_box, &w1, scale, &mut rng);
            }
        }
        let u2 = policy.apply(&x2, &xs, &v2);
        if !ubox.contains_vec(&u2) {
            continue;
        }
        let u1c = policy.apply(&x1, &xs, &v1);
        let (Ok(f1), Ok(f2)) = (plant.step(&x1, &u1c, &w1), plant.step(&x2, &u2, &w2)) else {
            continue;
        };
        let mut col = features.column_mut(filled);
        for a in 0..n {
            col[a] = (x1[a] - x2[a]).abs();
        }
        for b in 0..m {
            col[n + b] = (v1[b] - v2[b]).abs();
        }
        for c in 0..r {
            col[n + m + c] = (w1[c] - w2[c]).abs();
        }
        for i in 0..n {
            targets[(i, filled)] = (f1[i] - f2[i]).abs();
        }
        witnesses.push(Witness {
            y_s: ys.iter().cloned().collect(),
            first: SamplePoint {
                x: x1.iter().cloned().collect(),
                v: v1.iter().cloned().collect(),
                w: w1.iter().cloned().collect(),
            },
            second: SamplePoint {
                x: x2.iter().cloned().collect(),
                v: v2.iter().cloned().collect(),
                w: w2.iter().cloned().collect(),
            },
        });
        filled += 1;
    }
    Ok(PairSet {
        features,
        targets,
        witnesses,
        dims: (n, m, r),
    })
}

/// Worst residual of row `i` for the row vector `theta`, with its pair index.
pub fn row_residual(pairs: &PairSet, i: usize, theta: &[f64]) -> (f64, Option<usize>) {
    let mut worst = f64::NEG_INFINITY;
    let mut arg = None;
    for p in 0..pairs.len() {
        let col = pairs.features.column(p);
        let bound: f64 = col.iter().zip(theta).map(|(a, t)| a * t).sum();
        let e = pairs.targets[(i, p)] - bound;
        if e > worst {
            worst = e;
            arg = Some(p);
        }
    }
    (worst, arg)
}

/// Shrinks one row of constants by multiplicative decay plus bisection.
pub fn estimate_row(pairs: &PairSet, i: usize) -> Result<Vec<f64>> {
    let k = pairs.features.nrows();
    let np = pairs.len();
    // Uniform starting value that certifies by construction.
    let mut start: f64 = 0.0;
    for p in 0..np {
        let total: f64 = pairs.features.column(p).sum();
        let b = pairs.targets[(i, p)];
        if total == 0.0 {
            if b > 0.0 {
                return Err(MpcError::NotLipschitz { row: i, residual: b });
            }
            continue;
        }
        start = start.max(b / total);
    }
    let mut theta = vec![2.0 * start; k];
    let mut resid: Vec<f64> = (0..np)
        .map(|p| {
            let bound: f64 = pairs
                .features
                .column(p)
                .iter()
                .zip(&theta)
                .map(|(a, t)| a * t)
                .sum();
            pairs.targets[(i, p)] - bound
        })
        .collect();
    let initial = resid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if initial > CERT_TOL {
        return Err(MpcError::NotLipschitz {
            row: i,
            residual: initial,
        });
    }
    // max_p resid_p + (θ_e − trial)·a_pe
    let trial_worst = |resid: &[f64], e: usize, delta: f64| -> f64 {
        resid
            .iter()
            .enumerate()
            .map(|(p, r)| r + delta * pairs.features[(e, p)])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    for e in 0..k {
        let current = theta[e];
        if current == 0.0 {
            continue;
        }
        let mut ok = current;
        let mut bad = None;
        loop {
            let trial = ok * DECAY;
            if trial < 1e-12 * start.max(1e-300) {
                if trial_worst(&resid, e, current) <= 0.0 {
                    ok = 0.0;
                } else {
                    bad = Some(trial);
                }
                break;
            }
            if trial_worst(&resid, e, current - trial) <= 0.0 {
                ok = trial;
            } else {
                bad = Some(trial);
                break;
            }
        }
        if let Some(mut lo) = bad {
            let mut hi = ok;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if trial_worst(&resid, e, current - mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            ok = hi;
        }
        let delta = current - ok;
        for (p, r) in resid.iter_mut().enumerate() {
            *r += delta * pairs.features[(e, p)];
        }
        theta[e] = ok;
    }
    Ok(theta)
}

fn assemble(rows: Vec<Vec<f64>>, dims: (usize, usize, usize)) -> LipschitzMatrices {
    let (n, m, r) = dims;
    LipschitzMatrices {
        l_x: DMatrix::from_fn(n, n, |i, a| rows[i][a]),
        l_v: DMatrix::from_fn(n, m, |i, b| rows[i][n + b]),
        l_w: DMatrix::from_fn(n, r, |i, c| rows[i][n + m + c]),
        certificate: None,
    }
}

/// Estimation controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationBudget {
    pub pairs: usize,
    pub verify_pairs: usize,
    pub safety_margin: f64,
    pub seed: u64,
}

impl Default for EstimationBudget {
    fn default() -> Self {
        Self {
            pairs: 20_000,
            verify_pairs: 100_000,
            safety_margin: 0.05,
            seed: 1,
        }
    }
}

/// Estimates certified constants: per-row coordinate descent on one pair
/// sample, a multiplicative safety margin, then verification on a fresh
/// sample. The margin doubles (up to five times) if verification fails.
pub fn estimate_constants(
    plant: &dyn Plant,
    policy: &AffinePolicy,
    maps: &EquilibriumMaps,
    region: &SamplingRegion,
    budget: &EstimationBudget,
) -> Result<LipschitzMatrices> {
    let pairs = sample_pairs(plant, policy, maps, region, budget.pairs, budget.seed)?;
    let rows: Vec<Vec<f64>> = (0..plant.state_dim())
        .into_par_iter()
        .map(|i| estimate_row(&pairs, i))
        .collect::<Result<_>>()?;
    let raw = assemble(rows, pairs.dims);
    let fresh = sample_pairs(
        plant,
        policy,
        maps,
        region,
        budget.verify_pairs,
        budget.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
    )?;
    let mut margin = budget.safety_margin;
    for _ in 0..6 {
        let mut cand = raw.scaled(1.0 + margin);
        let report = residual_report(&fresh, &cand);
        if report.passed {
            cand.certificate = Some(Certificate {
                samples: fresh.len(),
                max_residual: report.rows.iter().map(|r| r.max_residual).collect(),
                seed: budget.seed,
                safety_margin: margin,
            });
            return Ok(cand);
        }
        log::warn!(
            "Lipschitz verification failed with margin {margin}; worst residual {:.3e}",
            report.worst()
        );
        margin = if margin > 0.0 { 2.0 * margin } else { 0.01 };
    }
    Err(MpcError::NotLipschitz {
        row: residual_report(&fresh, &raw.scaled(1.0 + margin)).worst_row(),
        residual: residual_report(&fresh, &raw.scaled(1.0 + margin)).worst(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub max_residual: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub rows: Vec<RowResidual>,
    pub samples: usize,
    pub passed: bool,
}

impl ResidualReport {
    pub fn worst(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.max_residual)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_row(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_residual.total_cmp(&b.1.max_residual))
            .map_or(0, |(i, _)| i)
    }
}

pub fn residual_report(pairs: &PairSet, cand: &LipschitzMatrices) -> ResidualReport {
    let rows: Vec<RowResidual> = (0..pairs.dims.0)
        .into_par_iter()
        .map(|i| {
            let (e, arg) = row_residual(pairs, i, &cand.row(i));
            RowResidual {
                max_residual: e,
                witness: arg.map(|p| pairs.witnesses[p].clone()),
            }
        })
        .collect();
    let passed = rows.iter().all(|r| r.max_residual <= CERT_TOL);
    ResidualReport {
        rows,
        samples: pairs.len(),
        passed,
    }
}

/// Residual report of `candidate` on a fresh sample of `samples` pairs.
pub fn verify_constants(
    plant: &dyn Plant,
    policy: &AffinePolicy,
    maps: &EquilibriumMaps,
    region: &SamplingRegion,
    candidate: &LipschitzMatrices,
    samples: usize,
    seed: u64,
) -> Result<ResidualReport> {
    let (n, m, r) = (plant.state_dim(), plant.input_dim(), plant.dist_dim());
    check_dim("L_x rows", n, candidate.l_x.nrows())?;
    check_dim("L_v columns", m, candidate.l_v.ncols())?;
    check_dim("L_w columns", r, candidate.l_w.ncols())?;
    let pairs = sample_pairs(plant, policy, maps, region, samples, seed)?;
    Ok(residual_report(&pairs, candidate))
}
