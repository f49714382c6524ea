//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use tubempc::config::Config;
use tubempc::design::{build_design, candidate_box, Design};
use tubempc::equilibria::EquilibriumMaps;
use tubempc::fourtank;
use tubempc::hyperbox::Hyperbox;
use tubempc::io;
use tubempc::lipschitz::{estimate_constants, verify_constants, EstimationBudget, SamplingRegion};
use tubempc::model::{LinearPlant, Plant};
use tubempc::policy::AffinePolicy;
use tubempc::sim::{compute_metrics, grid_pairs, run_batch, run_closed_loop, Disturbance, Scenario};
use tubempc::terminal::verify_lyapunov_decrease;
use tubempc::tubes::build_tubes_from_f0;

/// Largest final `‖y − best_setpoint(y_t)‖` accepted for the unreachable
/// target, frozen from the reference batch (observed maximum 0.01734).
const FROZEN_RADIUS: f64 = 0.018;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

/// Published tube table from the published `L_x` and `F(0)`.
fn c1_tube_table() -> Outcome {
    let start = Instant::now();
    let l = fourtank::lipschitz();
    let tubes = build_tubes_from_f0(&l.l_x, &fourtank::published_f0(), 4).unwrap();
    let (mut worst, mut at) = (0.0f64, String::new());
    for i in 0..4 {
        for j in 1..=4 {
            for (name, got, want) in [
                ("F", tubes.c[i][j], fourtank::TUBE_F[i][j]),
                ("R", tubes.d[i][j], fourtank::TUBE_R[i][j]),
            ] {
                let err = (got - want).abs();
                if err > worst {
                    worst = err;
                    at = format!("{name}({j}) row {}: {got:.5} vs {want}", i + 1);
                }
            }
        }
    }
    let el = start.elapsed();
    outcome(
        worst <= 5e-5 && within(el, Duration::from_secs(1)),
        format!("max abs error {worst:.2e} at {at}"),
    )
}

/// `F(j) ⊕ R(j) = R(j+1)` and monotone `R` on random instances.
fn c2_tube_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let mut failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let r = rng.random_range(1..=3);
        let np = rng.random_range(1..=8);
        let l_x = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..0.6));
        let l_w = DMatrix::from_fn(n, r, |_, _| rng.random_range(0.0..1.0));
        let w_bar: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..0.01)).collect();
        let f0: Vec<f64> = (&l_w * DVector::from_vec(w_bar)).iter().cloned().collect();
        let tubes = build_tubes_from_f0(&l_x, &f0, np).unwrap();
        for j in 0..np {
            let sum = tubes.f[j].minkowski_sum(&tubes.r[j]).unwrap();
            if sum != tubes.r[j + 1] || !tubes.r[j].is_subset_of(&tubes.r[j + 1]) {
                failures += 1;
            }
        }
    }
    let el = start.elapsed();
    outcome(
        failures == 0 && within(el, Duration::from_secs(1)),
        format!("{failures} failures over 100 instances"),
    )
}

/// Perturbed rollouts of optimal input sequences stay within `R(j)` of the
/// nominal rollout.
fn c3_tube_validity(design: &Design) -> Outcome {
    let start = Instant::now();
    let pr = &design.problem;
    let plant = pr.plant.as_ref();
    let np = pr.horizon();
    let mut rng = common::rng(3);
    let (mut done, mut failures, mut worst_ratio) = (0, 0, 0.0f64);
    let w_box = plant.dist_box().clone();
    while done < 1000 {
        let y = common::draw_in_region(&pr.region, &mut rng);
        let y_t = common::draw_in_region(&pr.region, &mut rng);
        let x0 = pr.maps.g_x(&y).unwrap().map(|v| v + rng.random_range(-0.03..0.03));
        let Ok(sol) = pr.solve(&x0, &y_t, None) else {
            continue;
        };
        done += 1;
        let vertex = done % 2 == 0;
        let (mut xn, mut xp) = (x0.clone(), x0.clone());
        for j in 0..np {
            let w = if vertex {
                DVector::from_fn(w_box.dim(), |i, _| {
                    if rng.random::<bool>() { w_box.upper()[i] } else { w_box.lower()[i] }
                })
            } else {
                common::draw_box(&w_box, &mut rng)
            };
            let un = pr.policy.apply(&xn, &sol.x_s, &sol.v_seq[j]);
            let up = pr.policy.apply(&xp, &sol.x_s, &sol.v_seq[j]);
            xn = plant.step(&xn, &un, &plant.zero_disturbance()).unwrap();
            xp = plant.step(&xp, &up, &w).unwrap();
            let d = pr.tubes.d_col(j + 1);
            let mut bad = false;
            for i in 0..xn.len() {
                let dev = (xp[i] - xn[i]).abs();
                worst_ratio = worst_ratio.max(dev / d[i]);
                bad |= dev > d[i];
            }
            if bad {
                failures += 1;
                break;
            }
        }
    }
    let el = start.elapsed();
    outcome(
        failures == 0 && within(el, Duration::from_secs(60)),
        format!("{failures} failures in 1000 rollouts, worst |Δx|/d = {worst_ratio:.3}"),
    )
}

/// Fresh-sample certification and the linear oracle.
fn c4_lipschitz(design: &Design, cfg: &Config) -> Outcome {
    let start = Instant::now();
    let pr = &design.problem;
    let region = SamplingRegion::from_plant(pr.plant.as_ref(), candidate_box(cfg).unwrap());
    let rep = verify_constants(
        pr.plant.as_ref(),
        &pr.policy,
        &pr.maps,
        &region,
        &design.artifacts.lipschitz,
        100_000,
        cfg.seed.wrapping_add(12_345),
    )
    .unwrap();
    let certified = rep.worst() <= 1e-9;

    let mut rng = common::rng(4);
    let (n, m, r) = (3, 2, 2);
    let a = DMatrix::from_fn(n, n, |i, j| rng.random_range(-0.3..0.3) + if i == j { 0.5 } else { 0.0 });
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let e = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-0.3..0.3));
    let unit = |d: usize, h: f64| Hyperbox::symmetric(&vec![h; d]).unwrap();
    let plant: Arc<dyn Plant> = Arc::new(
        LinearPlant::new(
            a.clone(),
            b.clone(),
            e.clone(),
            c,
            DMatrix::zeros(m, m),
            unit(n, 1.0),
            unit(m, 1.0),
            unit(r, 0.1),
        )
        .unwrap(),
    );
    let maps = EquilibriumMaps::new(plant.clone());
    let lin_region = SamplingRegion::from_plant(plant.as_ref(), unit(m, 0.5));
    let budget = EstimationBudget {
        pairs: 20_000,
        verify_pairs: 20_000,
        safety_margin: 0.02,
        seed: 4,
    };
    let est = estimate_constants(plant.as_ref(), &AffinePolicy::new(k.clone()), &maps, &lin_region, &budget).unwrap();
    let truth = [(&a + &b * &k).abs(), b.abs(), e.abs()];
    let mut worst_rel = 0.0f64;
    for (got, want) in [&est.l_x, &est.l_v, &est.l_w].into_iter().zip(&truth) {
        for (g, w) in got.iter().zip(want.iter()) {
            worst_rel = worst_rel.max((g - w).abs() / w.max(1e-12));
        }
    }
    let el = start.elapsed();
    outcome(
        certified && worst_rel <= 0.10,
        format!(
            "worst fresh residual {:.2e} over {} pairs; linear oracle worst relative error {:.3} ({:.1} s)",
            rep.worst(),
            rep.samples,
            worst_rel,
            el.as_secs_f64()
        ),
    )
}

/// Published `K` and `P`: sampled decrease and the computed level.
fn c5_terminal() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::default();
    cfg.inject_published_values();
    cfg.terminal.rho = None;
    cfg.lipschitz.l_x = None;
    cfg.lipschitz.l_v = None;
    cfg.lipschitz.l_w = None;
    let design = build_design(&cfg).unwrap();
    let pr = &design.problem;
    let rho = pr.terminal.rho;
    let ys: Vec<DVector<f64>> = pr
        .region
        .sample_points(cfg.terminal.setpoint_density)
        .iter()
        .map(|y| DVector::from_column_slice(y))
        .collect();
    let rep = verify_lyapunov_decrease(
        pr.plant.as_ref(),
        &pr.maps,
        &fourtank::k(),
        &fourtank::p(),
        &fourtank::q(),
        rho,
        &ys,
        10_000,
        cfg.seed,
        1e-6,
    )
    .unwrap();
    let el = start.elapsed();
    let band = (0.06..=0.25).contains(&rho);
    outcome(
        rep.passed && band && within(el, Duration::from_secs(60)),
        format!(
            "worst decrease residual {:.3e} over {} samples at y_s = ({:.3}, {:.3}); computed rho {:.4} vs published {}",
            rep.worst,
            rep.samples,
            rep.worst_setpoint[0],
            rep.worst_setpoint[1],
            rho,
            fourtank::RHO
        ),
    )
}

/// The shifted candidate stays feasible after a disturbed step.
fn c6_recursive_feasibility(design: &Design) -> Outcome {
    let pr = &design.problem;
    let plant = pr.plant.as_ref();
    let mut rng = common::rng(6);
    let tol = pr.options.feasibility_tol;
    let (mut done, mut failures, mut worst) = (0, 0, f64::NEG_INFINITY);
    while done < 1000 {
        let y = common::draw_in_region(&pr.region, &mut rng);
        let y_t = DVector::from_vec(candidate_box(&Config::default()).unwrap().from_unit(&[
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]));
        let x0 = pr.maps.g_x(&y).unwrap().map(|v| v + rng.random_range(-0.03..0.03));
        let Ok((u, sol)) = pr.control_law(&x0, &y_t, None) else {
            continue;
        };
        done += 1;
        let w = common::draw_box(plant.dist_box(), &mut rng);
        let x1 = plant.step(&x0, &u, &w).unwrap();
        let cand = pr.shift_candidate(&sol).unwrap();
        let (_, viol) = pr.assess(&x1, &y_t, &cand).unwrap();
        worst = worst.max(viol);
        if viol > tol {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{failures} infeasible shifted candidates in 1000 steps, worst constraint value {worst:.3e}"),
    )
}

/// Riccati oracle and finite-difference gradients.
fn c7_solver(design: &Design) -> Outcome {
    let lti = common::lti();
    let mut rng = common::rng(7);
    let mut input_err = 0.0f64;
    for _ in 0..100 {
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let y_t = DVector::from_element(1, rng.random_range(-3.0..3.0));
        let sol = lti.problem.solve(&x0, &y_t, None).unwrap();
        let (v_ref, _) = lti.riccati_optimum(&x0, &y_t);
        for (v, r) in sol.v_seq.iter().zip(&v_ref) {
            input_err = input_err.max((v - r).amax());
        }
    }
    let pr = &design.problem;
    let np = pr.horizon();
    let mut grad_err = 0.0f64;
    for _ in 0..100 {
        let y_s = common::draw_in_region(&pr.region, &mut rng);
        let y_t = common::draw_in_region(&pr.region, &mut rng);
        let eq = pr.maps.eval_raw(&y_s).unwrap();
        let x0 = eq.x.map(|v| v + rng.random_range(-0.05..0.05));
        let v_seq: Vec<DVector<f64>> = (0..np).map(|_| eq.v.map(|v| v + rng.random_range(-0.3..0.3))).collect();
        let (_, g) = pr.evaluate_cost(&x0, &y_t, &v_seq, &y_s).unwrap();
        let f = |v: &[DVector<f64>], y: &DVector<f64>| pr.evaluate_cost(&x0, &y_t, v, y).unwrap().0;
        let h = 1e-6;
        let mut fd = Vec::with_capacity(g.len());
        for j in 0..np {
            for i in 0..v_seq[j].len() {
                let (mut up, mut dn) = (v_seq.clone(), v_seq.clone());
                up[j][i] += h;
                dn[j][i] -= h;
                fd.push((f(&up, &y_s) - f(&dn, &y_s)) / (2.0 * h));
            }
        }
        for i in 0..y_s.len() {
            let (mut up, mut dn) = (y_s.clone(), y_s.clone());
            up[i] += h;
            dn[i] -= h;
            fd.push((f(&v_seq, &up) - f(&v_seq, &dn)) / (2.0 * h));
        }
        let fd = DVector::from_vec(fd);
        grad_err = grad_err.max((&g - &fd).norm() / g.norm().max(1.0));
    }
    outcome(
        input_err <= 1e-6 && grad_err <= 1e-5,
        format!("Riccati input error {input_err:.2e}; gradient relative error {grad_err:.2e}"),
    )
}

/// The 100-scenario batch and the nominal run.
fn c8_batch(design: &Design, cfg: &Config) -> Outcome {
    let start = Instant::now();
    let pr = &design.problem;
    let base = Scenario::from_config(cfg, vec![0.0, 0.0]).unwrap();
    let nominal = run_closed_loop(pr, &base).unwrap();
    let nm = compute_metrics(&nominal, &base, pr).unwrap();
    let rep = run_batch(pr, &base, &grid_pairs(&fourtank::W_GRID)).unwrap();
    let el = start.elapsed();
    let seg = cfg
        .scenario
        .schedule
        .iter()
        .position(|e| e.y_t == vec![0.9, 0.75])
        .unwrap();
    let radius = rep.max_final_error[seg];
    let passed = rep.runs.len() == 100
        && rep.total_steps == 40_000
        && rep.violations == 0
        && rep.infeasible_steps == 0
        && nm.w_descent_violations == 0
        && radius <= FROZEN_RADIUS
        && within(el, Duration::from_secs(600));
    outcome(
        passed,
        format!(
            "{} steps, {} violations, feasibility {:.4}, nominal W-descent violations {}, final radius at (0.90, 0.75) {:.4} (frozen {FROZEN_RADIUS}), {:.1} s",
            rep.total_steps,
            rep.violations,
            rep.feasibility_rate,
            nm.w_descent_violations,
            radius,
            el.as_secs_f64()
        ),
    )
}

fn pipeline_outputs(cfg: &Config) -> Vec<Vec<u8>> {
    let design = build_design(cfg).unwrap();
    let pr = &design.problem;
    let mut out = Vec::new();
    for m in [&design.artifacts.lipschitz.l_x, &design.artifacts.lipschitz.l_v, &design.artifacts.lipschitz.l_w] {
        let mut buf = Vec::new();
        io::write_matrix_csv(&mut buf, m, io::TABLE_DECIMALS).unwrap();
        out.push(buf);
    }
    let mut buf = Vec::new();
    io::write_tubes_csv(&mut buf, &pr.tubes, io::TABLE_DECIMALS).unwrap();
    out.push(buf);
    let mut sc = Scenario::from_config(cfg, vec![0.0, 0.0]).unwrap();
    sc.w = Disturbance::random_sequence(pr.plant.dist_box(), sc.steps(), cfg.seed);
    let trace = run_closed_loop(pr, &sc).unwrap();
    let mut buf = Vec::new();
    io::write_trace_csv(&mut buf, &trace).unwrap();
    assert_eq!(io::read_trace_csv(buf.as_slice()).unwrap(), trace.records);
    out.push(buf);
    out
}

/// Two runs of the same configuration emit identical bytes.
fn c9_determinism(cfg: &Config) -> Outcome {
    let first = pipeline_outputs(cfg);
    let second = pipeline_outputs(cfg);
    let same = first.iter().zip(&second).filter(|(a, b)| a == b).count();
    outcome(
        same == first.len() && first.len() == second.len(),
        format!("{same} of {} CSV outputs identical", first.len()),
    )
}

fn main() {
    let cfg = Config::default();
    let design = common::default_design();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("tube-table reproduction", Box::new(c1_tube_table)),
        ("tube algebra properties", Box::new(c2_tube_algebra)),
        ("tube validity by brute force", Box::new(|| c3_tube_validity(design))),
        ("Lipschitz certification", Box::new(|| c4_lipschitz(design, &cfg))),
        ("terminal verification", Box::new(c5_terminal)),
        ("recursive feasibility", Box::new(|| c6_recursive_feasibility(design))),
        ("solver oracle equivalence", Box::new(|| c7_solver(design))),
        ("scenario batch", Box::new(|| c8_batch(design, &cfg))),
        ("round-trip and determinism", Box::new(|| c9_determinism(&cfg))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        println!(
            "criterion {} {tag}: {name}: {} [{:.2} s]",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
