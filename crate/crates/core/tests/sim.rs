mod common;

use tubempc::fourtank;
use tubempc::hyperbox::Hyperbox;
use tubempc::io;
use tubempc::sim::{compute_metrics, replay, run_closed_loop, Disturbance, Scenario, StepStatus};
use tubempc::tubes::build_tubes_from_f0;

fn short_scenario(w: Disturbance) -> Scenario {
    Scenario::new(
        w,
        fourtank::X0.to_vec(),
        vec![(0.0, vec![0.65, 0.65]), (10.0, vec![0.9, 0.75])],
        20.0,
        15.0,
    )
    .unwrap()
}

#[test]
fn trace_replays_bit_for_bit() {
    let pr = &common::default_design().problem;
    let w = Disturbance::random_sequence(pr.plant.dist_box(), 80, 3);
    let trace = run_closed_loop(pr, &short_scenario(w)).unwrap();
    assert_eq!(trace.records.len(), 80);
    assert!(replay(pr, &trace).unwrap());
    let mut tampered = trace.clone();
    tampered.records[10].u[0] += 1e-12;
    assert!(!replay(pr, &tampered).unwrap());
}

#[test]
fn nominal_run_keeps_constraints_and_decreases_w() {
    let pr = &common::default_design().problem;
    let sc = short_scenario(Disturbance::Constant(vec![0.0, 0.0]));
    let trace = run_closed_loop(pr, &sc).unwrap();
    let m = compute_metrics(&trace, &sc, pr).unwrap();
    assert!(m.nominal);
    assert_eq!(m.violations, 0);
    assert_eq!(m.infeasible_steps, 0);
    assert_eq!(m.w_descent_violations, 0);
    assert!(trace.records.iter().all(|r| r.min_slack >= 0.0));
    assert!(trace.records.iter().all(|r| r.status != StepStatus::Infeasible));
    assert_eq!(m.segments.len(), 2);
    let best = &m.segments[1].y_s_star;
    assert!((best[0] - 0.85).abs() < 1e-9 && (best[1] - 0.75).abs() < 1e-9);
}

#[test]
fn disturbance_outside_w_is_rejected() {
    let pr = &common::default_design().problem;
    let sc = short_scenario(Disturbance::Constant(vec![0.006, 0.0]));
    assert!(run_closed_loop(pr, &sc).is_err());
}

#[test]
fn malformed_schedules_are_rejected() {
    let w = Disturbance::Constant(vec![0.0, 0.0]);
    let x0 = fourtank::X0.to_vec();
    assert!(Scenario::new(w.clone(), x0.clone(), vec![(5.0, vec![0.5, 0.5])], 20.0, 15.0).is_err());
    assert!(Scenario::new(
        w.clone(),
        x0.clone(),
        vec![(0.0, vec![0.5, 0.5]), (0.0, vec![0.6, 0.6])],
        20.0,
        15.0
    )
    .is_err());
    assert!(Scenario::new(w, x0, vec![(0.0, vec![0.5, 0.5])], 0.0, 15.0).is_err());
}

#[test]
fn segments_follow_the_schedule() {
    let sc = Scenario::new(
        Disturbance::Constant(vec![0.0, 0.0]),
        fourtank::X0.to_vec(),
        fourtank::schedule().into_iter().map(|(t, y)| (t, y.to_vec())).collect(),
        fourtank::RUN_MINUTES,
        15.0,
    )
    .unwrap();
    assert_eq!(sc.steps(), 400);
    assert_eq!(sc.segment_starts(), vec![0, 100, 200, 300]);
    assert_eq!(sc.segment_at(99), 0);
    assert_eq!(sc.segment_at(100), 1);
    assert_eq!(sc.segment_at(399), 3);
}

#[test]
fn random_disturbances_stay_in_w() {
    let b = Hyperbox::symmetric(&[0.005, 0.005]).unwrap();
    let Disturbance::Sequence(seq) = Disturbance::random_sequence(&b, 500, 9) else {
        panic!("expected a sequence");
    };
    assert_eq!(seq.len(), 500);
    assert!(seq.iter().all(|w| b.contains(w)));
}

#[test]
fn trace_csv_round_trips_exactly() {
    let pr = &common::default_design().problem;
    let w = Disturbance::random_sequence(pr.plant.dist_box(), 80, 4);
    let trace = run_closed_loop(pr, &short_scenario(w)).unwrap();
    let mut buf = Vec::new();
    io::write_trace_csv(&mut buf, &trace).unwrap();
    let back = io::read_trace_csv(buf.as_slice()).unwrap();
    assert_eq!(back, trace.records);
    let mut again = Vec::new();
    let reread = tubempc::sim::Trace {
        records: back,
        final_state: trace.final_state.clone(),
    };
    io::write_trace_csv(&mut again, &reread).unwrap();
    assert_eq!(buf, again);
}

fn rounded(v: f64) -> f64 {
    format!("{v:.4}").parse().unwrap()
}

#[test]
fn tube_csv_reloads_to_the_rounded_values() {
    let l = fourtank::lipschitz();
    let tubes = build_tubes_from_f0(&l.l_x, &fourtank::published_f0(), 4).unwrap();
    let mut buf = Vec::new();
    io::write_tubes_csv(&mut buf, &tubes, io::TABLE_DECIMALS).unwrap();
    let (f, r) = io::read_tubes_csv(buf.as_slice()).unwrap();
    for i in 0..4 {
        for j in 0..=4 {
            assert_eq!(f[i][j], rounded(tubes.c[i][j]), "F[{i}][{j}]");
            assert_eq!(r[i][j], rounded(tubes.d[i][j]), "R[{i}][{j}]");
        }
    }
}

#[test]
fn matrix_csv_is_a_fixed_point_after_one_pass() {
    let l = fourtank::lipschitz();
    for m in [&l.l_x, &l.l_v, &l.l_w] {
        let mut first = Vec::new();
        io::write_matrix_csv(&mut first, m, io::TABLE_DECIMALS).unwrap();
        let back = io::read_matrix_csv(first.as_slice()).unwrap();
        assert_eq!(back, m.map(rounded));
        let mut second = Vec::new();
        io::write_matrix_csv(&mut second, &back, io::TABLE_DECIMALS).unwrap();
        assert_eq!(first, second);
    }
}
