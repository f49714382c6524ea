mod common;

use nalgebra::DVector;
use rand::Rng;

use tubempc::error::MpcError;

#[test]
fn lti_solution_matches_riccati_recursion() {
    let lti = common::lti();
    let mut rng = common::rng(11);
    for _ in 0..20 {
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let y_t = DVector::from_element(1, rng.random_range(-3.0..3.0));
        let sol = lti.problem.solve(&x0, &y_t, None).unwrap();
        let (v_ref, y_ref) = lti.riccati_optimum(&x0, &y_t);
        for (v, r) in sol.v_seq.iter().zip(&v_ref) {
            assert!((v - r).amax() <= 1e-6, "v = {v}, oracle {r}");
        }
        assert!((&sol.y_s - &y_ref).amax() <= 1e-6);
    }
}

#[test]
fn cost_gradient_matches_central_differences() {
    let pr = &common::default_design().problem;
    let mut rng = common::rng(5);
    let np = pr.horizon();
    for _ in 0..20 {
        let y_s = common::draw_in_region(&pr.region, &mut rng);
        let y_t = common::draw_in_region(&pr.region, &mut rng);
        let eq = pr.maps.eval_raw(&y_s).unwrap();
        let x0 = eq.x.map(|v| v + rng.random_range(-0.05..0.05));
        let v_seq: Vec<DVector<f64>> = (0..np).map(|_| eq.v.map(|v| v + rng.random_range(-0.3..0.3))).collect();
        let (_, g) = pr.evaluate_cost(&x0, &y_t, &v_seq, &y_s).unwrap();
        let f = |v: &[DVector<f64>], y: &DVector<f64>| pr.evaluate_cost(&x0, &y_t, v, y).unwrap().0;
        let h = 1e-6;
        let mut fd = Vec::new();
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
        let rel = (&g - &fd).norm() / g.norm().max(1.0);
        assert!(rel <= 1e-5, "relative gradient error {rel:e}");
    }
}

#[test]
fn equilibrium_start_costs_nothing() {
    let pr = &common::default_design().problem;
    let y_t = DVector::from_vec(vec![0.65, 0.65]);
    let x0 = pr.maps.g_x(&y_t).unwrap();
    let sol = pr.solve(&x0, &y_t, None).unwrap();
    assert!(sol.cost < 1e-10, "cost {}", sol.cost);
    let u = pr.policy.apply(&x0, &sol.x_s, &sol.v_seq[0]);
    assert!((u - pr.maps.g_u(&y_t).unwrap()).amax() < 1e-6);
}

#[test]
fn solution_respects_tightened_constraints() {
    let pr = &common::default_design().problem;
    let x0 = DVector::from_vec(vec![0.2837, 0.2943, 0.2168, 0.2864]);
    let y_t = DVector::from_vec(vec![0.65, 0.65]);
    let sol = pr.solve(&x0, &y_t, None).unwrap();
    assert!(sol.max_violation <= pr.options.feasibility_tol);
    for (j, x) in sol.predicted_states.iter().enumerate().take(pr.horizon()) {
        assert!(pr.constraints.state_boxes[j].min_slack(x.as_slice()) >= -1e-8, "stage {j}");
    }
    assert!(pr.region.contains(sol.y_s.as_slice(), 1e-9));
}

#[test]
fn warm_start_is_never_beaten_by_a_worse_solution() {
    let pr = &common::default_design().problem;
    let x0 = DVector::from_vec(vec![0.2837, 0.2943, 0.2168, 0.2864]);
    let y_t = DVector::from_vec(vec![0.65, 0.65]);
    let first = pr.solve(&x0, &y_t, None).unwrap();
    let warm = first.candidate();
    let (warm_cost, _) = pr.assess(&x0, &y_t, &warm).unwrap();
    let again = pr.solve(&x0, &y_t, Some(&warm)).unwrap();
    assert!(again.cost <= warm_cost + 1e-12);
}

#[test]
fn unreachable_state_is_infeasible() {
    let pr = &common::default_design().problem;
    let x0 = DVector::from_vec(vec![1.19, 1.19, 1.19, 1.19]);
    let y_t = DVector::from_vec(vec![0.35, 0.35]);
    assert!(matches!(pr.solve(&x0, &y_t, None), Err(MpcError::InfeasibleProblem)));
}

#[test]
fn shifted_candidate_keeps_the_reference() {
    let pr = &common::default_design().problem;
    let x0 = DVector::from_vec(vec![0.2837, 0.2943, 0.2168, 0.2864]);
    let y_t = DVector::from_vec(vec![0.65, 0.65]);
    let sol = pr.solve(&x0, &y_t, None).unwrap();
    let cand = pr.shift_candidate(&sol).unwrap();
    assert_eq!(cand.y_s, sol.y_s);
    assert_eq!(cand.v_seq[..pr.horizon() - 1], sol.v_seq[1..]);
    assert_eq!(cand.v_seq[pr.horizon() - 1], sol.v_s);
}
