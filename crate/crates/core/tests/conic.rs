use std::time::{Duration, Instant};

use dpflow::conic::{solve, solve_default, ConicProgram, SolveStatus, SolverSettings};
use proptest::prelude::*;

/// min x  s.t. ‖x − 1‖ ≤ 0.
fn pinned() -> ConicProgram {
    let mut p = ConicProgram::new();
    let x = p.free_var("x");
    p.set_cost(x, 1.0);
    p.add_soc(vec![vec![(x, 1.0)]], vec![-1.0], vec![], 0.0, "pin").unwrap();
    p
}

/// min x + y  s.t. ‖(x, y)‖ ≤ 1, x ≥ −1, y ≥ −1.
fn disc() -> ConicProgram {
    let mut p = ConicProgram::new();
    let x = p.add_var("x", Some(-1.0), None);
    let y = p.add_var("y", Some(-1.0), None);
    p.set_cost(x, 1.0);
    p.set_cost(y, 1.0);
    p.add_soc(vec![vec![(x, 1.0)], vec![(y, 1.0)]], vec![0.0, 0.0], vec![], 1.0, "disc")
        .unwrap();
    p
}

fn timed(p: &ConicProgram) -> (dpflow::conic::SolveReport, Duration) {
    let t = Instant::now();
    let r = solve_default(p);
    (r, t.elapsed())
}

#[test]
fn cone_pinned_scalar() {
    let (r, dt) = timed(&pinned());
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!((r.objective_value - 1.0).abs() < 1e-6, "{r:?}");
    assert!((r.primal[0] - 1.0).abs() < 1e-6);
    assert!(dt < Duration::from_millis(100));
}

#[test]
fn unit_disc_corner() {
    let (r, dt) = timed(&disc());
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!((r.objective_value + std::f64::consts::SQRT_2).abs() < 1e-6, "{r:?}");
    assert!((r.primal[0] + h).abs() < 1e-6 && (r.primal[1] + h).abs() < 1e-6);
    assert!(dt < Duration::from_millis(100));
}

#[test]
fn feeder_dispatch_program_is_optimal() {
    let g = dpflow::fixtures::feeder15();
    let topo = dpflow::grid::build_topology(&g).unwrap();
    let prog = dpflow::dopf::assemble_dopf(&g, &topo, 12).unwrap();
    let r = solve_default(&prog.program);
    assert!(r.is_optimal());
    assert!(r.kkt_residuals.gap <= 1e-6);
    assert!(prog.program.max_violation(&r.primal) <= 1e-6);
}

/// Random box-and-ball program: min cᵀx s.t. ‖x − centre‖ ≤ radius, x ≥ lower.
fn ball_program(c: &[f64], centre: &[f64], radius: f64, scale: f64) -> ConicProgram {
    let mut p = ConicProgram::new();
    let vars: Vec<usize> = (0..c.len()).map(|i| p.add_var(format!("x{i}"), Some(-3.0), None)).collect();
    for (v, ci) in vars.iter().zip(c) {
        p.set_cost(*v, scale * ci);
    }
    let a = vars.iter().map(|v| vec![(*v, 1.0)]).collect();
    let b = centre.iter().map(|x| -x).collect();
    p.add_soc(a, b, vec![], radius, "ball").unwrap();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimal_points_are_feasible_and_scale_invariant(
        c in prop::collection::vec(-2.0f64..2.0, 3),
        centre in prop::collection::vec(-1.0f64..1.0, 3),
        radius in 0.2f64..1.5,
        scale in 0.1f64..50.0,
    ) {
        prop_assume!(c.iter().map(|x| x * x).sum::<f64>() > 1e-2);
        let settings = SolverSettings::with_tol(1e-9, 200);
        let base = solve(&ball_program(&c, &centre, radius, 1.0), settings);
        let scaled_prog = ball_program(&c, &centre, radius, scale);
        let scaled = solve(&scaled_prog, settings);
        prop_assert!(base.is_optimal() && scaled.is_optimal());
        prop_assert!(scaled_prog.max_violation(&scaled.primal) <= 1e-7);
        // The lower bounds never bind, so the optimum is centre − radius·c/‖c‖.
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let best: f64 = c.iter().zip(&centre).map(|(ci, xi)| ci * xi).sum::<f64>() - radius * norm;
        prop_assert!((base.objective_value - best).abs() <= 1e-8 * (1.0 + best.abs()));
        let rel = (scaled.objective_value - scale * base.objective_value).abs() / (1.0 + scaled.objective_value.abs());
        prop_assert!(rel <= 1e-8);
        // A linear cost on a ball pins the tangential position only to the
        // square root of the objective gap.
        let reach = (2.0 * radius * 1e-8 * (1.0 + best.abs()) / norm).sqrt();
        for ((a, b), (ci, xi)) in base.primal.iter().zip(&scaled.primal).zip(c.iter().zip(&centre)) {
            let star = xi - radius * ci / norm;
            prop_assert!((a - star).abs() <= reach, "{a} vs {star}");
            prop_assert!((b - star).abs() <= reach, "{b} vs {star}");
        }
    }

    #[test]
    fn lp_matches_its_dual(
        cost in prop::collection::vec(0.5f64..3.0, 3),
        demand in 0.5f64..4.0,
        caps in prop::collection::vec(1.5f64..3.0, 3),
    ) {
        // Primal: min cᵀx, Σx = demand, 0 ≤ x ≤ cap.
        let mut p = ConicProgram::new();
        let xs: Vec<usize> = caps.iter().enumerate().map(|(i, cap)| p.add_var(format!("x{i}"), Some(0.0), Some(*cap))).collect();
        for (x, c) in xs.iter().zip(&cost) { p.set_cost(*x, *c); }
        p.add_eq(xs.iter().map(|x| (*x, 1.0)).collect(), demand, "balance").unwrap();
        // Dual: max demand·λ − Σ cap·μ, λ − μ_i ≤ c_i, μ ≥ 0 (as a minimisation).
        let mut d = ConicProgram::new();
        let lam = d.free_var("lambda");
        d.set_cost(lam, -demand);
        for (i, (cap, c)) in caps.iter().zip(&cost).enumerate() {
            let mu = d.add_var(format!("mu{i}"), Some(0.0), None);
            d.set_cost(mu, *cap);
            d.add_le(vec![(lam, 1.0), (mu, -1.0)], *c, format!("reduced_cost[{i}]")).unwrap();
        }
        let settings = SolverSettings::with_tol(1e-9, 200);
        let rp = solve(&p, settings);
        let rd = solve(&d, settings);
        prop_assert!(rp.is_optimal() && rd.is_optimal());
        prop_assert!((rp.objective_value + rd.objective_value).abs() <= 1e-6 * (1.0 + rp.objective_value.abs()));
    }
}
