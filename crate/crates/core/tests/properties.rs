use dpflow::ccopf::{self, CcopfConfig, Variant};
use dpflow::dopf::{self, polygon_coefficients};
use dpflow::fixtures;
use dpflow::grid::{build_topology, CaseFile, RadialGrid};
use dpflow::mechanism::{AffineMaps, PrivacyLedger};
use dpflow::privacy::{self, calibrate_sigma, z_quantile};
use dpflow::rng::GaussianSampler;
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = RadialGrid> {
    (any::<u64>(), 5usize..=20).prop_map(|(seed, n)| fixtures::random_radial(seed, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn incidence_columns_partition_the_nodes(g in grid_strategy()) {
        let topo = build_topology(&g).unwrap();
        for k in 0..g.line_count() {
            let down = &topo.line_downstream_nodes[k];
            let up = &topo.line_upstream_nodes[k];
            let lat = &topo.line_lateral_nodes[k];
            prop_assert_eq!(down.len() + up.len() + lat.len(), g.node_count());
            let sum_down: f64 = down.iter().map(|&i| topo.sign(i, k)).sum();
            let sum_up: f64 = up.iter().map(|&i| topo.sign(i, k)).sum();
            prop_assert_eq!(sum_down, -(down.len() as f64));
            prop_assert_eq!(sum_up, up.len() as f64);
            prop_assert!(lat.iter().all(|&i| topo.sign(i, k) == 0.0));
            prop_assert!(up.contains(&0));
        }
    }

    #[test]
    fn topology_ignores_line_order(g in grid_strategy()) {
        let topo = build_topology(&g).unwrap();
        prop_assert_eq!(&build_topology(&g).unwrap(), &topo);
        let mut case = CaseFile::from_grid(&g);
        case.lines.reverse();
        let g2 = case.into_grid().unwrap();
        prop_assert_eq!(&build_topology(&g2).unwrap(), &topo);
    }

    #[test]
    fn polygon_is_inside_the_disc(
        sides in 3usize..=24,
        angle in 0.0f64..std::f64::consts::TAU,
        radius in 0.0f64..1.3,
        f_max in 0.1f64..10.0,
    ) {
        let poly = polygon_coefficients(sides).unwrap();
        let (p, q) = (f_max * radius * angle.cos(), f_max * radius * angle.sin());
        if poly.iter().all(|s| s.slack(p, q, f_max) >= 0.0) {
            prop_assert!(p.hypot(q) <= f_max * (1.0 + 1e-12));
        }
        // Boundary point along the same ray.
        let reach = poly
            .iter()
            .map(|s| {
                let along = s.gamma_p * angle.cos() + s.gamma_q * angle.sin();
                if along > 0.0 { -s.gamma_s / along } else { f64::INFINITY }
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!(reach <= 1.0 + 1e-12);
        prop_assert!(reach >= (std::f64::consts::PI / sides as f64).cos() - 1e-12);
    }

    #[test]
    fn calibration_is_monotone(
        beta in prop::collection::vec(0.0f64..1.0, 4),
        bump in prop::collection::vec(0.0f64..0.5, 4),
        eps in 0.05f64..1.0,
        eps_drop in 0.0f64..0.04,
        delta in 0.02f64..0.9,
        delta_drop in 0.0f64..0.01,
    ) {
        let base = calibrate_sigma(eps, delta, &beta).unwrap();
        let bigger: Vec<f64> = beta.iter().zip(&bump).map(|(b, d)| b + d).collect();
        let variants = [
            calibrate_sigma(eps, delta, &bigger).unwrap(),
            calibrate_sigma(eps - eps_drop, delta, &beta).unwrap(),
            calibrate_sigma(eps, delta - delta_drop, &beta).unwrap(),
        ];
        for v in &variants {
            for (a, b) in base.sigma.iter().zip(&v.sigma) {
                prop_assert!(b >= a);
            }
        }
    }

    #[test]
    fn quantile_is_odd_and_inverts_the_cdf(eta in 1e-6f64..(1.0 - 1e-6)) {
        let z = z_quantile(eta).unwrap();
        prop_assert!((z + z_quantile(1.0 - eta).unwrap()).abs() <= 1e-9);
        let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
        prop_assert!((cdf - (1.0 - eta)).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn substation_balances_the_feeder(g in grid_strategy()) {
        let topo = build_topology(&g).unwrap();
        let sol = dopf::solve_dopf(&g, &topo, 12).unwrap();
        let n = g.node_count();
        let d_q = g.d_q();
        let net_p: f64 = (1..n).map(|i| g.d_p[i] - sol.g_p[i]).sum();
        let net_q: f64 = (1..n).map(|i| d_q[i] - sol.g_q[i]).sum();
        prop_assert!((sol.g_p[0] - net_p).abs() <= 1e-7);
        prop_assert!((sol.g_q[0] - net_q).abs() <= 1e-7);
    }

    #[test]
    fn more_load_never_lowers_cost(g in grid_strategy(), pick in any::<prop::sample::Index>(), step in 0.0f64..0.05) {
        let topo = build_topology(&g).unwrap();
        let node = 1 + pick.index(g.line_count());
        let heavier = g.with_load(node, g.d_p[node] + step);
        let a = dopf::solve_dopf(&g, &topo, 12).unwrap().objective;
        let b = dopf::solve_dopf(&heavier, &topo, 12).unwrap().objective;
        prop_assert!(b >= a - 1e-6 * (1.0 + a.abs()));
    }

    #[test]
    fn realizations_balance_exactly(g in grid_strategy(), seed in any::<u64>()) {
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, privacy::default_delta(&g), &privacy::beta_from_fraction(&g, 0.1)).unwrap();
        let sol = ccopf::solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()).unwrap();
        let maps = AffineMaps::new(&g, &topo, &sol);
        let xi = GaussianSampler::new(seed, 0, &sol.sigma).sample();
        let r = maps.realize(&g, &xi, seed).unwrap();
        let d_q = g.d_q();
        for i in 1..g.node_count() {
            let k = RadialGrid::line_into(i);
            let out_p: f64 = topo.children[i].iter().map(|&c| r.f_p[RadialGrid::line_into(c)]).sum();
            let out_q: f64 = topo.children[i].iter().map(|&c| r.f_q[RadialGrid::line_into(c)]).sum();
            prop_assert!((r.f_p[k] - (g.d_p[i] - r.g_p[i] + out_p)).abs() <= 1e-10);
            prop_assert!((r.f_q[k] - (d_q[i] - r.g_q[i] + out_q)).abs() <= 1e-10);
            let parent = g.parent[i].unwrap();
            let drop = 2.0 * (g.r[k] * r.f_p[k] + g.x[k] * r.f_q[k]);
            prop_assert!((r.u[i] - (r.u[parent] - drop)).abs() <= 1e-10);
        }
        let root_p: f64 = topo.children[0].iter().map(|&c| r.f_p[RadialGrid::line_into(c)]).sum();
        prop_assert!((r.g_p[0] - root_p).abs() <= 1e-10);
    }

    #[test]
    fn tolerance_penalty_never_raises_deviation(g in grid_strategy()) {
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, privacy::default_delta(&g), &privacy::beta_from_fraction(&g, 0.1)).unwrap();
        let base = ccopf::solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()).unwrap();
        let tov = ccopf::solve_ccopf(
            &g,
            &topo,
            &spec,
            &CcopfConfig::with_variant(Variant::ToleranceOfVariance { psi: vec![1e3; g.line_count()] }),
        )
        .unwrap();
        let sum_base: f64 = base.flow_std.iter().sum();
        let sum_t: f64 = tov.flow_std.iter().sum();
        prop_assert!(sum_t <= sum_base + 1e-7);
        for (s, sig) in tov.flow_std.iter().zip(&tov.sigma) {
            prop_assert!(*s >= sig - 1e-8);
        }
    }

    #[test]
    fn ledger_spends_linearly(k in 0u32..50, eps in 0.01f64..1.0) {
        let mut ledger = PrivacyLedger::new(eps, 0.1);
        for _ in 0..k {
            ledger.record_draw();
        }
        prop_assert_eq!(ledger.draws, k);
        prop_assert_eq!(ledger.epsilon_spent, f64::from(k) * eps);
    }
}
