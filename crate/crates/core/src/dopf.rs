//! Deterministic LinDistFlow OPF.
//!
//! Variables are nodal generation `(g_p, g_q)`, line flows `(f_p, f_q)` and
//! squared voltage magnitudes `u`. Flow limits use the inscribed regular
//! polygon so that the deterministic and chance-constrained models share one
//! feasible flow region.

use thiserror::Error;

use crate::conic::{self, BuildError, ConicProgram, Row, SolveReport, SolveStatus, SolverSettings};
use crate::grid::{GridError, RadialGrid, TopologyIndex};

#[derive(Debug, Error)]
pub enum DopfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("polygon needs at least 3 sides, got {0}")]
    Sides(usize),
    #[error("fixed flow vector has {got} entries, expected {expected}")]
    FixedFlows { expected: usize, got: usize },
    #[error("solver returned {status}{}", .constraint.as_ref().map(|c| format!(" (dominant constraint {c})")).unwrap_or_default())]
    Solver {
        status: SolveStatus,
        constraint: Option<String>,
    },
}

impl DopfError {
    /// The solver ran but did not reach an optimum.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, DopfError::Solver { .. })
    }
}

/// One polygon side `γp·p + γq·q + γs·f̄ ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolygonSide {
    pub gamma_p: f64,
    pub gamma_q: f64,
    pub gamma_s: f64,
}

impl PolygonSide {
    /// Slack `-(γp p + γq q + γs f̄)`; nonnegative inside the polygon.
    pub fn slack(&self, p: f64, q: f64, f_max: f64) -> f64 {
        -(self.gamma_p * p + self.gamma_q * q + self.gamma_s * f_max)
    }
}

/// Sides of the regular polygon inscribed in the unit-radius disc. Side `c`
/// has outward normal at angle `2πc/sides`, so side 0 faces the `+p` axis.
pub fn polygon_coefficients(sides: usize) -> Result<Vec<PolygonSide>, DopfError> {
    if sides < 3 {
        return Err(DopfError::Sides(sides));
    }
    let half = (std::f64::consts::PI / sides as f64).cos();
    Ok((0..sides)
        .map(|c| {
            let theta = std::f64::consts::TAU * c as f64 / sides as f64;
            PolygonSide {
                gamma_p: theta.cos(),
                gamma_q: theta.sin(),
                gamma_s: -half,
            }
        })
        .collect())
}

pub const DEFAULT_SIDES: usize = 12;

/// Variable indices of the flow model inside a [`ConicProgram`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVars {
    pub g_p: Vec<usize>,
    pub g_q: Vec<usize>,
    pub f_p: Vec<usize>,
    pub f_q: Vec<usize>,
    pub u: Vec<usize>,
    /// Epigraph variable of each node's quadratic cost, when `c2 > 0`.
    pub quad: Vec<Option<usize>>,
}

/// Adds variables, balance and voltage equalities, bounds and the linear
/// cost. Polygon rows are added only when `with_polygon` is set; the
/// chance-constrained model supplies its own.
pub(crate) fn add_flow_model(
    p: &mut ConicProgram,
    grid: &RadialGrid,
    topo: &TopologyIndex,
    with_polygon: Option<&[PolygonSide]>,
) -> Result<FlowVars, BuildError> {
    let n = grid.node_count();
    let l = grid.line_count();
    let d_q = grid.d_q();
    let g_p: Vec<usize> = (0..n)
        .map(|i| p.add_var(format!("g_p[{i}]"), Some(grid.g_p_min[i]), Some(grid.g_p_max[i])))
        .collect();
    let g_q: Vec<usize> = (0..n)
        .map(|i| p.add_var(format!("g_q[{i}]"), Some(grid.g_q_min[i]), Some(grid.g_q_max[i])))
        .collect();
    let f_p: Vec<usize> = (0..l).map(|k| p.free_var(format!("f_p[{}]", k + 1))).collect();
    let f_q: Vec<usize> = (0..l).map(|k| p.free_var(format!("f_q[{}]", k + 1))).collect();
    let u: Vec<usize> = (0..n)
        .map(|i| {
            if i == 0 {
                p.free_var("u[0]")
            } else {
                p.add_var(
                    format!("u[{i}]"),
                    Some(grid.v_min[i] * grid.v_min[i]),
                    Some(grid.v_max[i] * grid.v_max[i]),
                )
            }
        })
        .collect();

    // Substation balance.
    for (gen, load, tag) in [(&g_p, &grid.d_p, "balance_p[0]"), (&g_q, &d_q, "balance_q[0]")] {
        let row: Row = gen.iter().map(|&v| (v, 1.0)).collect();
        p.add_eq(row, load[1..].iter().sum(), tag)?;
    }
    // Line flows equal net downstream load.
    for k in 0..l {
        let down = &topo.line_downstream_nodes[k];
        for (flow, gen, load, kind) in [(&f_p, &g_p, &grid.d_p, "p"), (&f_q, &g_q, &d_q, "q")] {
            let mut row: Row = vec![(flow[k], 1.0)];
            row.extend(down.iter().map(|&i| (gen[i], 1.0)));
            let rhs = down.iter().map(|&i| load[i]).sum();
            p.add_eq(row, rhs, format!("balance_{kind}[{}]", k + 1))?;
        }
    }
    // Voltage drops along the root path.
    p.add_eq(vec![(u[0], 1.0)], 1.0, "voltage[0]")?;
    for i in 1..n {
        let mut row: Row = vec![(u[i], 1.0)];
        for &k in &topo.root_path_lines[i] {
            row.push((f_p[k], 2.0 * grid.r[k]));
            row.push((f_q[k], 2.0 * grid.x[k]));
        }
        p.add_eq(row, 1.0, format!("voltage[{i}]"))?;
    }
    if let Some(sides) = with_polygon {
        for k in 0..l {
            for (c, side) in sides.iter().enumerate() {
                p.add_ge(
                    vec![(f_p[k], -side.gamma_p), (f_q[k], -side.gamma_q)],
                    -side.gamma_s * grid.f_max[k],
                    format!("flow[{},{c}]", k + 1),
                )?;
            }
        }
    }
    for i in 0..n {
        p.set_cost(g_p[i], grid.c[i]);
    }
    let quad = (0..n)
        .map(|i| {
            if grid.c2[i] > 0.0 {
                let t = p.add_var(format!("quad[{i}]"), Some(0.0), None);
                p.set_cost(t, 1.0);
                Ok(Some(t))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>, BuildError>>()?;
    Ok(FlowVars {
        g_p,
        g_q,
        f_p,
        f_q,
        u,
        quad,
    })
}

/// Rotated-cone epigraph `t ≥ c2 (g² + ‖extra‖²)` written as
/// `‖(2√c2 g, 2√c2 extra, t − 1)‖ ≤ t + 1`.
pub(crate) fn add_quadratic_epigraph(
    p: &mut ConicProgram,
    c2: f64,
    g: usize,
    t: usize,
    extra: Vec<Row>,
    tag: String,
) -> Result<(), BuildError> {
    let k = 2.0 * c2.sqrt();
    let mut a: Vec<Row> = vec![vec![(g, k)]];
    a.extend(extra.into_iter().map(|r| r.into_iter().map(|(i, v)| (i, k * v)).collect()));
    a.push(vec![(t, 1.0)]);
    let mut b = vec![0.0; a.len()];
    *b.last_mut().expect("nonempty") = -1.0;
    p.add_soc(a, b, vec![(t, 1.0)], 1.0, tag)?;
    Ok(())
}

/// The assembled D-OPF with its variable map.
#[derive(Debug, Clone)]
pub struct DopfProgram {
    pub program: ConicProgram,
    pub vars: FlowVars,
}

pub fn assemble_dopf(grid: &RadialGrid, topo: &TopologyIndex, sides: usize) -> Result<DopfProgram, DopfError> {
    assemble_with_fixed(grid, topo, sides, None)
}

fn assemble_with_fixed(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    sides: usize,
    fixed_f_p: Option<&[f64]>,
) -> Result<DopfProgram, DopfError> {
    grid.validate()?;
    let poly = polygon_coefficients(sides)?;
    let mut program = ConicProgram::new();
    let vars = add_flow_model(&mut program, grid, topo, Some(&poly))?;
    for i in 0..grid.node_count() {
        if let Some(t) = vars.quad[i] {
            add_quadratic_epigraph(&mut program, grid.c2[i], vars.g_p[i], t, vec![], format!("quad_cost[{i}]"))?;
        }
    }
    if let Some(fixed) = fixed_f_p {
        if fixed.len() != grid.line_count() {
            return Err(DopfError::FixedFlows {
                expected: grid.line_count(),
                got: fixed.len(),
            });
        }
        for (k, v) in fixed.iter().enumerate() {
            program.add_eq(vec![(vars.f_p[k], 1.0)], *v, format!("fixed_f_p[{}]", k + 1))?;
        }
    }
    Ok(DopfProgram { program, vars })
}

/// Nominal dispatch in per-unit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DispatchSolution {
    pub g_p: Vec<f64>,
    pub g_q: Vec<f64>,
    pub f_p: Vec<f64>,
    pub f_q: Vec<f64>,
    pub u: Vec<f64>,
    /// Dispatch cost `Σ c g + Σ c2 g²`.
    pub objective: f64,
}

impl DispatchSolution {
    pub(crate) fn extract(grid: &RadialGrid, vars: &FlowVars, z: &[f64]) -> DispatchSolution {
        let pick = |idx: &[usize]| idx.iter().map(|&i| z[i]).collect::<Vec<f64>>();
        let g_p = pick(&vars.g_p);
        let objective = dispatch_cost(grid, &g_p);
        DispatchSolution {
            g_p,
            g_q: pick(&vars.g_q),
            f_p: pick(&vars.f_p),
            f_q: pick(&vars.f_q),
            u: pick(&vars.u),
            objective,
        }
    }

    pub fn voltage(&self) -> Vec<f64> {
        self.u.iter().map(|u| u.max(0.0).sqrt()).collect()
    }
}

pub fn dispatch_cost(grid: &RadialGrid, g_p: &[f64]) -> f64 {
    g_p.iter()
        .enumerate()
        .map(|(i, g)| grid.c[i] * g + grid.c2[i] * g * g)
        .sum()
}

pub(crate) fn check(report: &SolveReport) -> Result<(), DopfError> {
    if report.is_optimal() {
        Ok(())
    } else {
        Err(DopfError::Solver {
            status: report.status,
            constraint: report.dominant_constraint.clone(),
        })
    }
}

pub fn solve_dopf(grid: &RadialGrid, topo: &TopologyIndex, sides: usize) -> Result<DispatchSolution, DopfError> {
    solve_dopf_with(grid, topo, sides, SolverSettings::default())
}

pub fn solve_dopf_with(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    sides: usize,
    settings: SolverSettings,
) -> Result<DispatchSolution, DopfError> {
    let dp = assemble_dopf(grid, topo, sides)?;
    let report = conic::solve(&dp.program, settings);
    check(&report)?;
    Ok(DispatchSolution::extract(grid, &dp.vars, &report.primal))
}

/// Re-solves the D-OPF with active flows pinned. `Ok(None)` means the
/// pinned flows admit no feasible dispatch.
pub fn solve_with_fixed_flows(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    sides: usize,
    f_p: &[f64],
    settings: SolverSettings,
) -> Result<Option<DispatchSolution>, DopfError> {
    let dp = assemble_with_fixed(grid, topo, sides, Some(f_p))?;
    let report = conic::solve(&dp.program, settings);
    match report.status {
        SolveStatus::Optimal => Ok(Some(DispatchSolution::extract(grid, &dp.vars, &report.primal))),
        SolveStatus::Infeasible => Ok(None),
        _ => Err(DopfError::Solver {
            status: report.status,
            constraint: report.dominant_constraint,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grid::build_topology;

    #[test]
    fn square_examples() {
        let sq = polygon_coefficients(4).unwrap();
        assert!(sq.iter().all(|s| s.slack(0.0, 0.0, 1.0) > 0.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let min = sq.iter().map(|s| s.slack(h, h, 1.0)).fold(f64::INFINITY, f64::min);
        assert!(min.abs() < 1e-12);
        let dodeca = polygon_coefficients(12).unwrap();
        let c15 = (std::f64::consts::PI / 12.0).cos();
        let min = dodeca.iter().map(|s| s.slack(c15, 0.0, 1.0)).fold(f64::INFINITY, f64::min);
        assert!(min.abs() < 1e-12, "{min}");
        assert!(matches!(polygon_coefficients(2), Err(DopfError::Sides(2))));
    }

    #[test]
    fn chain3_without_ders_forces_flows() {
        let mut g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        g.g_p_max[1] = 0.0;
        g.g_p_max[2] = 0.0;
        let t = build_topology(&g).unwrap();
        let s = solve_dopf(&g, &t, 12).unwrap();
        assert!((s.f_p[1] - 1.0).abs() < 1e-7);
        assert!((s.f_p[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn chain3_voltage_hand_value() {
        let mut g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        for i in 1..3 {
            g.g_p_max[i] = 0.0;
            g.g_q_min[i] = 0.0;
            g.g_q_max[i] = 0.0;
        }
        let t = build_topology(&g).unwrap();
        let s = solve_dopf(&g, &t, 12).unwrap();
        assert!((s.u[1] - 0.94).abs() < 1e-7, "{}", s.u[1]);
    }

    #[test]
    fn feeder15_polygon_row_count() {
        let g = fixtures::feeder15();
        let t = build_topology(&g).unwrap();
        let dp = assemble_dopf(&g, &t, 12).unwrap();
        let flow_rows = dp.program.inequalities.iter().filter(|q| q.tag.starts_with("flow[")).count();
        assert_eq!(flow_rows, 168);
    }

    #[test]
    fn zero_load_gives_flat_voltage() {
        // Reactive output carries no cost, so pin it to make the flows unique.
        let mut g = fixtures::chain3(0.0, 0.0, 0.5, 0.01, 0.01);
        g.g_q_min = vec![-10.0, 0.0, 0.0];
        g.g_q_max = vec![10.0, 0.0, 0.0];
        let t = build_topology(&g).unwrap();
        let s = solve_dopf(&g, &t, 12).unwrap();
        assert!(s.objective.abs() < 1e-6);
        for k in 0..2 {
            assert!(s.f_p[k].abs() < 1e-6);
        }
        for u in &s.u {
            assert!((u - 1.0).abs() < 1e-6);
        }
    }
}
