//! Private dispatch mechanisms and the privacy budget they consume.
//!
//! The chance-constrained mechanism solves for an affine policy, draws one
//! noise vector and releases the realized dispatch. The output-perturbation
//! baseline noises the deterministic optimum's flows and re-solves with
//! those flows fixed. Every released draw costs one `ε`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ccopf::{self, AffineSolution, ChanceLevels, CcopfConfig, CcopfError};
use crate::conic::SolverSettings;
use crate::dopf::{self, DispatchSolution, DopfError};
use crate::grid::{RadialGrid, TopologyIndex};
use crate::privacy::{calibrate_sigma, PrivacyError, PrivacySpec};
use crate::rng::GaussianSampler;

/// Absolute slack (per-unit) allowed when checking realized limits.
pub const LIMIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("privacy requirement cannot be accommodated: {0}")]
    NotAccommodable(CcopfError),
    #[error(transparent)]
    Ccopf(CcopfError),
    #[error(transparent)]
    Dopf(#[from] DopfError),
    #[error("noise vector has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
}

impl MechanismError {
    pub fn is_solver_failure(&self) -> bool {
        match self {
            MechanismError::NotAccommodable(e) | MechanismError::Ccopf(e) => e.is_solver_failure(),
            MechanismError::Dopf(e) => e.is_solver_failure(),
            _ => false,
        }
    }
}

impl From<CcopfError> for MechanismError {
    fn from(e: CcopfError) -> Self {
        match e {
            CcopfError::Infeasible { .. } | CcopfError::NoParticipants { .. } => MechanismError::NotAccommodable(e),
            other => MechanismError::Ccopf(other),
        }
    }
}

/// Which limit families a realized dispatch respects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Feasibility {
    pub generation: bool,
    pub voltage: bool,
    pub flow: bool,
    pub overall: bool,
}

impl Feasibility {
    /// Checks generator boxes, voltage band and the circular flow limit.
    pub fn check(grid: &RadialGrid, g_p: &[f64], g_q: &[f64], f_p: &[f64], f_q: &[f64], u: &[f64]) -> Feasibility {
        let within = |v: f64, lo: f64, hi: f64| v >= lo - LIMIT_TOL && v <= hi + LIMIT_TOL;
        let generation = (0..grid.node_count()).all(|i| {
            within(g_p[i], grid.g_p_min[i], grid.g_p_max[i]) && within(g_q[i], grid.g_q_min[i], grid.g_q_max[i])
        });
        let voltage = (1..grid.node_count()).all(|i| {
            within(u[i], grid.v_min[i] * grid.v_min[i], grid.v_max[i] * grid.v_max[i])
        });
        let flow = (0..grid.line_count()).all(|k| f_p[k].hypot(f_q[k]) <= grid.f_max[k] + LIMIT_TOL);
        Feasibility {
            generation,
            voltage,
            flow,
            overall: generation && voltage && flow,
        }
    }
}

/// A released dispatch, in per-unit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RealizedDispatch {
    pub xi: Vec<f64>,
    pub g_p: Vec<f64>,
    pub g_q: Vec<f64>,
    pub f_p: Vec<f64>,
    pub f_q: Vec<f64>,
    pub u: Vec<f64>,
    pub feasible: Feasibility,
    pub seed: u64,
}

impl RealizedDispatch {
    fn from_dispatch(grid: &RadialGrid, d: &DispatchSolution, xi: Vec<f64>, seed: u64) -> RealizedDispatch {
        let feasible = Feasibility::check(grid, &d.g_p, &d.g_q, &d.f_p, &d.f_q, &d.u);
        RealizedDispatch {
            xi,
            g_p: d.g_p.clone(),
            g_q: d.g_q.clone(),
            f_p: d.f_p.clone(),
            f_q: d.f_q.clone(),
            u: d.u.clone(),
            feasible,
            seed,
        }
    }

    pub fn cost(&self, grid: &RadialGrid) -> f64 {
        dopf::dispatch_cost(grid, &self.g_p)
    }
}

/// Budget consumed under sequential composition.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PrivacyLedger {
    pub epsilon_per_draw: f64,
    pub delta_per_draw: f64,
    pub draws: u32,
    pub epsilon_spent: f64,
}

impl PrivacyLedger {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        PrivacyLedger {
            epsilon_per_draw: epsilon,
            delta_per_draw: delta,
            draws: 0,
            epsilon_spent: 0.0,
        }
    }

    pub fn record_draw(&mut self) {
        self.draws += 1;
        self.epsilon_spent = f64::from(self.draws) * self.epsilon_per_draw;
    }
}

/// Response matrices of an affine policy: generation, flows and voltages
/// each move by a fixed row times `ξ`.
#[derive(Debug, Clone)]
pub struct AffineMaps {
    pub nominal: DispatchSolution,
    pub gen_p: DMatrix<f64>,
    pub gen_q: DMatrix<f64>,
    /// Rows `agg_ℓ`; realized flows subtract `agg_ℓ · ξ`.
    pub flow_p: DMatrix<f64>,
    pub flow_q: DMatrix<f64>,
    /// Rows `2 Σ_{path} (r agg + x agg^q)`; node 0 stays at its setpoint.
    pub volt: DMatrix<f64>,
}

impl AffineMaps {
    pub fn new(grid: &RadialGrid, topo: &TopologyIndex, affine: &AffineSolution) -> AffineMaps {
        let n = grid.node_count();
        let l = grid.line_count();
        let mut flow_p = DMatrix::zeros(l, l);
        let mut flow_q = DMatrix::zeros(l, l);
        for line in 0..l {
            for &j in &topo.line_downstream_nodes[line] {
                for k in 0..l {
                    flow_p[(line, k)] += affine.rho_p[(j, k)];
                    flow_q[(line, k)] += affine.rho_q[(j, k)];
                }
            }
        }
        let mut volt = DMatrix::zeros(n, l);
        for i in 1..n {
            let (row, _) = ccopf::voltage_std_row(grid, topo, &affine.rho_p, &affine.rho_q, i, &affine.sigma)
                .expect("non-root node");
            for k in 0..l {
                volt[(i, k)] = row[k];
            }
        }
        AffineMaps {
            nominal: affine.nominal.clone(),
            gen_p: affine.rho_p.clone(),
            gen_q: affine.rho_q.clone(),
            flow_p,
            flow_q,
            volt,
        }
    }

    pub fn realize(&self, grid: &RadialGrid, xi: &[f64], seed: u64) -> Result<RealizedDispatch, MechanismError> {
        let l = self.flow_p.nrows();
        if xi.len() != l {
            return Err(MechanismError::Length {
                expected: l,
                got: xi.len(),
            });
        }
        let x = DVector::from_column_slice(xi);
        let nom = &self.nominal;
        let add = |base: &[f64], m: &DMatrix<f64>, sign: f64| -> Vec<f64> {
            let d = m * &x;
            base.iter().zip(d.iter()).map(|(b, v)| b + sign * v).collect()
        };
        let g_p = add(&nom.g_p, &self.gen_p, 1.0);
        let g_q = add(&nom.g_q, &self.gen_q, 1.0);
        let f_p = add(&nom.f_p, &self.flow_p, -1.0);
        let f_q = add(&nom.f_q, &self.flow_q, -1.0);
        let u = add(&nom.u, &self.volt, 1.0);
        let feasible = Feasibility::check(grid, &g_p, &g_q, &f_p, &f_q, &u);
        Ok(RealizedDispatch {
            xi: xi.to_vec(),
            g_p,
            g_q,
            f_p,
            f_q,
            u,
            feasible,
            seed,
        })
    }
}

/// Evaluates the affine policy at one noise vector.
pub fn realize(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    affine: &AffineSolution,
    xi: &[f64],
) -> Result<RealizedDispatch, MechanismError> {
    AffineMaps::new(grid, topo, affine).realize(grid, xi, 0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MechanismConfig {
    pub ccopf: CcopfConfig,
    /// Extra draws allowed after an infeasible one; each costs another `ε`.
    pub max_resamples: u32,
    pub settings: SolverSettings,
}

impl MechanismConfig {
    pub fn with_levels(levels: ChanceLevels, sides: usize) -> Self {
        let mut c = MechanismConfig::default();
        c.ccopf.levels = levels;
        c.ccopf.sides = sides;
        c
    }
}

/// Output of one mechanism run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MechanismRun {
    pub realized: RealizedDispatch,
    pub ledger: PrivacyLedger,
    pub spec: PrivacySpec,
    /// The affine policy; absent for the output-perturbation baseline.
    pub policy: Option<AffineSolution>,
    /// The deterministic optimum that was perturbed (baseline only).
    pub nominal: Option<DispatchSolution>,
}

/// Draws from the policy until a feasible realization appears or the
/// resampling allowance runs out. Stream `t` of `seed` feeds draw `t`.
pub fn draw_from_policy(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    affine: &AffineSolution,
    ledger: &mut PrivacyLedger,
    seed: u64,
    max_resamples: u32,
) -> Result<RealizedDispatch, MechanismError> {
    let maps = AffineMaps::new(grid, topo, affine);
    let mut attempt = 0u32;
    loop {
        let mut sampler = GaussianSampler::new(seed, u64::from(attempt), &affine.sigma);
        let xi = sampler.sample();
        ledger.record_draw();
        let realized = maps.realize(grid, &xi, seed)?;
        if realized.feasible.overall || attempt >= max_resamples {
            return Ok(realized);
        }
        attempt += 1;
    }
}

/// The chance-constrained mechanism: calibrate, solve, sample, realize.
pub fn run_dp_ccopf(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    epsilon: f64,
    delta: f64,
    beta: &[f64],
    config: &MechanismConfig,
    seed: u64,
) -> Result<MechanismRun, MechanismError> {
    let spec = calibrate_sigma(epsilon, delta, beta)?;
    let affine = ccopf::solve_ccopf_with(grid, topo, &spec, &config.ccopf, config.settings)?;
    let mut ledger = PrivacyLedger::new(epsilon, delta);
    let realized = draw_from_policy(grid, topo, &affine, &mut ledger, seed, config.max_resamples)?;
    Ok(MechanismRun {
        realized,
        ledger,
        spec,
        policy: Some(affine),
        nominal: None,
    })
}

/// Active injections implied by fixed active flows through nodal balance.
pub fn implied_generation(grid: &RadialGrid, topo: &TopologyIndex, f_p: &[f64]) -> Vec<f64> {
    let n = grid.node_count();
    let mut g = grid.d_p.clone();
    for i in 1..n {
        g[i] -= f_p[RadialGrid::line_into(i)];
        for &c in &topo.children[i] {
            g[i] += f_p[RadialGrid::line_into(c)];
        }
    }
    g[0] = (1..n).map(|i| grid.d_p[i] - g[i]).sum();
    g
}

/// Re-dispatch after perturbing the deterministic optimum's flows.
/// `None` means no dispatch can carry the perturbed flows.
pub fn redispatch_fixed_flows(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    sides: usize,
    f_p: &[f64],
    settings: SolverSettings,
) -> Result<Option<DispatchSolution>, MechanismError> {
    // Nodal balance pins every active injection; a box violation already settles it.
    let g = implied_generation(grid, topo, f_p);
    let off_box = (0..grid.node_count())
        .any(|i| g[i] < grid.g_p_min[i] - LIMIT_TOL || g[i] > grid.g_p_max[i] + LIMIT_TOL);
    if off_box {
        return Ok(None);
    }
    Ok(dopf::solve_with_fixed_flows(grid, topo, sides, f_p, settings)?)
}

/// Output perturbation: solve, noise the active flows, re-solve with them fixed.
pub fn run_output_perturbation(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    epsilon: f64,
    delta: f64,
    beta: &[f64],
    sides: usize,
    seed: u64,
) -> Result<MechanismRun, MechanismError> {
    let spec = calibrate_sigma(epsilon, delta, beta)?;
    let settings = SolverSettings::default();
    let nominal = dopf::solve_dopf_with(grid, topo, sides, settings)?;
    let mut ledger = PrivacyLedger::new(epsilon, delta);
    let realized = perturb_and_redispatch(grid, topo, &nominal, &spec.sigma, sides, seed, 0, settings)?;
    ledger.record_draw();
    Ok(MechanismRun {
        realized,
        ledger,
        spec,
        policy: None,
        nominal: Some(nominal),
    })
}

/// One output-perturbation draw from an already solved optimum.
#[allow(clippy::too_many_arguments)]
pub fn perturb_and_redispatch(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    nominal: &DispatchSolution,
    sigma: &[f64],
    sides: usize,
    seed: u64,
    stream: u64,
    settings: SolverSettings,
) -> Result<RealizedDispatch, MechanismError> {
    let xi = GaussianSampler::new(seed, stream, sigma).sample();
    let f_p: Vec<f64> = nominal.f_p.iter().zip(&xi).map(|(f, x)| f + x).collect();
    match redispatch_fixed_flows(grid, topo, sides, &f_p, settings)? {
        Some(d) => Ok(RealizedDispatch::from_dispatch(grid, &d, xi, seed)),
        None => {
            let n = grid.node_count();
            let l = grid.line_count();
            Ok(RealizedDispatch {
                xi,
                g_p: implied_generation(grid, topo, &f_p),
                g_q: vec![f64::NAN; n],
                f_p,
                f_q: vec![f64::NAN; l],
                u: vec![f64::NAN; n],
                feasible: Feasibility {
                    generation: false,
                    voltage: false,
                    flow: false,
                    overall: false,
                },
                seed,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grid::build_topology;
    use crate::privacy::beta_from_fraction;

    #[test]
    fn zero_beta_returns_deterministic_optimum() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let run = run_dp_ccopf(&g, &topo, 1.0, 0.07, &[0.0; 14], &MechanismConfig::default(), 3).unwrap();
        let d = dopf::solve_dopf(&g, &topo, dopf::DEFAULT_SIDES).unwrap();
        assert_eq!(run.ledger.epsilon_spent, 1.0);
        assert!(run.realized.xi.iter().all(|x| *x == 0.0));
        let cost = run.realized.cost(&g);
        assert!((cost - d.objective).abs() < 1e-6 * d.objective);
        assert!(run.realized.feasible.overall);
        let op = run_output_perturbation(&g, &topo, 1.0, 0.07, &[0.0; 14], 12, 3).unwrap();
        assert!(op.realized.feasible.overall);
        assert!((op.realized.cost(&g) - d.objective).abs() < 1e-6 * d.objective);
    }

    #[test]
    fn unit_shock_moves_own_flow_by_sigma() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 1.0 / 14.0, &beta_from_fraction(&g, 0.1)).unwrap();
        let sol = ccopf::solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()).unwrap();
        let zero = realize(&g, &topo, &sol, &[0.0; 14]).unwrap();
        assert!(zero.feasible.overall);
        for k in 0..14 {
            let mut xi = vec![0.0; 14];
            xi[k] = spec.sigma[k];
            let r = realize(&g, &topo, &sol, &xi).unwrap();
            assert!((r.f_p[k] - sol.nominal.f_p[k] - spec.sigma[k]).abs() < 1e-9);
        }
        assert!(matches!(realize(&g, &topo, &sol, &[0.0; 3]), Err(MechanismError::Length { .. })));
    }

    #[test]
    fn ledger_is_linear_and_runs_reproducible() {
        let mut l = PrivacyLedger::new(0.5, 0.1);
        for _ in 0..7 {
            l.record_draw();
        }
        assert_eq!(l.epsilon_spent, 3.5);
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let beta = beta_from_fraction(&g, 0.1);
        let cfg = MechanismConfig {
            max_resamples: 5,
            ..Default::default()
        };
        let a = run_dp_ccopf(&g, &topo, 1.0, 1.0 / 14.0, &beta, &cfg, 11).unwrap();
        let b = run_dp_ccopf(&g, &topo, 1.0, 1.0 / 14.0, &beta, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ledger.epsilon_spent, f64::from(a.ledger.draws));
    }

    #[test]
    fn implied_generation_balances() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let d = dopf::solve_dopf(&g, &topo, 12).unwrap();
        let gi = implied_generation(&g, &topo, &d.f_p);
        for i in 0..15 {
            assert!((gi[i] - d.g_p[i]).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn too_much_noise_is_not_accommodable() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let err = run_dp_ccopf(&g, &topo, 1.0, 0.1, &[0.0, 2.0], &MechanismConfig::default(), 1).unwrap_err();
        assert!(matches!(err, MechanismError::NotAccommodable(_)));
        assert!(err.to_string().starts_with("privacy requirement cannot be accommodated"));
    }
}
