//! Experiment drivers: load-pattern obfuscation, the CVaR trade-off sweep
//! and the output-perturbation comparison.

use nalgebra::{DMatrix, DVector};

use crate::ccopf::{solve_ccopf, AffineSolution, CcopfConfig, ChanceLevels, Variant};
use crate::conic::SolverSettings;
use crate::dopf::{self, dispatch_cost};
use crate::grid::{RadialGrid, TopologyIndex};
use crate::mechanism::{perturb_and_redispatch, AffineMaps};
use crate::privacy::{beta_on_nodes, calibrate_sigma, PrivacySpec};
use crate::rng::GaussianSampler;

use super::{empirical_cvar, mean_std, ValidationError};

/// Angular frequencies of the two sinusoidal load components, slow first.
pub const COMPONENT_FREQUENCIES: [f64; 2] = [0.05, 0.75];

/// Periodic load multiplier: a clipped daily shape plus two small ripples.
pub fn load_multiplier(t: f64) -> f64 {
    let slow = (COMPONENT_FREQUENCIES[0] * t).sin();
    let fast = (COMPONENT_FREQUENCIES[1] * t).sin();
    slow.max(0.7) + 0.05 * slow + 0.025 * fast
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeseriesOptions {
    pub node: usize,
    /// Load adjacency at the node, in MW.
    pub beta_mw: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub steps: usize,
    pub seed: u64,
    pub config: CcopfConfig,
}

impl TimeseriesOptions {
    pub fn new(node: usize, beta_mw: f64, epsilon: f64, delta: f64, steps: usize) -> Self {
        TimeseriesOptions {
            node,
            beta_mw,
            epsilon,
            delta,
            steps,
            seed: 0,
            config: CcopfConfig::default(),
        }
    }
}

/// One time step; flows in MW, voltages in per-unit magnitude.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub mean: f64,
    pub lo3: f64,
    pub hi3: f64,
    pub sample: f64,
    pub v_mean: f64,
    pub v_sample: f64,
}

/// Least-squares decomposition of a trace onto the multiplier's components.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ComponentFit {
    pub offset: f64,
    pub plateau: f64,
    /// Peak-to-peak amplitude of each sinusoid in [`COMPONENT_FREQUENCIES`].
    pub peak_to_peak: [f64; 2],
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TimeseriesReport {
    pub node: usize,
    /// Injected noise deviation on the node's line, MW.
    pub noise_std_mw: f64,
    pub trace: Vec<TraceRow>,
    pub mean_fit: Option<ComponentFit>,
    pub sample_fit: Option<ComponentFit>,
}

/// Fits `y ≈ a + b·max(sin ω₀t, 0.7) + Σ (cₖ sin ωₖt + dₖ cos ωₖt)`.
/// Returns `None` when there are fewer points than basis functions.
pub fn fit_components(t: &[f64], y: &[f64]) -> Option<ComponentFit> {
    const COLS: usize = 6;
    if t.len() != y.len() || t.len() < COLS {
        return None;
    }
    let a = DMatrix::from_fn(t.len(), COLS, |r, c| {
        let tt = t[r];
        let [w0, w1] = COMPONENT_FREQUENCIES;
        match c {
            0 => 1.0,
            1 => (w0 * tt).sin().max(0.7),
            2 => (w0 * tt).sin(),
            3 => (w0 * tt).cos(),
            4 => (w1 * tt).sin(),
            _ => (w1 * tt).cos(),
        }
    });
    let b = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let resid = &a * &coef - &b;
    Some(ComponentFit {
        offset: coef[0],
        plateau: coef[1],
        peak_to_peak: [2.0 * coef[2].hypot(coef[3]), 2.0 * coef[4].hypot(coef[5])],
        residual_rms: (resid.norm_squared() / t.len() as f64).sqrt(),
    })
}

pub fn timeseries_demo(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    opts: &TimeseriesOptions,
) -> Result<TimeseriesReport, ValidationError> {
    if opts.node == 0 || opts.node >= grid.node_count() {
        return Err(ValidationError::Parameter {
            name: "node",
            reason: format!("{} is not a load node", opts.node),
        });
    }
    let line = RadialGrid::line_into(opts.node);
    let mut beta = beta_on_nodes(grid, 0.0, &[]);
    beta[line] = grid.pu(opts.beta_mw);
    let spec = calibrate_sigma(opts.epsilon, opts.delta, &beta)?;
    let base_load = grid.d_p[opts.node];
    let mut xi = vec![0.0; grid.line_count()];
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let t = step as f64;
        let g = grid.with_load(opts.node, base_load * load_multiplier(t));
        let sol = solve_ccopf(&g, topo, &spec, &opts.config)?;
        let maps = AffineMaps::new(&g, topo, &sol);
        GaussianSampler::new(opts.seed, step as u64, &sol.sigma).fill(&mut xi);
        let realized = maps.realize(&g, &xi, opts.seed)?;
        let mean = sol.nominal.f_p[line];
        let band = 3.0 * sol.flow_std[line];
        trace.push(TraceRow {
            t,
            mean: g.mw(mean),
            lo3: g.mw(mean - band),
            hi3: g.mw(mean + band),
            sample: g.mw(realized.f_p[line]),
            v_mean: sol.nominal.u[opts.node].max(0.0).sqrt(),
            v_sample: realized.u[opts.node].max(0.0).sqrt(),
        });
    }
    let ts: Vec<f64> = trace.iter().map(|r| r.t).collect();
    let means: Vec<f64> = trace.iter().map(|r| r.mean).collect();
    let samples: Vec<f64> = trace.iter().map(|r| r.sample).collect();
    Ok(TimeseriesReport {
        node: opts.node,
        noise_std_mw: grid.mw(spec.sigma[line]),
        mean_fit: fit_components(&ts, &means),
        sample_fit: fit_components(&ts, &samples),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub expected_cost: f64,
    pub expected_se: f64,
    pub cvar: f64,
    pub cvar_se: f64,
    pub cost_std_analytic: f64,
    /// Σ of per-line flow deviations, MW.
    pub flow_std_sum: f64,
}

fn sampled_costs(grid: &RadialGrid, affine: &AffineSolution, samples: usize, seed: u64) -> Vec<f64> {
    let n = grid.node_count();
    let mut sampler = GaussianSampler::new(seed, 0, &affine.sigma);
    let mut xi = vec![0.0; grid.line_count()];
    let mut g = vec![0.0; n];
    (0..samples)
        .map(|_| {
            sampler.fill(&mut xi);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = affine.nominal.g_p[i] + affine.rho_p.row(i).iter().zip(&xi).map(|(r, x)| r * x).sum::<f64>();
            }
            dispatch_cost(grid, &g)
        })
        .collect()
}

/// Standard error of the plug-in CVaR estimator.
fn cvar_standard_error(costs: &[f64], varrho: f64) -> f64 {
    if costs.len() < 2 {
        return 0.0;
    }
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((varrho * costs.len() as f64).ceil() as usize).clamp(1, costs.len());
    let var = sorted[k - 1];
    let scores: Vec<f64> = costs.iter().map(|c| var + (c - var).max(0.0) / varrho).collect();
    mean_std(&scores).1 / (costs.len() as f64).sqrt()
}

/// Solves the CVaR program at each `θ` and estimates mean and CVaR of the
/// realized cost on a common set of noise draws.
#[allow(clippy::too_many_arguments)]
pub fn cvar_sweep(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    levels: ChanceLevels,
    sides: usize,
    thetas: &[f64],
    varrho: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, ValidationError> {
    thetas
        .iter()
        .map(|&theta| {
            let cfg = CcopfConfig {
                levels,
                sides,
                variant: Variant::Cvar { theta, varrho },
            };
            let sol = solve_ccopf(grid, topo, spec, &cfg)?;
            let costs = sampled_costs(grid, &sol, samples, seed);
            let (mean, std) = mean_std(&costs);
            Ok(SweepRow {
                theta,
                expected_cost: mean,
                expected_se: std / (samples.max(1) as f64).sqrt(),
                cvar: empirical_cvar(&costs, varrho),
                cvar_se: cvar_standard_error(&costs, varrho),
                cost_std_analytic: sol.cost_std,
                flow_std_sum: grid.mw(sol.flow_std.iter().sum::<f64>()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OpComparisonRow {
    /// Nodes `1..=set_size` are protected.
    pub set_size: usize,
    pub op_infeasible: f64,
    pub dp_infeasible: f64,
}

/// Infeasibility frequencies of output perturbation and of the DP CC-OPF
/// mechanism as the protected node set grows.
#[allow(clippy::too_many_arguments)]
pub fn op_comparison(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    epsilon: f64,
    delta: f64,
    frac: f64,
    set_sizes: &[usize],
    samples: usize,
    config: &CcopfConfig,
    seed: u64,
) -> Result<Vec<OpComparisonRow>, ValidationError> {
    let settings = SolverSettings::default();
    let nominal = dopf::solve_dopf_with(grid, topo, config.sides, settings)?;
    let mut rows = Vec::with_capacity(set_sizes.len());
    for &size in set_sizes {
        if size == 0 || size >= grid.node_count() {
            return Err(ValidationError::Parameter {
                name: "set_size",
                reason: format!("{size} is outside 1..={}", grid.line_count()),
            });
        }
        let nodes: Vec<usize> = (1..=size).collect();
        let spec = calibrate_sigma(epsilon, delta, &beta_on_nodes(grid, frac, &nodes))?;
        let mut op_bad = 0usize;
        for s in 0..samples {
            let r = perturb_and_redispatch(grid, topo, &nominal, &spec.sigma, config.sides, seed, s as u64, settings)?;
            if !r.feasible.overall {
                op_bad += 1;
            }
        }
        let sol = solve_ccopf(grid, topo, &spec, config)?;
        let maps = AffineMaps::new(grid, topo, &sol);
        let mut sampler = GaussianSampler::new(seed, u64::MAX, &sol.sigma);
        let mut xi = vec![0.0; grid.line_count()];
        let mut dp_bad = 0usize;
        for _ in 0..samples {
            sampler.fill(&mut xi);
            if !maps.realize(grid, &xi, seed)?.feasible.overall {
                dp_bad += 1;
            }
        }
        let n = samples.max(1) as f64;
        rows.push(OpComparisonRow {
            set_size: size,
            op_infeasible: op_bad as f64 / n,
            dp_infeasible: dp_bad as f64 / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_known_values() {
        assert!((load_multiplier(0.0) - 0.7).abs() < 1e-15);
        let t = std::f64::consts::PI / 0.1;
        let expect = 1.0 + 0.05 + 0.025 * (0.75 * t).sin();
        assert!((load_multiplier(t) - expect).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_synthetic_amplitudes() {
        let t: Vec<f64> = (1..=300).map(|s| s as f64).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&tt| 2.0 + 3.0 * (0.05 * tt).sin().max(0.7) + 0.4 * (0.05 * tt).sin() + 0.1 * (0.75 * tt + 0.3).sin())
            .collect();
        let fit = fit_components(&t, &y).unwrap();
        assert!((fit.peak_to_peak[0] - 0.8).abs() < 1e-8);
        assert!((fit.peak_to_peak[1] - 0.2).abs() < 1e-8);
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn empty_trace_for_zero_steps() {
        let g = crate::fixtures::feeder15();
        let topo = crate::grid::build_topology(&g).unwrap();
        let rep = timeseries_demo(&g, &topo, &TimeseriesOptions::new(7, 0.07, 1.0, 1.0 / 14.0, 0)).unwrap();
        assert!(rep.trace.is_empty());
        assert!(rep.mean_fit.is_none());
    }

    #[test]
    fn cvar_se_of_constant_is_zero() {
        assert_eq!(cvar_standard_error(&[3.0; 50], 0.1), 0.0);
    }
}
