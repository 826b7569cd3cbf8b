//! Sampling the affine policy and tallying limit violations.

use crate::ccopf::{AffineSolution, ChanceLevels};
use crate::dopf::{dispatch_cost, polygon_coefficients, DEFAULT_SIDES};
use crate::grid::{RadialGrid, TopologyIndex};
use crate::mechanism::{AffineMaps, LIMIT_TOL};
use crate::rng::GaussianSampler;

use super::{mean_std, ValidationError};

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
    pub levels: ChanceLevels,
    pub sides: usize,
    pub varrho: f64,
    /// Line whose realized active flow is histogrammed.
    pub histogram_line: usize,
    pub bins: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            samples: 5000,
            seed: 0,
            levels: ChanceLevels::default(),
            sides: DEFAULT_SIDES,
            varrho: 0.1,
            histogram_line: 0,
            bins: 20,
        }
    }
}

/// Violation frequency of one chance-constrained row.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RowViolation {
    pub tag: String,
    pub eta: f64,
    pub frequency: f64,
    /// `η + 3 √(η(1−η)/N)`.
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FamilyViolation {
    pub generation: f64,
    pub voltage: f64,
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the end bins.
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            let b = (b.max(0.0) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
        Histogram {
            lo,
            hi,
            counts,
            total: values.len(),
        }
    }

    pub fn spanning(values: &[f64], bins: usize) -> Histogram {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Histogram::new(values, bins, 0.0, 0.0);
        }
        Histogram::new(values, bins, lo, hi)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total.max(1) as f64;
        self.counts.iter().map(|c| *c as f64 / n).collect()
    }

    pub fn edges(&self) -> Vec<f64> {
        let k = self.counts.len();
        (0..=k).map(|i| self.lo + (self.hi - self.lo) * i as f64 / k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct McReport {
    pub samples: usize,
    pub per_constraint_violation: Vec<RowViolation>,
    pub family_violation: FamilyViolation,
    /// Share of samples violating any exact limit (circular flow limits).
    pub joint_violation: f64,
    /// Share of samples violating any chance-constrained row (polygon flow limits).
    pub joint_row_violation: f64,
    pub flow_std_mc: Vec<f64>,
    pub flow_std_analytic: Vec<f64>,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub cost_cvar: f64,
    pub cost_std_analytic: f64,
    pub varrho: f64,
    /// Largest gap between realized voltages and those rebuilt from realized flows.
    pub voltage_identity_error: f64,
    /// Largest nodal or line balance residual over all samples.
    pub balance_error: f64,
    pub histogram: Histogram,
}

/// Mean of the worst `⌈ϱN⌉` values.
pub fn empirical_cvar(values: &[f64], varrho: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((varrho * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

struct RowSet {
    tags: Vec<String>,
    etas: Vec<f64>,
    hits: Vec<usize>,
}

pub fn mc_validate(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    affine: &AffineSolution,
    opts: &McOptions,
) -> Result<McReport, ValidationError> {
    let n = grid.node_count();
    let l = grid.line_count();
    if opts.histogram_line >= l {
        return Err(ValidationError::Parameter {
            name: "histogram_line",
            reason: format!("line index {} out of range", opts.histogram_line),
        });
    }
    let poly = polygon_coefficients(opts.sides)?;
    let maps = AffineMaps::new(grid, topo, affine);
    let lv = opts.levels;
    let mut rows = RowSet {
        tags: Vec::new(),
        etas: Vec::new(),
        hits: Vec::new(),
    };
    let mut push = |tag: String, eta: f64| {
        rows.tags.push(tag);
        rows.etas.push(eta);
        rows.hits.push(0);
    };
    for i in 0..n {
        for side in ["gen_p_up", "gen_p_down", "gen_q_up", "gen_q_down"] {
            push(format!("{side}[{i}]"), lv.eta_g);
        }
    }
    for i in 1..n {
        push(format!("volt_up[{i}]"), lv.eta_u);
        push(format!("volt_down[{i}]"), lv.eta_u);
    }
    for k in 0..l {
        for c in 0..poly.len() {
            push(format!("flow[{},{c}]", k + 1), lv.eta_f);
        }
    }

    let mut sampler = GaussianSampler::new(opts.seed, 0, &affine.sigma);
    let mut xi = vec![0.0; l];
    let mut costs = Vec::with_capacity(opts.samples);
    let mut flows: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.samples); l];
    let mut fam = [0usize; 3];
    let mut joint = 0usize;
    let mut joint_rows = 0usize;
    let mut volt_err: f64 = 0.0;
    let mut bal_err: f64 = 0.0;
    let d_total: f64 = grid.d_p.iter().sum();
    for _ in 0..opts.samples {
        sampler.fill(&mut xi);
        let r = maps.realize(grid, &xi, opts.seed)?;
        let mut idx = 0;
        let mut any_row = false;
        let mut hit = |cond: bool, idx: &mut usize| {
            if cond {
                rows.hits[*idx] += 1;
                any_row = true;
            }
            *idx += 1;
        };
        for i in 0..n {
            hit(r.g_p[i] > grid.g_p_max[i] + LIMIT_TOL, &mut idx);
            hit(r.g_p[i] < grid.g_p_min[i] - LIMIT_TOL, &mut idx);
            hit(r.g_q[i] > grid.g_q_max[i] + LIMIT_TOL, &mut idx);
            hit(r.g_q[i] < grid.g_q_min[i] - LIMIT_TOL, &mut idx);
        }
        for i in 1..n {
            hit(r.u[i] > grid.v_max[i] * grid.v_max[i] + LIMIT_TOL, &mut idx);
            hit(r.u[i] < grid.v_min[i] * grid.v_min[i] - LIMIT_TOL, &mut idx);
        }
        for k in 0..l {
            for side in &poly {
                hit(side.slack(r.f_p[k], r.f_q[k], grid.f_max[k]) < -LIMIT_TOL, &mut idx);
            }
        }
        if any_row {
            joint_rows += 1;
        }
        fam[0] += usize::from(!r.feasible.generation);
        fam[1] += usize::from(!r.feasible.voltage);
        fam[2] += usize::from(!r.feasible.flow);
        joint += usize::from(!r.feasible.overall);

        for i in 1..n {
            let mut u = r.u[0];
            for &k in &topo.root_path_lines[i] {
                u -= 2.0 * (grid.r[k] * r.f_p[k] + grid.x[k] * r.f_q[k]);
            }
            volt_err = volt_err.max((u - r.u[i]).abs());
        }
        bal_err = bal_err.max((r.g_p.iter().sum::<f64>() - d_total).abs());
        for k in 0..l {
            let net: f64 = topo.line_downstream_nodes[k].iter().map(|&j| grid.d_p[j] - r.g_p[j]).sum();
            bal_err = bal_err.max((net - r.f_p[k]).abs());
            flows[k].push(r.f_p[k]);
        }
        costs.push(dispatch_cost(grid, &r.g_p));
    }

    let nf = opts.samples.max(1) as f64;
    let per_constraint_violation = rows
        .tags
        .into_iter()
        .zip(rows.etas)
        .zip(rows.hits)
        .map(|((tag, eta), hits)| RowViolation {
            tag,
            eta,
            frequency: hits as f64 / nf,
            bound: eta + 3.0 * (eta * (1.0 - eta) / nf).sqrt(),
        })
        .collect();
    let (cost_mean, cost_std) = mean_std(&costs);
    let cost_cvar = empirical_cvar(&costs, opts.varrho);
    let flow_std_mc = flows.iter().map(|f| mean_std(f).1).collect();
    Ok(McReport {
        samples: opts.samples,
        per_constraint_violation,
        family_violation: FamilyViolation {
            generation: fam[0] as f64 / nf,
            voltage: fam[1] as f64 / nf,
            flow: fam[2] as f64 / nf,
        },
        joint_violation: joint as f64 / nf,
        joint_row_violation: joint_rows as f64 / nf,
        flow_std_mc,
        flow_std_analytic: affine.flow_std.clone(),
        cost_mean,
        cost_std,
        cost_cvar,
        cost_std_analytic: affine.cost_std,
        varrho: opts.varrho,
        voltage_identity_error: volt_err,
        balance_error: bal_err,
        histogram: Histogram::spanning(&flows[opts.histogram_line], opts.bins),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccopf::{solve_ccopf, CcopfConfig};
    use crate::fixtures;
    use crate::grid::build_topology;
    use crate::privacy::{calibrate_sigma, PrivacySpec};

    #[test]
    fn zero_noise_has_no_violations() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let sol = solve_ccopf(&g, &topo, &PrivacySpec::zero(14), &CcopfConfig::default()).unwrap();
        let rep = mc_validate(&g, &topo, &sol, &McOptions { samples: 200, ..Default::default() }).unwrap();
        assert_eq!(rep.joint_violation, 0.0);
        assert_eq!(rep.cost_std, 0.0);
        assert!(rep.per_constraint_violation.iter().all(|r| r.frequency == 0.0));
    }

    #[test]
    fn chain_flow_std_matches() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 0.1, &[0.0, 0.05]).unwrap();
        let sol = solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()).unwrap();
        let n = 20000;
        let rep = mc_validate(&g, &topo, &sol, &McOptions { samples: n, seed: 5, ..Default::default() }).unwrap();
        for k in 0..2 {
            let s = rep.flow_std_analytic[k];
            let se = s / (2.0 * n as f64).sqrt();
            assert!((rep.flow_std_mc[k] - s).abs() <= 4.0 * se + 1e-15, "{k}");
        }
        assert!(rep.voltage_identity_error < 1e-10);
        assert!(rep.balance_error < 1e-10);
    }

    #[test]
    fn cvar_of_known_values() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_cvar(&v, 0.2), 9.5);
        assert_eq!(empirical_cvar(&v, 1.0), 5.5);
        let h = Histogram::new(&v, 5, 0.0, 10.0);
        assert_eq!(h.counts, vec![1, 2, 2, 2, 3]);
        assert_eq!(h.edges().len(), 6);
    }
}
