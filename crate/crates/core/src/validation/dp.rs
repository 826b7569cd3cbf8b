//! Statistical falsification of the differential-privacy inequality.
//!
//! The mechanism is run on a dataset and on its two neighbours with one
//! load moved by `±β`. The released flow on the line into that node is
//! binned on a common grid and every bin is tested against
//! `P̂_a ≤ e^ε P̂_b + δ + 3 (w_a + e^ε w_b)`, with `w` the Wilson half-width.
//! A histogram can only refute the guarantee, never certify it.

use crate::ccopf::{solve_ccopf, ChanceLevels, CcopfConfig};
use crate::dopf::DEFAULT_SIDES;
use crate::grid::{RadialGrid, TopologyIndex};
use crate::mechanism::AffineMaps;
use crate::privacy::{adjacent_dataset, beta_on_nodes, calibrate_sigma};
use crate::rng::GaussianSampler;

use super::mc::Histogram;
use super::ValidationError;

#[derive(Debug, Clone, PartialEq)]
pub struct DpRatioOptions {
    pub node: usize,
    /// Load shift in per-unit.
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub levels: ChanceLevels,
    pub sides: usize,
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
}

impl DpRatioOptions {
    pub fn new(node: usize, beta: f64, epsilon: f64, delta: f64) -> Self {
        DpRatioOptions {
            node,
            beta,
            epsilon,
            delta,
            levels: ChanceLevels::default(),
            sides: DEFAULT_SIDES,
            samples: 5000,
            bins: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DpRatioReport {
    pub sigma: f64,
    /// Histograms of the released flow for `D`, `D − β` and `D + β`, on common edges.
    pub base: Histogram,
    pub lower: Histogram,
    pub upper: Histogram,
    /// Largest `(P̂_a − δ) / P̂_b` over bins and ordered pairs with `P̂_b > 0`.
    pub max_ratio: f64,
    /// Bins breaking the inequality beyond the sampling slack.
    pub violations: usize,
    /// Total-variation distance of `D` to the farther neighbour.
    pub tv_distance: f64,
}

/// Wilson score half-width at one standard normal deviate.
pub fn wilson_half_width(p: f64, n: usize) -> f64 {
    let n = n.max(1) as f64;
    (p * (1.0 - p) / n + 1.0 / (4.0 * n * n)).sqrt() / (1.0 + 1.0 / n)
}

/// `ln(φ_a(x) / φ_b(x))` for two normals sharing deviation `s`.
pub fn gaussian_log_density_ratio(x: f64, mean_a: f64, mean_b: f64, s: f64) -> f64 {
    ((x - mean_b).powi(2) - (x - mean_a).powi(2)) / (2.0 * s * s)
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn released_flows(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    opts: &DpRatioOptions,
    stream: u64,
) -> Result<(Vec<f64>, f64), ValidationError> {
    let line = RadialGrid::line_into(opts.node);
    let mut beta = beta_on_nodes(grid, 0.0, &[]);
    beta[line] = opts.beta;
    let spec = calibrate_sigma(opts.epsilon, opts.delta, &beta)?;
    let cfg = CcopfConfig {
        levels: opts.levels,
        sides: opts.sides,
        ..Default::default()
    };
    let sol = solve_ccopf(grid, topo, &spec, &cfg)?;
    let maps = AffineMaps::new(grid, topo, &sol);
    let row: Vec<f64> = maps.flow_p.row(line).iter().copied().collect();
    let nominal = sol.nominal.f_p[line];
    let mut sampler = GaussianSampler::new(opts.seed, stream, &sol.sigma);
    let mut xi = vec![0.0; grid.line_count()];
    let flows = (0..opts.samples)
        .map(|_| {
            sampler.fill(&mut xi);
            nominal - row.iter().zip(&xi).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect();
    Ok((flows, spec.sigma[line]))
}

pub fn dp_ratio_check(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    opts: &DpRatioOptions,
) -> Result<DpRatioReport, ValidationError> {
    if opts.node == 0 || opts.node >= grid.node_count() {
        return Err(ValidationError::Parameter {
            name: "node",
            reason: format!("{} is not a load node", opts.node),
        });
    }
    let lower_grid = adjacent_dataset(grid, opts.node, -1.0, opts.beta)?;
    let upper_grid = adjacent_dataset(grid, opts.node, 1.0, opts.beta)?;
    let (base, sigma) = released_flows(grid, topo, opts, 0)?;
    let (lower, _) = released_flows(&lower_grid, topo, opts, 1)?;
    let (upper, _) = released_flows(&upper_grid, topo, opts, 2)?;
    let all = base.iter().chain(&lower).chain(&upper);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let hb = Histogram::new(&base, opts.bins, lo, hi);
    let hl = Histogram::new(&lower, opts.bins, lo, hi);
    let hu = Histogram::new(&upper, opts.bins, lo, hi);
    let (pb, pl, pu) = (hb.frequencies(), hl.frequencies(), hu.frequencies());
    let e = opts.epsilon.exp();
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for (a, b) in [(&pb, &pl), (&pl, &pb), (&pb, &pu), (&pu, &pb)] {
        for (x, y) in a.iter().zip(b.iter()) {
            if *y > 0.0 {
                max_ratio = max_ratio.max((x - opts.delta) / y);
            }
            let slack = 3.0 * (wilson_half_width(*x, opts.samples) + e * wilson_half_width(*y, opts.samples));
            if *x > e * y + opts.delta + slack {
                violations += 1;
            }
        }
    }
    Ok(DpRatioReport {
        sigma,
        tv_distance: tv(&pb, &pl).max(tv(&pb, &pu)),
        base: hb,
        lower: hl,
        upper: hu,
        max_ratio,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::normal_pdf;

    #[test]
    fn log_ratio_matches_densities() {
        let (ma, mb, s) = (0.3, -0.1, 0.7);
        for x in [-2.0, -0.5, 0.0, 0.4, 1.7] {
            let direct = (normal_pdf((x - ma) / s) / normal_pdf((x - mb) / s)).ln();
            assert!((gaussian_log_density_ratio(x, ma, mb, s) - direct).abs() < 1e-12);
            let mid = 0.5 * (ma + mb);
            let bound = (ma - mb).abs() * (x - mid).abs() / (s * s);
            assert!(gaussian_log_density_ratio(x, ma, mb, s).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn identical_datasets_give_unit_ratio() {
        let g = crate::fixtures::feeder15();
        let topo = crate::grid::build_topology(&g).unwrap();
        let mut opts = DpRatioOptions::new(7, 0.0, 1.0, 0.5);
        opts.samples = 4000;
        let rep = dp_ratio_check(&g, &topo, &opts).unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.tv_distance, 0.0);
    }

    #[test]
    fn wilson_is_positive_at_extremes() {
        assert!(wilson_half_width(0.0, 100) > 0.0);
        assert!(wilson_half_width(1.0, 100) > 0.0);
        assert!(wilson_half_width(0.5, 100) < 0.06);
    }
}
