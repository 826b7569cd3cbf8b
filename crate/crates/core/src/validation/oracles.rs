//! Brute-force checks of the flow-deviation floor and the flow sensitivity.

use crate::ccopf::{flow_std_row, AffineSolution};
use crate::conic::SolverSettings;
use crate::dopf::solve_dopf_with;
use crate::grid::{RadialGrid, TopologyIndex};
use crate::privacy::{adjacent_dataset, beta_from_fraction};

use super::ValidationError;

/// Worst change of any optimal active flow when node `node`'s load moves by
/// up to `beta` either way, probed at `steps` evenly spaced offsets.
pub fn sensitivity_oracle(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    node: usize,
    beta: f64,
    steps: usize,
    sides: usize,
) -> Result<f64, ValidationError> {
    if beta == 0.0 {
        return Ok(0.0);
    }
    let settings = SolverSettings::default();
    let base = solve_dopf_with(grid, topo, sides, settings)?;
    let mut worst: f64 = 0.0;
    for j in 1..=steps.max(1) {
        let b = beta * j as f64 / steps.max(1) as f64;
        for dir in [-1.0, 1.0] {
            let adj = match adjacent_dataset(grid, node, dir, b) {
                Ok(a) => a,
                // A load cannot go negative; that side of the neighbourhood is empty.
                Err(crate::privacy::PrivacyError::NegativeLoad { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let other = solve_dopf_with(&adj, topo, sides, settings)?;
            for (a, b) in base.f_p.iter().zip(&other.f_p) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SensitivityRow {
    pub node: usize,
    pub beta: f64,
    pub sensitivity: f64,
}

/// Oracle for every load node with `β_i = frac · d_i`.
pub fn sensitivity_table(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    frac: f64,
    steps: usize,
    sides: usize,
) -> Result<Vec<SensitivityRow>, ValidationError> {
    let beta = beta_from_fraction(grid, frac);
    (1..grid.node_count())
        .map(|node| {
            let b = beta[RadialGrid::line_into(node)];
            Ok(SensitivityRow {
                node,
                beta: b,
                sensitivity: sensitivity_oracle(grid, topo, node, b, steps, sides)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FloorCheck {
    pub line: usize,
    pub flow_std: f64,
    pub sigma: f64,
    pub floor_ok: bool,
    /// The line's own entry of its flow response row; always −1 under balanced participation.
    pub own_coordinate: f64,
    pub coordinate_ok: bool,
}

/// Checks each flow deviation against the injected noise on that line.
pub fn std_floor_check(topo: &TopologyIndex, affine: &AffineSolution) -> Vec<FloorCheck> {
    (0..affine.sigma.len())
        .map(|k| {
            let (row, std) = flow_std_row(topo, &affine.rho_p, k, &affine.sigma);
            FloorCheck {
                line: k + 1,
                flow_std: std,
                sigma: affine.sigma[k],
                floor_ok: std >= affine.sigma[k] - 1e-8,
                own_coordinate: row[k],
                coordinate_ok: (row[k] + 1.0).abs() <= 1e-8,
            }
        })
        .collect()
}
