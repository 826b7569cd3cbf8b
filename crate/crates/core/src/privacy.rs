//! Gaussian-mechanism calibration and the scalar normal-distribution kernels.
//!
//! `calibrate_sigma` maps `(ε, δ, β)` to per-line noise deviations
//! `σ = β √(2 ln(1.25/δ)) / ε`. The inverse normal CDF is Acklam's rational
//! approximation polished with one Halley step against an erfc-based CDF.

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::grid::RadialGrid;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon = {0} outside (0, 1]; the Gaussian mechanism bound only holds there")]
    Epsilon(f64),
    #[error("delta = {0} outside (0, 1)")]
    Delta(f64),
    #[error("beta[{index}] = {value} must be finite and nonnegative")]
    Beta { index: usize, value: f64 },
    #[error("probability {name} = {value} outside (0, 1)")]
    Probability { name: &'static str, value: f64 },
    #[error("node {0} has no adjustable load")]
    Node(usize),
    #[error("adjacent load at node {node} would be negative ({value})")]
    NegativeLoad { node: usize, value: f64 },
}

/// Privacy parameters with the derived per-line noise deviations (per-unit).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PrivacySpec {
    /// No noise at all; useful as the degenerate reference.
    pub fn zero(lines: usize) -> PrivacySpec {
        PrivacySpec {
            epsilon: 1.0,
            delta: 0.5,
            beta: vec![0.0; lines],
            sigma: vec![0.0; lines],
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }
}

/// `√(2 ln(1.25/δ)) / ε`.
pub fn noise_multiplier(epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(PrivacyError::Epsilon(epsilon));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Delta(delta));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

pub fn calibrate_sigma(epsilon: f64, delta: f64, beta: &[f64]) -> Result<PrivacySpec, PrivacyError> {
    let k = noise_multiplier(epsilon, delta)?;
    if let Some((index, &value)) = beta.iter().enumerate().find(|(_, b)| !(b.is_finite() && **b >= 0.0)) {
        return Err(PrivacyError::Beta { index, value });
    }
    Ok(PrivacySpec {
        epsilon,
        delta,
        beta: beta.to_vec(),
        sigma: beta.iter().map(|b| b * k).collect(),
    })
}

/// Per-line adjacency as a fraction of the load at each line's head node.
pub fn beta_from_fraction(grid: &RadialGrid, frac: f64) -> Vec<f64> {
    (0..grid.line_count())
        .map(|k| frac * grid.d_p[RadialGrid::head(k)])
        .collect()
}

/// Adjacency on the listed nodes only.
pub fn beta_on_nodes(grid: &RadialGrid, frac: f64, nodes: &[usize]) -> Vec<f64> {
    let mut beta = vec![0.0; grid.line_count()];
    for &i in nodes {
        beta[RadialGrid::line_into(i)] = frac * grid.d_p[i];
    }
    beta
}

/// One over the number of load customers.
pub fn default_delta(grid: &RadialGrid) -> f64 {
    1.0 / grid.line_count().max(1) as f64
}

/// Dataset differing from `grid` only in node `node`'s load, by `direction * beta`.
pub fn adjacent_dataset(grid: &RadialGrid, node: usize, direction: f64, beta: f64) -> Result<RadialGrid, PrivacyError> {
    if node == 0 || node >= grid.node_count() {
        return Err(PrivacyError::Node(node));
    }
    let value = grid.d_p[node] + direction * beta;
    if value < 0.0 {
        return Err(PrivacyError::NegativeLoad { node, value });
    }
    Ok(grid.with_load(node, value))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.38357751867269e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

fn acklam(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Inverse standard normal CDF.
pub fn inverse_normal_cdf(p: f64) -> Result<f64, PrivacyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PrivacyError::Probability { name: "p", value: p });
    }
    let x = acklam(p);
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// `Φ⁻¹(1 − η)`, computed as `−Φ⁻¹(η)` to keep precision for small `η`.
pub fn z_quantile(eta: f64) -> Result<f64, PrivacyError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(PrivacyError::Probability { name: "eta", value: eta });
    }
    Ok(-inverse_normal_cdf(eta)?)
}

/// `φ(Φ⁻¹(1 − ϱ)) / ϱ`, the CVaR multiplier of a normal loss.
pub fn cvar_factor(varrho: f64) -> Result<f64, PrivacyError> {
    if !(varrho > 0.0 && varrho < 1.0) {
        return Err(PrivacyError::Probability {
            name: "varrho",
            value: varrho,
        });
    }
    Ok(normal_pdf(z_quantile(varrho)?) / varrho)
}
