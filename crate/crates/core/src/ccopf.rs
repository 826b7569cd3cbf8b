//! Chance-constrained OPF with affine noise-response policies.
//!
//! Each line `k` carries a noise component `ξ_k ~ N(0, σ_k²)`. Node `i`
//! answers with `ρ_ik ξ_k` where `ρ_ik = T_ik α_ik`: strict ancestors of the
//! line's head raise output, its subtree lowers it, and each side's
//! participation sums to one. Under that policy a line's flow responds to the
//! noise through `agg_ℓ = ρ_ℓ + Σ_{j below ℓ} ρ_j`, whose own coordinate is
//! always −1, so no line's flow deviation can drop below its own `σ_ℓ`.
//!
//! Generator, voltage and polygon-flow limits are enforced as individual
//! Gaussian chance constraints, each an SOC row. The variance-control and
//! risk-aware variants add epigraph variables on top of the base program.
//!
//! Participation variables exist only for dispatchable nodes and for lines
//! whose noise deviation is positive; the rest cannot affect any constraint.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{self, BuildError, ConicProgram, Row, SolveReport, SolverSettings};
use crate::dopf::{self, add_flow_model, add_quadratic_epigraph, polygon_coefficients, DispatchSolution, DopfError, FlowVars};
use crate::grid::{RadialGrid, TopologyIndex};
use crate::privacy::{cvar_factor, z_quantile, PrivacyError, PrivacySpec};

#[derive(Debug, Error)]
pub enum CcopfError {
    #[error(transparent)]
    Dopf(#[from] DopfError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("{name} = {value} outside (0, 0.5)")]
    Eta { name: &'static str, value: f64 },
    #[error("{name} = {value} is invalid: {reason}")]
    Parameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("noise vector has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("line {line} has noise but no dispatchable node {side} it")]
    NoParticipants { line: usize, side: &'static str },
    #[error("target deviations violate the variance budget: Σσ̂² = {target} > Σσ² = {budget}")]
    VarianceBudget { target: f64, budget: f64 },
    #[error("chance-constrained program is {status}; binding family: {family}")]
    Infeasible { status: conic::SolveStatus, family: String },
}

impl CcopfError {
    pub fn is_solver_failure(&self) -> bool {
        match self {
            CcopfError::Infeasible { .. } => true,
            CcopfError::Dopf(e) => e.is_solver_failure(),
            _ => false,
        }
    }
}

impl From<BuildError> for CcopfError {
    fn from(e: BuildError) -> Self {
        CcopfError::Dopf(DopfError::Build(e))
    }
}

/// Violation probabilities for generator, voltage and flow limits.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ChanceLevels {
    pub eta_g: f64,
    pub eta_u: f64,
    pub eta_f: f64,
}

impl Default for ChanceLevels {
    fn default() -> Self {
        ChanceLevels {
            eta_g: 0.01,
            eta_u: 0.02,
            eta_f: 0.10,
        }
    }
}

impl ChanceLevels {
    pub fn z_factors(&self) -> Result<(f64, f64, f64), CcopfError> {
        for (name, value) in [("eta_g", self.eta_g), ("eta_u", self.eta_u), ("eta_f", self.eta_f)] {
            if !(value > 0.0 && value < 0.5) {
                return Err(CcopfError::Eta { name, value });
            }
        }
        Ok((z_quantile(self.eta_g)?, z_quantile(self.eta_u)?, z_quantile(self.eta_f)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Base,
    /// Penalise each line's flow deviation with weight `psi[ℓ]`.
    ToleranceOfVariance { psi: Vec<f64> },
    /// Inject `sigma_hat` and steer each flow deviation to its `σ`.
    /// `anchored` adds linear conditions that keep every flow deviation at
    /// or above its `σ` when a noisy line upstream can supply it.
    TargetVariance {
        sigma_hat: Vec<f64>,
        psi: Vec<f64>,
        anchored: bool,
    },
    Cvar { theta: f64, varrho: f64 },
    MeanStd { theta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcopfConfig {
    pub levels: ChanceLevels,
    pub sides: usize,
    pub variant: Variant,
}

impl Default for CcopfConfig {
    fn default() -> Self {
        CcopfConfig {
            levels: ChanceLevels::default(),
            sides: dopf::DEFAULT_SIDES,
            variant: Variant::Base,
        }
    }
}

impl CcopfConfig {
    pub fn with_variant(variant: Variant) -> Self {
        CcopfConfig {
            variant,
            ..Default::default()
        }
    }
}

/// Sums weighted rows, merging repeated variables and dropping exact zeros.
fn combine<'a>(terms: impl IntoIterator<Item = (f64, &'a Row)>) -> Row {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (w, row) in terms {
        if w == 0.0 {
            continue;
        }
        for (i, v) in row {
            *acc.entry(*i).or_insert(0.0) += w * v;
        }
    }
    acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
}

fn scaled(row: &Row, w: f64) -> Row {
    row.iter().map(|(i, v)| (*i, w * v)).collect()
}

/// The assembled program with the maps needed to read a solution back.
#[derive(Debug, Clone)]
pub struct CcopfProgram {
    pub program: ConicProgram,
    pub vars: FlowVars,
    /// `alpha[i][k]` is the participation variable of node `i` for line `k`.
    pub alpha: Vec<Vec<Option<usize>>>,
    /// Epigraph of each line's flow deviation (tolerance and target variants).
    pub t: Option<Vec<usize>>,
    pub sigma_c: Option<usize>,
    /// Deviations the chance constraints were built with (σ, or σ̂ for the target variant).
    pub noise: Vec<f64>,
    pub spec: PrivacySpec,
    pub config: CcopfConfig,
}

struct Builder<'a> {
    grid: &'a RadialGrid,
    topo: &'a TopologyIndex,
    alpha: Vec<Vec<Option<usize>>>,
    active: Vec<bool>,
    /// Per line ℓ and noise column k: the α-row of `agg_ℓ[k]` and its reactive twin.
    agg_p: Vec<Vec<Row>>,
    agg_q: Vec<Vec<Row>>,
}

impl<'a> Builder<'a> {
    fn new(p: &mut ConicProgram, grid: &'a RadialGrid, topo: &'a TopologyIndex, noise: &[f64]) -> Result<Self, CcopfError> {
        let n = grid.node_count();
        let l = grid.line_count();
        let active: Vec<bool> = noise.iter().map(|s| *s > 0.0).collect();
        let mut alpha = vec![vec![None; l]; n];
        for k in (0..l).filter(|k| active[*k]) {
            for (side, nodes) in [("above", &topo.line_upstream_nodes[k]), ("below", &topo.line_downstream_nodes[k])] {
                let mut row = Row::new();
                for &i in nodes.iter().filter(|i| grid.is_flexible(**i)) {
                    let v = p.free_var(format!("alpha[{i},{}]", k + 1));
                    alpha[i][k] = Some(v);
                    row.push((v, 1.0));
                }
                if row.is_empty() {
                    return Err(CcopfError::NoParticipants { line: k + 1, side });
                }
                p.add_eq(row, 1.0, format!("participation_{side}[{}]", k + 1))?;
            }
        }
        let mut agg_p = vec![vec![Row::new(); l]; l];
        let mut agg_q = vec![vec![Row::new(); l]; l];
        for line in 0..l {
            for k in (0..l).filter(|k| active[*k]) {
                for &j in &topo.line_downstream_nodes[line] {
                    if let Some(v) = alpha[j][k] {
                        let t = topo.sign(j, k);
                        agg_p[line][k].push((v, t));
                        if grid.tan_phi[j] != 0.0 {
                            agg_q[line][k].push((v, t * grid.tan_phi[j]));
                        }
                    }
                }
            }
        }
        Ok(Builder {
            grid,
            topo,
            alpha,
            active,
            agg_p,
            agg_q,
        })
    }

    /// `ρ_i` row for noise column k, as an α-row.
    fn rho(&self, i: usize, k: usize) -> Row {
        match self.alpha[i][k] {
            Some(v) => vec![(v, self.topo.sign(i, k))],
            None => Row::new(),
        }
    }

    fn cone_rows(&self, noise: &[f64], scale: f64, f: impl Fn(usize) -> Row) -> Vec<Row> {
        (0..self.grid.line_count())
            .filter(|k| self.active[*k])
            .map(|k| scaled(&f(k), scale * noise[k]))
            .filter(|r| !r.is_empty())
            .collect()
    }

    fn voltage_row(&self, i: usize, k: usize) -> Row {
        let path = &self.topo.root_path_lines[i];
        combine(path.iter().flat_map(|&j| {
            [
                (self.grid.r[j], &self.agg_p[j][k]),
                (self.grid.x[j], &self.agg_q[j][k]),
            ]
        }))
    }
}

fn check_len(v: &[f64], expected: usize) -> Result<(), CcopfError> {
    if v.len() != expected {
        return Err(CcopfError::Length {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Default injection pattern for the target-variance variant. Lines are
/// grouped into chain segments: a segment starts at a line leaving the
/// substation or a branching node and continues through single-child nodes.
/// Each segment injects noise only on its line with the largest `σ`, at that
/// `σ`, so the variance budget holds and every other line's target can be
/// met by scaling participation.
pub fn default_sigma_hat(grid: &RadialGrid, topo: &TopologyIndex, sigma: &[f64]) -> Vec<f64> {
    let l = grid.line_count();
    let starts_segment = |k: usize| {
        let parent = grid.parent[RadialGrid::head(k)].expect("non-root");
        parent == 0 || topo.children[parent].len() >= 2
    };
    let head: Vec<usize> = (0..l)
        .map(|mut k| {
            while !starts_segment(k) {
                k = RadialGrid::line_into(grid.parent[RadialGrid::head(k)].expect("non-root"));
            }
            k
        })
        .collect();
    let mut pick: Vec<Option<usize>> = vec![None; l];
    for k in 0..l {
        let slot = &mut pick[head[k]];
        if slot.is_none_or(|best| sigma[k] > sigma[best]) {
            *slot = Some(k);
        }
    }
    let mut out = vec![0.0; l];
    for k in pick.into_iter().flatten() {
        out[k] = sigma[k];
    }
    out
}

/// Assembles the program for any variant.
pub fn assemble(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    config: &CcopfConfig,
) -> Result<CcopfProgram, CcopfError> {
    grid.validate().map_err(DopfError::from)?;
    let l = grid.line_count();
    let n = grid.node_count();
    check_len(&spec.sigma, l)?;
    let (z_g, z_u, z_f) = config.levels.z_factors()?;
    let poly = polygon_coefficients(config.sides)?;
    let noise: Vec<f64> = match &config.variant {
        Variant::TargetVariance { sigma_hat, psi, .. } => {
            check_len(sigma_hat, l)?;
            check_len(psi, l)?;
            if let Some(&bad) = sigma_hat.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                return Err(CcopfError::Parameter {
                    name: "sigma_hat",
                    value: bad,
                    reason: "must be finite and nonnegative",
                });
            }
            let target: f64 = sigma_hat.iter().map(|s| s * s).sum();
            let budget: f64 = spec.sigma.iter().map(|s| s * s).sum();
            if target > budget * (1.0 + 1e-9) + 1e-15 {
                return Err(CcopfError::VarianceBudget { target, budget });
            }
            sigma_hat.clone()
        }
        _ => spec.sigma.clone(),
    };

    let mut p = ConicProgram::new();
    let vars = add_flow_model(&mut p, grid, topo, None)?;
    let b = Builder::new(&mut p, grid, topo, &noise)?;

    // Generator limits, active and reactive, for every node including the substation.
    for i in 0..n {
        if !grid.is_flexible(i) {
            continue;
        }
        let rows_p = b.cone_rows(&noise, z_g, |k| b.rho(i, k));
        if rows_p.is_empty() {
            continue;
        }
        let zeros = vec![0.0; rows_p.len()];
        let (g, gq) = (vars.g_p[i], vars.g_q[i]);
        p.add_soc(rows_p.clone(), zeros.clone(), vec![(g, -1.0)], grid.g_p_max[i], format!("gen_p_up[{i}]"))?;
        p.add_soc(rows_p.clone(), zeros.clone(), vec![(g, 1.0)], -grid.g_p_min[i], format!("gen_p_down[{i}]"))?;
        let tan = grid.tan_phi[i];
        if tan != 0.0 {
            let rows_q: Vec<Row> = rows_p.iter().map(|r| scaled(r, tan)).collect();
            p.add_soc(rows_q.clone(), zeros.clone(), vec![(gq, -1.0)], grid.g_q_max[i], format!("gen_q_up[{i}]"))?;
            p.add_soc(rows_q, zeros, vec![(gq, 1.0)], -grid.g_q_min[i], format!("gen_q_down[{i}]"))?;
        }
    }
    // Voltage limits with the one-half factor on the squared-magnitude slack.
    for i in 1..n {
        let rows = b.cone_rows(&noise, z_u, |k| b.voltage_row(i, k));
        if rows.is_empty() {
            continue;
        }
        let zeros = vec![0.0; rows.len()];
        let (lo, hi) = (grid.v_min[i] * grid.v_min[i], grid.v_max[i] * grid.v_max[i]);
        let u = vars.u[i];
        p.add_soc(rows.clone(), zeros.clone(), vec![(u, -0.5)], 0.5 * hi, format!("volt_up[{i}]"))?;
        p.add_soc(rows, zeros, vec![(u, 0.5)], -0.5 * lo, format!("volt_down[{i}]"))?;
    }
    // Polygon flow limits; with no noise reaching the line these are plain half-planes.
    for line in 0..l {
        for (c, side) in poly.iter().enumerate() {
            let rows = b.cone_rows(&noise, z_f, |k| {
                combine([(side.gamma_p, &b.agg_p[line][k]), (side.gamma_q, &b.agg_q[line][k])])
            });
            let zeros = vec![0.0; rows.len()];
            p.add_soc(
                rows,
                zeros,
                vec![(vars.f_p[line], -side.gamma_p), (vars.f_q[line], -side.gamma_q)],
                -side.gamma_s * grid.f_max[line],
                format!("flow[{},{c}]", line + 1),
            )?;
        }
    }
    // Expected quadratic cost c2 (g² + ‖ρ σ‖²).
    for i in 0..n {
        if let Some(t) = vars.quad[i] {
            let extra = b.cone_rows(&noise, 1.0, |k| b.rho(i, k));
            add_quadratic_epigraph(&mut p, grid.c2[i], vars.g_p[i], t, extra, format!("quad_cost[{i}]"))?;
        }
    }

    let flow_dev_rows = |line: usize| b.cone_rows(&noise, 1.0, |k| b.agg_p[line][k].clone());
    if let Variant::Cvar { theta, .. } | Variant::MeanStd { theta } = &config.variant {
        if !(0.0..=1.0).contains(theta) {
            return Err(CcopfError::Parameter {
                name: "theta",
                value: *theta,
                reason: "must lie in [0, 1]",
            });
        }
    }
    let mut t_vars = None;
    let mut sigma_c = None;
    match &config.variant {
        Variant::Base => {}
        Variant::ToleranceOfVariance { psi } => {
            check_len(psi, l)?;
            let mut ts = Vec::with_capacity(l);
            for line in 0..l {
                let t = p.free_var(format!("t[{}]", line + 1));
                let rows = flow_dev_rows(line);
                let zeros = vec![0.0; rows.len()];
                p.add_soc(rows, zeros, vec![(t, 1.0)], 0.0, format!("tol_var[{}]", line + 1))?;
                p.set_cost(t, psi[line]);
                ts.push(t);
            }
            t_vars = Some(ts);
        }
        Variant::TargetVariance { psi, anchored, .. } => {
            let mut ts = Vec::with_capacity(l);
            for line in 0..l {
                let t = p.free_var(format!("t[{}]", line + 1));
                let tau = p.add_var(format!("tau[{}]", line + 1), Some(0.0), None);
                let rows = flow_dev_rows(line);
                let zeros = vec![0.0; rows.len()];
                p.add_soc(rows, zeros, vec![(t, 1.0)], 0.0, format!("target_var[{}]", line + 1))?;
                let s = spec.sigma[line];
                p.add_ge(vec![(tau, 1.0), (t, -1.0)], s, format!("target_gap_up[{}]", line + 1))?;
                p.add_ge(vec![(tau, 1.0), (t, 1.0)], -s, format!("target_gap_down[{}]", line + 1))?;
                p.set_cost(tau, psi[line]);
                ts.push(t);
            }
            if *anchored {
                for line in 0..l {
                    let want = spec.sigma[line];
                    if want <= 0.0 {
                        continue;
                    }
                    let path = &topo.root_path_lines[RadialGrid::head(line)];
                    let Some(&k) = path.iter().rev().find(|&&k| noise[k] > 0.0) else {
                        continue;
                    };
                    if k == line {
                        continue;
                    }
                    // Nodes below `line` also sit below `k`, so agg[line][k] = -Σ α.
                    let row = scaled(&b.agg_p[line][k], -noise[k]);
                    if row.is_empty() {
                        continue;
                    }
                    p.add_ge(row, -want, format!("anchor[{}]", line + 1))?;
                }
            }
            t_vars = Some(ts);
        }
        Variant::Cvar { theta, varrho } => {
            let k = cvar_factor(*varrho)?;
            let sc = add_cost_std(&mut p, grid, &b, &noise)?;
            p.add_cost(sc, theta * k);
            sigma_c = Some(sc);
        }
        Variant::MeanStd { theta } => {
            let sc = add_cost_std(&mut p, grid, &b, &noise)?;
            for i in 0..n {
                p.set_cost(vars.g_p[i], (1.0 - theta) * grid.c[i]);
                if let Some(t) = vars.quad[i] {
                    p.set_cost(t, 1.0 - theta);
                }
            }
            p.add_cost(sc, *theta);
            sigma_c = Some(sc);
        }
    }
    let alpha = b.alpha;
    Ok(CcopfProgram {
        program: p,
        vars,
        alpha,
        t: t_vars,
        sigma_c,
        noise,
        spec: spec.clone(),
        config: config.clone(),
    })
}

/// Epigraph `‖(cᵀρ) ∘ σ‖ ≤ σ_c` of the dispatch cost's standard deviation.
fn add_cost_std(p: &mut ConicProgram, grid: &RadialGrid, b: &Builder<'_>, noise: &[f64]) -> Result<usize, CcopfError> {
    let sc = p.add_var("sigma_c", Some(0.0), None);
    let n = grid.node_count();
    let rows = b.cone_rows(noise, 1.0, |k| {
        let rho: Vec<Row> = (0..n).map(|i| b.rho(i, k)).collect();
        combine((0..n).map(|i| (grid.c[i], &rho[i])))
    });
    let zeros = vec![0.0; rows.len()];
    p.add_soc(rows, zeros, vec![(sc, 1.0)], 0.0, "cost_std")?;
    Ok(sc)
}

pub fn assemble_ccopf(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    levels: ChanceLevels,
    sides: usize,
) -> Result<CcopfProgram, CcopfError> {
    assemble(grid, topo, spec, &CcopfConfig { levels, sides, variant: Variant::Base })
}

pub fn assemble_tov(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    levels: ChanceLevels,
    sides: usize,
    psi: &[f64],
) -> Result<CcopfProgram, CcopfError> {
    let variant = Variant::ToleranceOfVariance { psi: psi.to_vec() };
    assemble(grid, topo, spec, &CcopfConfig { levels, sides, variant })
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_tav(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    sigma_hat: &[f64],
    levels: ChanceLevels,
    sides: usize,
    psi: &[f64],
    anchored: bool,
) -> Result<CcopfProgram, CcopfError> {
    let variant = Variant::TargetVariance {
        sigma_hat: sigma_hat.to_vec(),
        psi: psi.to_vec(),
        anchored,
    };
    assemble(grid, topo, spec, &CcopfConfig { levels, sides, variant })
}

pub fn assemble_cvar(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    levels: ChanceLevels,
    sides: usize,
    theta: f64,
    varrho: f64,
) -> Result<CcopfProgram, CcopfError> {
    assemble(grid, topo, spec, &CcopfConfig { levels, sides, variant: Variant::Cvar { theta, varrho } })
}

pub fn assemble_mean_std(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    levels: ChanceLevels,
    sides: usize,
    theta: f64,
) -> Result<CcopfProgram, CcopfError> {
    assemble(grid, topo, spec, &CcopfConfig { levels, sides, variant: Variant::MeanStd { theta } })
}

/// A-posteriori check of the target-variance variant.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TargetCheck {
    pub t: Vec<f64>,
    /// True when every line's flow deviation under the injected noise, and
    /// its epigraph value, reach that line's `σ`.
    pub privacy_flag: bool,
    pub short_lines: Vec<usize>,
}

/// Nominal dispatch plus the affine noise response.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AffineSolution {
    pub nominal: DispatchSolution,
    /// Node × line participation factors.
    #[serde(serialize_with = "ser_matrix")]
    pub alpha: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub rho_p: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub rho_q: DMatrix<f64>,
    /// Deviations of the noise actually injected.
    pub sigma: Vec<f64>,
    /// Deviations the privacy guarantee asks of each line's flow.
    pub sigma_target: Vec<f64>,
    pub flow_std: Vec<f64>,
    pub volt_std: Vec<f64>,
    pub gen_std: Vec<f64>,
    /// Standard deviation of the dispatch cost.
    pub cost_std: f64,
    /// Optimal value of the solved program, penalties included.
    pub program_objective: f64,
    pub target: Option<TargetCheck>,
    pub iterations: usize,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

fn norm_weighted(row: &[f64], sigma: &[f64]) -> f64 {
    row.iter().zip(sigma).map(|(a, s)| (a * s).powi(2)).sum::<f64>().sqrt()
}

/// Flow response row `agg_ℓ = ρ_ℓ + Σ_{j below ℓ} ρ_j` and the flow's deviation.
pub fn flow_std_row(topo: &TopologyIndex, rho_p: &DMatrix<f64>, line: usize, sigma: &[f64]) -> (Vec<f64>, f64) {
    let l = rho_p.ncols();
    let mut row = vec![0.0; l];
    for &j in &topo.line_downstream_nodes[line] {
        for (k, r) in row.iter_mut().enumerate() {
            *r += rho_p[(j, k)];
        }
    }
    let std = norm_weighted(&row, sigma);
    (row, std)
}

/// Voltage response row `2 Σ_{j on path} (r_j agg_j + x_j agg_j^q)` and its deviation.
pub fn voltage_std_row(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    rho_p: &DMatrix<f64>,
    rho_q: &DMatrix<f64>,
    node: usize,
    sigma: &[f64],
) -> Result<(Vec<f64>, f64), CcopfError> {
    if node == 0 || node >= grid.node_count() {
        return Err(CcopfError::Parameter {
            name: "node",
            value: node as f64,
            reason: "the substation voltage is fixed",
        });
    }
    let l = rho_p.ncols();
    let mut row = vec![0.0; l];
    for &line in &topo.root_path_lines[node] {
        for &j in &topo.line_downstream_nodes[line] {
            for (k, r) in row.iter_mut().enumerate() {
                *r += 2.0 * (grid.r[line] * rho_p[(j, k)] + grid.x[line] * rho_q[(j, k)]);
            }
        }
    }
    let std = norm_weighted(&row, sigma);
    Ok((row, std))
}

impl AffineSolution {
    /// Builds the response matrices and every derived deviation from α.
    pub fn from_alpha(
        grid: &RadialGrid,
        topo: &TopologyIndex,
        nominal: DispatchSolution,
        alpha: DMatrix<f64>,
        sigma: Vec<f64>,
        sigma_target: Vec<f64>,
    ) -> AffineSolution {
        let n = grid.node_count();
        let l = grid.line_count();
        let rho_p = topo.t.component_mul(&alpha);
        let mut rho_q = rho_p.clone();
        for i in 0..n {
            for k in 0..l {
                rho_q[(i, k)] *= grid.tan_phi[i];
            }
        }
        let flow_std = (0..l).map(|k| flow_std_row(topo, &rho_p, k, &sigma).1).collect();
        let mut volt_std = vec![0.0];
        for i in 1..n {
            volt_std.push(voltage_std_row(grid, topo, &rho_p, &rho_q, i, &sigma).expect("non-root").1);
        }
        let gen_std = (0..n)
            .map(|i| {
                let row: Vec<f64> = rho_p.row(i).iter().copied().collect();
                norm_weighted(&row, &sigma)
            })
            .collect();
        let cost_row: Vec<f64> = (0..l).map(|k| (0..n).map(|i| grid.c[i] * rho_p[(i, k)]).sum()).collect();
        let cost_std = norm_weighted(&cost_row, &sigma);
        let program_objective = nominal.objective;
        AffineSolution {
            nominal,
            alpha,
            rho_p,
            rho_q,
            sigma,
            sigma_target,
            flow_std,
            volt_std,
            gen_std,
            cost_std,
            program_objective,
            target: None,
            iterations: 0,
        }
    }

    /// Response of the dispatch cost to each noise component, `cᵀρ`.
    pub fn cost_row(&self, grid: &RadialGrid) -> Vec<f64> {
        (0..self.rho_p.ncols())
            .map(|k| (0..self.rho_p.nrows()).map(|i| grid.c[i] * self.rho_p[(i, k)]).sum())
            .collect()
    }

    pub fn flow_row(&self, topo: &TopologyIndex, line: usize) -> Vec<f64> {
        flow_std_row(topo, &self.rho_p, line, &self.sigma).0
    }
}

/// Solves an assembled program and reads back the affine solution.
pub fn solve_program(
    cp: &CcopfProgram,
    grid: &RadialGrid,
    topo: &TopologyIndex,
    settings: SolverSettings,
) -> Result<AffineSolution, CcopfError> {
    let report = conic::solve(&cp.program, settings);
    if !report.is_optimal() {
        return Err(infeasible(&report));
    }
    Ok(read_solution(cp, grid, topo, &report))
}

fn family(tag: &str) -> &'static str {
    match tag.split('[').next().unwrap_or("") {
        t if t.starts_with("gen") || t.starts_with("lower[g") || t.starts_with("upper[g") => "generator",
        t if t.starts_with("volt") || t.starts_with("lower[u") || t.starts_with("upper[u") => "voltage",
        t if t.starts_with("flow") => "flow",
        t if t.starts_with("participation") => "balance",
        _ => "other",
    }
}

fn infeasible(report: &SolveReport) -> CcopfError {
    let family = match &report.dominant_constraint {
        Some(tag) => format!("{} ({tag})", family(tag)),
        None => "unknown".to_string(),
    };
    CcopfError::Infeasible {
        status: report.status,
        family,
    }
}

fn read_solution(cp: &CcopfProgram, grid: &RadialGrid, topo: &TopologyIndex, report: &SolveReport) -> AffineSolution {
    let z = &report.primal;
    let n = grid.node_count();
    let l = grid.line_count();
    let nominal = DispatchSolution::extract(grid, &cp.vars, z);
    let mut alpha = DMatrix::zeros(n, l);
    for k in 0..l {
        if cp.noise[k] > 0.0 {
            for i in 0..n {
                if let Some(v) = cp.alpha[i][k] {
                    alpha[(i, k)] = z[v];
                }
            }
        } else {
            // Without noise the factors are immaterial; keep a balanced placeholder.
            alpha[(0, k)] = 1.0;
            alpha[(RadialGrid::head(k), k)] = 1.0;
        }
    }
    let mut sol = AffineSolution::from_alpha(grid, topo, nominal, alpha, cp.noise.clone(), cp.spec.sigma.clone());
    sol.program_objective = report.objective_value;
    sol.iterations = report.iterations;
    if let (Some(ts), Variant::TargetVariance { .. }) = (&cp.t, &cp.config.variant) {
        let t: Vec<f64> = ts.iter().map(|&v| z[v]).collect();
        let tol = 1e-7;
        let short_lines: Vec<usize> = (0..l)
            .filter(|&k| {
                let want = cp.spec.sigma[k];
                sol.flow_std[k] < want - tol * (1.0 + want) || t[k] < want - tol * (1.0 + want)
            })
            .map(|k| k + 1)
            .collect();
        sol.target = Some(TargetCheck {
            t,
            privacy_flag: short_lines.is_empty(),
            short_lines,
        });
    }
    sol
}

pub fn solve_ccopf(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    config: &CcopfConfig,
) -> Result<AffineSolution, CcopfError> {
    solve_ccopf_with(grid, topo, spec, config, SolverSettings::default())
}

pub fn solve_ccopf_with(
    grid: &RadialGrid,
    topo: &TopologyIndex,
    spec: &PrivacySpec,
    config: &CcopfConfig,
    settings: SolverSettings,
) -> Result<AffineSolution, CcopfError> {
    let cp = assemble(grid, topo, spec, config)?;
    solve_program(&cp, grid, topo, settings)
}

/// Expected quadratic cost in the written form `c₂g² + (c₂ρ)Σ(c₂ρ)ᵀ`, summed over nodes.
pub fn expected_quadratic_cost(g: &[f64], rho_p: &DMatrix<f64>, c2: &[f64], sigma: &[f64]) -> f64 {
    (0..g.len())
        .map(|i| {
            let var: f64 = (0..sigma.len()).map(|k| (rho_p[(i, k)] * sigma[k]).powi(2)).sum();
            c2[i] * g[i] * g[i] + c2[i] * c2[i] * var
        })
        .sum()
}

/// `E[c₂ (g + ρξ)²] = c₂g² + c₂ ρΣρᵀ`, the value sampling converges to.
pub fn expected_quadratic_cost_sampled_form(g: &[f64], rho_p: &DMatrix<f64>, c2: &[f64], sigma: &[f64]) -> f64 {
    (0..g.len())
        .map(|i| {
            let var: f64 = (0..sigma.len()).map(|k| (rho_p[(i, k)] * sigma[k]).powi(2)).sum();
            c2[i] * (g[i] * g[i] + var)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grid::build_topology;
    use crate::privacy::{beta_from_fraction, calibrate_sigma};

    fn blank(n: usize, l: usize) -> DispatchSolution {
        DispatchSolution {
            g_p: vec![0.0; n],
            g_q: vec![0.0; n],
            f_p: vec![0.0; l],
            f_q: vec![0.0; l],
            u: vec![1.0; n],
            objective: 0.0,
        }
    }

    fn chain_fixture() -> (RadialGrid, TopologyIndex, AffineSolution) {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let mut alpha = DMatrix::zeros(3, 2);
        alpha[(0, 0)] = 1.0;
        alpha[(1, 0)] = 1.0;
        alpha[(0, 1)] = 0.6;
        alpha[(1, 1)] = 0.4;
        alpha[(2, 1)] = 1.0;
        let sol = AffineSolution::from_alpha(&g, &topo, blank(3, 2), alpha, vec![0.0, 1.0], vec![0.0, 1.0]);
        (g, topo, sol)
    }

    #[test]
    fn hand_policy_deviations() {
        let (g, topo, sol) = chain_fixture();
        assert!((sol.flow_std[1] - 1.0).abs() < 1e-15);
        assert!((sol.flow_std[0] - 0.6).abs() < 1e-15);
        assert!((sol.volt_std[1] - 0.018).abs() < 1e-15);
        let (row, _) = flow_std_row(&topo, &sol.rho_p, 1, &sol.sigma);
        assert_eq!(row[1], -1.0);
        assert!(voltage_std_row(&g, &topo, &sol.rho_p, &sol.rho_q, 0, &sol.sigma).is_err());
    }

    #[test]
    fn feeder_floor_and_identity() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 1.0 / 14.0, &beta_from_fraction(&g, 0.1)).unwrap();
        let sol = solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()).unwrap();
        for k in 0..g.line_count() {
            assert!(sol.flow_std[k] >= spec.sigma[k] - 1e-8);
            assert!((sol.flow_row(&topo, k)[k] + 1.0).abs() < 1e-8);
        }
        let d = dopf::solve_dopf(&g, &topo, dopf::DEFAULT_SIDES).unwrap();
        assert!(sol.nominal.objective > d.objective);
    }

    #[test]
    fn default_sigma_hat_support() {
        let g = fixtures::feeder15();
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 1.0 / 14.0, &beta_from_fraction(&g, 0.1)).unwrap();
        let sh = default_sigma_hat(&g, &topo, &spec.sigma);
        let support: Vec<usize> = (0..14).filter(|k| sh[*k] > 0.0).map(|k| k + 1).collect();
        assert_eq!(support, vec![1, 5, 7, 8, 9, 13]);
        let a: f64 = sh.iter().map(|s| s * s).sum();
        let b: f64 = spec.sigma.iter().map(|s| s * s).sum();
        assert!(a <= b);
    }

    #[test]
    fn zero_target_fails_flag() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 0.1, &[0.05, 0.05]).unwrap();
        let cfg = CcopfConfig::with_variant(Variant::TargetVariance {
            sigma_hat: vec![0.0, 0.0],
            psi: vec![1e3, 1e3],
            anchored: false,
        });
        let sol = solve_ccopf(&g, &topo, &spec, &cfg).unwrap();
        let check = sol.target.unwrap();
        assert!(!check.privacy_flag);
        assert_eq!(check.short_lines, vec![1, 2]);
    }

    #[test]
    fn identity_target_meets_flag() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 0.1, &[0.05, 0.05]).unwrap();
        let cfg = CcopfConfig::with_variant(Variant::TargetVariance {
            sigma_hat: spec.sigma.clone(),
            psi: vec![1e3, 1e3],
            anchored: false,
        });
        assert!(solve_ccopf(&g, &topo, &spec, &cfg).unwrap().target.unwrap().privacy_flag);
    }

    #[test]
    fn parameter_errors() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 0.1, &[0.05, 0.05]).unwrap();
        let mut cfg = CcopfConfig::default();
        cfg.levels.eta_f = 0.5;
        assert!(matches!(assemble(&g, &topo, &spec, &cfg), Err(CcopfError::Eta { name: "eta_f", .. })));
        let over = CcopfConfig::with_variant(Variant::TargetVariance {
            sigma_hat: vec![1.0, 1.0],
            psi: vec![1.0, 1.0],
            anchored: false,
        });
        assert!(matches!(assemble(&g, &topo, &spec, &over), Err(CcopfError::VarianceBudget { .. })));
        let theta = CcopfConfig::with_variant(Variant::MeanStd { theta: 1.5 });
        assert!(matches!(assemble(&g, &topo, &spec, &theta), Err(CcopfError::Parameter { name: "theta", .. })));
        let short = PrivacySpec { sigma: vec![0.1], ..spec };
        assert!(matches!(assemble(&g, &topo, &short, &CcopfConfig::default()), Err(CcopfError::Length { .. })));
    }

    #[test]
    fn missing_participants_named() {
        let mut g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        g.g_p_max[2] = 0.0;
        g.g_q_min[2] = 0.0;
        g.g_q_max[2] = 0.0;
        let topo = build_topology(&g).unwrap();
        let spec = calibrate_sigma(1.0, 0.1, &[0.0, 0.05]).unwrap();
        let err = assemble(&g, &topo, &spec, &CcopfConfig::default()).unwrap_err();
        assert!(matches!(err, CcopfError::NoParticipants { line: 2, side: "below" }), "{err}");
    }

    #[test]
    fn infeasible_names_family() {
        let g = fixtures::chain3(1.0, 1.0, 0.5, 0.01, 0.01);
        let topo = build_topology(&g).unwrap();
        // Noise far larger than any DER can absorb.
        let spec = calibrate_sigma(1.0, 0.1, &[0.0, 5.0]).unwrap();
        match solve_ccopf(&g, &topo, &spec, &CcopfConfig::default()) {
            Err(CcopfError::Infeasible { family, .. }) => assert!(family.starts_with("generator"), "{family}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_cost_forms() {
        let rho = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let lit = expected_quadratic_cost(&[1.0, 2.0], &rho, &[2.0, 0.0], &[0.5]);
        let smp = expected_quadratic_cost_sampled_form(&[1.0, 2.0], &rho, &[2.0, 0.0], &[0.5]);
        assert!((lit - (2.0 + 4.0 * 0.25)).abs() < 1e-15);
        assert!((smp - (2.0 + 2.0 * 0.25)).abs() < 1e-15);
    }
}
