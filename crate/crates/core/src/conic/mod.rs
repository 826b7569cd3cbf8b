//! Solver-agnostic second-order-cone programs and a reference interior-point
//! solver.
//!
//! A [`ConicProgram`] minimises a linear objective over linear equalities,
//! box bounds, linear inequalities and rows of the form
//! `‖A z + b‖₂ ≤ c·z + d`. Constraint tags carry a family prefix
//! (`gen_p_up[3]`, `flow[2,5]`, ...) so that infeasibility reports can name
//! the part of the model responsible.

mod cone;
mod ipm;

use std::fmt::Write as _;

use thiserror::Error;

pub use cone::{ConeKind, Scaling};
pub use ipm::{solve, solve_default, SolverSettings};

/// Sparse linear form as `(variable, coefficient)` pairs; repeated indices add up.
pub type Row = Vec<(usize, f64)>;

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("constraint {tag}: variable index {index} out of range (var_count = {var_count})")]
    IndexOutOfRange {
        tag: String,
        index: usize,
        var_count: usize,
    },
    #[error("constraint {tag}: A has {rows} rows but b has {b_len} entries")]
    DimensionMismatch {
        tag: String,
        rows: usize,
        b_len: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    Equality(usize),
    Inequality(usize),
    Soc(usize),
}

/// `row · z == rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub row: Row,
    pub rhs: f64,
    pub tag: String,
}

/// `row · z + d >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Inequality {
    pub row: Row,
    pub d: f64,
    pub tag: String,
}

/// `‖A z + b‖₂ ≤ c · z + d` with at least one row in `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocRow {
    pub a: Vec<Row>,
    pub b: Vec<f64>,
    pub c: Row,
    pub d: f64,
    pub tag: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    pub var_count: usize,
    pub objective: Vec<f64>,
    pub equalities: Vec<Equality>,
    pub inequalities: Vec<Inequality>,
    pub soc_rows: Vec<SocRow>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub names: Vec<String>,
}

pub fn dot_row(row: &[(usize, f64)], z: &[f64]) -> f64 {
    row.iter().map(|(i, v)| v * z[*i]).sum()
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: Option<f64>, upper: Option<f64>) -> usize {
        self.var_count += 1;
        self.objective.push(0.0);
        self.lower.push(lower);
        self.upper.push(upper);
        self.names.push(name.into());
        self.var_count - 1
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> usize {
        self.add_var(name, None, None)
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] = cost;
    }

    pub fn add_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] += cost;
    }

    fn check_row(&self, tag: &str, row: &[(usize, f64)]) -> Result<(), BuildError> {
        match row.iter().find(|(i, _)| *i >= self.var_count) {
            Some((i, _)) => Err(BuildError::IndexOutOfRange {
                tag: tag.to_string(),
                index: *i,
                var_count: self.var_count,
            }),
            None => Ok(()),
        }
    }

    pub fn add_eq(&mut self, row: Row, rhs: f64, tag: impl Into<String>) -> Result<ConstraintId, BuildError> {
        let tag = tag.into();
        self.check_row(&tag, &row)?;
        self.equalities.push(Equality { row, rhs, tag });
        Ok(ConstraintId::Equality(self.equalities.len() - 1))
    }

    /// `row · z + d >= 0`.
    pub fn add_ge(&mut self, row: Row, d: f64, tag: impl Into<String>) -> Result<ConstraintId, BuildError> {
        let tag = tag.into();
        self.check_row(&tag, &row)?;
        self.inequalities.push(Inequality { row, d, tag });
        Ok(ConstraintId::Inequality(self.inequalities.len() - 1))
    }

    /// `row · z <= rhs`.
    pub fn add_le(&mut self, row: Row, rhs: f64, tag: impl Into<String>) -> Result<ConstraintId, BuildError> {
        let neg = row.into_iter().map(|(i, v)| (i, -v)).collect();
        self.add_ge(neg, rhs, tag)
    }

    /// Appends `‖A z + b‖ ≤ c z + d`. An empty `A` becomes a linear inequality.
    pub fn add_soc(
        &mut self,
        a: Vec<Row>,
        b: Vec<f64>,
        c: Row,
        d: f64,
        tag: impl Into<String>,
    ) -> Result<ConstraintId, BuildError> {
        let tag = tag.into();
        if a.len() != b.len() {
            return Err(BuildError::DimensionMismatch {
                tag,
                rows: a.len(),
                b_len: b.len(),
            });
        }
        for row in a.iter().chain(std::iter::once(&c)) {
            self.check_row(&tag, row)?;
        }
        if a.is_empty() {
            return self.add_ge(c, d, tag);
        }
        self.soc_rows.push(SocRow { a, b, c, d, tag });
        Ok(ConstraintId::Soc(self.soc_rows.len() - 1))
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        self.objective.iter().zip(z).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any constraint at `z` (0 when feasible).
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.equalities {
            worst = worst.max((dot_row(&e.row, z) - e.rhs).abs());
        }
        for q in &self.inequalities {
            worst = worst.max(-(dot_row(&q.row, z) + q.d));
        }
        for s in &self.soc_rows {
            let lhs = s
                .a
                .iter()
                .zip(&s.b)
                .map(|(r, b)| (dot_row(r, z) + b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(lhs - dot_row(&s.c, z) - s.d);
        }
        for i in 0..self.var_count {
            if let Some(lo) = self.lower[i] {
                worst = worst.max(lo - z[i]);
            }
            if let Some(hi) = self.upper[i] {
                worst = worst.max(z[i] - hi);
            }
        }
        worst
    }

    /// Plain-text dump, one section per cone family.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt_row = |row: &Row| {
            row.iter()
                .map(|(i, v)| format!("{v:+.12e}*x{i}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "VAR {}", self.var_count);
        for i in 0..self.var_count {
            let lo = self.lower[i].map_or("-inf".to_string(), |v| format!("{v:.12e}"));
            let hi = self.upper[i].map_or("+inf".to_string(), |v| format!("{v:.12e}"));
            let _ = writeln!(out, "x{i} {} [{lo}, {hi}] cost {:.12e}", self.names[i], self.objective[i]);
        }
        let _ = writeln!(out, "\nZERO {}", self.equalities.len());
        for e in &self.equalities {
            let _ = writeln!(out, "{}: {} = {:.12e}", e.tag, fmt_row(&e.row), e.rhs);
        }
        let _ = writeln!(out, "\nNONNEG {}", self.inequalities.len());
        for q in &self.inequalities {
            let _ = writeln!(out, "{}: {} {:+.12e} >= 0", q.tag, fmt_row(&q.row), q.d);
        }
        let _ = writeln!(out, "\nSOC {}", self.soc_rows.len());
        for s in &self.soc_rows {
            let _ = writeln!(out, "{} dim {}: t = {} {:+.12e}", s.tag, s.a.len() + 1, fmt_row(&s.c), s.d);
            for (r, b) in s.a.iter().zip(&s.b) {
                let _ = writeln!(out, "  {} {:+.12e}", fmt_row(r), b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    /// Tag of the constraint carrying the largest dual weight; set for
    /// infeasible or stalled solves.
    pub dominant_constraint: Option<String>,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_soc_checks_dimensions() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        let err = p.add_soc(vec![vec![(x, 1.0)]], vec![], vec![], 1.0, "bad").unwrap_err();
        assert!(matches!(err, BuildError::DimensionMismatch { .. }));
        let err = p.add_soc(vec![vec![(5, 1.0)]], vec![0.0], vec![], 1.0, "bad").unwrap_err();
        assert!(matches!(err, BuildError::IndexOutOfRange { index: 5, .. }));
    }

    #[test]
    fn soc_with_rows_is_a_cone() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        let y = p.free_var("y");
        let id = p.add_soc(vec![vec![(x, 1.0)]], vec![0.0], vec![(y, 1.0)], 0.0, "c").unwrap();
        assert_eq!(id, ConstraintId::Soc(0));
        assert_eq!(p.soc_rows.len(), 1);
    }

    #[test]
    fn empty_soc_becomes_inequality() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        let id = p.add_soc(vec![], vec![], vec![(x, 1.0)], 2.0, "lin").unwrap();
        assert_eq!(id, ConstraintId::Inequality(0));
        assert!(p.soc_rows.is_empty());
    }

    #[test]
    fn dump_has_one_section_per_cone() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.add_eq(vec![(x, 1.0)], 1.0, "e").unwrap();
        let text = p.to_text();
        assert!(text.contains("ZERO 1"));
        assert!(text.contains("NONNEG 0"));
        assert!(text.contains("SOC 0"));
    }
}
