//! Monte-Carlo and brute-force checks of the mechanism's guarantees.
//!
//! Each check returns a plain report; deciding pass or fail against a
//! tolerance is left to the caller.

mod demos;
mod dp;
mod mc;
mod oracles;

pub use demos::{
    cvar_sweep, fit_components, load_multiplier, op_comparison, timeseries_demo, ComponentFit, OpComparisonRow,
    SweepRow, TimeseriesOptions, TimeseriesReport, TraceRow, COMPONENT_FREQUENCIES,
};
pub use dp::{dp_ratio_check, gaussian_log_density_ratio, wilson_half_width, DpRatioOptions, DpRatioReport};
pub use mc::{empirical_cvar, mc_validate, FamilyViolation, Histogram, McOptions, McReport, RowViolation};
pub use oracles::{sensitivity_oracle, sensitivity_table, std_floor_check, FloorCheck, SensitivityRow};

use thiserror::Error;

use crate::ccopf::CcopfError;
use crate::dopf::DopfError;
use crate::mechanism::MechanismError;
use crate::privacy::PrivacyError;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Ccopf(#[from] CcopfError),
    #[error(transparent)]
    Dopf(#[from] DopfError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("{name}: {reason}")]
    Parameter { name: &'static str, reason: String },
}

impl ValidationError {
    pub fn is_solver_failure(&self) -> bool {
        match self {
            ValidationError::Mechanism(e) => e.is_solver_failure(),
            ValidationError::Ccopf(e) => e.is_solver_failure(),
            ValidationError::Dopf(e) => e.is_solver_failure(),
            _ => false,
        }
    }
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in v {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Mean and sample standard deviation, corrected two-pass.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = compensated_sum(v.iter().copied()) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(v.iter().map(|x| (x - mean) * (x - mean)));
    let drift = compensated_sum(v.iter().map(|x| x - mean));
    let var = (ss - drift * drift / n).max(0.0) / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sample_has_zero_spread() {
        let v = vec![230.677_123_456_7; 5000];
        let (m, s) = mean_std(&v);
        assert_eq!(m, 230.677_123_456_7);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn known_sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    }
}
