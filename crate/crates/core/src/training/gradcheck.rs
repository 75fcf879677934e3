//! Central finite-difference verification of the analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::model::{LossSettings, ModelParams, PairInput};
use crate::nn::Parameters;

/// Number of worst offenders kept in a report.
const WORST_KEPT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub scalars_checked: usize,
    pub tensors_checked: Vec<String>,
    pub max_rel_error: f64,
    /// Every scalar above tolerance.
    pub failures: Vec<GradCheckEntry>,
    /// Largest relative errors, descending.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of one pair's `L_c + L_d`.
pub fn grad_check(
    params: &ModelParams,
    input: &PairInput<'_>,
    settings: &LossSettings,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut analytic = params.zeros_like();
    params.accumulate_pair(input, settings, &mut analytic)?;
    grad_check_against(params, input, settings, &analytic, tolerance)
}

/// Compares a supplied gradient with central differences,
/// `h = 1e-5 * max(1, |theta|)`.
pub fn grad_check_against(
    params: &ModelParams,
    input: &PairInput<'_>,
    settings: &LossSettings,
    analytic: &ModelParams,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_tensors = analytic.named_tensors();
    let mut entries = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic_tensors[ti].1.len();
        for i in 0..len {
            let theta = params.named_tensors()[ti].1.data()[i];
            let h = 1e-5 * theta.abs().max(1.0);
            set(&mut probe, ti, i, theta + h);
            let plus = probe.evaluate_pair(input, settings)?.loss();
            set(&mut probe, ti, i, theta - h);
            let minus = probe.evaluate_pair(input, settings)?.loss();
            set(&mut probe, ti, i, theta);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic_tensors[ti].1.data()[i];
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    let failures: Vec<GradCheckEntry> = entries
        .iter()
        .filter(|e| !(e.rel_error <= tolerance))
        .cloned()
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let scalars_checked = entries.len();
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(WORST_KEPT);
    Ok(GradCheckReport {
        tolerance,
        scalars_checked,
        tensors_checked: names,
        max_rel_error,
        failures,
        worst: entries,
    })
}

fn set(params: &mut ModelParams, tensor: usize, index: usize, value: f64) {
    params.named_tensors_mut()[tensor].1.data_mut()[index] = value;
}
