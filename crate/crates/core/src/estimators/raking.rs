use crate::cells::Microdata;
use crate::error::{Error, Result};

use super::WeightVector;

/// Known population totals for every level of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    pub var: usize,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RakeResult {
    pub weights: WeightVector,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute gap between a raked margin and its target.
    pub max_error: f64,
}

fn margin_totals(sample: &Microdata, weights: &[f64], margin: &Margin) -> Vec<f64> {
    let mut totals = vec![0.0; margin.targets.len()];
    for (i, w) in weights.iter().enumerate() {
        totals[sample.code(i, margin.var) as usize] += w;
    }
    totals
}

fn max_gap(sample: &Microdata, weights: &[f64], margins: &[Margin]) -> f64 {
    margins
        .iter()
        .flat_map(|m| {
            margin_totals(sample, weights, m)
                .into_iter()
                .zip(&m.targets)
                .map(|(t, target)| (t - target).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Iterative proportional fitting of `base_weights` to the margins.
///
/// Stops once every margin is within `tol` (absolute) of its target or
/// after `max_iter` full cycles, in which case `converged` is false.
pub fn rake_weights(
    sample: &Microdata,
    margins: &[Margin],
    base_weights: &WeightVector,
    tol: f64,
    max_iter: usize,
) -> Result<RakeResult> {
    if base_weights.len() != sample.len() {
        return Err(Error::data("base weight count differs from sample size"));
    }
    let schema = sample.schema();
    for m in margins {
        let var = &schema.variables()[m.var];
        if m.targets.len() != var.levels.len() {
            return Err(Error::config(format!(
                "margin for `{}` has {} targets, variable has {} levels",
                var.name,
                m.targets.len(),
                var.levels.len()
            )));
        }
        if let Some(l) = m.targets.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config(format!(
                "margin target {}={} must be positive",
                var.name, var.levels[l]
            )));
        }
        let present = margin_totals(sample, base_weights.as_slice(), m);
        if let Some(l) = present.iter().position(|&t| t <= 0.0) {
            return Err(Error::StructuralZero {
                variable: var.name.clone(),
                level: var.levels[l].clone(),
            });
        }
    }
    let mut w = base_weights.as_slice().to_vec();
    let mut iterations = 0;
    let mut gap = max_gap(sample, &w, margins);
    while gap > tol && iterations < max_iter {
        iterations += 1;
        for m in margins {
            let totals = margin_totals(sample, &w, m);
            let factors: Vec<f64> = m.targets.iter().zip(&totals).map(|(t, c)| t / c).collect();
            for (i, wi) in w.iter_mut().enumerate() {
                *wi *= factors[sample.code(i, m.var) as usize];
            }
        }
        gap = max_gap(sample, &w, margins);
    }
    Ok(RakeResult {
        weights: WeightVector::new(w)?,
        converged: gap <= tol,
        iterations,
        max_error: gap,
    })
}
