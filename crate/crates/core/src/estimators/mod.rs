//! Closed-form and weighting estimators of finite-population means.
//!
//! Weighted estimators use the Hájek (ratio) form throughout, so every
//! estimate is invariant to rescaling all weights by a positive constant.

mod greg;
mod jackknife;
pub(crate) mod logistic;
mod raking;

pub use greg::{dr_mean, greg_mean, greg_mean_with_totals, totals_from_margins};
pub use jackknife::{jackknife_se, jackknife_se_masked, JackknifeResult};
pub use logistic::{fit_inclusion_model, PropensityFit};
pub use raking::{rake_weights, Margin, RakeResult};

use crate::cells::{CellTable, Grouping, Microdata};
use crate::error::{Error, Result};
use crate::numeric::{quantile, Z_975};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    pub group: String,
    pub method: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EstimateSummary {
    /// Symmetric normal-theory 95% interval.
    pub fn normal(group: &str, method: &str, estimate: f64, se: f64) -> Self {
        Self {
            group: group.to_string(),
            method: method.to_string(),
            estimate,
            se,
            ci_low: estimate - Z_975 * se,
            ci_high: estimate + Z_975 * se,
        }
    }

    pub fn with_se(&self, se: f64) -> Self {
        Self::normal(&self.group, &self.method, self.estimate, se)
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// No usable units or cells fall in the group; no estimate reported.
    EmptyGroup { group: String },
    /// Share of the group's population mass in cells the sample does not cover.
    UncoveredMass { group: String, fraction: f64 },
    /// Pólya draws whose probability numerator was clamped at zero.
    ClampedUrnWeights { count: usize },
    /// Free-form note carried to provenance output.
    Note(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Estimates {
    pub summaries: Vec<EstimateSummary>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Estimates {
    pub fn get(&self, group: &str) -> Option<&EstimateSummary> {
        self.summaries.iter().find(|s| s.group == group)
    }

    /// Point estimates in grouping order; `NaN` for groups without an estimate.
    pub fn point_vector(&self, groups: &Grouping) -> Vec<f64> {
        groups
            .groups()
            .iter()
            .map(|g| self.get(&g.label).map_or(f64::NAN, |s| s.estimate))
            .collect()
    }

    /// Replaces standard errors (and intervals) group by group.
    pub fn with_standard_errors(mut self, groups: &Grouping, se: &[f64]) -> Self {
        for (g, &s) in groups.groups().iter().zip(se) {
            if let Some(row) = self.summaries.iter_mut().find(|r| r.group == g.label) {
                *row = row.with_se(s);
            }
        }
        self
    }
}

/// Positive, finite per-unit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::data(format!("weight {i} is not positive and finite")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Normalisation target: the weight total.
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }
}

/// Unweighted sample mean per group, computed from cell summaries.
///
/// Cells with a single unit borrow the pooled within-cell variance for the
/// standard error.
pub fn unweighted_mean(sample: &CellTable, groups: &Grouping) -> Result<Estimates> {
    if sample.total_count() == 0 {
        return Err(Error::data("sample has no units"));
    }
    let pooled = sample.pooled_variance().unwrap_or(0.0);
    let mut out = Estimates::default();
    for g in groups.groups() {
        let (mut n, mut sum, mut var) = (0.0, 0.0, 0.0);
        for row in sample.rows().iter().filter(|r| g.contains(&r.key)) {
            let Some(m) = row.mean else { continue };
            let nj = row.count as f64;
            n += nj;
            sum += nj * m;
            var += nj * sample.variance_or(row, pooled);
        }
        if n == 0.0 {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        out.summaries
            .push(EstimateSummary::normal(&g.label, "UnW", sum / n, (var / (n * n)).sqrt()));
    }
    Ok(out)
}

/// Poststratified mean `Σ N_j ȳ_j / Σ N_j` over sample-covered cells.
///
/// Population cells the sample does not cover are dropped and the weights
/// renormalised; the dropped share is reported as a diagnostic.
pub fn poststratified_mean(sample: &CellTable, population: &CellTable, groups: &Grouping) -> Result<Estimates> {
    if sample.schema() != population.schema() {
        return Err(Error::Schema("sample and population schemas differ".into()));
    }
    let covered_any = population
        .rows()
        .iter()
        .any(|r| r.count > 0 && sample.get(&r.key).is_some_and(|s| s.mean.is_some()));
    if !covered_any {
        return Err(Error::data("sample and population share no cells"));
    }
    let pooled = sample.pooled_variance().unwrap_or(0.0);
    let mut out = Estimates::default();
    for g in groups.groups() {
        let (mut n_total, mut n_cov, mut sum) = (0.0, 0.0, 0.0);
        let mut terms = Vec::new();
        for prow in population.rows().iter().filter(|r| r.count > 0 && g.contains(&r.key)) {
            let big_n = prow.count as f64;
            n_total += big_n;
            let Some(srow) = sample.get(&prow.key) else { continue };
            let Some(m) = srow.mean else { continue };
            n_cov += big_n;
            sum += big_n * m;
            let nj = srow.count as f64;
            let fpc = (1.0 - nj / big_n).max(0.0);
            terms.push((big_n, fpc * sample.variance_or(srow, pooled) / nj));
        }
        if n_cov == 0.0 {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        let var: f64 = terms.iter().map(|(bn, v)| (bn / n_cov).powi(2) * v).sum();
        if n_cov < n_total {
            out.diagnostics.push(Diagnostic::UncoveredMass {
                group: g.label.clone(),
                fraction: 1.0 - n_cov / n_total,
            });
        }
        out.summaries
            .push(EstimateSummary::normal(&g.label, "PS", sum / n_cov, var.sqrt()));
    }
    Ok(out)
}

/// Hájek weighted mean per group over units with an observed outcome.
///
/// The standard error is the usual linearisation
/// `sqrt(Σ w_i² (y_i - ȳ_w)²) / Σ w_i`.
pub fn weighted_mean(data: &Microdata, weights: &[f64], groups: &Grouping, method: &str) -> Result<Estimates> {
    if weights.len() != data.len() {
        return Err(Error::data("weight vector length differs from unit count"));
    }
    let mut out = Estimates::default();
    for g in groups.groups() {
        let members: Vec<(f64, f64)> = (0..data.len())
            .filter(|&i| g.contains_codes(data.codes(i)))
            .filter_map(|i| data.outcome(i).map(|y| (weights[i], y)))
            .collect();
        let wsum: f64 = members.iter().map(|(w, _)| w).sum();
        if members.is_empty() || wsum <= 0.0 {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        let est = members.iter().map(|(w, y)| w * y).sum::<f64>() / wsum;
        let v: f64 = members.iter().map(|(w, y)| (w * (y - est)).powi(2)).sum::<f64>() / (wsum * wsum);
        out.summaries
            .push(EstimateSummary::normal(&g.label, method, est, v.sqrt()));
    }
    Ok(out)
}

/// Clamps weights to the given lower/upper quantiles of their distribution.
pub fn trim_weights(weights: &[f64], lower: f64, upper: f64) -> Vec<f64> {
    let lo = quantile(weights, lower);
    let hi = quantile(weights, upper);
    weights.iter().map(|w| w.clamp(lo, hi)).collect()
}

/// Inverse-propensity weighted (Hájek) mean with weights `1/ψ̂_i`,
/// optionally trimmed at a pair of quantiles.
pub fn ipw_mean(
    sample: &Microdata,
    fit: &PropensityFit,
    groups: &Grouping,
    trim: Option<(f64, f64)>,
) -> Result<Estimates> {
    let mut weights = Vec::with_capacity(sample.len());
    for i in 0..sample.len() {
        let p = fit.predict(sample.codes(i));
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::numerical(format!("estimated inclusion probability of unit {i} is {p}")));
        }
        weights.push(1.0 / p);
    }
    if let Some((lo, hi)) = trim {
        weights = trim_weights(&weights, lo, hi);
    }
    weighted_mean(sample, &weights, groups, "IPW")
}
