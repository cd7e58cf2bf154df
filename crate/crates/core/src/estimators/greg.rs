use std::sync::Arc;

use crate::cells::{CellTable, Group, Grouping, Microdata};
use crate::error::{Error, Result};
use crate::formula::{Design, ModelTerms, Term};
use crate::numeric::weighted_least_squares;

use super::{Diagnostic, EstimateSummary, Estimates, Margin, PropensityFit, WeightVector};

struct LinearFit {
    design: Design,
    units: Vec<usize>,
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    beta: Vec<f64>,
}

impl LinearFit {
    fn new(sample: &Microdata, terms: &ModelTerms, weights: Option<&[f64]>) -> Result<Self> {
        if terms.uses_psi() {
            return Err(Error::config("linear working models cannot use psi terms"));
        }
        let design = Design::new(Arc::clone(sample.schema()), terms);
        let units: Vec<usize> = (0..sample.len()).filter(|&i| sample.outcome(i).is_some()).collect();
        if units.is_empty() {
            return Err(Error::data("sample has no observed outcomes"));
        }
        let rows: Vec<Vec<f64>> = units.iter().map(|&i| design.row(sample.codes(i), 0.0)).collect();
        let y: Vec<f64> = units.iter().map(|&i| sample.outcome(i).unwrap()).collect();
        let w: Vec<f64> = match weights {
            Some(w) => units.iter().map(|&i| w[i]).collect(),
            None => vec![1.0; units.len()],
        };
        let beta = weighted_least_squares(&rows, &y, &w, design.labels())?.iter().copied().collect();
        Ok(Self {
            design,
            units,
            rows,
            y,
            beta,
        })
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }

    fn residual(&self, k: usize) -> f64 {
        self.y[k] - self.predict_row(&self.rows[k])
    }

    /// `(Σ_{j∈g} N_j x_j, Σ_{j∈g} N_j)` from a population cell table.
    fn group_totals(&self, population: &CellTable, group: &Group) -> (Vec<f64>, f64) {
        let mut totals = vec![0.0; self.design.n_cols()];
        let mut size = 0.0;
        let mut row = vec![0.0; self.design.n_cols()];
        for prow in population.rows().iter().filter(|r| r.count > 0 && group.contains(&r.key)) {
            self.design.fill_row(prow.key.levels(), 0.0, &mut row);
            let n = prow.count as f64;
            for (t, x) in totals.iter_mut().zip(&row) {
                *t += n * x;
            }
            size += n;
        }
        (totals, size)
    }
}

fn greg_group(
    fit: &LinearFit,
    sample: &Microdata,
    base: &[f64],
    totals: &[f64],
    size: f64,
    group: &Group,
) -> EstimateSummary {
    let n = fit.units.len();
    let z: Vec<f64> = fit
        .units
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if group.contains_codes(sample.codes(i)) {
                base[i] * fit.residual(k)
            } else {
                0.0
            }
        })
        .collect();
    let synthetic: f64 = totals.iter().zip(&fit.beta).map(|(t, b)| t * b).sum();
    let estimate = (synthetic + z.iter().sum::<f64>()) / size;
    let zbar = z.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        n as f64 / (n - 1) as f64 * z.iter().map(|v| (v - zbar).powi(2)).sum::<f64>() / (size * size)
    } else {
        0.0
    };
    EstimateSummary::normal(&group.label, "GREG", estimate, var.sqrt())
}

fn default_base_weights(sample: &Microdata, population_size: f64) -> Vec<f64> {
    let n = (0..sample.len()).filter(|&i| sample.outcome(i).is_some()).count().max(1);
    vec![population_size / n as f64; sample.len()]
}

/// Generalised regression estimator with domain totals taken from a
/// population cell table:
/// `(t_xᵀβ̂ + Σ_{i∈g} w_i (y_i - x_iβ̂)) / N_g`.
///
/// Without `base_weights` every unit gets the uniform weight `N/n`.
pub fn greg_mean(
    sample: &Microdata,
    terms: &ModelTerms,
    population: &CellTable,
    groups: &Grouping,
    base_weights: Option<&WeightVector>,
) -> Result<Estimates> {
    let base = match base_weights {
        Some(w) => w.as_slice().to_vec(),
        None => default_base_weights(sample, population.total_count() as f64),
    };
    if base.len() != sample.len() {
        return Err(Error::data("base weight count differs from sample size"));
    }
    let fit = LinearFit::new(sample, terms, Some(&base))?;
    let mut out = Estimates::default();
    for g in groups.groups() {
        let (totals, size) = fit.group_totals(population, g);
        if size <= 0.0 {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        out.summaries.push(greg_group(&fit, sample, &base, &totals, size, g));
    }
    Ok(out)
}

/// GREG estimate of the overall mean from per-column population totals
/// (one per design column, the intercept total being `N`).
pub fn greg_mean_with_totals(
    sample: &Microdata,
    terms: &ModelTerms,
    totals: &[f64],
    base_weights: Option<&WeightVector>,
) -> Result<EstimateSummary> {
    let size = *totals
        .first()
        .ok_or_else(|| Error::config("population totals are empty"))?;
    let base = match base_weights {
        Some(w) => w.as_slice().to_vec(),
        None => default_base_weights(sample, size),
    };
    let fit = LinearFit::new(sample, terms, Some(&base))?;
    if totals.len() != fit.design.n_cols() {
        return Err(Error::config(format!(
            "expected {} population totals, got {}",
            fit.design.n_cols(),
            totals.len()
        )));
    }
    let overall = Grouping::overall();
    Ok(greg_group(&fit, sample, &base, totals, size, &overall.groups()[0]))
}

/// Column totals of a main-effects design implied by per-variable margins.
pub fn totals_from_margins(sample: &Microdata, terms: &ModelTerms, margins: &[Margin]) -> Result<Vec<f64>> {
    let schema = sample.schema();
    let size: f64 = margins
        .first()
        .ok_or_else(|| Error::config("no margins supplied"))?
        .targets
        .iter()
        .sum();
    let mut totals = vec![size];
    for term in &terms.terms {
        match *term {
            Term::Main(v) => {
                let m = margins.iter().find(|m| m.var == v).ok_or_else(|| {
                    Error::config(format!("missing population total for `{}`", schema.variables()[v].name))
                })?;
                totals.extend_from_slice(&m.targets[1..]);
            }
            _ => {
                return Err(Error::config(
                    "margins only supply totals for main-effect terms",
                ))
            }
        }
    }
    Ok(totals)
}

/// Doubly robust estimator: population mean of linear outcome-model
/// predictions plus the inverse-propensity weighted (Hájek) mean residual.
pub fn dr_mean(
    sample: &Microdata,
    fit: &PropensityFit,
    outcome_terms: &ModelTerms,
    population: &CellTable,
    groups: &Grouping,
) -> Result<Estimates> {
    let lin = LinearFit::new(sample, outcome_terms, None)?;
    let weights: Vec<f64> = lin
        .units
        .iter()
        .map(|&i| 1.0 / fit.predict(sample.codes(i)))
        .collect();
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::numerical(format!("non-finite inverse propensity weight {w}")));
    }
    let mut out = Estimates::default();
    for g in groups.groups() {
        let (totals, size) = lin.group_totals(population, g);
        let members: Vec<(f64, f64)> = lin
            .units
            .iter()
            .enumerate()
            .filter(|(_, &i)| g.contains_codes(sample.codes(i)))
            .map(|(k, _)| (weights[k], lin.residual(k)))
            .collect();
        if size <= 0.0 || members.is_empty() {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        let prediction = totals.iter().zip(&lin.beta).map(|(t, b)| t * b).sum::<f64>() / size;
        let wsum: f64 = members.iter().map(|(w, _)| w).sum();
        let ebar = members.iter().map(|(w, e)| w * e).sum::<f64>() / wsum;
        let var = members.iter().map(|(w, e)| (w * (e - ebar)).powi(2)).sum::<f64>() / (wsum * wsum);
        out.summaries
            .push(EstimateSummary::normal(&g.label, "DR", prediction + ebar, var.sqrt()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{count_cells, CellRole, CovariateSchema};

    #[test]
    fn exact_linear_outcome_has_zero_residual_term() {
        let schema = Arc::new(CovariateSchema::numbered(&[("a", 3), ("b", 2)]).unwrap());
        let effect_a = [0.0, 1.5, -2.0];
        let effect_b = [0.0, 4.0];
        let codes: Vec<u32> = vec![0, 0, 1, 0, 2, 1, 1, 1, 0, 1, 2, 0];
        let y: Vec<Option<f64>> = codes
            .chunks(2)
            .map(|c| Some(3.0 + effect_a[c[0] as usize] + effect_b[c[1] as usize]))
            .collect();
        let sample = Microdata::from_codes(schema.clone(), codes, Some(y), None, None).unwrap();
        let pop_codes: Vec<u32> = (0..60).flat_map(|i| vec![(i % 3) as u32, ((i / 3) % 2) as u32]).collect();
        let pop = Microdata::from_codes(schema.clone(), pop_codes.clone(), None, None, None).unwrap();
        let table = count_cells(&pop, CellRole::Population).unwrap();
        let truth: f64 = pop_codes
            .chunks(2)
            .map(|c| 3.0 + effect_a[c[0] as usize] + effect_b[c[1] as usize])
            .sum::<f64>()
            / 60.0;
        let terms = ModelTerms::main_effects(&schema);
        let e = greg_mean(&sample, &terms, &table, &Grouping::overall(), None).unwrap();
        assert!((e.summaries[0].estimate - truth).abs() < 1e-10);
        assert!(e.summaries[0].se < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let schema = Arc::new(CovariateSchema::numbered(&[("a", 3)]).unwrap());
        let sample = Microdata::from_codes(
            schema.clone(),
            vec![0, 1, 0, 1],
            Some(vec![Some(1.0), Some(2.0), Some(1.5), Some(2.5)]),
            None,
            None,
        )
        .unwrap();
        let pop = CellTable::from_counts(
            schema.clone(),
            CellRole::Population,
            (0..3).map(|l| (crate::cells::CellKey(vec![l]), 10)),
        )
        .unwrap();
        let err = greg_mean(&sample, &ModelTerms::main_effects(&schema), &pop, &Grouping::overall(), None)
            .unwrap_err();
        assert!(matches!(err, Error::RankDeficient(ref t) if t == &vec!["a[3]".to_string()]));
    }

    #[test]
    fn margins_must_cover_every_term() {
        let schema = Arc::new(CovariateSchema::numbered(&[("a", 2), ("b", 2)]).unwrap());
        let sample = Microdata::from_codes(schema.clone(), vec![0, 0, 1, 1], None, None, None).unwrap();
        let margins = [Margin { var: 0, targets: vec![4.0, 6.0] }];
        assert!(totals_from_margins(&sample, &ModelTerms::main_effects(&schema), &margins).is_err());
        let both = [
            Margin { var: 0, targets: vec![4.0, 6.0] },
            Margin { var: 1, targets: vec![3.0, 7.0] },
        ];
        let t = totals_from_margins(&sample, &ModelTerms::main_effects(&schema), &both).unwrap();
        assert_eq!(t, vec![10.0, 6.0, 7.0]);
    }
}
