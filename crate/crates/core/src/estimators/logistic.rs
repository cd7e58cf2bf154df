use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cells::Microdata;
use crate::error::{Error, Result};
use crate::formula::{Design, ModelTerms};
use crate::numeric::{aliased_columns, inv_logit, keep_indices, log1p_exp};

/// Ridge precision added to non-intercept coefficients in maximum likelihood fits.
pub(crate) const RIDGE: f64 = 1e-8;
const SEPARATION_BOUND: f64 = 15.0;
const MAX_ITER: usize = 100;

/// Weighted binomial data collapsed to distinct covariate cells.
#[derive(Debug, Clone)]
pub(crate) struct BinomialCells {
    pub rows: Vec<Vec<f64>>,
    pub codes: Vec<Vec<u32>>,
    /// Weighted count of included units.
    pub w1: Vec<f64>,
    /// Weighted count of non-included units.
    pub w0: Vec<f64>,
    /// Cell position of every unit of the source data.
    pub unit_cell: Vec<usize>,
}

impl BinomialCells {
    pub fn new(data: &Microdata, design: &Design) -> Result<Self> {
        let included = data
            .included()
            .ok_or_else(|| Error::data("concatenated data needs an `included` indicator"))?;
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut cells = Self {
            rows: Vec::new(),
            codes: Vec::new(),
            w1: Vec::new(),
            w0: Vec::new(),
            unit_cell: Vec::with_capacity(data.len()),
        };
        for i in 0..data.len() {
            let pos = *index.entry(data.cell_index(i)).or_insert_with(|| {
                cells.rows.push(design.row(data.codes(i), 0.0));
                cells.codes.push(data.codes(i).to_vec());
                cells.w1.push(0.0);
                cells.w0.push(0.0);
                cells.rows.len() - 1
            });
            if included[i] {
                cells.w1[pos] += data.weight(i);
            } else {
                cells.w0[pos] += data.weight(i);
            }
            cells.unit_cell.push(pos);
        }
        Ok(cells)
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let p = self.n_cols();
        let mut g = DMatrix::zeros(p, p);
        for (row, m) in self.rows.iter().zip(self.w1.iter().zip(&self.w0).map(|(a, b)| a + b)) {
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 0..p {
                    g[(a, b)] += m * row[a] * row[b];
                }
            }
        }
        g
    }

    /// Log-likelihood of coefficients `beta` over the `active` columns.
    pub fn log_lik(&self, beta: &[f64], active: &[usize]) -> f64 {
        self.rows
            .iter()
            .zip(self.w1.iter().zip(&self.w0))
            .map(|(row, (&w1, &w0))| {
                let eta: f64 = active.iter().zip(beta).map(|(&c, b)| row[c] * b).sum();
                -w1 * log1p_exp(-eta) - w0 * log1p_exp(eta)
            })
            .sum()
    }
}

/// Outcome of a penalised Newton–Raphson (IRLS) logistic fit.
#[derive(Debug, Clone)]
pub(crate) struct NewtonFit {
    pub beta: Vec<f64>,
    pub information: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximises the weighted log-likelihood plus a Gaussian log-prior with
/// the given precisions and means (all over the `active` columns).
pub(crate) fn newton_logistic(
    cells: &BinomialCells,
    active: &[usize],
    prior_precision: &[f64],
    prior_mean: &[f64],
) -> NewtonFit {
    let k = active.len();
    let objective = |beta: &[f64]| {
        cells.log_lik(beta, active)
            - 0.5
                * beta
                    .iter()
                    .zip(prior_precision.iter().zip(prior_mean))
                    .map(|(b, (p, m))| p * (b - m).powi(2))
                    .sum::<f64>()
    };
    let mut beta = prior_mean.to_vec();
    // Start the intercept at the pooled log-odds.
    let (s1, s0): (f64, f64) = (cells.w1.iter().sum(), cells.w0.iter().sum());
    if active.first() == Some(&0) && s1 > 0.0 && s0 > 0.0 {
        beta[0] = (s1 / s0).ln();
    }
    let mut ll = objective(&beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(k, k);
    while iterations < MAX_ITER {
        iterations += 1;
        let mut score = DVector::<f64>::zeros(k);
        info.fill(0.0);
        for (row, (&w1, &w0)) in cells.rows.iter().zip(cells.w1.iter().zip(&cells.w0)) {
            let eta: f64 = active.iter().zip(&beta).map(|(&c, b)| row[c] * b).sum();
            let p = inv_logit(eta);
            let m = w1 + w0;
            let r = w1 - m * p;
            let v = m * p * (1.0 - p);
            for a in 0..k {
                let xa = row[active[a]];
                if xa == 0.0 {
                    continue;
                }
                score[a] += xa * r;
                for b in a..k {
                    info[(a, b)] += v * xa * row[active[b]];
                }
            }
        }
        for a in 0..k {
            score[a] -= prior_precision[a] * (beta[a] - prior_mean[a]);
            info[(a, a)] += prior_precision[a];
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        if score.amax() < 1e-8 {
            converged = true;
            break;
        }
        let Some(chol) = info.clone().cholesky() else { break };
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let ll_trial = objective(&trial);
            if ll_trial.is_finite() && ll_trial >= ll - 1e-12 * ll.abs() {
                accepted = Some((trial, ll_trial));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ll_new)) = accepted else { break };
        let rel = (ll_new - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        beta = trial;
        ll = ll_new;
        if rel < 1e-10 {
            converged = true;
            break;
        }
    }
    NewtonFit {
        beta,
        information: info,
        converged,
        iterations,
    }
}

/// Weighted logistic model of inclusion in the nonprobability sample.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    design: Design,
    pub labels: Vec<String>,
    /// One coefficient per design column; aliased columns are fixed at 0.
    pub coefficients: Vec<f64>,
    /// Fitted inclusion probability of every unit of the fitting data.
    pub fitted: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub aliased: Vec<String>,
    covariance: DMatrix<f64>,
}

impl PropensityFit {
    pub(crate) fn from_parts(
        design: Design,
        coefficients: Vec<f64>,
        fitted: Vec<f64>,
        converged: bool,
        iterations: usize,
        aliased: Vec<String>,
        covariance: DMatrix<f64>,
    ) -> Self {
        Self {
            labels: design.labels().to_vec(),
            design,
            coefficients,
            fitted,
            converged,
            iterations,
            aliased,
            covariance,
        }
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Inclusion probability for a covariate profile.
    pub fn predict(&self, codes: &[u32]) -> f64 {
        let row = self.design.row(codes, 0.0);
        inv_logit(row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum())
    }

    /// Inverse observed information over all columns (zero rows and columns
    /// for aliased terms).
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// Fits `P(included = 1 | x)` by weighted maximum likelihood (IRLS) on the
/// concatenated nonprobability (`included = 1`) and reference
/// (`included = 0`) units, weighting each unit by its `weight`.
pub fn fit_inclusion_model(concatenated: &Microdata, terms: &ModelTerms) -> Result<PropensityFit> {
    if terms.uses_psi() {
        return Err(Error::config("the inclusion model cannot use psi terms"));
    }
    let design = Design::new(Arc::clone(concatenated.schema()), terms);
    let cells = BinomialCells::new(concatenated, &design)?;
    if cells.rows.is_empty() {
        return Err(Error::data("no units to fit the inclusion model"));
    }
    let p = design.n_cols();
    let dropped = aliased_columns(&cells.gram(), 1e-10);
    let active = keep_indices(p, &dropped);
    let precision: Vec<f64> = active.iter().map(|&c| if c == 0 { 0.0 } else { RIDGE }).collect();
    let fit = newton_logistic(&cells, &active, &precision, &vec![0.0; active.len()]);

    let mut coefficients = vec![0.0; p];
    for (&c, &b) in active.iter().zip(&fit.beta) {
        coefficients[c] = b;
    }
    let worst = active
        .iter()
        .zip(&fit.beta)
        .filter(|(&c, _)| c != 0)
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
    let intercept_runaway = fit.beta.first().is_some_and(|b| b.abs() > 2.0 * SEPARATION_BOUND);
    if let Some((&c, &b)) = worst.filter(|(_, b)| b.abs() > SEPARATION_BOUND) {
        return Err(Error::Separation {
            term: design.labels()[c].clone(),
            value: b,
        });
    }
    if intercept_runaway || (!fit.converged && fit.beta.iter().any(|b| b.abs() > SEPARATION_BOUND)) {
        return Err(Error::Separation {
            term: design.labels()[0].clone(),
            value: fit.beta[0],
        });
    }
    if !fit.converged {
        return Err(Error::Convergence(format!(
            "logistic IRLS did not converge in {} iterations",
            fit.iterations
        )));
    }
    let cov_active = fit
        .information
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular information matrix"))?;
    let mut covariance = DMatrix::zeros(p, p);
    for (a, &ca) in active.iter().enumerate() {
        for (b, &cb) in active.iter().enumerate() {
            covariance[(ca, cb)] = cov_active[(a, b)];
        }
    }
    let cell_prob: Vec<f64> = cells
        .rows
        .iter()
        .map(|row| inv_logit(row.iter().zip(&coefficients).map(|(x, b)| x * b).sum()))
        .collect();
    let fitted = cells.unit_cell.iter().map(|&c| cell_prob[c]).collect();
    let aliased = dropped.iter().map(|&c| design.labels()[c].clone()).collect();
    Ok(PropensityFit::from_parts(
        design,
        coefficients,
        fitted,
        fit.converged,
        fit.iterations,
        aliased,
        covariance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CovariateSchema;

    fn concat(codes: Vec<u32>, included: Vec<bool>, schema: Arc<CovariateSchema>) -> Microdata {
        Microdata::from_codes(schema, codes, None, None, Some(included)).unwrap()
    }

    #[test]
    fn intercept_only_recovers_sample_fraction() {
        let schema = Arc::new(CovariateSchema::numbered(&[("x", 2)]).unwrap());
        let n = 100;
        let codes = (0..n).map(|i| (i % 2) as u32).collect();
        let included = (0..n).map(|i| i < 30).collect();
        let data = concat(codes, included, schema);
        let terms = ModelTerms {
            terms: vec![],
            psi_group_intercept: false,
        };
        let fit = fit_inclusion_model(&data, &terms).unwrap();
        assert!(fit.converged);
        for p in &fit.fitted {
            assert!((p - 0.3).abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_two_cell_model_matches_cell_fractions() {
        let schema = Arc::new(CovariateSchema::numbered(&[("x", 2)]).unwrap());
        // cell 0: 8 of 20 included, cell 1: 3 of 30 included
        let mut codes = Vec::new();
        let mut inc = Vec::new();
        for i in 0..20 {
            codes.push(0);
            inc.push(i < 8);
        }
        for i in 0..30 {
            codes.push(1);
            inc.push(i < 3);
        }
        let data = concat(codes, inc, schema.clone());
        let fit = fit_inclusion_model(&data, &ModelTerms::main_effects(&schema)).unwrap();
        assert!((fit.predict(&[0]) - 0.4).abs() < 1e-7);
        assert!((fit.predict(&[1]) - 0.1).abs() < 1e-7);
    }

    #[test]
    fn complete_separation_is_an_error() {
        let schema = Arc::new(CovariateSchema::numbered(&[("x", 2)]).unwrap());
        let codes = vec![0, 0, 0, 1, 1, 1];
        let inc = vec![true, true, true, false, false, false];
        let data = concat(codes, inc, schema.clone());
        let err = fit_inclusion_model(&data, &ModelTerms::main_effects(&schema)).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err:?}");
    }

    #[test]
    fn absent_level_is_reported_as_aliased() {
        let schema = Arc::new(CovariateSchema::numbered(&[("x", 3)]).unwrap());
        let codes = vec![0, 0, 1, 1, 0, 1];
        let inc = vec![true, false, true, false, false, true];
        let data = concat(codes, inc, schema.clone());
        let fit = fit_inclusion_model(&data, &ModelTerms::main_effects(&schema)).unwrap();
        assert_eq!(fit.aliased, vec!["x[3]".to_string()]);
        assert_eq!(fit.coefficients[2], 0.0);
    }
}
