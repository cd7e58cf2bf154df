use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cells::{CellKey, Microdata};
use crate::error::{Error, Result};
use crate::estimators::logistic::{newton_logistic, BinomialCells};
use crate::formula::{Design, ModelTerms};
use crate::numeric::{aliased_columns, inv_logit, keep_indices, median};

use super::{rhat, McmcConfig, PosteriorDraws};

/// Independent normal priors on the logistic coefficients: the intercept
/// gets `N(0, intercept_scale²)`, every other column
/// `N(0, (coefficient_scale / sd(x))²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticPrior {
    pub intercept_scale: f64,
    pub coefficient_scale: f64,
}

impl Default for LogisticPrior {
    fn default() -> Self {
        Self {
            intercept_scale: 2.5,
            coefficient_scale: 2.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticPosterior {
    /// Draws of the non-aliased coefficients.
    pub draws: PosteriorDraws,
    /// Post-warmup acceptance rate of every chain.
    pub acceptance: Vec<f64>,
    pub aliased: Vec<String>,
    design: Design,
    active: Vec<usize>,
}

impl LogisticPosterior {
    pub fn design(&self) -> &Design {
        &self.design
    }

    fn eta_draws(&self, codes: &[u32]) -> Vec<f64> {
        let row = self.design.row(codes, 0.0);
        (0..self.draws.n_draws())
            .map(|d| {
                self.active
                    .iter()
                    .zip(self.draws.row(d))
                    .map(|(&c, b)| row[c] * b)
                    .sum()
            })
            .collect()
    }

    /// Posterior median of the inclusion probability of a covariate profile.
    pub fn median_probability(&self, codes: &[u32]) -> f64 {
        inv_logit(median(&self.eta_draws(codes)))
    }

    /// Posterior median ψ̂ for every key.
    pub fn median_probabilities<'a>(&self, keys: impl IntoIterator<Item = &'a CellKey>) -> BTreeMap<CellKey, f64> {
        keys.into_iter()
            .map(|k| (k.clone(), self.median_probability(k.levels())))
            .collect()
    }

    pub fn rhat(&self) -> Result<Vec<f64>> {
        rhat(&self.draws)
    }
}

/// Adaptive random-walk Metropolis for the weighted logistic inclusion
/// model. Proposals are Gaussian with the shape of the inverse posterior
/// information at the mode; their scale is tuned during warmup towards an
/// acceptance rate of 0.3 (kept within 0.2 to 0.4).
pub fn sample_posterior_logistic(
    terms: &ModelTerms,
    concatenated: &Microdata,
    prior: &LogisticPrior,
    cfg: &McmcConfig,
) -> Result<LogisticPosterior> {
    cfg.validate()?;
    if terms.uses_psi() {
        return Err(Error::config("the inclusion model cannot use psi terms"));
    }
    if !(prior.intercept_scale > 0.0 && prior.coefficient_scale > 0.0) {
        return Err(Error::config("logistic prior scales must be positive"));
    }
    let design = Design::new(Arc::clone(concatenated.schema()), terms);
    let cells = BinomialCells::new(concatenated, &design)?;
    if cells.rows.is_empty() {
        return Err(Error::data("no units to fit the inclusion model"));
    }
    let p = design.n_cols();
    let dropped = aliased_columns(&cells.gram(), 1e-10);
    let active = keep_indices(p, &dropped);
    let k = active.len();

    let n_units = cells.unit_cell.len() as f64;
    let precision: Vec<f64> = active
        .iter()
        .map(|&c| {
            if c == 0 {
                return prior.intercept_scale.powi(-2);
            }
            let m = cells.unit_cell.iter().map(|&u| cells.rows[u][c]).sum::<f64>() / n_units;
            let v = cells
                .unit_cell
                .iter()
                .map(|&u| (cells.rows[u][c] - m).powi(2))
                .sum::<f64>()
                / (n_units - 1.0).max(1.0);
            let scale = if v > 0.0 {
                prior.coefficient_scale / v.sqrt()
            } else {
                prior.coefficient_scale
            };
            scale.powi(-2)
        })
        .collect();
    let zeros = vec![0.0; k];
    let mode = newton_logistic(&cells, &active, &precision, &zeros);
    let cov = mode
        .information
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular posterior information at the mode"))?;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("posterior covariance is not positive definite"))?;
    let l = chol.l();

    let log_post = |beta: &[f64]| {
        cells.log_lik(beta, &active)
            - 0.5 * beta.iter().zip(&precision).map(|(b, p)| p * b * b).sum::<f64>()
    };

    let results: Vec<(Vec<Vec<f64>>, f64)> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = cfg.chain_rng(c);
            let normal = |rng: &mut rand_chacha::ChaCha8Rng| {
                &l * DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal))
            };
            let jitter = normal(&mut rng);
            let mut beta: Vec<f64> = mode.beta.iter().zip(jitter.iter()).map(|(m, j)| m + j).collect();
            let mut lp = log_post(&beta);
            let mut log_scale = (cfg.proposal_scale * 2.38 / (k as f64).sqrt()).ln();
            let window = 50;
            let mut window_accepts = 0usize;
            let mut rounds = 0usize;
            let mut kept_accepts = 0usize;
            let mut out = Vec::with_capacity(cfg.kept());
            for it in 0..cfg.iterations {
                let step = normal(&mut rng);
                let s = log_scale.exp();
                let prop: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b + s * d).collect();
                let lp_prop = log_post(&prop);
                let accept = lp_prop.is_finite() && rng.random::<f64>().ln() < lp_prop - lp;
                if accept {
                    beta = prop;
                    lp = lp_prop;
                }
                if it < cfg.warmup {
                    window_accepts += accept as usize;
                    if (it + 1) % window == 0 {
                        rounds += 1;
                        let rate = window_accepts as f64 / window as f64;
                        if !(0.2..=0.4).contains(&rate) {
                            log_scale += 2.0 * (rate - 0.3) / (rounds as f64).sqrt();
                        }
                        window_accepts = 0;
                    }
                } else {
                    kept_accepts += accept as usize;
                    out.push(beta.clone());
                }
            }
            (out, kept_accepts as f64 / cfg.kept() as f64)
        })
        .collect();

    let acceptance: Vec<f64> = results.iter().map(|r| r.1).collect();
    if let Some(a) = acceptance.iter().find(|a| !(**a > 0.05 && **a < 0.95)) {
        return Err(Error::Convergence(format!(
            "random-walk tuning failed: post-warmup acceptance rate {a:.3}"
        )));
    }
    let names = active.iter().map(|&c| design.labels()[c].clone()).collect();
    let draws = PosteriorDraws::from_chains(names, results.into_iter().map(|r| r.0).collect(), cfg.warmup)?;
    Ok(LogisticPosterior {
        draws,
        acceptance,
        aliased: dropped.iter().map(|&c| design.labels()[c].clone()).collect(),
        design,
        active,
    })
}

