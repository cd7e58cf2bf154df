use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::cells::{CellKey, Microdata};
use crate::error::{Error, Result};
use crate::formula::{Design, ModelTerms};
use crate::mrp::PsiPredictor;

use super::{rhat, slice_sample, McmcConfig, PosteriorDraws};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorFamily {
    #[default]
    Normal,
    /// Cauchy errors, sampled as a normal scale mixture.
    Cauchy,
}

/// Priors of the linear outcome model.
///
/// The intercept prior applies to the intercept of the model with centred
/// predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub intercept_location: f64,
    pub intercept_scale: f64,
    /// One scale per non-intercept design column.
    pub coefficient_scales: Vec<f64>,
    /// Rate of the exponential prior on the residual sd.
    pub sigma_rate: f64,
    /// Scale of the half-normal prior on the varying-intercept sd.
    pub tau_scale: f64,
}

impl PriorSpec {
    /// Weakly informative defaults scaled by the data: intercept
    /// `N(ȳ, 2.5 sd(y))`, coefficients `N(0, 2.5 sd(y)/sd(x))`, residual sd
    /// `Exponential(1/sd(y))` and varying-intercept sd `N⁺(0, sd(y))`.
    /// Columns without variation in the data use `sd(x) = 1`.
    fn autoscale(cells: &[CellStats], n: f64, y_mean: f64, y_sd: f64, p: usize) -> Self {
        let centers = column_means(cells, n, p);
        let coefficient_scales = (1..p)
            .map(|k| {
                let ss: f64 = cells.iter().map(|c| c.n * (c.z[k] - centers[k]).powi(2)).sum();
                let sd_x = (ss / (n - 1.0)).sqrt();
                if sd_x > 1e-12 {
                    2.5 * y_sd / sd_x
                } else {
                    2.5 * y_sd
                }
            })
            .collect();
        Self {
            intercept_location: y_mean,
            intercept_scale: 2.5 * y_sd,
            coefficient_scales,
            sigma_rate: 1.0 / y_sd,
            tau_scale: y_sd,
        }
    }

    fn validate(&self, n_coefficients: usize) -> Result<()> {
        if self.coefficient_scales.len() != n_coefficients {
            return Err(Error::config(format!(
                "prior has {} coefficient scales, model has {n_coefficients} coefficients",
                self.coefficient_scales.len()
            )));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.intercept_scale)
            && positive(self.sigma_rate)
            && positive(self.tau_scale)
            && self.coefficient_scales.iter().all(|&s| positive(s))
            && self.intercept_location.is_finite())
        {
            return Err(Error::config("prior scales and rates must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModelSpec {
    /// Fixed terms; `psi_group_intercept` adds the ψ-group varying intercept.
    pub terms: ModelTerms,
    /// `None` uses the data-scaled defaults.
    pub prior: Option<PriorSpec>,
    pub errors: ErrorFamily,
    pub fixed_sigma: Option<f64>,
    pub fixed_tau: Option<f64>,
}

impl OutcomeModelSpec {
    pub fn new(terms: ModelTerms) -> Self {
        Self {
            terms,
            prior: None,
            errors: ErrorFamily::Normal,
            fixed_sigma: None,
            fixed_tau: None,
        }
    }
}

/// Units with outcome collapsed to distinct design rows.
#[derive(Debug, Clone)]
struct CellStats {
    z: Vec<f64>,
    n: f64,
    ybar: f64,
    ss: f64,
}

fn column_means(cells: &[CellStats], n: f64, q: usize) -> Vec<f64> {
    let mut m = vec![0.0; q];
    if n > 0.0 {
        for c in cells {
            for (mk, zk) in m.iter_mut().zip(&c.z) {
                *mk += c.n * zk / n;
            }
        }
    }
    m
}

/// Full design row (fixed columns then ψ-group indicators) for a cell.
fn cell_row(design: &Design, n_groups: usize, psi: Option<&PsiPredictor>, key: &CellKey) -> Result<Vec<f64>> {
    let mut z = vec![0.0; design.n_cols() + n_groups];
    let value = if design.uses_psi() || n_groups > 0 {
        let map = psi.ok_or_else(|| Error::config("model uses psi but no psi predictor was supplied"))?;
        let v = map
            .psi(key)
            .ok_or_else(|| Error::data(format!("no psi estimate for cell {key}")))?;
        if n_groups > 0 {
            z[design.n_cols() + map.group(key).unwrap()] = 1.0;
        }
        v
    } else {
        0.0
    };
    design.fill_row(key.levels(), value, &mut z[..design.n_cols()]);
    Ok(z)
}

/// Posterior of the linear outcome model together with what is needed to
/// predict cell means.
#[derive(Debug, Clone)]
pub struct LinearPosterior {
    pub draws: PosteriorDraws,
    pub prior: PriorSpec,
    design: Design,
    n_groups: usize,
    psi: Option<PsiPredictor>,
}

impl LinearPosterior {
    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.n_cols() + self.n_groups
    }

    /// Residual-free cell means `x_jβ + u_g(j)` per draw: `out[draw][cell]`.
    pub fn cell_mean_draws(&self, keys: &[CellKey]) -> Result<Vec<Vec<f64>>> {
        let q = self.n_coefficients();
        let rows: Vec<Vec<f64>> = keys
            .iter()
            .map(|k| cell_row(&self.design, self.n_groups, self.psi.as_ref(), k))
            .collect::<Result<_>>()?;
        Ok((0..self.draws.n_draws())
            .map(|d| {
                let theta = &self.draws.row(d)[..q];
                rows.iter()
                    .map(|z| z.iter().zip(theta).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    pub fn rhat(&self) -> Result<Vec<f64>> {
        rhat(&self.draws)
    }

    /// Largest ratio `|posterior mean| / prior scale` over the coefficients.
    pub fn max_scaled_coefficient(&self) -> f64 {
        (1..self.design.n_cols())
            .map(|k| self.draws.mean(k).abs() / self.prior.coefficient_scales[k - 1])
            .fold(0.0, f64::max)
    }
}

struct Problem {
    cells: Vec<CellStats>,
    unit_cell: Vec<usize>,
    y: Vec<f64>,
    prior_precision: DMatrix<f64>,
    prior_linear: DVector<f64>,
    p: usize,
    k: usize,
    sigma_rate: f64,
    tau_scale: f64,
}

struct ChainState {
    theta: DVector<f64>,
    sigma: f64,
    tau: f64,
    lambda: Vec<f64>,
}

fn weighted_stats(problem: &Problem, lambda: &[f64]) -> Vec<CellStats> {
    let mut cells: Vec<CellStats> = problem
        .cells
        .iter()
        .map(|c| CellStats {
            z: c.z.clone(),
            n: 0.0,
            ybar: 0.0,
            ss: 0.0,
        })
        .collect();
    for ((&c, &y), &l) in problem.unit_cell.iter().zip(&problem.y).zip(lambda) {
        let cell = &mut cells[c];
        cell.n += l;
        let d = y - cell.ybar;
        cell.ybar += l * d / cell.n;
        cell.ss += l * d * (y - cell.ybar);
    }
    cells
}

fn gram(cells: &[CellStats], q: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut g = DMatrix::zeros(q, q);
    let mut h = DVector::zeros(q);
    for c in cells {
        let nz: Vec<usize> = (0..q).filter(|&a| c.z[a] != 0.0).collect();
        for &a in &nz {
            h[a] += c.n * c.ybar * c.z[a];
            for &b in &nz {
                g[(a, b)] += c.n * c.z[a] * c.z[b];
            }
        }
    }
    (g, h)
}

fn run_chain<R: Rng>(
    problem: &Problem,
    spec: &OutcomeModelSpec,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let q = problem.p + problem.k;
    let n_units = problem.y.len();
    let cauchy = spec.errors == ErrorFamily::Cauchy;
    let mut state = ChainState {
        theta: DVector::zeros(q),
        sigma: spec
            .fixed_sigma
            .unwrap_or_else(|| (rng.random::<f64>() * 2.0 - 1.0).exp() / problem.sigma_rate),
        tau: spec
            .fixed_tau
            .unwrap_or_else(|| 0.5 * (rng.random::<f64>() * 2.0 - 1.0).exp() * problem.tau_scale),
        lambda: vec![1.0; n_units],
    };
    let (mut g, mut h) = gram(&problem.cells, q);
    let mut cells = problem.cells.clone();
    let mut out = Vec::with_capacity(cfg.kept());
    for it in 0..cfg.iterations {
        if cauchy && it > 0 {
            cells = weighted_stats(problem, &state.lambda);
            (g, h) = gram(&cells, q);
        }
        // (β, u) | σ, τ
        let s2 = state.sigma * state.sigma;
        let mut prec = &g / s2 + &problem.prior_precision;
        for a in problem.p..q {
            prec[(a, a)] += 1.0 / (state.tau * state.tau);
        }
        let lin = &h / s2 + &problem.prior_linear;
        let chol = prec
            .cholesky()
            .ok_or_else(|| Error::numerical("coefficient precision is not positive definite"))?;
        let mean = chol.solve(&lin);
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
        state.theta = mean + dev;

        let fitted: Vec<f64> = cells.iter().map(|c| c.z.iter().zip(state.theta.iter()).map(|(a, b)| a * b).sum()).collect();
        // σ | β, u
        if spec.fixed_sigma.is_none() {
            let ssr: f64 = cells
                .iter()
                .zip(&fitted)
                .map(|(c, f)| c.ss + c.n * (c.ybar - f).powi(2))
                .sum();
            let n = n_units as f64;
            let rate = problem.sigma_rate;
            let log_f = |s: f64| -n * s - ssr / (2.0 * (2.0 * s).exp()) - rate * s.exp() + s;
            state.sigma = slice_sample(state.sigma.ln(), log_f, 1.0, rng).exp();
        }
        // τ | u
        if problem.k > 0 && spec.fixed_tau.is_none() {
            let uu: f64 = state.theta.rows(problem.p, problem.k).iter().map(|u| u * u).sum();
            let kk = problem.k as f64;
            let s_tau = problem.tau_scale;
            let log_f = |t: f64| {
                let e2 = (2.0 * t).exp();
                -kk * t - uu / (2.0 * e2) - e2 / (2.0 * s_tau * s_tau) + t
            };
            state.tau = slice_sample(state.tau.ln(), log_f, 1.0, rng).exp();
        }
        if cauchy {
            let s2 = state.sigma * state.sigma;
            for (i, (&c, &y)) in problem.unit_cell.iter().zip(&problem.y).enumerate() {
                let r = y - fitted_for(&problem.cells[c].z, &state.theta);
                let rate = 0.5 * (1.0 + r * r / s2);
                state.lambda[i] = Gamma::new(1.0, 1.0 / rate)
                    .map_err(|e| Error::numerical(e.to_string()))?
                    .sample(rng);
            }
        }
        if it >= cfg.warmup {
            let mut row: Vec<f64> = state.theta.iter().copied().collect();
            row.push(state.sigma);
            if problem.k > 0 {
                row.push(state.tau);
            }
            out.push(row);
        }
    }
    Ok(out)
}

fn fitted_for(z: &[f64], theta: &DVector<f64>) -> f64 {
    z.iter().zip(theta.iter()).map(|(a, b)| a * b).sum()
}

/// Draws from the posterior of the linear outcome model by blocked Gibbs:
/// a joint Gaussian update of coefficients and varying intercepts, then
/// slice updates of the residual and varying-intercept sds.
///
/// `psi` supplies the per-cell ψ̂ values and groups when the model uses
/// `psi` or `(1|psi)`; all groups of `psi` get an intercept, sampled or not.
pub fn sample_posterior_linear(
    spec: &OutcomeModelSpec,
    data: &Microdata,
    psi: Option<&PsiPredictor>,
    cfg: &McmcConfig,
) -> Result<LinearPosterior> {
    cfg.validate()?;
    let design = Design::new(Arc::clone(data.schema()), &spec.terms);
    let k = if spec.terms.psi_group_intercept {
        psi.ok_or_else(|| Error::config("(1|psi) needs a psi predictor"))?.n_groups()
    } else {
        0
    };
    let p = design.n_cols();
    let q = p + k;
    for (name, v) in [("sigma", spec.fixed_sigma), ("tau", spec.fixed_tau)] {
        if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("fixed {name} must be positive")));
        }
    }

    let mut index: BTreeMap<CellKey, usize> = BTreeMap::new();
    let mut cells: Vec<CellStats> = Vec::new();
    let mut unit_cell = Vec::new();
    let mut y = Vec::new();
    for i in 0..data.len() {
        let Some(yi) = data.outcome(i) else { continue };
        if !yi.is_finite() {
            return Err(Error::data(format!("outcome of unit {i} is not finite")));
        }
        let key = data.key(i);
        let pos = match index.get(&key) {
            Some(&pos) => pos,
            None => {
                let z = cell_row(&design, k, psi, &key)?;
                cells.push(CellStats {
                    z,
                    n: 0.0,
                    ybar: 0.0,
                    ss: 0.0,
                });
                index.insert(key, cells.len() - 1);
                cells.len() - 1
            }
        };
        let c = &mut cells[pos];
        c.n += 1.0;
        let d = yi - c.ybar;
        c.ybar += d / c.n;
        c.ss += d * (yi - c.ybar);
        unit_cell.push(pos);
        y.push(yi);
    }
    let n = y.len() as f64;
    let prior = match &spec.prior {
        Some(p0) => p0.clone(),
        None => {
            if y.len() < 2 {
                return Err(Error::config("default priors need at least two observed outcomes"));
            }
            let y_sd = crate::numeric::sd(&y);
            if y_sd <= 0.0 {
                return Err(Error::data("outcome has zero variance; supply explicit priors"));
            }
            PriorSpec::autoscale(&cells, n, crate::numeric::mean(&y), y_sd, p)
        }
    };
    prior.validate(p - 1)?;

    // Gaussian prior on β equivalent to N(m0, s0²) on the centred intercept
    // and independent N(0, s_k²) coefficients.
    let mut a = column_means(&cells, n, q);
    a[0] = 1.0;
    for ak in a.iter_mut().skip(p) {
        *ak = 0.0;
    }
    let a = DVector::from_vec(a);
    let s0 = prior.intercept_scale;
    let mut prior_precision = &a * a.transpose() / (s0 * s0);
    for kk in 1..p {
        prior_precision[(kk, kk)] += 1.0 / prior.coefficient_scales[kk - 1].powi(2);
    }
    let prior_linear = &a * (prior.intercept_location / (s0 * s0));

    let problem = Problem {
        cells,
        unit_cell,
        y,
        prior_precision,
        prior_linear,
        p,
        k,
        sigma_rate: prior.sigma_rate,
        tau_scale: prior.tau_scale,
    };
    let chains: Vec<Vec<Vec<f64>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = cfg.chain_rng(c);
            run_chain(&problem, spec, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut names: Vec<String> = design.labels().to_vec();
    if let Some(map) = psi.filter(|_| k > 0) {
        names.extend(map.group_labels().iter().map(|l| format!("(1|psi)[{l}]")));
    }
    names.push("sigma".into());
    if k > 0 {
        names.push("tau".into());
    }
    Ok(LinearPosterior {
        draws: PosteriorDraws::from_chains(names, chains, cfg.warmup)?,
        prior,
        design,
        n_groups: k,
        psi: psi.cloned(),
    })
}
