//! Closed-form bias and conditional-variance algebra for the unweighted,
//! poststratified and shrinkage (MRP) estimators of a population mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};

use crate::cells::CellTable;
use crate::error::{Error, Result};

/// Cell-level truth of a population with respondents and nonrespondents.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecCell {
    pub labels: Vec<String>,
    pub size: u64,
    /// Share of the cell that responds (is included).
    pub psi: f64,
    pub mean_respondents: f64,
    pub mean_nonrespondents: f64,
    pub sd: f64,
}

impl SpecCell {
    /// Cell population mean `ψ_j Ȳ_jR + (1-ψ_j) Ȳ_jM`.
    pub fn mean(&self) -> f64 {
        self.psi * self.mean_respondents + (1.0 - self.psi) * self.mean_nonrespondents
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    cells: Vec<SpecCell>,
}

impl PopulationSpec {
    pub fn new(cells: Vec<SpecCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::data("population spec has no cells"));
        }
        for (j, c) in cells.iter().enumerate() {
            if c.size == 0 {
                return Err(Error::data(format!("cell {j} has zero population size")));
            }
            if !(c.psi >= 0.0 && c.psi <= 1.0) {
                return Err(Error::data(format!("cell {j} has psi {} outside [0, 1]", c.psi)));
            }
            if !(c.sd > 0.0 && c.sd.is_finite()) {
                return Err(Error::data(format!("cell {j} has non-positive sd")));
            }
            if !(c.mean_respondents.is_finite() && c.mean_nonrespondents.is_finite()) {
                return Err(Error::data(format!("cell {j} has a non-finite mean")));
            }
        }
        let spec = Self { cells };
        if spec.psi_bar() <= 0.0 {
            return Err(Error::data("overall response share is zero"));
        }
        Ok(spec)
    }

    pub fn cells(&self) -> &[SpecCell] {
        &self.cells
    }

    pub fn total_size(&self) -> f64 {
        self.cells.iter().map(|c| c.size as f64).sum()
    }

    fn shares(&self) -> impl Iterator<Item = (f64, &SpecCell)> {
        let n = self.total_size();
        self.cells.iter().map(move |c| (c.size as f64 / n, c))
    }

    /// `ψ̄ = Σ (N_j/N) ψ_j`.
    pub fn psi_bar(&self) -> f64 {
        self.shares().map(|(s, c)| s * c.psi).sum()
    }

    /// Finite-population mean `Ȳ`.
    pub fn population_mean(&self) -> f64 {
        self.shares().map(|(s, c)| s * c.mean()).sum()
    }

    /// Expected respondent mean `Σ N_j ψ_j Ȳ_jR / (N ψ̄)`.
    pub fn respondent_mean(&self) -> f64 {
        self.shares().map(|(s, c)| s * c.psi * c.mean_respondents).sum::<f64>() / self.psi_bar()
    }

    /// Expected cell sample sizes `n N_j ψ_j / Σ N_k ψ_k` for a sample of `n`.
    pub fn expected_sample_sizes(&self, n: f64) -> Vec<f64> {
        let total: f64 = self.cells.iter().map(|c| c.size as f64 * c.psi).sum();
        self.cells.iter().map(|c| n * c.size as f64 * c.psi / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRecord {
    pub a: f64,
    pub b: f64,
    pub bias_unw: f64,
    pub bias_ps: f64,
    /// `Σ (N_j/N)/(1+δ_j) (1-ψ_j)(Ȳ_jR - Ȳ_jM)`.
    pub mrp_first: f64,
    /// `Σ (N_j/N) δ_j/(1+δ_j) (C - Ȳ_j)` with `C` the expected respondent mean.
    pub mrp_second: f64,
    pub bias_mrp: f64,
    /// Second term without the `N_j/N` factor, as often written.
    pub mrp_second_unweighted: f64,
    /// `Cov(ψ, y)/ψ̄` over the response indicator (approximate form).
    pub stochastic_unw: f64,
    /// `Σ (N_j/N) Cov_j(ψ, y)/ψ_j` (approximate form).
    pub stochastic_ps: f64,
}

/// Exact bias terms given expected cell sample sizes (for `δ_j`).
pub fn analytic_bias(spec: &PopulationSpec, sigma_theta: f64, expected_n: &[f64]) -> Result<BiasRecord> {
    if !(sigma_theta > 0.0) {
        return Err(Error::config("sigma_theta must be positive"));
    }
    if expected_n.len() != spec.cells.len() {
        return Err(Error::data("expected sample sizes do not match the spec cells"));
    }
    let psi_bar = spec.psi_bar();
    let c_resp = spec.respondent_mean();
    let y_pop = spec.population_mean();
    let mut rec = BiasRecord {
        a: 0.0,
        b: 0.0,
        bias_unw: 0.0,
        bias_ps: 0.0,
        mrp_first: 0.0,
        mrp_second: 0.0,
        bias_mrp: 0.0,
        mrp_second_unweighted: 0.0,
        stochastic_unw: 0.0,
        stochastic_ps: 0.0,
    };
    for ((share, c), &n_j) in spec.shares().zip(expected_n) {
        let delta = if n_j > 0.0 {
            c.sd * c.sd / (n_j * sigma_theta * sigma_theta)
        } else {
            f64::INFINITY
        };
        let (keep, pool) = if delta.is_infinite() {
            (0.0, 1.0)
        } else {
            (1.0 / (1.0 + delta), delta / (1.0 + delta))
        };
        let gap = (1.0 - c.psi) * (c.mean_respondents - c.mean_nonrespondents);
        rec.a += share * (c.mean_respondents - c_resp) * (c.psi - psi_bar) / psi_bar;
        rec.b += share * gap;
        rec.mrp_first += share * keep * gap;
        rec.mrp_second += share * pool * (c_resp - c.mean());
        rec.mrp_second_unweighted += pool * (c_resp - c.mean());
        rec.stochastic_unw += share * c.psi * c.mean_respondents;
        if c.psi > 0.0 {
            let cov_j = c.psi * (1.0 - c.psi) * (c.mean_respondents - c.mean_nonrespondents);
            rec.stochastic_ps += share * cov_j / c.psi;
        }
    }
    rec.bias_unw = rec.a + rec.b;
    rec.bias_ps = rec.b;
    rec.bias_mrp = rec.mrp_first + rec.mrp_second;
    rec.stochastic_unw = (rec.stochastic_unw - psi_bar * y_pop) / psi_bar;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRecord {
    pub var_unw: f64,
    pub var_ps: f64,
    /// Three-term approximation.
    pub var_mrp: f64,
    /// Exact variance of `Σ (N_j/N)(ȳ_j + δ_j ȳ_s)/(1+δ_j)` for independent
    /// cell means with variance `s_j²/n_j`.
    pub var_mrp_exact: f64,
}

/// Conditional variances given the sample cell sizes and shrinkage factors
/// (one `δ_j` per sample row).
pub fn conditional_variances(sample: &CellTable, population: &CellTable, delta: &[f64]) -> Result<VarianceRecord> {
    let rows = sample.rows();
    if delta.len() != rows.len() {
        return Err(Error::data(format!(
            "{} shrinkage factors for {} sample cells",
            delta.len(),
            rows.len()
        )));
    }
    let pooled = sample.pooled_variance();
    let mut cells = Vec::with_capacity(rows.len());
    for r in rows {
        if r.count == 0 {
            return Err(Error::data(format!("sample cell {} has no units", r.key)));
        }
        let s2 = r
            .variance
            .or(pooled)
            .ok_or_else(|| Error::data(format!("no variance available for cell {}", r.key)))?;
        let big_n = population.count(&r.key);
        if big_n == 0 {
            return Err(Error::data(format!("sample cell {} is absent from the population", r.key)));
        }
        cells.push((r.count as f64, big_n as f64, s2));
    }
    variances_from_cells(&cells, delta)
}

/// Conditional variances from `(n_j, N_j, s_j²)` per sampled cell; `n_j` may
/// be fractional, e.g. an expected cell size.
pub fn variances_from_cells(cells: &[(f64, f64, f64)], delta: &[f64]) -> Result<VarianceRecord> {
    if delta.len() != cells.len() {
        return Err(Error::data(format!("{} shrinkage factors for {} cells", delta.len(), cells.len())));
    }
    if let Some(c) = cells.iter().find(|c| !(c.0 > 0.0 && c.1 > 0.0 && c.2 >= 0.0)) {
        return Err(Error::data(format!("invalid cell (n={}, N={}, s2={})", c.0, c.1, c.2)));
    }
    let n: f64 = cells.iter().map(|c| c.0).sum();
    let big_n: f64 = cells.iter().map(|c| c.1).sum();
    let mut rec = VarianceRecord {
        var_unw: 0.0,
        var_ps: 0.0,
        var_mrp: 0.0,
        var_mrp_exact: 0.0,
    };
    let pooled_share: f64 = cells
        .iter()
        .zip(delta)
        .map(|(&(_, nj, _), &d)| nj / big_n * d / (1.0 + d))
        .sum();
    for (&(n_j, big_nj, s2), &d) in cells.iter().zip(delta) {
        let w = big_nj / big_n;
        rec.var_unw += n_j * s2 / (n * n);
        rec.var_ps += w * w * (1.0 - n_j / big_nj) * s2 / n_j;
        let keep = 1.0 / (1.0 + d);
        let pool = d / (1.0 + d);
        rec.var_mrp += w * w
            * (keep * keep * s2 / n_j + pool * pool * n_j / (n * n) * s2 + 2.0 * d / ((1.0 + d) * (1.0 + d)) * s2 / n);
        let coef = w * keep + n_j / n * pooled_share;
        rec.var_mrp_exact += coef * coef * s2 / n_j;
    }
    Ok(rec)
}

/// Conditional variances at the expected cell sizes of a sample of `n`, with
/// `s_j` the cell sd and `δ_j = s_j²/(n_j σ_θ²)`. Cells with no expected
/// respondents are left out.
pub fn expected_variances(spec: &PopulationSpec, n: f64, sigma_theta: f64) -> Result<VarianceRecord> {
    if !(n > 0.0 && sigma_theta > 0.0) {
        return Err(Error::config("sample size and sigma_theta must be positive"));
    }
    let cells: Vec<(f64, f64, f64)> = spec
        .cells
        .iter()
        .zip(spec.expected_sample_sizes(n))
        .filter(|(_, e)| *e > 0.0)
        .map(|(c, e)| (e, c.size as f64, c.sd * c.sd))
        .collect();
    let delta: Vec<f64> = cells.iter().map(|&(n_j, _, s2)| s2 / (n_j * sigma_theta * sigma_theta)).collect();
    variances_from_cells(&cells, &delta)
}

/// Monte Carlo draws of the respondent-based estimators under a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloBias {
    pub replications: usize,
    pub bias_ps: f64,
    pub se_ps: f64,
    pub bias_unw: f64,
    pub se_unw: f64,
    /// Replications in which some cell had no respondent.
    pub uncovered_replications: usize,
}

/// Simulates Bernoulli(ψ_j) response in every cell and normal respondent
/// outcomes, then records the bias of `ȳ_ps` and `ȳ_s` against `Ȳ`.
///
/// Cells without respondents drop out of `ȳ_ps`, whose weights are
/// renormalised over the covered cells. Replications with no respondent at
/// all are redrawn.
pub fn monte_carlo_bias(spec: &PopulationSpec, replications: usize, seed: u64) -> Result<MonteCarloBias> {
    if replications == 0 {
        return Err(Error::config("Monte Carlo needs at least one replication"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = spec.population_mean();
    let mut ps = Vec::with_capacity(replications);
    let mut unw = Vec::with_capacity(replications);
    let mut uncovered = 0;
    let mut attempts = 0usize;
    while ps.len() < replications {
        attempts += 1;
        if attempts > 10 * replications + 100 {
            return Err(Error::numerical("too many replications without respondents"));
        }
        let mut weighted = 0.0;
        let mut covered = 0.0;
        let mut sum = 0.0;
        let mut n = 0u64;
        for c in spec.cells() {
            let n_j = Binomial::new(c.size, c.psi).map_err(|e| Error::data(e.to_string()))?.sample(&mut rng);
            if n_j == 0 {
                continue;
            }
            let sd = c.sd / (n_j as f64).sqrt();
            let ybar = Normal::new(c.mean_respondents, sd)
                .map_err(|e| Error::data(e.to_string()))?
                .sample(&mut rng);
            weighted += c.size as f64 * ybar;
            covered += c.size as f64;
            sum += n_j as f64 * ybar;
            n += n_j;
        }
        if n == 0 {
            continue;
        }
        if covered < spec.total_size() {
            uncovered += 1;
        }
        ps.push(weighted / covered - truth);
        unw.push(sum / n as f64 - truth);
    }
    let r = replications as f64;
    let stats = |v: &[f64]| (crate::numeric::mean(v), crate::numeric::sd(v) / r.sqrt());
    let (bias_ps, se_ps) = stats(&ps);
    let (bias_unw, se_unw) = stats(&unw);
    Ok(MonteCarloBias {
        replications,
        bias_ps,
        se_ps,
        bias_unw,
        se_unw,
        uncovered_replications: uncovered,
    })
}
