//! Multilevel regression and poststratification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{CellKey, CellTable, Grouping, Microdata};
use crate::error::{Error, Result};
use crate::estimators::{Diagnostic, EstimateSummary, Estimates, PropensityFit};
use crate::formula::ModelTerms;
use crate::hb::{
    sample_posterior_linear, sample_posterior_logistic, LinearPosterior, LogisticPosterior, LogisticPrior, McmcConfig,
    PosteriorDraws,
    OutcomeModelSpec,
};
use crate::numeric::{mean, quantile_sorted, sd};
use crate::wfpbb::synthetic_populations;

/// Per-cell estimated inclusion probability and its rounded group.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiPredictor {
    digits: u32,
    cells: BTreeMap<CellKey, (f64, usize)>,
    group_values: Vec<f64>,
}

impl PsiPredictor {
    /// Groups cells by `ψ̂_j` rounded to `digits` decimals; group ids follow
    /// the rounded values in increasing order.
    pub fn new(values: BTreeMap<CellKey, f64>, digits: u32) -> Result<Self> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::data(format!("psi for cell {k} is {v}, outside (0, 1)")));
        }
        let scale = 10f64.powi(digits as i32);
        let rounded: BTreeMap<&CellKey, i64> = values.iter().map(|(k, v)| (k, (v * scale).round() as i64)).collect();
        let mut unique: Vec<i64> = rounded.values().copied().collect();
        unique.sort_unstable();
        unique.dedup();
        let cells = values
            .iter()
            .map(|(k, &v)| (k.clone(), (v, unique.binary_search(&rounded[k]).unwrap())))
            .collect();
        Ok(Self {
            digits,
            cells,
            group_values: unique.iter().map(|&r| r as f64 / scale).collect(),
        })
    }

    pub fn digits(&self) -> u32 {
        self.digits
    }

    pub fn psi(&self, key: &CellKey) -> Option<f64> {
        self.cells.get(key).map(|c| c.0)
    }

    pub fn group(&self, key: &CellKey) -> Option<usize> {
        self.cells.get(key).map(|c| c.1)
    }

    pub fn n_groups(&self) -> usize {
        self.group_values.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, f64, usize)> {
        self.cells.iter().map(|(k, &(v, g))| (k, v, g))
    }

    pub fn group_labels(&self) -> Vec<String> {
        self.group_values
            .iter()
            .map(|v| format!("{:.*}", self.digits as usize, v))
            .collect()
    }
}

/// Posterior-median ψ̂ of every key from a Bayesian inclusion fit.
pub fn build_psi_predictors<'a>(
    fit: &LogisticPosterior,
    keys: impl IntoIterator<Item = &'a CellKey>,
    digits: u32,
) -> Result<PsiPredictor> {
    PsiPredictor::new(fit.median_probabilities(keys), digits)
}

/// As [`build_psi_predictors`] from a maximum-likelihood fit.
pub fn psi_from_point_fit<'a>(
    fit: &PropensityFit,
    keys: impl IntoIterator<Item = &'a CellKey>,
    digits: u32,
) -> Result<PsiPredictor> {
    PsiPredictor::new(keys.into_iter().map(|k| (k.clone(), fit.predict(k.levels()))).collect(), digits)
}

/// Closed-form shrinkage cell means
/// `θ̃_j = (ȳ_j + δ_j ȳ_s)/(1 + δ_j)` with `δ_j = σ_j²/(n_j σ_θ²)`.
///
/// `σ_j²` is the cell variance, or the pooled within-cell variance for
/// single-unit cells. Returns one value per sample row.
pub fn shrunken_cell_means(sample: &CellTable, sigma_theta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma_theta > 0.0) {
        return Err(Error::config("sigma_theta must be positive"));
    }
    let pooled = sample.pooled_variance();
    let mut n = 0.0;
    let mut sum = 0.0;
    for r in sample.rows() {
        if r.count == 0 {
            return Err(Error::data(format!("sample cell {} has no units", r.key)));
        }
        let m = r
            .mean
            .ok_or_else(|| Error::data(format!("sample cell {} has no mean", r.key)))?;
        n += r.count as f64;
        sum += r.count as f64 * m;
    }
    if n == 0.0 {
        return Err(Error::data("sample has no units"));
    }
    let ybar_s = sum / n;
    let mut theta = Vec::with_capacity(sample.len());
    let mut delta = Vec::with_capacity(sample.len());
    for r in sample.rows() {
        let s2 = r
            .variance
            .or(pooled)
            .ok_or_else(|| Error::data("no within-cell variance is available"))?;
        let d = s2 / (r.count as f64 * sigma_theta * sigma_theta);
        theta.push((r.mean.unwrap() + d * ybar_s) / (1.0 + d));
        delta.push(d);
    }
    Ok((theta, delta))
}

/// Shrinkage estimator `Σ (N_j/N_g) θ̃_j` per group over sample-covered
/// population cells, with its conditional standard error given `δ`.
pub fn shrinkage_estimate(
    sample: &CellTable,
    population: &CellTable,
    sigma_theta: f64,
    groups: &Grouping,
) -> Result<Estimates> {
    let (theta, delta) = shrunken_cell_means(sample, sigma_theta)?;
    let pooled = sample.pooled_variance().unwrap_or(0.0);
    let n: f64 = sample.rows().iter().map(|r| r.count as f64).sum();
    let mut out = Estimates::default();
    for g in groups.groups() {
        let members: Vec<(usize, f64)> = sample
            .rows()
            .iter()
            .enumerate()
            .filter(|(_, r)| g.contains(&r.key))
            .map(|(j, r)| (j, population.count(&r.key) as f64))
            .filter(|(_, big_n)| *big_n > 0.0)
            .collect();
        let big_n: f64 = members.iter().map(|m| m.1).sum();
        if big_n == 0.0 {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        let estimate: f64 = members.iter().map(|&(j, w)| w / big_n * theta[j]).sum();
        let pooled_share: f64 = members.iter().map(|&(j, w)| w / big_n * delta[j] / (1.0 + delta[j])).sum();
        let mut coef = vec![0.0; sample.len()];
        for (j, r) in sample.rows().iter().enumerate() {
            coef[j] = r.count as f64 / n * pooled_share;
        }
        for &(j, w) in &members {
            coef[j] += w / big_n / (1.0 + delta[j]);
        }
        let var: f64 = sample
            .rows()
            .iter()
            .zip(&coef)
            .map(|(r, c)| c * c * sample.variance_or(r, pooled) / r.count as f64)
            .sum();
        out.summaries
            .push(EstimateSummary::normal(&g.label, "MRP-shrink", estimate, var.sqrt()));
    }
    Ok(out)
}

/// Poststratification weights: fixed per cell, or one vector per draw.
#[derive(Debug, Clone, PartialEq)]
pub enum CellWeights {
    Fixed(Vec<f64>),
    PerDraw(Vec<Vec<f64>>),
}

/// Per-draw weighted averages of cell draws (`cell_draws[draw][cell]`) for
/// every group: `out[group][draw]`.
pub fn poststratify_draws(
    cell_draws: &[Vec<f64>],
    keys: &[CellKey],
    weights: &CellWeights,
    groups: &Grouping,
) -> Result<Vec<Vec<f64>>> {
    let n_cells = keys.len();
    if cell_draws.iter().any(|d| d.len() != n_cells) {
        return Err(Error::data("cell draws and cell keys differ in length"));
    }
    let weight_rows: Vec<&[f64]> = match weights {
        CellWeights::Fixed(w) => vec![w.as_slice(); cell_draws.len()],
        CellWeights::PerDraw(w) => {
            if w.len() != cell_draws.len() {
                return Err(Error::data("one weight vector per draw is required"));
            }
            w.iter().map(Vec::as_slice).collect()
        }
    };
    if weight_rows.iter().any(|w| w.len() != n_cells || w.iter().any(|v| !(*v >= 0.0))) {
        return Err(Error::data("weights must be non-negative, one per cell"));
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in groups.groups() {
        let member: Vec<bool> = keys.iter().map(|k| g.contains(k)).collect();
        let mut draws = Vec::with_capacity(cell_draws.len());
        for (d, w) in cell_draws.iter().zip(&weight_rows) {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in (0..n_cells).filter(|&j| member[j]) {
                num += w[j] * d[j];
                den += w[j];
            }
            if den <= 0.0 {
                return Err(Error::data(format!("group `{}` has zero total weight", g.label)));
            }
            draws.push(num / den);
        }
        out.push(draws);
    }
    Ok(out)
}

/// The four MRP variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MrpVariant {
    /// Sample cells, known counts.
    S,
    /// All population cells, known counts.
    P,
    /// Reference-sample cells, counts estimated by WFPBB.
    R,
    /// All population cells, known counts, ψ̂ predictors.
    Int,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellSource {
    Sample,
    Population,
    Reference,
}

impl MrpVariant {
    pub const ALL: [MrpVariant; 4] = [MrpVariant::S, MrpVariant::P, MrpVariant::R, MrpVariant::Int];

    pub fn tag(self) -> &'static str {
        match self {
            Self::S => "MRP-S",
            Self::P => "MRP-P",
            Self::R => "MRP-R",
            Self::Int => "MRP-INT",
        }
    }

    pub fn cell_source(self) -> CellSource {
        match self {
            Self::S => CellSource::Sample,
            Self::P | Self::Int => CellSource::Population,
            Self::R => CellSource::Reference,
        }
    }

    /// Whether population cell counts are estimated rather than known.
    pub fn estimated_counts(self) -> bool {
        self == Self::R
    }

    pub fn uses_psi(self) -> bool {
        self == Self::Int
    }
}

impl fmt::Display for MrpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MrpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().trim_start_matches("MRP-") {
            "S" => Ok(Self::S),
            "P" => Ok(Self::P),
            "R" => Ok(Self::R),
            "INT" => Ok(Self::Int),
            other => Err(Error::config(format!("unknown MRP variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrpOptions {
    /// Number of WFPBB synthetic populations (MRP-R).
    pub synthetic_populations: usize,
    /// Population size for WFPBB; defaults to the population table total.
    pub population_size: Option<u64>,
    /// Rounding digits of the ψ-groups (MRP-INT).
    pub psi_digits: u32,
    /// Inclusion-model terms (MRP-INT); main effects when `None`.
    pub inclusion_terms: Option<ModelTerms>,
    pub logistic_prior: LogisticPrior,
}

impl Default for MrpOptions {
    fn default() -> Self {
        Self {
            synthetic_populations: 100,
            population_size: None,
            psi_digits: 1,
            inclusion_terms: None,
            logistic_prior: LogisticPrior::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MrpResult {
    pub variant: MrpVariant,
    pub estimates: Estimates,
    /// Largest split R̂ over the outcome-model parameters.
    pub max_rhat: f64,
    /// Largest `|posterior mean| / prior scale` over the coefficients.
    pub max_scaled_coefficient: f64,
    /// Per-group poststratified draws, in grouping order (empty for
    /// groups without an estimate).
    pub group_draws: Vec<Vec<f64>>,
    /// Outcome-model posterior draws.
    pub draws: PosteriorDraws,
}

/// Concatenates the nonprobability sample with a reference sample whose
/// weights are rescaled to sum to its own size.
pub fn concatenate_for_inclusion(sample: &Microdata, reference: &Microdata) -> Result<Microdata> {
    let mut reference = reference.clone();
    let total: f64 = (0..reference.len()).map(|i| reference.weight(i)).sum();
    let scale = reference.len() as f64 / total;
    let w = (0..reference.len()).map(|i| reference.weight(i) * scale).collect();
    reference.set_weights(Some(w))?;
    let mut sample = sample.clone();
    sample.set_weights(None)?;
    Microdata::concatenate(&sample, &reference)
}

/// ψ̂ predictors over the population cells from the Bayesian inclusion
/// model fitted to the concatenated samples.
pub fn estimate_psi(
    sample: &Microdata,
    reference: &Microdata,
    population: &CellTable,
    cfg: &McmcConfig,
    opts: &MrpOptions,
) -> Result<PsiPredictor> {
    let concatenated = concatenate_for_inclusion(sample, reference)?;
    let terms = opts
        .inclusion_terms
        .clone()
        .unwrap_or_else(|| ModelTerms::main_effects(sample.schema()));
    let fit = sample_posterior_logistic(&terms, &concatenated, &opts.logistic_prior, cfg)?;
    build_psi_predictors(&fit, population.occupied_keys(), opts.psi_digits)
}

fn summarize(variant: MrpVariant, groups: &Grouping, group_draws: &[Vec<f64>]) -> Estimates {
    let mut out = Estimates::default();
    for (g, draws) in groups.groups().iter().zip(group_draws) {
        if draws.is_empty() {
            out.diagnostics.push(Diagnostic::EmptyGroup {
                group: g.label.clone(),
            });
            continue;
        }
        let mut sorted = draws.clone();
        sorted.sort_by(f64::total_cmp);
        out.summaries.push(EstimateSummary {
            group: g.label.clone(),
            method: variant.tag().to_string(),
            estimate: mean(draws),
            se: sd(draws),
            ci_low: quantile_sorted(&sorted, 0.025),
            ci_high: quantile_sorted(&sorted, 0.975),
        });
    }
    out
}

/// Poststratifies an outcome-model posterior according to `variant`.
///
/// `synthetic` holds the WFPBB population cell tables for MRP-R; each
/// posterior draw is paired with one of them drawn uniformly (seeded by
/// `seed`).
pub fn mrp_from_posterior(
    variant: MrpVariant,
    posterior: &LinearPosterior,
    sample: &Microdata,
    population: Option<&CellTable>,
    reference: Option<&Microdata>,
    synthetic: Option<&[CellTable]>,
    groups: &Grouping,
    seed: u64,
) -> Result<MrpResult> {
    let keys: Vec<CellKey> = match variant.cell_source() {
        CellSource::Sample => {
            let population = population.ok_or_else(|| Error::config("MRP-S needs population counts"))?;
            let mut k: Vec<CellKey> = (0..sample.len())
                .filter(|&i| sample.outcome(i).is_some())
                .map(|i| sample.key(i))
                .filter(|k| population.count(k) > 0)
                .collect();
            k.sort();
            k.dedup();
            k
        }
        CellSource::Population => population
            .ok_or_else(|| Error::config(format!("{variant} needs population counts")))?
            .occupied_keys()
            .cloned()
            .collect(),
        CellSource::Reference => {
            let reference = reference.ok_or_else(|| Error::config("MRP-R needs a reference sample"))?;
            let mut k: Vec<CellKey> = (0..reference.len()).map(|i| reference.key(i)).collect();
            k.sort();
            k.dedup();
            k
        }
    };
    if keys.is_empty() {
        return Err(Error::data(format!("{variant} has no cells to poststratify")));
    }
    let cell_draws = posterior.cell_mean_draws(&keys)?;
    let weights = if variant.estimated_counts() {
        let tables = synthetic.ok_or_else(|| Error::config("MRP-R needs synthetic populations"))?;
        if tables.is_empty() {
            return Err(Error::config("MRP-R needs at least one synthetic population"));
        }
        let per_table: Vec<Vec<f64>> = tables
            .iter()
            .map(|t| keys.iter().map(|k| t.count(k) as f64).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CellWeights::PerDraw(
            (0..cell_draws.len())
                .map(|_| per_table[rng.random_range(0..per_table.len())].clone())
                .collect(),
        )
    } else {
        let population = population.unwrap();
        CellWeights::Fixed(keys.iter().map(|k| population.count(k) as f64).collect())
    };
    let mut group_draws = Vec::with_capacity(groups.len());
    for g in groups.groups() {
        let single = Grouping::new(vec![g.clone()]);
        match poststratify_draws(&cell_draws, &keys, &weights, &single) {
            Ok(mut d) => group_draws.push(d.pop().unwrap()),
            Err(_) => group_draws.push(Vec::new()),
        }
    }
    let rhat = posterior.rhat().map(|r| r.into_iter().fold(1.0, f64::max)).unwrap_or(f64::NAN);
    Ok(MrpResult {
        variant,
        estimates: summarize(variant, groups, &group_draws),
        max_rhat: rhat,
        max_scaled_coefficient: posterior.max_scaled_coefficient(),
        group_draws,
        draws: posterior.draws.clone(),
    })
}

/// Fits the outcome model and poststratifies it as `variant` prescribes.
///
/// MRP-INT first estimates ψ̂ for every population cell from the
/// concatenated samples and adds `psi + (1|psi)` to the outcome model.
#[allow(clippy::too_many_arguments)]
pub fn mrp_estimate(
    variant: MrpVariant,
    sample: &Microdata,
    population: Option<&CellTable>,
    reference: Option<&Microdata>,
    spec: &OutcomeModelSpec,
    cfg: &McmcConfig,
    groups: &Grouping,
    opts: &MrpOptions,
) -> Result<MrpResult> {
    let mut spec = spec.clone();
    let psi = if variant.uses_psi() {
        let reference = reference.ok_or_else(|| Error::config("MRP-INT needs a reference sample"))?;
        let population = population.ok_or_else(|| Error::config("MRP-INT needs population counts"))?;
        if !spec.terms.terms.contains(&crate::formula::Term::Psi) {
            spec.terms.terms.push(crate::formula::Term::Psi);
        }
        spec.terms.psi_group_intercept = true;
        Some(estimate_psi(sample, reference, population, cfg, opts)?)
    } else {
        if spec.terms.uses_psi() {
            return Err(Error::config(format!("{variant} outcome models cannot use psi")));
        }
        None
    };
    let posterior = sample_posterior_linear(&spec, sample, psi.as_ref(), cfg)?;
    let synthetic = if variant.estimated_counts() {
        let reference = reference.ok_or_else(|| Error::config("MRP-R needs a reference sample"))?;
        let size = opts
            .population_size
            .or(population.map(CellTable::total_count))
            .ok_or_else(|| Error::config("MRP-R needs the population size"))?;
        let pops = synthetic_populations(reference, size, opts.synthetic_populations, cfg.seed)?;
        Some(crate::wfpbb::estimate_pop_cells(&pops, reference)?)
    } else {
        None
    };
    mrp_from_posterior(
        variant,
        &posterior,
        sample,
        population,
        reference,
        synthetic.as_deref(),
        groups,
        cfg.seed,
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cells::{CellRole, CellRow, CovariateSchema};

    fn keys() -> Vec<CellKey> {
        vec![CellKey::new(vec![0]), CellKey::new(vec![1]), CellKey::new(vec![2])]
    }

    fn schema() -> Arc<CovariateSchema> {
        Arc::new(CovariateSchema::numbered(&[("a", 3)]).unwrap())
    }

    #[test]
    fn fixed_weights_average_each_draw() {
        let draws = vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 6.0]];
        let out = poststratify_draws(
            &draws,
            &keys(),
            &CellWeights::Fixed(vec![1.0, 1.0, 2.0]),
            &Grouping::overall(),
        )
        .unwrap();
        assert_eq!(out, vec![vec![9.0 / 4.0, 3.0]]);
    }

    #[test]
    fn zero_group_weight_is_an_error() {
        let groups = Grouping::overall_and_levels(&schema(), "a").unwrap();
        let err = poststratify_draws(&[vec![1.0, 2.0, 3.0]], &keys(), &CellWeights::Fixed(vec![1.0, 0.0, 1.0]), &groups);
        assert!(err.is_err());
    }

    #[test]
    fn per_draw_weights_follow_draws() {
        let draws = vec![vec![1.0, 3.0, 0.0], vec![1.0, 3.0, 0.0]];
        let w = CellWeights::PerDraw(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let out = poststratify_draws(&draws, &keys(), &w, &Grouping::overall()).unwrap();
        assert_eq!(out[0], vec![1.0, 3.0]);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in MrpVariant::ALL {
            assert_eq!(v.tag().parse::<MrpVariant>().unwrap(), v);
        }
        assert_eq!("int".parse::<MrpVariant>().unwrap(), MrpVariant::Int);
        assert!("Q".parse::<MrpVariant>().is_err());
    }

    fn table(role: CellRole, rows: &[(u32, u64, f64, f64)]) -> CellTable {
        CellTable::new(
            schema(),
            role,
            rows.iter()
                .map(|&(k, n, m, v)| CellRow {
                    key: CellKey::new(vec![k]),
                    count: n,
                    mean: Some(m),
                    variance: Some(v),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn weak_shrinkage_matches_poststratification() {
        let s = table(CellRole::Sample, &[(0, 10, 1.0, 2.0), (1, 30, 3.0, 1.0), (2, 5, -2.0, 4.0)]);
        let p = table(CellRole::Population, &[(0, 100, 0.0, 0.0), (1, 100, 0.0, 0.0), (2, 200, 0.0, 0.0)]);
        let est = shrinkage_estimate(&s, &p, 1e6, &Grouping::overall()).unwrap();
        let ps = (100.0 * 1.0 + 100.0 * 3.0 - 200.0 * 2.0) / 400.0;
        assert!((est.summaries[0].estimate - ps).abs() < 1e-9);
    }

    #[test]
    fn strong_shrinkage_collapses_to_sample_mean() {
        let s = table(CellRole::Sample, &[(0, 10, 1.0, 2.0), (1, 30, 3.0, 1.0)]);
        let p = table(CellRole::Population, &[(0, 500, 0.0, 0.0), (1, 100, 0.0, 0.0)]);
        let est = shrinkage_estimate(&s, &p, 1e-6, &Grouping::overall()).unwrap();
        assert!((est.summaries[0].estimate - 2.5).abs() < 1e-6);
        // c_k -> n_k/n, so the variance is sum n_k s_k^2 / n^2
        let se = ((10.0 * 2.0 + 30.0 * 1.0) / 1600.0f64).sqrt();
        assert!((est.summaries[0].se - se).abs() < 1e-6);
    }
}
