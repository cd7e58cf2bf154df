//! Replication study: synthetic population, repeated nonprobability and
//! reference samples, every estimator, frequentist scoring.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{build_cell_table, CellKey, CellRole, CellTable, CovariateSchema, Grouping, Microdata};
use crate::diagnostics::{PopulationSpec, SpecCell};
use crate::error::{Error, Result};
use crate::estimators::EstimateSummary;
use crate::formula::{Design, ModelTerms};
use crate::hb::{sample_posterior_linear, McmcConfig, OutcomeModelSpec};
use crate::io::{fmt_real, RawTable};
use crate::mrp::{mrp_from_posterior, MrpOptions, MrpVariant};
pub use crate::pipeline::Method;
use crate::pipeline::{run_method, Inputs, Settings};
use crate::numeric::inv_logit;
use crate::wfpbb::{estimate_pop_cells, synthetic_populations};

pub const AGE_PROBS: [f64; 6] = [0.06, 0.14, 0.17, 0.22, 0.19, 0.22];
pub const RACE_PROBS: [f64; 3] = [0.80, 0.13, 0.07];
/// Education given age.
pub const EDU_GIVEN_AGE: [[f64; 4]; 6] = [
    [0.10, 0.34, 0.38, 0.18],
    [0.08, 0.26, 0.30, 0.36],
    [0.08, 0.27, 0.28, 0.37],
    [0.09, 0.30, 0.28, 0.33],
    [0.11, 0.33, 0.27, 0.29],
    [0.20, 0.38, 0.22, 0.20],
];
/// Income given education.
pub const INC_GIVEN_EDU: [[f64; 5]; 4] = [
    [0.40, 0.25, 0.15, 0.12, 0.08],
    [0.20, 0.22, 0.20, 0.20, 0.18],
    [0.12, 0.16, 0.18, 0.24, 0.30],
    [0.05, 0.08, 0.12, 0.20, 0.55],
];
/// Log-odds shifts of internet access by age, education and income.
pub const INTERNET_AGE: [f64; 6] = [1.4, 1.1, 0.7, 0.2, -0.4, -1.4];
pub const INTERNET_EDU: [f64; 4] = [-1.2, -0.4, 0.3, 0.9];
pub const INTERNET_INC: [f64; 5] = [-1.2, -0.6, 0.0, 0.5, 1.0];
/// Age-specific multiplier of the education and income shifts; access of
/// older adults depends more on socioeconomic status.
pub const INTERNET_SES_SLOPE: [f64; 6] = [0.5, 0.6, 0.8, 1.0, 1.3, 1.8];

pub const CORRECT_MODEL: &str = "age + race + edu + inc + age*edu + race*inc";
pub const MAIN_EFFECTS: &str = "age + race + edu + inc";

pub fn sim_schema() -> CovariateSchema {
    CovariateSchema::numbered(&[("age", 6), ("race", 3), ("edu", 4), ("inc", 5)]).expect("valid schema")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Correct,
    Incorrect,
}

impl Scenario {
    /// Outcome-model formula fitted by the MRP variants.
    pub fn outcome_formula(self) -> &'static str {
        match self {
            Self::Correct => CORRECT_MODEL,
            Self::Incorrect => MAIN_EFFECTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub population_size: usize,
    pub n_nonprob: usize,
    pub n_ref: usize,
    pub internet_fraction: f64,
    pub strata_rates: Vec<f64>,
    pub coefficient_range: [i64; 2],
    pub noise_sd: f64,
    /// Finite-population mean of the linear predictor; fixes the intercept.
    pub outcome_mean: f64,
    pub scenario: Scenario,
    pub replications: usize,
    pub seed: u64,
    pub synthetic_populations: usize,
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub jackknife_groups: usize,
    pub methods: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population_size: 50_000,
            n_nonprob: 1000,
            n_ref: 1000,
            internet_fraction: 0.65,
            strata_rates: vec![0.12, 0.31, 0.19, 0.20, 0.13, 0.05],
            coefficient_range: [-5, 5],
            noise_sd: 1.0,
            outcome_mean: -2.7,
            scenario: Scenario::Correct,
            replications: 50,
            seed: 1,
            synthetic_populations: 100,
            chains: 2,
            iterations: 2000,
            warmup: 1000,
            jackknife_groups: 20,
            methods: Method::ALL.iter().map(|m| m.tag().to_string()).collect(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.strata_rates.len() != AGE_PROBS.len() {
            return Err(Error::config(format!("strata_rates needs {} entries", AGE_PROBS.len())));
        }
        if self.strata_rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::config("strata rates must lie in (0, 1]"));
        }
        if !(self.internet_fraction > 0.0 && self.internet_fraction <= 1.0) {
            return Err(Error::config("internet_fraction must lie in (0, 1]"));
        }
        if self.replications < 1 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.coefficient_range[0] > self.coefficient_range[1] {
            return Err(Error::config("coefficient_range is reversed"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || !self.outcome_mean.is_finite() {
            return Err(Error::config("noise_sd and outcome_mean must be finite, noise_sd non-negative"));
        }
        if self.n_nonprob == 0 || self.n_ref == 0 || self.n_ref > self.population_size {
            return Err(Error::config("sample sizes must be positive and n_ref at most the population size"));
        }
        if self.synthetic_populations == 0 || self.jackknife_groups < 2 {
            return Err(Error::config("need at least one synthetic population and two jackknife groups"));
        }
        self.method_list()?;
        self.mcmc(0).validate()
    }

    pub fn method_list(&self) -> Result<Vec<Method>> {
        Method::parse_list(&self.methods.join(","))
    }

    pub fn mcmc(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            seed,
            ..McmcConfig::default()
        }
    }
}

/// Generated finite population.
#[derive(Debug, Clone)]
pub struct SimPopulation {
    pub data: Microdata,
    pub internet: Vec<bool>,
    pub coefficients: Vec<f64>,
    pub coefficient_labels: Vec<String>,
    pub cells: CellTable,
    pub groups: Grouping,
    /// True finite-population means in grouping order.
    pub truths: Vec<f64>,
    /// Per-age-stratum nonprobability allocation.
    pub allocation: Vec<usize>,
}

impl SimPopulation {
    /// Population summary per occupied cell, with `ψ_j` the expected
    /// nonprobability inclusion rate of the cell.
    pub fn spec(&self, fallback_sd: f64) -> Result<PopulationSpec> {
        let schema = self.data.schema();
        let mut acc: BTreeMap<CellKey, [f64; 6]> = BTreeMap::new();
        let stratum_internet = self.internet_by_stratum();
        for i in 0..self.data.len() {
            let y = self.data.outcome(i).unwrap();
            let e = acc.entry(self.data.key(i)).or_default();
            e[0] += 1.0;
            e[1] += y;
            e[2] += y * y;
            if self.internet[i] {
                e[3] += 1.0;
                e[4] += y;
            } else {
                e[5] += y;
            }
        }
        let mut cells = Vec::with_capacity(acc.len());
        for (key, [n, sy, syy, ni, syi, sym]) in acc {
            let h = key.level(0) as usize;
            let pi = self.allocation[h] as f64 / stratum_internet[h] as f64;
            let mean = sy / n;
            let var = if n > 1.0 { (syy - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
            let m_r = if ni > 0.0 { syi / ni } else { mean };
            let m_m = if ni < n { sym / (n - ni) } else { mean };
            cells.push(SpecCell {
                labels: schema.labels(&key).into_iter().map(str::to_string).collect(),
                size: n as u64,
                psi: pi * ni / n,
                mean_respondents: m_r,
                mean_nonrespondents: m_m,
                sd: if var > 0.0 { var.sqrt() } else { fallback_sd },
            });
        }
        PopulationSpec::new(cells)
    }

    fn internet_by_stratum(&self) -> Vec<usize> {
        let mut m = vec![0; AGE_PROBS.len()];
        for i in (0..self.data.len()).filter(|&i| self.internet[i]) {
            m[self.data.code(i, 0) as usize] += 1;
        }
        m
    }
}

fn rep_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Intercept α such that the mean of `inv_logit(α + s_i)` equals `target`.
fn calibrate_intercept(shifts: &[f64], target: f64) -> f64 {
    if target >= 1.0 {
        return f64::INFINITY;
    }
    let mean_p = |a: f64| shifts.iter().map(|s| inv_logit(a + s)).sum::<f64>() / shifts.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest-remainder rounding of `n` split proportionally to `shares`.
fn allocate(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| n as f64 * s / total).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - alloc.iter().sum::<usize>();
    for &h in order.iter().take(short) {
        alloc[h] += 1;
    }
    alloc
}

pub fn generate_population(cfg: &SimConfig) -> Result<SimPopulation> {
    cfg.validate()?;
    let mut rng = rep_rng(cfg.seed, 0);
    let schema = Arc::new(sim_schema());
    let n = cfg.population_size;
    let age_d = WeightedIndex::new(AGE_PROBS).unwrap();
    let race_d = WeightedIndex::new(RACE_PROBS).unwrap();
    let edu_d: Vec<_> = EDU_GIVEN_AGE.iter().map(|p| WeightedIndex::new(p).unwrap()).collect();
    let inc_d: Vec<_> = INC_GIVEN_EDU.iter().map(|p| WeightedIndex::new(p).unwrap()).collect();
    let mut codes = Vec::with_capacity(4 * n);
    let mut shifts = Vec::with_capacity(n);
    for _ in 0..n {
        let age = age_d.sample(&mut rng);
        let race = race_d.sample(&mut rng);
        let edu = edu_d[age].sample(&mut rng);
        let inc = inc_d[edu].sample(&mut rng);
        codes.extend([age as u32, race as u32, edu as u32, inc as u32]);
        shifts.push(INTERNET_AGE[age] + INTERNET_SES_SLOPE[age] * (INTERNET_EDU[edu] + INTERNET_INC[inc]));
    }
    let alpha = calibrate_intercept(&shifts, cfg.internet_fraction);
    let internet: Vec<bool> = shifts
        .iter()
        .map(|s| rng.random::<f64>() < inv_logit(alpha + s))
        .collect();

    let design = Design::new(Arc::clone(&schema), &ModelTerms::parse(CORRECT_MODEL, &schema)?);
    let [lo, hi] = cfg.coefficient_range;
    let mut beta: Vec<f64> = (0..design.n_cols())
        .map(|_| rng.random_range(lo..=hi) as f64)
        .collect();
    beta[0] = 0.0;
    let mut eta = Vec::with_capacity(n);
    let mut row = vec![0.0; design.n_cols()];
    for i in 0..n {
        design.fill_row(&codes[4 * i..4 * i + 4], 0.0, &mut row);
        eta.push(row.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>());
    }
    let shift = cfg.outcome_mean - eta.iter().sum::<f64>() / n as f64;
    beta[0] = shift;
    let y: Vec<Option<f64>> = eta
        .iter()
        .map(|e| {
            let z: f64 = rng.sample(StandardNormal);
            Some(e + shift + cfg.noise_sd * z)
        })
        .collect();
    let data = Microdata::from_codes(Arc::clone(&schema), codes, Some(y), None, None)?;
    let cells = build_cell_table(&data, CellRole::Population)?;
    let groups = Grouping::overall_and_levels(&schema, "age")?;
    let truths = groups
        .groups()
        .iter()
        .map(|g| {
            let (s, c) = (0..n)
                .filter(|&i| g.contains_codes(data.codes(i)))
                .fold((0.0, 0.0), |(s, c), i| (s + data.outcome(i).unwrap(), c + 1.0));
            s / c
        })
        .collect();
    let mut m = vec![0usize; AGE_PROBS.len()];
    for i in (0..n).filter(|&i| internet[i]) {
        m[data.code(i, 0) as usize] += 1;
    }
    let shares: Vec<f64> = m.iter().zip(&cfg.strata_rates).map(|(&mh, r)| mh as f64 * r).collect();
    let allocation = allocate(cfg.n_nonprob, &shares);
    if let Some(h) = (0..m.len()).find(|&h| allocation[h] > m[h]) {
        return Err(Error::data(format!(
            "age stratum {} has {} internet users but needs {}",
            h + 1,
            m[h],
            allocation[h]
        )));
    }
    Ok(SimPopulation {
        data,
        internet,
        coefficients: beta,
        coefficient_labels: design.labels().to_vec(),
        cells,
        groups,
        truths,
        allocation,
    })
}

/// Exact-size stratified SRSWOR from the internet users of each age
/// stratum, plus an SRSWOR reference sample with weights `N / n_ref` and no
/// outcome.
pub fn draw_samples(pop: &SimPopulation, cfg: &SimConfig, rng: &mut impl Rng) -> Result<(Microdata, Microdata)> {
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); AGE_PROBS.len()];
    for i in (0..pop.data.len()).filter(|&i| pop.internet[i]) {
        strata[pop.data.code(i, 0) as usize].push(i);
    }
    let mut chosen = Vec::with_capacity(cfg.n_nonprob);
    for (h, units) in strata.iter().enumerate() {
        let k = pop.allocation[h];
        if k > units.len() {
            return Err(Error::data(format!("age stratum {} is exhausted", h + 1)));
        }
        chosen.extend(index::sample(rng, units.len(), k).into_iter().map(|j| units[j]));
    }
    chosen.sort_unstable();
    let nonprob = pop.data.subset(&chosen);
    let n = pop.data.len();
    let mut refs: Vec<usize> = index::sample(rng, n, cfg.n_ref).into_vec();
    refs.sort_unstable();
    let mut reference = pop.data.subset(&refs);
    let codes: Vec<u32> = (0..reference.len()).flat_map(|i| reference.codes(i).to_vec()).collect();
    reference = Microdata::from_codes(
        Arc::clone(reference.schema()),
        codes,
        None,
        Some(vec![n as f64 / cfg.n_ref as f64; refs.len()]),
        None,
    )?;
    Ok((nonprob, reference))
}

/// One method's outcome in one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Ok(Vec<EstimateSummary>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub excluded: bool,
    pub results: Vec<(Method, MethodOutcome)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub group: String,
    pub truth: f64,
    pub replications: usize,
    pub relative_bias: f64,
    pub rmse: f64,
    pub avg_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub rows: Vec<ReportRow>,
    pub excluded: usize,
    pub runtime_secs: f64,
    pub records: Vec<ReplicationRecord>,
}

impl SimReport {
    pub fn row(&self, method: &str, group: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.group == group)
    }
}

/// Whether a fitted outcome model breaks the convergence rule.
pub fn violates_convergence_rule(max_rhat: f64, max_scaled_coefficient: f64) -> bool {
    !(max_rhat <= 1.2) || max_scaled_coefficient > 10.0
}

struct StudyContext<'a> {
    pop: &'a SimPopulation,
    cfg: &'a SimConfig,
    main: ModelTerms,
    outcome: ModelTerms,
}

fn run_replication(ctx: &StudyContext<'_>, methods: &[Method], r: usize) -> ReplicationRecord {
    let mut rng = rep_rng(ctx.cfg.seed, r as u64 + 1);
    let samples = draw_samples(ctx.pop, ctx.cfg, &mut rng);
    let mcmc_seed = rng.next_u64();
    let jk_seed = rng.next_u64();
    let wfpbb_seed = rng.next_u64();
    let (nonprob, reference) = match samples {
        Ok(s) => s,
        Err(e) => {
            return ReplicationRecord {
                replication: r,
                excluded: false,
                results: methods.iter().map(|&m| (m, MethodOutcome::Failed(e.to_string()))).collect(),
            }
        }
    };
    let groups = &ctx.pop.groups;
    let settings = Settings {
        outcome: OutcomeModelSpec::new(ctx.outcome.clone()),
        auxiliary: ctx.main.clone(),
        mcmc: ctx.cfg.mcmc(mcmc_seed),
        mrp: MrpOptions {
            synthetic_populations: ctx.cfg.synthetic_populations,
            population_size: Some(ctx.cfg.population_size as u64),
            ..MrpOptions::default()
        },
        jackknife_groups: ctx.cfg.jackknife_groups,
        jackknife_seed: jk_seed,
    };
    let inputs = Inputs {
        sample: &nonprob,
        reference: Some(&reference),
        population: Some(&ctx.pop.cells),
        margins: None,
    };
    let mut excluded = false;

    // MRP-S, -P and -R share one outcome-model fit.
    let needs_shared = methods
        .iter()
        .any(|m| matches!(m, Method::Mrp(MrpVariant::S | MrpVariant::P | MrpVariant::R)));
    let shared = needs_shared.then(|| sample_posterior_linear(&settings.outcome, &nonprob, None, &settings.mcmc));
    if let Some(Ok(p)) = &shared {
        let rhat = p.rhat().map(|v| v.into_iter().fold(1.0, f64::max)).unwrap_or(f64::NAN);
        excluded |= violates_convergence_rule(rhat, p.max_scaled_coefficient());
    }
    let synthetic = methods.contains(&Method::Mrp(MrpVariant::R)).then(|| {
        synthetic_populations(&reference, ctx.cfg.population_size as u64, ctx.cfg.synthetic_populations, wfpbb_seed)
            .and_then(|p| estimate_pop_cells(&p, &reference))
    });

    let mut results = Vec::with_capacity(methods.len());
    for &m in methods {
        let out: Result<Vec<EstimateSummary>> = match m {
            Method::Mrp(v @ (MrpVariant::S | MrpVariant::P | MrpVariant::R)) => {
                match (shared.as_ref().unwrap(), &synthetic) {
                    (Err(e), _) => Err(Error::numerical(e.to_string())),
                    (_, Some(Err(e))) if v == MrpVariant::R => Err(Error::numerical(e.to_string())),
                    (Ok(posterior), syn) => mrp_from_posterior(
                        v,
                        posterior,
                        &nonprob,
                        Some(&ctx.pop.cells),
                        Some(&reference),
                        syn.as_ref().and_then(|t| t.as_ref().ok()).map(Vec::as_slice),
                        groups,
                        mcmc_seed,
                    )
                    .map(|r| r.estimates.summaries),
                }
            }
            _ => run_method(m, &inputs, groups, &settings).map(|run| {
                if let Some(res) = &run.mrp {
                    excluded |= violates_convergence_rule(res.max_rhat, res.max_scaled_coefficient);
                }
                run.estimates.summaries
            }),
        };
        results.push((
            m,
            match out {
                Ok(s) => MethodOutcome::Ok(s),
                Err(e) => MethodOutcome::Failed(e.to_string()),
            },
        ));
    }
    ReplicationRecord {
        replication: r,
        excluded,
        results,
    }
}

pub fn run_study(cfg: &SimConfig) -> Result<SimReport> {
    let start = Instant::now();
    cfg.validate()?;
    let methods = cfg.method_list()?;
    let pop = generate_population(cfg)?;
    let ctx = StudyContext {
        pop: &pop,
        cfg,
        main: ModelTerms::parse(MAIN_EFFECTS, pop.data.schema())?,
        outcome: ModelTerms::parse(cfg.scenario.outcome_formula(), pop.data.schema())?,
    };
    let records: Vec<ReplicationRecord> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(&ctx, &methods, r))
        .collect();
    let rows = aggregate(&records, &methods, &pop.groups.labels(), &pop.truths);
    Ok(SimReport {
        rows,
        excluded: records.iter().filter(|r| r.excluded).count(),
        runtime_secs: start.elapsed().as_secs_f64(),
        records,
    })
}

/// Frequentist summaries per method and group over non-excluded,
/// successful replications, in replication order.
pub fn aggregate(records: &[ReplicationRecord], methods: &[Method], groups: &[String], truths: &[f64]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for &m in methods {
        for (g, &truth) in groups.iter().zip(truths) {
            let mut est = Vec::new();
            for rec in records.iter().filter(|r| !r.excluded) {
                if let Some((_, MethodOutcome::Ok(s))) = rec.results.iter().find(|(mm, _)| *mm == m) {
                    if let Some(s) = s.iter().find(|s| &s.group == g) {
                        est.push(s);
                    }
                }
            }
            let k = est.len() as f64;
            let (mut sum, mut sq, mut se, mut cover) = (0.0, 0.0, 0.0, 0.0);
            for s in &est {
                sum += s.estimate;
                sq += (s.estimate - truth).powi(2);
                se += s.se;
                cover += (s.ci_low <= truth && truth <= s.ci_high) as u8 as f64;
            }
            rows.push(ReportRow {
                method: m.tag().to_string(),
                group: g.clone(),
                truth,
                replications: est.len(),
                relative_bias: (sum / k - truth) / truth,
                rmse: (sq / k).sqrt(),
                avg_se: se / k,
                coverage: cover / k,
            });
        }
    }
    rows
}

pub fn write_report<W: Write>(out: W, report: &SimReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "group",
        "truth",
        "replications",
        "excluded",
        "relative_bias",
        "rmse",
        "avg_se",
        "coverage",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.group.clone(),
            fmt_real(r.truth),
            r.replications.to_string(),
            report.excluded.to_string(),
            fmt_real(r.relative_bias),
            fmt_real(r.rmse),
            fmt_real(r.avg_se),
            fmt_real(r.coverage),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub const REPLICATION_COLUMNS: [&str; 9] = [
    "replication",
    "method",
    "group",
    "estimate",
    "se",
    "ci_low",
    "ci_high",
    "excluded",
    "status",
];

pub fn write_replications<W: Write>(out: W, records: &[ReplicationRecord], groups: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPLICATION_COLUMNS)?;
    for rec in records {
        let excl = (rec.excluded as u8).to_string();
        for (m, outcome) in &rec.results {
            match outcome {
                MethodOutcome::Ok(s) => {
                    for s in s {
                        w.write_record([
                            rec.replication.to_string(),
                            m.tag().to_string(),
                            s.group.clone(),
                            fmt_real(s.estimate),
                            fmt_real(s.se),
                            fmt_real(s.ci_low),
                            fmt_real(s.ci_high),
                            excl.clone(),
                            "ok".into(),
                        ])?;
                    }
                }
                MethodOutcome::Failed(msg) => {
                    for g in groups {
                        w.write_record([
                            rec.replication.to_string(),
                            m.tag().to_string(),
                            g.clone(),
                            "NA".into(),
                            "NA".into(),
                            "NA".into(),
                            "NA".into(),
                            excl.clone(),
                            format!("failed: {msg}"),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a replication log written by [`write_replications`].
pub fn read_replications<R: Read>(reader: R) -> Result<Vec<ReplicationRecord>> {
    let raw = RawTable::from_reader(reader)?;
    let col: Vec<usize> = REPLICATION_COLUMNS
        .iter()
        .map(|c| raw.column(c).ok_or_else(|| Error::Schema(format!("replication log lacks `{c}`"))))
        .collect::<Result<_>>()?;
    let mut records: Vec<ReplicationRecord> = Vec::new();
    for rec in &raw.records {
        let r: usize = rec[col[0]]
            .parse()
            .map_err(|_| Error::data(format!("bad replication index `{}`", rec[col[0]])))?;
        let m: Method = rec[col[1]].parse()?;
        let num = |c: usize| rec[col[c]].parse::<f64>().unwrap_or(f64::NAN);
        if records.last().is_none_or(|x| x.replication != r) {
            records.push(ReplicationRecord {
                replication: r,
                excluded: rec[col[7]] == "1",
                results: Vec::new(),
            });
        }
        let last = records.last_mut().unwrap();
        let status = &rec[col[8]];
        if status == "ok" {
            let s = EstimateSummary {
                group: rec[col[2]].clone(),
                method: m.tag().to_string(),
                estimate: num(3),
                se: num(4),
                ci_low: num(5),
                ci_high: num(6),
            };
            match last.results.iter_mut().find(|(mm, _)| *mm == m) {
                Some((_, MethodOutcome::Ok(v))) => v.push(s),
                _ => last.results.push((m, MethodOutcome::Ok(vec![s]))),
            }
        } else if !last.results.iter().any(|(mm, _)| *mm == m) {
            let msg = status.strip_prefix("failed: ").unwrap_or(status).to_string();
            last.results.push((m, MethodOutcome::Failed(msg)));
        }
    }
    Ok(records)
}
