//! Method dispatch shared by the simulation harness and the front ends.

use std::fmt;
use std::str::FromStr;

use crate::cells::{build_cell_table, CellRole, CellTable, Grouping, Microdata};
use crate::error::{Error, Result};
use crate::estimators::{
    dr_mean, fit_inclusion_model, greg_mean, greg_mean_with_totals, ipw_mean, jackknife_se, poststratified_mean,
    rake_weights, totals_from_margins, unweighted_mean, weighted_mean, Diagnostic, EstimateSummary, Estimates, Margin,
    WeightVector,
};
use crate::formula::ModelTerms;
use crate::hb::{McmcConfig, OutcomeModelSpec};
use crate::mrp::{mrp_estimate, MrpOptions, MrpResult, MrpVariant};

pub const DEFAULT_JACKKNIFE_GROUPS: usize = 20;
pub const RAKING_TOLERANCE: f64 = 1e-8;
pub const RAKING_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    UnW,
    PS,
    IPW,
    GREG,
    Raking,
    DR,
    Mrp(MrpVariant),
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::UnW,
        Method::PS,
        Method::IPW,
        Method::GREG,
        Method::Raking,
        Method::DR,
        Method::Mrp(MrpVariant::S),
        Method::Mrp(MrpVariant::P),
        Method::Mrp(MrpVariant::R),
        Method::Mrp(MrpVariant::Int),
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::UnW => "UnW",
            Self::PS => "PS",
            Self::IPW => "IPW",
            Self::GREG => "GREG",
            Self::Raking => "Raking",
            Self::DR => "DR",
            Self::Mrp(v) => v.tag(),
        }
    }

    /// Parses a comma-separated method list, dropping repeats.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::config("empty method list"));
        }
        Ok(out)
    }

    /// Whether standard errors come from the delete-a-group jackknife.
    pub fn jackknifed(self) -> bool {
        matches!(self, Self::IPW | Self::GREG | Self::Raking | Self::DR)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::config(format!("unknown method `{t}`")))
    }
}

/// Data available to an estimation run.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    /// Nonprobability sample with outcomes.
    pub sample: &'a Microdata,
    /// Weighted reference sample without outcomes.
    pub reference: Option<&'a Microdata>,
    /// Known population cell counts.
    pub population: Option<&'a CellTable>,
    /// Known population margins.
    pub margins: Option<&'a [Margin]>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    /// Outcome model of the MRP variants.
    pub outcome: OutcomeModelSpec,
    /// Working model of the inclusion and prediction models of IPW, GREG, DR
    /// and raking.
    pub auxiliary: ModelTerms,
    pub mcmc: McmcConfig,
    pub mrp: MrpOptions,
    pub jackknife_groups: usize,
    pub jackknife_seed: u64,
}

impl Settings {
    pub fn main_effects(sample: &Microdata, seed: u64) -> Self {
        let terms = ModelTerms::main_effects(sample.schema());
        Self {
            outcome: OutcomeModelSpec::new(terms.clone()),
            auxiliary: terms,
            mcmc: McmcConfig {
                seed,
                ..McmcConfig::default()
            },
            mrp: MrpOptions::default(),
            jackknife_groups: DEFAULT_JACKKNIFE_GROUPS,
            jackknife_seed: seed,
        }
    }
}

/// Result of one method: estimates plus the MRP fit summary when relevant.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub estimates: Estimates,
    pub mrp: Option<MrpResult>,
}

fn need<'a, T: ?Sized>(x: Option<&'a T>, what: &str, method: Method) -> Result<&'a T> {
    x.ok_or_else(|| Error::config(format!("{method} needs {what}")))
}

fn margins_of(inputs: &Inputs<'_>, method: Method) -> Result<Vec<Margin>> {
    match (inputs.margins, inputs.population) {
        (Some(m), _) => Ok(m.to_vec()),
        (None, Some(p)) => Ok(population_margins(p)),
        (None, None) => Err(Error::config(format!("{method} needs population margins or cell counts"))),
    }
}

/// Population margins of every covariate of a cell table.
pub fn population_margins(cells: &CellTable) -> Vec<Margin> {
    let schema = cells.schema();
    (0..schema.n_vars())
        .map(|v| {
            let mut targets = vec![0.0; schema.n_levels(v)];
            for r in cells.rows() {
                targets[r.key.level(v) as usize] += r.count as f64;
            }
            Margin { var: v, targets }
        })
        .collect()
}

fn points(e: &Estimates, groups: &Grouping) -> Result<Vec<f64>> {
    let v = e.point_vector(groups);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("estimate is not finite for every group"));
    }
    Ok(v)
}

fn split(d: &Microdata) -> Result<(Microdata, Microdata)> {
    let inc = d
        .included()
        .ok_or_else(|| Error::data("concatenated data lack membership flags"))?;
    let a: Vec<usize> = (0..d.len()).filter(|&i| inc[i]).collect();
    let b: Vec<usize> = (0..d.len()).filter(|&i| !inc[i]).collect();
    let mut nonprob = d.subset(&a);
    nonprob.set_weights(None)?;
    nonprob.set_included(None)?;
    let mut reference = d.subset(&b);
    reference.set_included(None)?;
    Ok((nonprob, reference))
}

/// Point estimates of a design-based comparator on one data set; the
/// jackknife calls this on every replicate.
fn comparator_points(
    method: Method,
    data: &Microdata,
    inputs: &Inputs<'_>,
    settings: &Settings,
    margins: &[Margin],
    groups: &Grouping,
) -> Result<Vec<f64>> {
    match method {
        Method::IPW => {
            let (nonprob, _) = split(data)?;
            let fit = fit_inclusion_model(data, &settings.auxiliary)?;
            points(&ipw_mean(&nonprob, &fit, groups, None)?, groups)
        }
        Method::DR => {
            let (nonprob, _) = split(data)?;
            let fit = fit_inclusion_model(data, &settings.auxiliary)?;
            let population = need(inputs.population, "population cell counts", method)?;
            points(&dr_mean(&nonprob, &fit, &settings.auxiliary, population, groups)?, groups)
        }
        Method::GREG => match inputs.population {
            Some(p) => points(&greg_mean(data, &settings.auxiliary, p, groups, None)?, groups),
            None => {
                let totals = totals_from_margins(data, &settings.auxiliary, margins)?;
                let s = greg_mean_with_totals(data, &settings.auxiliary, &totals, None)?;
                Ok(vec![s.estimate])
            }
        },
        Method::Raking => {
            let size: f64 = margins[0].targets.iter().sum();
            let base = WeightVector::uniform(data.len(), size / data.len() as f64)?;
            let raked = rake_weights(data, margins, &base, RAKING_TOLERANCE, RAKING_MAX_ITER)?;
            points(&weighted_mean(data, raked.weights.as_slice(), groups, "Raking")?, groups)
        }
        _ => unreachable!("not a jackknifed comparator"),
    }
}

/// Runs one method on `inputs` for every group.
pub fn run_method(method: Method, inputs: &Inputs<'_>, groups: &Grouping, settings: &Settings) -> Result<MethodRun> {
    let plain = |estimates| {
        Ok(MethodRun {
            method,
            estimates,
            mrp: None,
        })
    };
    match method {
        Method::UnW => plain(unweighted_mean(&build_cell_table(inputs.sample, CellRole::Sample)?, groups)?),
        Method::PS => {
            let population = need(inputs.population, "population cell counts", method)?;
            plain(poststratified_mean(
                &build_cell_table(inputs.sample, CellRole::Sample)?,
                population,
                groups,
            )?)
        }
        Method::Mrp(v) => {
            let res = mrp_estimate(
                v,
                inputs.sample,
                inputs.population,
                inputs.reference,
                &settings.outcome,
                &settings.mcmc,
                groups,
                &settings.mrp,
            )?;
            Ok(MethodRun {
                method,
                estimates: res.estimates.clone(),
                mrp: Some(res),
            })
        }
        _ => {
            let margins = match method {
                Method::Raking => margins_of(inputs, method)?,
                Method::GREG if inputs.population.is_none() => margins_of(inputs, method)?,
                _ => Vec::new(),
            };
            let grouping_used = if method == Method::GREG && inputs.population.is_none() {
                Grouping::overall()
            } else {
                groups.clone()
            };
            let data = match method {
                Method::IPW | Method::DR => {
                    let reference = need(inputs.reference, "a weighted reference sample", method)?;
                    Microdata::concatenate(inputs.sample, reference)?
                }
                _ => inputs.sample.clone(),
            };
            let f = |d: &Microdata| comparator_points(method, d, inputs, settings, &margins, &grouping_used);
            let point = f(&data)?;
            let jk = jackknife_se(f, &data, settings.jackknife_groups, settings.jackknife_seed)?;
            let mut estimates = Estimates::default();
            for (g, (&e, &se)) in grouping_used.groups().iter().zip(point.iter().zip(&jk.se)) {
                estimates
                    .summaries
                    .push(EstimateSummary::normal(&g.label, method.tag(), e, se));
            }
            if !jk.failed.is_empty() {
                estimates.diagnostics.push(Diagnostic::Note(format!(
                    "{method}: {} of {} jackknife replicates failed",
                    jk.failed.len(),
                    jk.n_groups
                )));
            }
            for g in groups.groups().iter().filter(|g| grouping_used.groups().iter().all(|u| u.label != g.label)) {
                estimates.diagnostics.push(Diagnostic::EmptyGroup { group: g.label.clone() });
            }
            plain(estimates)
        }
    }
}
