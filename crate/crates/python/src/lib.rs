//! Python module `mrpkit`.
//!
//! Tables are passed either as a CSV path or as a dict of equal-length
//! columns (values are converted with `str()`).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyTuple};

use mrpkit::diagnostics::{analytic_bias, expected_variances, monte_carlo_bias, PopulationSpec as CoreSpec};
use mrpkit::io::{infer_schema, microdata_from_raw, population_spec_from_raw, InputTables, RawTable, MICRODATA_COLUMNS};
use mrpkit::sim::{run_study as core_run_study, write_replications, write_report, SimConfig as CoreConfig, SimReport};
use mrpkit::wfpbb::{estimate_pop_cells, synthetic_populations as core_synthetic_populations};
use mrpkit::{
    run_method, Error, ErrorKind, EstimateSummary, Grouping, McmcConfig, Method, ModelTerms, MrpOptions,
    OutcomeModelSpec, Scenario, Settings,
};

create_exception!(mrpkit, MrpkitError, PyException, "Base class of mrpkit errors.");
create_exception!(mrpkit, UsageError, MrpkitError, "Invalid options or configuration.");
create_exception!(mrpkit, DataError, MrpkitError, "Malformed or inconsistent input data.");
create_exception!(mrpkit, NumericalError, MrpkitError, "Numerical or convergence failure.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Usage => UsageError::new_err(msg),
        ErrorKind::Data => DataError::new_err(msg),
        ErrorKind::Numerical => NumericalError::new_err(msg),
    }
}

fn table(obj: &Bound<'_, PyAny>) -> PyResult<RawTable> {
    if let Ok(d) = obj.cast::<PyDict>() {
        let mut cols = Vec::with_capacity(d.len());
        for (k, v) in d.iter() {
            let values = v
                .try_iter()?
                .map(|x| x.and_then(|x| if x.is_none() { Ok(String::new()) } else { Ok(x.str()?.to_string()) }))
                .collect::<PyResult<Vec<String>>>()?;
            cols.push((k.str()?.to_string(), values));
        }
        return RawTable::from_columns(cols).map_err(to_py);
    }
    let path: PathBuf = obj.extract()?;
    RawTable::read(path).map_err(to_py)
}

fn opt_table(obj: Option<&Bound<'_, PyAny>>) -> PyResult<Option<RawTable>> {
    obj.filter(|o| !o.is_none()).map(table).transpose()
}

/// One point estimate with its standard error and 95% interval.
#[pyclass(frozen, get_all, skip_from_py_object, module = "mrpkit")]
#[derive(Clone)]
struct Estimate {
    group: String,
    method: String,
    estimate: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
}

#[pymethods]
impl Estimate {
    fn __repr__(&self) -> String {
        format!(
            "Estimate(method={:?}, group={:?}, estimate={}, se={}, ci=({}, {}))",
            self.method, self.group, self.estimate, self.se, self.ci_low, self.ci_high
        )
    }
}

impl From<EstimateSummary> for Estimate {
    fn from(s: EstimateSummary) -> Self {
        Self {
            group: s.group,
            method: s.method,
            estimate: s.estimate,
            se: s.se,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        }
    }
}

/// Estimates of one method, plus fit diagnostics for the MRP variants.
#[pyclass(frozen, get_all, module = "mrpkit")]
struct MethodResult {
    method: String,
    estimates: Vec<Estimate>,
    diagnostics: Vec<String>,
    max_rhat: Option<f64>,
    max_scaled_coefficient: Option<f64>,
    /// Poststratified posterior draws per group label.
    group_draws: Option<Vec<(String, Vec<f64>)>>,
}

#[pymethods]
impl MethodResult {
    fn __repr__(&self) -> String {
        format!("MethodResult(method={:?}, groups={})", self.method, self.estimates.len())
    }
}

fn parse_methods(methods: &Bound<'_, PyAny>) -> PyResult<Vec<Method>> {
    let text = match methods.extract::<String>() {
        Ok(s) => s,
        Err(_) => methods.extract::<Vec<String>>()?.join(","),
    };
    Method::parse_list(&text).map_err(to_py)
}

/// Estimates population and subgroup means with one or more methods.
///
/// `methods` is a list or comma-separated string of UnW, PS, IPW, GREG,
/// Raking, DR, MRP-S, MRP-P, MRP-R and MRP-INT.
#[pyfunction]
#[pyo3(signature = (
    sample, methods = None, *, population = None, reference = None, margins = None, outcome_model = None,
    auxiliary_model = None, group_by = None, seed = 1, chains = 2, iterations = 2000, warmup = 1000,
    synthetic_populations = 100, population_size = None, psi_digits = 1, jackknife_groups = 20
))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    py: Python<'_>,
    sample: &Bound<'_, PyAny>,
    methods: Option<&Bound<'_, PyAny>>,
    population: Option<&Bound<'_, PyAny>>,
    reference: Option<&Bound<'_, PyAny>>,
    margins: Option<&Bound<'_, PyAny>>,
    outcome_model: Option<&str>,
    auxiliary_model: Option<&str>,
    group_by: Option<&str>,
    seed: u64,
    chains: usize,
    iterations: usize,
    warmup: usize,
    synthetic_populations: usize,
    population_size: Option<u64>,
    psi_digits: u32,
    jackknife_groups: usize,
) -> PyResult<Vec<MethodResult>> {
    let methods = match methods {
        Some(m) => parse_methods(m)?,
        None => vec![Method::Mrp(mrpkit::MrpVariant::P)],
    };
    let tables = InputTables::from_raw(
        &table(sample)?,
        opt_table(population)?.as_ref(),
        opt_table(reference)?.as_ref(),
        opt_table(margins)?.as_ref(),
    )
    .map_err(to_py)?;
    let schema = &tables.schema;
    let terms = |f: Option<&str>| match f {
        Some(f) => ModelTerms::parse(f, schema),
        None => Ok(ModelTerms::main_effects(schema)),
    };
    let outcome = terms(outcome_model).map_err(to_py)?;
    let auxiliary = terms(auxiliary_model).map_err(to_py)?;
    let groups = match group_by {
        Some(v) => Grouping::overall_and_levels(schema, v).map_err(to_py)?,
        None => Grouping::overall(),
    };
    let settings = Settings {
        outcome: OutcomeModelSpec::new(outcome),
        auxiliary: auxiliary.clone(),
        mcmc: McmcConfig {
            chains,
            iterations,
            warmup,
            seed,
            ..McmcConfig::default()
        },
        mrp: MrpOptions {
            synthetic_populations,
            population_size,
            psi_digits,
            inclusion_terms: Some(auxiliary),
            ..MrpOptions::default()
        },
        jackknife_groups,
        jackknife_seed: seed,
    };
    let labels = groups.labels();
    py.detach(|| {
        methods
            .iter()
            .map(|&m| {
                let run = run_method(m, &tables.inputs(), &groups, &settings)?;
                Ok(MethodResult {
                    method: m.tag().to_string(),
                    estimates: run.estimates.summaries.into_iter().map(Estimate::from).collect(),
                    diagnostics: run.estimates.diagnostics.iter().map(|d| format!("{d:?}")).collect(),
                    max_rhat: run.mrp.as_ref().map(|r| r.max_rhat),
                    max_scaled_coefficient: run.mrp.as_ref().map(|r| r.max_scaled_coefficient),
                    group_draws: run
                        .mrp
                        .map(|r| labels.iter().cloned().zip(r.group_draws).collect()),
                })
            })
            .collect::<Result<Vec<_>, Error>>()
    })
    .map_err(to_py)
}

/// Cell-level population specification (`N, psi, meanR, meanM, sd`).
#[pyclass(frozen, module = "mrpkit")]
struct PopulationSpec {
    inner: CoreSpec,
}

fn record<'py>(py: Python<'py>, pairs: &[(&str, f64)]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in pairs {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pymethods]
impl PopulationSpec {
    #[new]
    fn new(source: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner = population_spec_from_raw(&table(source)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.cells().len()
    }

    #[getter]
    fn population_mean(&self) -> f64 {
        self.inner.population_mean()
    }

    #[getter]
    fn respondent_mean(&self) -> f64 {
        self.inner.respondent_mean()
    }

    #[getter]
    fn psi_bar(&self) -> f64 {
        self.inner.psi_bar()
    }

    fn expected_sample_sizes(&self, n: f64) -> Vec<f64> {
        self.inner.expected_sample_sizes(n)
    }

    /// Bias terms of the unweighted, poststratified and shrinkage estimators.
    #[pyo3(signature = (n, sigma_theta = 1.0))]
    fn analytic_bias<'py>(&self, py: Python<'py>, n: f64, sigma_theta: f64) -> PyResult<Bound<'py, PyDict>> {
        let b = analytic_bias(&self.inner, sigma_theta, &self.inner.expected_sample_sizes(n)).map_err(to_py)?;
        record(
            py,
            &[
                ("A", b.a),
                ("B", b.b),
                ("bias_unw", b.bias_unw),
                ("bias_ps", b.bias_ps),
                ("bias_mrp_first", b.mrp_first),
                ("bias_mrp_second", b.mrp_second),
                ("bias_mrp", b.bias_mrp),
                ("bias_mrp_second_unweighted", b.mrp_second_unweighted),
                ("bias_unw_stochastic_approx", b.stochastic_unw),
                ("bias_ps_stochastic_approx", b.stochastic_ps),
            ],
        )
    }

    /// Conditional variances at the expected cell sizes.
    #[pyo3(signature = (n, sigma_theta = 1.0))]
    fn variances<'py>(&self, py: Python<'py>, n: f64, sigma_theta: f64) -> PyResult<Bound<'py, PyDict>> {
        let v = expected_variances(&self.inner, n, sigma_theta).map_err(to_py)?;
        record(
            py,
            &[
                ("var_unw", v.var_unw),
                ("var_ps", v.var_ps),
                ("var_mrp", v.var_mrp),
                ("var_mrp_exact", v.var_mrp_exact),
            ],
        )
    }

    #[pyo3(signature = (replications, seed = 1))]
    fn monte_carlo_bias<'py>(&self, py: Python<'py>, replications: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let m = py
            .detach(|| monte_carlo_bias(&self.inner, replications, seed))
            .map_err(to_py)?;
        record(
            py,
            &[
                ("replications", m.replications as f64),
                ("bias_unw", m.bias_unw),
                ("se_unw", m.se_unw),
                ("bias_ps", m.bias_ps),
                ("se_ps", m.se_ps),
                ("uncovered_replications", m.uncovered_replications as f64),
            ],
        )
    }
}

/// Synthetic-population cell counts from a weighted reference sample.
///
/// Returns one dict per replicate mapping a tuple of level labels to a
/// count, plus the covariate names in tuple order.
#[pyfunction]
#[pyo3(signature = (reference, population_size = None, replicates = 100, seed = 1))]
fn synthetic_populations<'py>(
    py: Python<'py>,
    reference: &Bound<'py, PyAny>,
    population_size: Option<u64>,
    replicates: usize,
    seed: u64,
) -> PyResult<(Vec<String>, Bound<'py, PyList>)> {
    let raw = table(reference)?;
    let schema = std::sync::Arc::new(infer_schema(&[(&raw, &MICRODATA_COLUMNS)]).map_err(to_py)?);
    let data = microdata_from_raw(&raw, std::sync::Arc::clone(&schema)).map_err(to_py)?;
    let weights = data
        .weights()
        .ok_or_else(|| DataError::new_err("the reference sample has no `weight` column"))?;
    let size = population_size.unwrap_or_else(|| weights.iter().sum::<f64>().round() as u64);
    let tables = py
        .detach(|| core_synthetic_populations(&data, size, replicates, seed).and_then(|p| estimate_pop_cells(&p, &data)))
        .map_err(to_py)?;
    let out = PyList::empty(py);
    for t in &tables {
        let d = PyDict::new(py);
        for r in t.rows().iter().filter(|r| r.count > 0) {
            d.set_item(PyTuple::new(py, schema.labels(&r.key))?, r.count)?;
        }
        out.append(d)?;
    }
    let names = schema.variables().iter().map(|v| v.name.clone()).collect();
    Ok((names, out))
}

/// Replication-study configuration; unknown keyword arguments are errors.
#[pyclass(skip_from_py_object, module = "mrpkit")]
#[derive(Clone)]
struct SimConfig {
    inner: CoreConfig,
}

macro_rules! config_fields {
    ($($field:ident: $ty:ty),* $(,)?) => {
        const CONFIG_FIELDS: &[&str] = &[$(stringify!($field),)* "scenario"];

        impl SimConfig {
            fn get<'py>(&self, py: Python<'py>, key: &str) -> PyResult<Bound<'py, PyAny>> {
                match key {
                    $(stringify!($field) => self.inner.$field.clone().into_pyobject(py).map(|o| o.into_any()).map_err(Into::into),)*
                    "scenario" => Ok(pyo3::types::PyString::new(py, self.scenario_name()).into_any()),
                    _ => Err(pyo3::exceptions::PyAttributeError::new_err(format!("SimConfig has no attribute `{key}`"))),
                }
            }

            fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
                match key {
                    $(stringify!($field) => self.inner.$field = value.extract()?,)*
                    "scenario" => {
                        let s: String = value.extract()?;
                        self.inner.scenario = match s.as_str() {
                            "correct" => Scenario::Correct,
                            "incorrect" => Scenario::Incorrect,
                            _ => return Err(UsageError::new_err(format!("unknown scenario `{s}`"))),
                        };
                    }
                    _ => return Err(UsageError::new_err(format!("unknown configuration key `{key}`"))),
                }
                Ok(())
            }
        }
    };
}

config_fields!(
    population_size: usize,
    n_nonprob: usize,
    n_ref: usize,
    internet_fraction: f64,
    strata_rates: Vec<f64>,
    noise_sd: f64,
    outcome_mean: f64,
    replications: usize,
    seed: u64,
    synthetic_populations: usize,
    chains: usize,
    iterations: usize,
    warmup: usize,
    jackknife_groups: usize,
    methods: Vec<String>,
);

impl SimConfig {
    fn scenario_name(&self) -> &'static str {
        match self.inner.scenario {
            Scenario::Correct => "correct",
            Scenario::Incorrect => "incorrect",
        }
    }
}

#[pymethods]
impl SimConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = Self {
            inner: CoreConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                c.set(&k.extract::<String>()?, &v)?;
            }
        }
        c.inner.validate().map_err(to_py)?;
        Ok(c)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        CoreConfig::from_toml(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn __getattr__<'py>(&self, py: Python<'py>, key: &str) -> PyResult<Bound<'py, PyAny>> {
        self.get(py, key)
    }

    fn __dir__(&self) -> Vec<&'static str> {
        let mut v = CONFIG_FIELDS.to_vec();
        v.extend(["from_toml", "to_toml"]);
        v
    }

    fn __setattr__(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let old = self.inner.clone();
        self.set(key, value)?;
        if let Err(e) = self.inner.validate() {
            self.inner = old;
            return Err(to_py(e));
        }
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("SimConfig({:?})", self.inner.to_toml())
    }
}

/// Aggregated replication-study results.
#[pyclass(frozen, module = "mrpkit")]
struct StudyReport {
    inner: SimReport,
}

#[pymethods]
impl StudyReport {
    /// One dict per (method, group): truth, replications, relative_bias,
    /// rmse, avg_se, coverage.
    #[getter]
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                let d = record(
                    py,
                    &[
                        ("truth", r.truth),
                        ("relative_bias", r.relative_bias),
                        ("rmse", r.rmse),
                        ("avg_se", r.avg_se),
                        ("coverage", r.coverage),
                    ],
                )?;
                d.set_item("method", &r.method)?;
                d.set_item("group", &r.group)?;
                d.set_item("replications", r.replications)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn excluded(&self) -> usize {
        self.inner.excluded
    }

    #[getter]
    fn runtime_secs(&self) -> f64 {
        self.inner.runtime_secs
    }

    /// Row for `method` and `group`, or None.
    fn row<'py>(&self, py: Python<'py>, method: &str, group: &str) -> PyResult<Option<Bound<'py, PyDict>>> {
        let rows = self.rows(py)?;
        Ok(self
            .inner
            .rows
            .iter()
            .position(|r| r.method == method && r.group == group)
            .map(|i| rows[i].clone()))
    }

    fn write_report(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path).map_err(|e| to_py(Error::Io { path, source: e }))?;
        write_report(f, &self.inner).map_err(to_py)
    }

    fn write_replications(&self, path: PathBuf) -> PyResult<()> {
        let mut groups: Vec<String> = Vec::new();
        for r in &self.inner.rows {
            if !groups.contains(&r.group) {
                groups.push(r.group.clone());
            }
        }
        let f = std::fs::File::create(&path).map_err(|e| to_py(Error::Io { path, source: e }))?;
        write_replications(f, &self.inner.records, &groups).map_err(to_py)
    }
}

/// Runs the replication study described by `config`.
#[pyfunction]
fn run_study(py: Python<'_>, config: &SimConfig) -> PyResult<StudyReport> {
    let cfg = config.inner.clone();
    py.detach(|| core_run_study(&cfg))
        .map(|inner| StudyReport { inner })
        .map_err(to_py)
}

#[pymodule(name = "mrpkit")]
pub mod mrpkit_module {
    use super::*;

    #[pymodule_export]
    use super::{
        estimate, run_study, synthetic_populations, Estimate, MethodResult, PopulationSpec, SimConfig, StudyReport,
    };

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        let py = m.py();
        m.add("__version__", mrpkit::VERSION)?;
        m.add("METHODS", Method::ALL.iter().map(|m| m.tag()).collect::<Vec<_>>())?;
        m.add("MrpkitError", py.get_type::<MrpkitError>())?;
        m.add("UsageError", py.get_type::<UsageError>())?;
        m.add("DataError", py.get_type::<DataError>())?;
        m.add("NumericalError", py.get_type::<NumericalError>())?;
        Ok(())
    }
}
