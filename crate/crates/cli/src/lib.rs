//! The `mrpkit` command line: `estimate`, `simulate`, `synthpop` and
//! `diagnose`.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical or
//! convergence failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mrpkit::cells::Grouping;
use mrpkit::diagnostics::{analytic_bias, expected_variances, monte_carlo_bias};
use mrpkit::estimators::Diagnostic;
use mrpkit::hb::{McmcConfig, OutcomeModelSpec};
use mrpkit::io::{
    fmt_real, infer_schema, microdata_from_raw, population_spec_from_raw, write_counts, write_draws, write_estimates,
    write_stacked_counts, InputTables, RawTable, MICRODATA_COLUMNS,
};
use mrpkit::mrp::{MrpOptions, MrpVariant};
use mrpkit::pipeline::{run_method, Method, Settings};
use mrpkit::sim::{run_study, violates_convergence_rule, write_replications, write_report, Scenario, SimConfig};
use mrpkit::wfpbb::{estimate_pop_cells, synthetic_populations};
use mrpkit::{Error, ErrorKind, ModelTerms};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Parser)]
#[command(name = "mrpkit", version, about = "Finite-population inference from nonprobability samples")]
struct Cli {
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate population and subgroup means from a nonprobability sample.
    Estimate(EstimateArgs),
    /// Run the replication study.
    Simulate(SimulateArgs),
    /// Generate WFPBB synthetic-population cell counts from a reference sample.
    Synthpop(SynthpopArgs),
    /// Evaluate analytic bias and variance of a population specification.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct McmcArgs {
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Nonprobability sample microdata with an `outcome` column.
    #[arg(long)]
    sample: PathBuf,
    /// Population cell counts (`count` column).
    #[arg(long)]
    population: Option<PathBuf>,
    /// Reference sample microdata with a `weight` column.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Population margins (`variable,level,total`).
    #[arg(long)]
    margins: Option<PathBuf>,
    /// MRP variant.
    #[arg(long, value_parser = ["S", "P", "R", "INT"])]
    variant: Option<String>,
    /// Comma-separated methods, e.g. `PS,IPW,MRP-P`.
    #[arg(long)]
    methods: Option<String>,
    /// Outcome model of the MRP variants; main effects by default.
    #[arg(long)]
    outcome_model: Option<String>,
    /// Inclusion and prediction model of the weighting estimators and of
    /// the MRP-INT inclusion step; main effects by default.
    #[arg(long)]
    auxiliary_model: Option<String>,
    /// Report the overall mean and the mean of every level of this variable.
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    mcmc: McmcArgs,
    /// WFPBB synthetic populations for MRP-R.
    #[arg(long = "L", default_value_t = 100)]
    synthetic_populations: usize,
    /// Population size for MRP-R; defaults to the population table total.
    #[arg(long = "N")]
    population_size: Option<u64>,
    #[arg(long, default_value_t = 1)]
    psi_digits: u32,
    #[arg(long, default_value_t = 20)]
    jackknife_groups: usize,
    /// Dump outcome-model draws of the single requested MRP method.
    #[arg(long)]
    draws: Option<PathBuf>,
    /// Estimate CSV; the provenance goes next to it.
    #[arg(long, default_value = "estimates.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Study configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["correct", "incorrect"])]
    scenario: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthpopArgs {
    /// Reference microdata with a `weight` column.
    #[arg(long)]
    reference: PathBuf,
    /// Synthetic population size; defaults to the rounded weight total.
    #[arg(long = "N")]
    population_size: Option<u64>,
    #[arg(long = "L", default_value_t = 100)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Stacked output with a `replicate` column.
    #[arg(long, default_value = "synthpop.csv", conflicts_with = "out_dir")]
    out: PathBuf,
    /// Write one count file per replicate into this directory instead.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Population specification (`cell vars..., N, psi, meanR, meanM, sd`).
    #[arg(long)]
    spec: PathBuf,
    /// Nonprobability sample size.
    #[arg(long)]
    n: f64,
    /// Prior sd of the cell means in the shrinkage estimator.
    #[arg(long, default_value_t = 1.0)]
    sigma_theta: f64,
    /// Also simulate this many respondent samples.
    #[arg(long)]
    monte_carlo: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "diagnostics.csv")]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Messages go to standard error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return EXIT_USAGE;
        }
    };
    let threads = cli.threads;
    match pool.install(|| dispatch(cli.command, threads)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn dispatch(command: Command, threads: usize) -> Result<()> {
    match command {
        Command::Estimate(a) => estimate(a, threads),
        Command::Simulate(a) => simulate(a, threads),
        Command::Synthpop(a) => synthpop(a, threads),
        Command::Diagnose(a) => diagnose(a, threads),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `key = value` provenance record.
struct Provenance {
    entries: Vec<(String, String)>,
}

impl Provenance {
    fn new(command: &str, seed: u64, threads: usize) -> Self {
        let mut p = Self { entries: Vec::new() };
        p.set("command", command);
        p.set("mrpkit_version", mrpkit::VERSION);
        p.set("cli_version", env!("CARGO_PKG_VERSION"));
        p.set("seed", seed);
        p.set("threads", threads);
        p
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn config(&mut self, key: &str, value: impl ToString) {
        self.set(&format!("config.{key}"), value);
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        self.set(&format!("input.{name}"), path.display());
        self.set(&format!("input.{name}.sha256"), sha256_hex(&bytes));
        Ok(())
    }

    fn write(mut self, path: &Path) -> Result<()> {
        let config: String = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with("config."))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        self.set("config_sha256", sha256_hex(config.as_bytes()));
        let mut w = create(path)?;
        for (k, v) in &self.entries {
            writeln!(w, "{k} = {v}").map_err(|e| io_error(path, e))?;
        }
        w.flush().map_err(|e| io_error(path, e))
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("output".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.provenance.txt"))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn estimate(a: EstimateArgs, threads: usize) -> Result<()> {
    let mut methods: Vec<Method> = Vec::new();
    if let Some(v) = &a.variant {
        methods.push(Method::Mrp(v.parse::<MrpVariant>()?));
    }
    if let Some(list) = &a.methods {
        for m in Method::parse_list(list)? {
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
    }
    if methods.is_empty() {
        return Err(usage("give --variant or --methods"));
    }
    let mrp_methods = methods.iter().filter(|m| matches!(m, Method::Mrp(_))).count();
    if a.draws.is_some() && mrp_methods != 1 {
        return Err(usage("--draws needs exactly one MRP method"));
    }

    let raw = |p: &Option<PathBuf>| p.as_ref().map(RawTable::read).transpose();
    let tables = InputTables::from_raw(
        &RawTable::read(&a.sample)?,
        raw(&a.population)?.as_ref(),
        raw(&a.reference)?.as_ref(),
        raw(&a.margins)?.as_ref(),
    )?;
    let schema = &tables.schema;
    let outcome_terms = match &a.outcome_model {
        Some(f) => ModelTerms::parse(f, schema)?,
        None => ModelTerms::main_effects(schema),
    };
    let auxiliary = match &a.auxiliary_model {
        Some(f) => ModelTerms::parse(f, schema)?,
        None => ModelTerms::main_effects(schema),
    };
    let groups = match &a.group_by {
        Some(v) => Grouping::overall_and_levels(schema, v)?,
        None => Grouping::overall(),
    };
    let settings = Settings {
        outcome: OutcomeModelSpec::new(outcome_terms.clone()),
        auxiliary: auxiliary.clone(),
        mcmc: McmcConfig {
            chains: a.mcmc.chains,
            iterations: a.mcmc.iterations,
            warmup: a.mcmc.warmup,
            seed: a.seed,
            ..McmcConfig::default()
        },
        mrp: MrpOptions {
            synthetic_populations: a.synthetic_populations,
            population_size: a.population_size,
            psi_digits: a.psi_digits,
            inclusion_terms: Some(auxiliary.clone()),
            ..MrpOptions::default()
        },
        jackknife_groups: a.jackknife_groups,
        jackknife_seed: a.seed,
    };
    let inputs = tables.inputs();

    let mut prov = Provenance::new("estimate", a.seed, threads);
    prov.config("methods", methods.iter().map(|m| m.tag()).collect::<Vec<_>>().join(","));
    prov.config("outcome_model", outcome_terms.to_formula(schema));
    prov.config("auxiliary_model", auxiliary.to_formula(schema));
    prov.config("group_by", a.group_by.as_deref().unwrap_or(""));
    prov.config("chains", a.mcmc.chains);
    prov.config("iterations", a.mcmc.iterations);
    prov.config("warmup", a.mcmc.warmup);
    prov.config("L", a.synthetic_populations);
    prov.config("N", a.population_size.map_or(String::new(), |n| n.to_string()));
    prov.config("psi_digits", a.psi_digits);
    prov.config("jackknife_groups", a.jackknife_groups);
    prov.input("sample", &a.sample)?;
    for (name, path) in [("population", &a.population), ("reference", &a.reference), ("margins", &a.margins)] {
        if let Some(p) = path {
            prov.input(name, p)?;
        }
    }

    let mut summaries = Vec::new();
    let mut excluded = 0;
    for &m in &methods {
        let run = run_method(m, &inputs, &groups, &settings)?;
        if let Some(res) = &run.mrp {
            prov.set(&format!("rhat_max.{m}"), fmt_real(res.max_rhat));
            prov.set(&format!("max_scaled_coefficient.{m}"), fmt_real(res.max_scaled_coefficient));
            if violates_convergence_rule(res.max_rhat, res.max_scaled_coefficient) {
                excluded += 1;
                eprintln!("warning: {m} breaks the convergence rule (R-hat or coefficient scale)");
            }
            if let Some(path) = &a.draws {
                write_draws(create(path)?, &res.draws)?;
            }
        }
        for d in &run.estimates.diagnostics {
            prov.set(&format!("diagnostic.{m}"), describe(d));
        }
        summaries.extend(run.estimates.summaries);
    }
    prov.set("excluded_fits", excluded);
    write_estimates(create(&a.out)?, &summaries)?;
    if let Some(p) = &a.draws {
        prov.set("output.draws", p.display());
    }
    prov.set("output.estimates", a.out.display());
    prov.write(&sidecar(&a.out))
}

fn describe(d: &Diagnostic) -> String {
    match d {
        Diagnostic::EmptyGroup { group } => format!("no estimate for group {group}"),
        Diagnostic::UncoveredMass { group, fraction } => {
            format!("{} of the population mass of {group} lies in uncovered cells", fmt_real(*fraction))
        }
        Diagnostic::ClampedUrnWeights { count } => format!("{count} urn weights clamped"),
        Diagnostic::Note(s) => s.clone(),
    }
}

fn simulate(a: SimulateArgs, threads: usize) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::from_toml(&fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => SimConfig::default(),
    };
    if let Some(m) = &a.methods {
        cfg.methods = Method::parse_list(m)?.iter().map(|m| m.tag().to_string()).collect();
    }
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = &a.scenario {
        cfg.scenario = if s == "correct" { Scenario::Correct } else { Scenario::Incorrect };
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    let report = run_study(&cfg)?;
    let labels: Vec<String> = report
        .rows
        .iter()
        .map(|r| r.group.clone())
        .fold(Vec::new(), |mut v, g| {
            if !v.contains(&g) {
                v.push(g);
            }
            v
        });
    write_report(create(&a.out_dir.join("report.csv"))?, &report)?;
    write_replications(create(&a.out_dir.join("replications.csv"))?, &report.records, &labels)?;

    let mut prov = Provenance::new("simulate", cfg.seed, threads);
    for line in cfg.to_toml().lines().filter(|l| l.contains(" = ")) {
        let (k, v) = line.split_once(" = ").unwrap();
        prov.config(k.trim(), v.trim());
    }
    if let Some(p) = &a.config {
        prov.input("config", p)?;
    }
    prov.set("excluded_replications", report.excluded);
    prov.set("runtime_secs", format!("{:.1}", report.runtime_secs));
    prov.set("output.report", a.out_dir.join("report.csv").display());
    prov.set("output.replications", a.out_dir.join("replications.csv").display());
    prov.write(&a.out_dir.join("provenance.txt"))
}

fn synthpop(a: SynthpopArgs, threads: usize) -> Result<()> {
    let raw = RawTable::read(&a.reference)?;
    let schema = Arc::new(infer_schema(&[(&raw, &MICRODATA_COLUMNS)])?);
    let reference = microdata_from_raw(&raw, schema)?;
    let weights = reference
        .weights()
        .ok_or_else(|| Error::Data(format!("{} has no `weight` column", a.reference.display())))?;
    let size = a
        .population_size
        .unwrap_or_else(|| weights.iter().sum::<f64>().round() as u64);
    let pops = synthetic_populations(&reference, size, a.replicates, a.seed)?;
    let tables = estimate_pop_cells(&pops, &reference)?;
    let clamped: usize = pops.iter().map(|p| p.clamped_units).sum();
    if clamped > 0 {
        eprintln!("warning: {clamped} urn selections had their weight clamped at zero");
    }

    let mut prov = Provenance::new("synthpop", a.seed, threads);
    prov.config("N", size);
    prov.config("L", a.replicates);
    prov.input("reference", &a.reference)?;
    prov.set("clamped_units", clamped);
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            let width = a.replicates.to_string().len().max(3);
            for (k, t) in tables.iter().enumerate() {
                write_counts(create(&dir.join(format!("replicate_{:0width$}.csv", k + 1)))?, t)?;
            }
            prov.set("output.dir", dir.display());
            prov.write(&dir.join("provenance.txt"))
        }
        None => {
            write_stacked_counts(create(&a.out)?, &tables)?;
            prov.set("output.counts", a.out.display());
            prov.write(&sidecar(&a.out))
        }
    }
}

fn diagnose(a: DiagnoseArgs, threads: usize) -> Result<()> {
    if !(a.n > 0.0) || !(a.sigma_theta > 0.0) {
        return Err(usage("--n and --sigma-theta must be positive"));
    }
    let raw = RawTable::read(&a.spec)?;
    let spec = population_spec_from_raw(&raw)?;
    let expected = spec.expected_sample_sizes(a.n);
    let bias = analytic_bias(&spec, a.sigma_theta, &expected)?;

    let var = expected_variances(&spec, a.n, a.sigma_theta)?;

    let mut rows: Vec<(&str, f64)> = vec![
        ("population_mean", spec.population_mean()),
        ("respondent_mean", spec.respondent_mean()),
        ("psi_bar", spec.psi_bar()),
        ("A", bias.a),
        ("B", bias.b),
        ("bias_unw", bias.bias_unw),
        ("bias_ps", bias.bias_ps),
        ("bias_mrp_first", bias.mrp_first),
        ("bias_mrp_second", bias.mrp_second),
        ("bias_mrp", bias.bias_mrp),
        ("bias_mrp_second_unweighted", bias.mrp_second_unweighted),
        ("bias_unw_stochastic_approx", bias.stochastic_unw),
        ("bias_ps_stochastic_approx", bias.stochastic_ps),
        ("var_unw", var.var_unw),
        ("var_ps", var.var_ps),
        ("var_mrp", var.var_mrp),
        ("var_mrp_exact", var.var_mrp_exact),
    ];
    let mc;
    if let Some(reps) = a.monte_carlo {
        mc = monte_carlo_bias(&spec, reps, a.seed)?;
        rows.extend([
            ("mc_replications", mc.replications as f64),
            ("mc_bias_unw", mc.bias_unw),
            ("mc_se_unw", mc.se_unw),
            ("mc_bias_ps", mc.bias_ps),
            ("mc_se_ps", mc.se_ps),
            ("mc_uncovered_replications", mc.uncovered_replications as f64),
        ]);
    }
    let mut w = create(&a.out)?;
    writeln!(w, "quantity,value").map_err(|e| io_error(&a.out, e))?;
    for (k, v) in rows {
        writeln!(w, "{k},{}", fmt_real(v)).map_err(|e| io_error(&a.out, e))?;
    }
    w.flush().map_err(|e| io_error(&a.out, e))?;

    let mut prov = Provenance::new("diagnose", a.seed, threads);
    prov.config("n", fmt_real(a.n));
    prov.config("sigma_theta", fmt_real(a.sigma_theta));
    prov.config("monte_carlo", a.monte_carlo.map_or(String::new(), |r| r.to_string()));
    prov.input("spec", &a.spec)?;
    prov.set("output.diagnostics", a.out.display());
    prov.write(&sidecar(&a.out))
}
