//! CSV interchange: microdata, cell tables, margins, population specs,
//! estimates, posterior draws and synthetic-population counts.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::cells::{CellKey, CellRole, CellRow, CellTable, CovariateSchema, Microdata};
use crate::diagnostics::{PopulationSpec, SpecCell};
use crate::error::{Error, Result};
use crate::estimators::{EstimateSummary, Margin};
use crate::hb::PosteriorDraws;
use crate::pipeline::Inputs;

pub const MICRODATA_COLUMNS: [&str; 3] = ["outcome", "weight", "included"];
pub const CELL_TABLE_COLUMNS: [&str; 3] = ["count", "mean", "variance"];
pub const SPEC_COLUMNS: [&str; 5] = ["N", "psi", "meanR", "meanM", "sd"];

/// A parsed CSV file: header plus string records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub records: Vec<Vec<String>>,
}

impl RawTable {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if h.is_empty() || !seen.insert(h.as_str()) {
                return Err(Error::data(format!("empty or duplicate column name `{h}`")));
            }
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            records.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(file)
    }

    /// Builds a table from named columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<String>)>) -> Result<Self> {
        let len = columns.first().map_or(0, |c| c.1.len());
        let mut seen = BTreeSet::new();
        for (name, values) in &columns {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(Error::data(format!("empty or duplicate column name `{name}`")));
            }
            if values.len() != len {
                return Err(Error::data(format!("column `{name}` has {} values, expected {len}", values.len())));
            }
        }
        let records = (0..len).map(|i| columns.iter().map(|c| c.1[i].clone()).collect()).collect();
        Ok(Self {
            headers: columns.into_iter().map(|c| c.0).collect(),
            records,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Columns not listed in `reserved`, in file order.
    pub fn covariate_columns(&self, reserved: &[&str]) -> Vec<&str> {
        self.headers
            .iter()
            .map(String::as_str)
            .filter(|h| !reserved.contains(h))
            .collect()
    }

    fn real(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.records[row][col];
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::data(format!("row {}: `{}` is not a finite number in `{}`", row + 1, s, self.headers[col])))
    }

    fn optional_real(&self, row: usize, col: usize) -> Result<Option<f64>> {
        match self.records[row][col].as_str() {
            "" | "NA" => Ok(None),
            _ => self.real(row, col).map(Some),
        }
    }
}

/// Sample, population counts, reference sample and margins read against one
/// shared covariate schema.
#[derive(Debug, Clone)]
pub struct InputTables {
    pub schema: Arc<CovariateSchema>,
    pub sample: Microdata,
    pub population: Option<CellTable>,
    pub reference: Option<Microdata>,
    pub margins: Option<Vec<Margin>>,
}

impl InputTables {
    /// Checks that the sample has outcomes and the reference has weights.
    pub fn from_raw(
        sample: &RawTable,
        population: Option<&RawTable>,
        reference: Option<&RawTable>,
        margins: Option<&RawTable>,
    ) -> Result<Self> {
        let mut tables: Vec<(&RawTable, &[&str])> = vec![(sample, &MICRODATA_COLUMNS)];
        if let Some(p) = population {
            tables.push((p, &CELL_TABLE_COLUMNS));
        }
        if let Some(r) = reference {
            tables.push((r, &MICRODATA_COLUMNS));
        }
        let schema = Arc::new(infer_schema(&tables)?);
        let sample = microdata_from_raw(sample, Arc::clone(&schema))?;
        if !sample.has_outcome() {
            return Err(Error::data("the sample has no `outcome` column"));
        }
        let population = population
            .map(|r| cell_table_from_raw(r, Arc::clone(&schema), CellRole::Population))
            .transpose()?;
        let reference = reference.map(|r| microdata_from_raw(r, Arc::clone(&schema))).transpose()?;
        if reference.as_ref().is_some_and(|r| r.weights().is_none()) {
            return Err(Error::data("the reference sample has no `weight` column"));
        }
        let margins = margins.map(|m| margins_from_raw(m, &schema)).transpose()?;
        Ok(Self {
            schema,
            sample,
            population,
            reference,
            margins,
        })
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            sample: &self.sample,
            reference: self.reference.as_ref(),
            population: self.population.as_ref(),
            margins: self.margins.as_deref(),
        }
    }
}

/// Orders labels numerically when they all parse as numbers, otherwise as
/// text.
pub fn sort_levels(levels: &mut [String]) {
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if numeric.is_some() {
        levels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        });
    } else {
        levels.sort();
    }
}

/// Infers a schema from the covariate columns of `tables`. Variables come
/// from the first table; every other table must carry the same variables.
/// Levels are the union of observed labels.
pub fn infer_schema(tables: &[(&RawTable, &[&str])]) -> Result<CovariateSchema> {
    let (first, reserved) = tables.first().ok_or_else(|| Error::data("no input tables"))?;
    let vars: Vec<String> = first.covariate_columns(reserved).into_iter().map(str::to_string).collect();
    if vars.is_empty() {
        return Err(Error::Schema("input has no covariate columns".into()));
    }
    let mut levels: Vec<BTreeSet<String>> = vec![BTreeSet::new(); vars.len()];
    for (table, reserved) in tables {
        let cols = table.covariate_columns(reserved);
        let mut a: Vec<&str> = cols.clone();
        let mut b: Vec<&str> = vars.iter().map(String::as_str).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Schema(format!(
                "covariate columns differ between inputs: [{}] vs [{}]",
                cols.join(", "),
                vars.join(", ")
            )));
        }
        for (v, name) in vars.iter().enumerate() {
            let c = table.column(name).unwrap();
            for rec in &table.records {
                if rec[c].is_empty() {
                    return Err(Error::data(format!("missing value in covariate `{name}`")));
                }
                levels[v].insert(rec[c].clone());
            }
        }
    }
    let spec: Vec<(String, Vec<String>)> = vars
        .into_iter()
        .zip(levels)
        .map(|(name, set)| {
            let mut l: Vec<String> = set.into_iter().collect();
            sort_levels(&mut l);
            (name, l)
        })
        .collect();
    CovariateSchema::new(spec)
}

fn covariate_indices(raw: &RawTable, schema: &CovariateSchema) -> Result<Vec<usize>> {
    schema
        .variables()
        .iter()
        .map(|v| {
            raw.column(&v.name)
                .ok_or_else(|| Error::Schema(format!("input lacks covariate column `{}`", v.name)))
        })
        .collect()
}

fn key_of(raw: &RawTable, row: usize, cols: &[usize], schema: &CovariateSchema) -> Result<CellKey> {
    let mut levels = Vec::with_capacity(cols.len());
    for (v, &c) in cols.iter().enumerate() {
        let label = &raw.records[row][c];
        levels.push(schema.level_index(v, label).ok_or_else(|| Error::UnknownLevel {
            variable: schema.variables()[v].name.clone(),
            value: label.clone(),
            unit: row,
        })?);
    }
    Ok(CellKey::new(levels))
}

pub fn microdata_from_raw(raw: &RawTable, schema: Arc<CovariateSchema>) -> Result<Microdata> {
    let cols = covariate_indices(raw, &schema)?;
    let extra = raw.covariate_columns(&MICRODATA_COLUMNS).len();
    if extra != schema.n_vars() {
        return Err(Error::Schema("microdata has columns outside the schema".into()));
    }
    let n = raw.records.len();
    let mut codes = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        codes.extend(key_of(raw, i, &cols, &schema)?.0);
    }
    let outcome = match raw.column("outcome") {
        Some(c) => Some((0..n).map(|i| raw.optional_real(i, c)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let weight = match raw.column("weight") {
        Some(c) => Some((0..n).map(|i| raw.real(i, c)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let included = match raw.column("included") {
        Some(c) => Some(
            (0..n)
                .map(|i| match raw.records[i][c].as_str() {
                    "1" | "true" | "TRUE" => Ok(true),
                    "0" | "false" | "FALSE" => Ok(false),
                    s => Err(Error::data(format!("row {}: `included` must be 0/1, got `{s}`", i + 1))),
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Microdata::from_codes(schema, codes, outcome, weight, included)
}

pub fn cell_table_from_raw(raw: &RawTable, schema: Arc<CovariateSchema>, role: CellRole) -> Result<CellTable> {
    let cols = covariate_indices(raw, &schema)?;
    let count = raw
        .column("count")
        .ok_or_else(|| Error::Schema("cell table lacks a `count` column".into()))?;
    let mean = raw.column("mean");
    let variance = raw.column("variance");
    let mut rows = Vec::with_capacity(raw.records.len());
    for i in 0..raw.records.len() {
        let c = raw.real(i, count)?;
        if c < 0.0 || c.fract() != 0.0 {
            return Err(Error::data(format!("row {}: count must be a non-negative integer", i + 1)));
        }
        rows.push(CellRow {
            key: key_of(raw, i, &cols, &schema)?,
            count: c as u64,
            mean: mean.map(|m| raw.optional_real(i, m)).transpose()?.flatten(),
            variance: variance.map(|m| raw.optional_real(i, m)).transpose()?.flatten(),
        });
    }
    CellTable::new(schema, role, rows)
}

pub fn margins_from_raw(raw: &RawTable, schema: &CovariateSchema) -> Result<Vec<Margin>> {
    let col = |name: &str| {
        raw.column(name)
            .ok_or_else(|| Error::Schema(format!("margin file lacks a `{name}` column")))
    };
    let (cv, cl, ct) = (col("variable")?, col("level")?, col("total")?);
    let mut margins: Vec<Margin> = Vec::new();
    let mut seen: Vec<Vec<bool>> = schema.variables().iter().map(|v| vec![false; v.levels.len()]).collect();
    for i in 0..raw.records.len() {
        let name = &raw.records[i][cv];
        let v = schema
            .var_index(name)
            .ok_or_else(|| Error::Schema(format!("margin for unknown variable `{name}`")))?;
        let label = &raw.records[i][cl];
        let l = schema.level_index(v, label).ok_or_else(|| Error::UnknownLevel {
            variable: name.clone(),
            value: label.clone(),
            unit: i,
        })? as usize;
        let total = raw.real(i, ct)?;
        if total < 0.0 {
            return Err(Error::data(format!("negative margin total for {name}={label}")));
        }
        if seen[v][l] {
            return Err(Error::data(format!("duplicate margin for {name}={label}")));
        }
        seen[v][l] = true;
        match margins.iter_mut().find(|m| m.var == v) {
            Some(m) => m.targets[l] = total,
            None => {
                let mut targets = vec![0.0; schema.n_levels(v)];
                targets[l] = total;
                margins.push(Margin { var: v, targets });
            }
        }
    }
    for m in &margins {
        if seen[m.var].iter().any(|s| !s) {
            return Err(Error::data(format!(
                "margin for `{}` does not list every level",
                schema.variables()[m.var].name
            )));
        }
    }
    Ok(margins)
}

/// Reads a population specification: covariate columns identify the cell,
/// followed by `N, psi, meanR, meanM, sd`.
pub fn population_spec_from_raw(raw: &RawTable) -> Result<PopulationSpec> {
    let idx: Vec<usize> = SPEC_COLUMNS
        .iter()
        .map(|c| {
            raw.column(c)
                .ok_or_else(|| Error::Schema(format!("population spec lacks a `{c}` column")))
        })
        .collect::<Result<_>>()?;
    let label_cols: Vec<usize> = raw
        .covariate_columns(&SPEC_COLUMNS)
        .iter()
        .map(|c| raw.column(c).unwrap())
        .collect();
    let mut cells = Vec::with_capacity(raw.records.len());
    for i in 0..raw.records.len() {
        let size = raw.real(i, idx[0])?;
        if size < 0.0 || size.fract() != 0.0 {
            return Err(Error::data(format!("row {}: N must be a non-negative integer", i + 1)));
        }
        cells.push(SpecCell {
            labels: label_cols.iter().map(|&c| raw.records[i][c].clone()).collect(),
            size: size as u64,
            psi: raw.real(i, idx[1])?,
            mean_respondents: raw.real(i, idx[2])?,
            mean_nonrespondents: raw.real(i, idx[3])?,
            sd: raw.real(i, idx[4])?,
        });
    }
    PopulationSpec::new(cells)
}

/// Shortest text that reads back to the same `f64`.
pub fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}

pub fn write_estimates<W: Write>(out: W, summaries: &[EstimateSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "group", "estimate", "se", "ci_low", "ci_high"])?;
    for s in summaries {
        w.write_record([
            s.method.clone(),
            s.group.clone(),
            fmt_real(s.estimate),
            fmt_real(s.se),
            fmt_real(s.ci_low),
            fmt_real(s.ci_high),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_estimates<R: Read>(reader: R) -> Result<Vec<EstimateSummary>> {
    let raw = RawTable::from_reader(reader)?;
    let cols: Vec<usize> = ["method", "group", "estimate", "se", "ci_low", "ci_high"]
        .iter()
        .map(|c| raw.column(c).ok_or_else(|| Error::Schema(format!("estimate file lacks `{c}`"))))
        .collect::<Result<_>>()?;
    let num = |i: usize, c: usize| -> Result<f64> {
        Ok(raw.optional_real(i, c)?.unwrap_or(f64::NAN))
    };
    (0..raw.records.len())
        .map(|i| {
            Ok(EstimateSummary {
                method: raw.records[i][cols[0]].clone(),
                group: raw.records[i][cols[1]].clone(),
                estimate: num(i, cols[2])?,
                se: num(i, cols[3])?,
                ci_low: num(i, cols[4])?,
                ci_high: num(i, cols[5])?,
            })
        })
        .collect()
}

pub fn write_draws<W: Write>(out: W, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["chain", "iteration", "parameter", "value"])?;
    for d in 0..draws.n_draws() {
        let row = draws.row(d);
        for (p, name) in draws.names().iter().enumerate() {
            w.write_record([
                draws.chain_of(d).to_string(),
                draws.iteration_of(d).to_string(),
                name.clone(),
                fmt_real(row[p]),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn table_header(schema: &CovariateSchema) -> Vec<String> {
    schema.variables().iter().map(|v| v.name.clone()).collect()
}

pub fn write_cell_table<W: Write>(out: W, table: &CellTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = table_header(table.schema());
    header.extend(CELL_TABLE_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in table.rows() {
        let mut rec: Vec<String> = table.schema().labels(&r.key).into_iter().map(str::to_string).collect();
        rec.push(r.count.to_string());
        rec.push(r.mean.map_or(String::new(), fmt_real));
        rec.push(r.variance.map_or(String::new(), fmt_real));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Occupied cell counts of one table: covariate columns plus `count`.
pub fn write_counts<W: Write>(out: W, table: &CellTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = table_header(table.schema());
    header.push("count".into());
    w.write_record(&header)?;
    for r in table.rows().iter().filter(|r| r.count > 0) {
        let mut rec: Vec<String> = table.schema().labels(&r.key).into_iter().map(str::to_string).collect();
        rec.push(r.count.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Stacked counts of several cell tables with a leading `replicate` column
/// (1-based). Only occupied cells are written.
pub fn write_stacked_counts<W: Write>(out: W, tables: &[CellTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = tables.first() else {
        return Err(Error::data("no tables to write"));
    };
    let mut header = vec!["replicate".to_string()];
    header.extend(table_header(first.schema()));
    header.push("count".into());
    w.write_record(&header)?;
    for (k, t) in tables.iter().enumerate() {
        for r in t.rows().iter().filter(|r| r.count > 0) {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend(t.schema().labels(&r.key).into_iter().map(str::to_string));
            rec.push(r.count.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_microdata<W: Write>(out: W, data: &Microdata) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let schema = data.schema();
    let mut header = table_header(schema);
    let has_y = data.has_outcome();
    if has_y {
        header.push("outcome".into());
    }
    if data.weights().is_some() {
        header.push("weight".into());
    }
    if data.included().is_some() {
        header.push("included".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = schema.labels(&data.key(i)).into_iter().map(str::to_string).collect();
        if has_y {
            rec.push(data.outcome(i).map_or(String::new(), fmt_real));
        }
        if let Some(wt) = data.weights() {
            rec.push(fmt_real(wt[i]));
        }
        if let Some(inc) = data.included() {
            rec.push(if inc[i] { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawTable {
        RawTable::from_reader(text.as_bytes()).unwrap()
    }

    #[test]
    fn numeric_levels_sort_by_value() {
        let mut l: Vec<String> = ["10", "2", "1"].iter().map(|s| s.to_string()).collect();
        sort_levels(&mut l);
        assert_eq!(l, ["1", "2", "10"]);
        let mut l: Vec<String> = ["b", "a", "10"].iter().map(|s| s.to_string()).collect();
        sort_levels(&mut l);
        assert_eq!(l, ["10", "a", "b"]);
    }

    #[test]
    fn schema_is_the_union_of_inputs() {
        let s = raw("age,sex,outcome\n1,m,2.5\n2,f,\n");
        let p = raw("sex,age,count\nm,3,10\n");
        let schema = infer_schema(&[(&s, &MICRODATA_COLUMNS), (&p, &CELL_TABLE_COLUMNS)]).unwrap();
        assert_eq!(schema.variables()[0].levels, ["1", "2", "3"]);
        assert_eq!(schema.variables()[1].levels, ["f", "m"]);
        let schema = Arc::new(schema);
        let d = microdata_from_raw(&s, schema.clone()).unwrap();
        assert_eq!(d.outcome(0), Some(2.5));
        assert_eq!(d.outcome(1), None);
        let t = cell_table_from_raw(&p, schema, CellRole::Population).unwrap();
        assert_eq!(t.count(&CellKey::new(vec![2, 1])), 10);
    }

    #[test]
    fn mismatched_columns_are_schema_errors() {
        let s = raw("age,outcome\n1,2\n");
        let p = raw("sex,count\nm,10\n");
        assert!(matches!(
            infer_schema(&[(&s, &MICRODATA_COLUMNS), (&p, &CELL_TABLE_COLUMNS)]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn margins_require_every_level() {
        let s = raw("a,outcome\nx,1\ny,2\n");
        let schema = infer_schema(&[(&s, &MICRODATA_COLUMNS)]).unwrap();
        let m = margins_from_raw(&raw("variable,level,total\na,x,3\na,y,4\n"), &schema).unwrap();
        assert_eq!(m[0].targets, vec![3.0, 4.0]);
        assert!(margins_from_raw(&raw("variable,level,total\na,x,3\n"), &schema).is_err());
    }

    #[test]
    fn estimates_round_trip() {
        let e = vec![EstimateSummary::normal("overall", "PS", 0.1 + 0.2, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_estimates(&mut buf, &e).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("method,group,estimate"));
        assert_eq!(read_estimates(buf.as_slice()).unwrap(), e);
    }

    #[test]
    fn spec_reads_cells() {
        let s = raw("age,N,psi,meanR,meanM,sd\nyoung,100,0.2,1,2,1\nold,50,0.1,3,3,2\n");
        let spec = population_spec_from_raw(&s).unwrap();
        assert_eq!(spec.cells().len(), 2);
        assert_eq!(spec.cells()[1].labels, ["old"]);
    }
}
