//! Poststratification cells: covariate schemas, unit-level microdata, and
//! per-cell summary tables for sample, reference and population data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    pub levels: Vec<String>,
}

/// Ordered categorical variables whose cross-tabulation defines the cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateSchema {
    variables: Vec<Variable>,
}

impl CovariateSchema {
    pub fn new<S: Into<String>>(variables: Vec<(S, Vec<S>)>) -> Result<Self> {
        let variables: Vec<Variable> = variables
            .into_iter()
            .map(|(name, levels)| Variable {
                name: name.into(),
                levels: levels.into_iter().map(Into::into).collect(),
            })
            .collect();
        let mut names = BTreeSet::new();
        for v in &variables {
            if !names.insert(v.name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable `{}`", v.name)));
            }
            if v.levels.is_empty() {
                return Err(Error::Schema(format!("variable `{}` has no levels", v.name)));
            }
            let distinct: BTreeSet<_> = v.levels.iter().collect();
            if distinct.len() != v.levels.len() {
                return Err(Error::Schema(format!(
                    "variable `{}` has duplicate levels",
                    v.name
                )));
            }
        }
        Ok(Self { variables })
    }

    /// Schema whose levels are the labels `"1".."k"` for each variable.
    pub fn numbered(variables: &[(&str, usize)]) -> Result<Self> {
        Self::new(
            variables
                .iter()
                .map(|&(name, k)| (name.to_string(), (1..=k).map(|l| l.to_string()).collect()))
                .collect(),
        )
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_levels(&self, var: usize) -> usize {
        self.variables[var].levels.len()
    }

    /// Total number of cells, the product of level counts.
    pub fn n_cells(&self) -> usize {
        self.variables.iter().map(|v| v.levels.len()).product()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn level_index(&self, var: usize, label: &str) -> Option<u32> {
        self.variables[var]
            .levels
            .iter()
            .position(|l| l == label)
            .map(|i| i as u32)
    }

    pub fn check_key(&self, key: &CellKey) -> Result<()> {
        if key.0.len() != self.n_vars() {
            return Err(Error::Schema(format!(
                "cell key has {} indices, schema has {} variables",
                key.0.len(),
                self.n_vars()
            )));
        }
        for (v, (&idx, var)) in key.0.iter().zip(&self.variables).enumerate() {
            if idx as usize >= var.levels.len() {
                return Err(Error::Schema(format!(
                    "level index {idx} out of range for variable `{}` (position {v})",
                    var.name
                )));
            }
        }
        Ok(())
    }

    /// Mixed-radix position of a key; the first variable varies slowest.
    pub fn linear_index(&self, key: &CellKey) -> usize {
        key.0
            .iter()
            .zip(&self.variables)
            .fold(0, |acc, (&i, v)| acc * v.levels.len() + i as usize)
    }

    pub fn key_at(&self, mut index: usize) -> CellKey {
        let mut levels = vec![0u32; self.n_vars()];
        for (slot, var) in levels.iter_mut().zip(&self.variables).rev() {
            let k = var.levels.len();
            *slot = (index % k) as u32;
            index /= k;
        }
        CellKey(levels)
    }

    pub fn all_keys(&self) -> impl Iterator<Item = CellKey> + '_ {
        (0..self.n_cells()).map(|i| self.key_at(i))
    }

    pub fn labels(&self, key: &CellKey) -> Vec<&str> {
        key.0
            .iter()
            .zip(&self.variables)
            .map(|(&i, v)| v.levels[i as usize].as_str())
            .collect()
    }
}

/// Canonical cell identifier: one level index per schema variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey(pub Vec<u32>);

impl CellKey {
    pub fn new(levels: Vec<u32>) -> Self {
        Self(levels)
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn level(&self, var: usize) -> u32 {
        self.0[var]
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Unit-level records of categorical covariates with optional outcome,
/// weight and inclusion indicator.
#[derive(Debug, Clone)]
pub struct Microdata {
    schema: Arc<CovariateSchema>,
    codes: Vec<u32>,
    outcome: Vec<Option<f64>>,
    weight: Option<Vec<f64>>,
    included: Option<Vec<bool>>,
}

impl Microdata {
    /// Builds microdata from row-major level codes (`n_units * n_vars`).
    pub fn from_codes(
        schema: Arc<CovariateSchema>,
        codes: Vec<u32>,
        outcome: Option<Vec<Option<f64>>>,
        weight: Option<Vec<f64>>,
        included: Option<Vec<bool>>,
    ) -> Result<Self> {
        let p = schema.n_vars();
        if p == 0 {
            return Err(Error::Schema("schema has no variables".into()));
        }
        if codes.len() % p != 0 {
            return Err(Error::data("code buffer length is not a multiple of the variable count"));
        }
        let n = codes.len() / p;
        for (unit, row) in codes.chunks(p).enumerate() {
            for (v, &c) in row.iter().enumerate() {
                if c as usize >= schema.n_levels(v) {
                    return Err(Error::UnknownLevel {
                        variable: schema.variables()[v].name.clone(),
                        value: c.to_string(),
                        unit,
                    });
                }
            }
        }
        let outcome = outcome.unwrap_or_else(|| vec![None; n]);
        if outcome.len() != n {
            return Err(Error::data("outcome length differs from unit count"));
        }
        if outcome.iter().flatten().any(|y| !y.is_finite()) {
            return Err(Error::data("non-finite outcome value"));
        }
        if let Some(w) = &weight {
            if w.len() != n {
                return Err(Error::data("weight length differs from unit count"));
            }
            if let Some(i) = w.iter().position(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::data(format!("weight of unit {i} is not a positive finite number")));
            }
        }
        if let Some(inc) = &included {
            if inc.len() != n {
                return Err(Error::data("inclusion indicator length differs from unit count"));
            }
        }
        Ok(Self {
            schema,
            codes,
            outcome,
            weight,
            included,
        })
    }

    /// Builds microdata from level labels, rejecting labels outside the schema.
    pub fn from_labels<S: AsRef<str>>(
        schema: Arc<CovariateSchema>,
        rows: &[Vec<S>],
        outcome: Option<Vec<Option<f64>>>,
        weight: Option<Vec<f64>>,
        included: Option<Vec<bool>>,
    ) -> Result<Self> {
        let p = schema.n_vars();
        let mut codes = Vec::with_capacity(rows.len() * p);
        for (unit, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::data(format!(
                    "unit {unit} has {} covariate values, expected {p}",
                    row.len()
                )));
            }
            for (v, label) in row.iter().enumerate() {
                let label = label.as_ref();
                let code = schema.level_index(v, label).ok_or_else(|| Error::UnknownLevel {
                    variable: schema.variables()[v].name.clone(),
                    value: label.to_string(),
                    unit,
                })?;
                codes.push(code);
            }
        }
        Self::from_codes(schema, codes, outcome, weight, included)
    }

    pub fn empty(schema: Arc<CovariateSchema>) -> Self {
        Self {
            schema,
            codes: Vec::new(),
            outcome: Vec::new(),
            weight: None,
            included: None,
        }
    }

    pub fn schema(&self) -> &Arc<CovariateSchema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn codes(&self, unit: usize) -> &[u32] {
        let p = self.schema.n_vars();
        &self.codes[unit * p..(unit + 1) * p]
    }

    pub fn code(&self, unit: usize, var: usize) -> u32 {
        self.codes[unit * self.schema.n_vars() + var]
    }

    pub fn key(&self, unit: usize) -> CellKey {
        CellKey(self.codes(unit).to_vec())
    }

    pub fn cell_index(&self, unit: usize) -> usize {
        self.codes(unit)
            .iter()
            .zip(self.schema.variables())
            .fold(0, |acc, (&i, v)| acc * v.levels.len() + i as usize)
    }

    pub fn outcome(&self, unit: usize) -> Option<f64> {
        self.outcome[unit]
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn has_outcome(&self) -> bool {
        self.outcome.iter().any(Option::is_some)
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weight.as_deref()
    }

    pub fn weight(&self, unit: usize) -> f64 {
        self.weight.as_ref().map_or(1.0, |w| w[unit])
    }

    pub fn included(&self) -> Option<&[bool]> {
        self.included.as_deref()
    }

    pub fn set_weights(&mut self, weight: Option<Vec<f64>>) -> Result<()> {
        if let Some(w) = &weight {
            if w.len() != self.len() || w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::data("weights must be positive, finite and one per unit"));
            }
        }
        self.weight = weight;
        Ok(())
    }

    pub fn set_included(&mut self, included: Option<Vec<bool>>) -> Result<()> {
        if let Some(inc) = &included {
            if inc.len() != self.len() {
                return Err(Error::data("inclusion indicator length differs from unit count"));
            }
        }
        self.included = included;
        Ok(())
    }

    /// Copies the listed units (in the given order) into new microdata.
    pub fn subset(&self, units: &[usize]) -> Self {
        let p = self.schema.n_vars();
        let mut codes = Vec::with_capacity(units.len() * p);
        for &u in units {
            codes.extend_from_slice(self.codes(u));
        }
        Self {
            schema: Arc::clone(&self.schema),
            codes,
            outcome: units.iter().map(|&u| self.outcome[u]).collect(),
            weight: self.weight.as_ref().map(|w| units.iter().map(|&u| w[u]).collect()),
            included: self.included.as_ref().map(|v| units.iter().map(|&u| v[u]).collect()),
        }
    }

    /// Units whose inclusion indicator equals `flag`; all units if no indicator.
    pub fn filter_included(&self, flag: bool) -> Self {
        match &self.included {
            None => self.clone(),
            Some(inc) => {
                let idx: Vec<usize> = (0..self.len()).filter(|&i| inc[i] == flag).collect();
                self.subset(&idx)
            }
        }
    }

    /// Stacks a nonprobability sample (`included = 1`) on a reference sample
    /// (`included = 0`). Units without weights get weight 1.
    pub fn concatenate(nonprob: &Microdata, reference: &Microdata) -> Result<Self> {
        if nonprob.schema != reference.schema {
            return Err(Error::Schema("cannot concatenate microdata with different schemas".into()));
        }
        let mut codes = nonprob.codes.clone();
        codes.extend_from_slice(&reference.codes);
        let mut outcome = nonprob.outcome.clone();
        outcome.extend(std::iter::repeat_n(None, reference.len()));
        let weight: Vec<f64> = (0..nonprob.len())
            .map(|i| nonprob.weight(i))
            .chain((0..reference.len()).map(|i| reference.weight(i)))
            .collect();
        let included: Vec<bool> = std::iter::repeat_n(true, nonprob.len())
            .chain(std::iter::repeat_n(false, reference.len()))
            .collect();
        Ok(Self {
            schema: Arc::clone(&nonprob.schema),
            codes,
            outcome,
            weight: Some(weight),
            included: Some(included),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellRole {
    Sample,
    Reference,
    Population,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub key: CellKey,
    pub count: u64,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
}

/// Per-cell counts with optional outcome mean and unbiased variance.
///
/// Rows are kept sorted by key. Cells absent from the rows have count 0.
#[derive(Debug, Clone)]
pub struct CellTable {
    schema: Arc<CovariateSchema>,
    role: CellRole,
    rows: Vec<CellRow>,
}

impl CellTable {
    pub fn new(schema: Arc<CovariateSchema>, role: CellRole, mut rows: Vec<CellRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.key.cmp(&b.key));
        for w in rows.windows(2) {
            if w[0].key == w[1].key {
                return Err(Error::data(format!("duplicate cell {}", w[0].key)));
            }
        }
        for row in &rows {
            schema.check_key(&row.key)?;
            match row.mean {
                Some(m) if row.count == 0 => {
                    return Err(Error::data(format!("cell {} has a mean ({m}) but count 0", row.key)))
                }
                Some(m) if !m.is_finite() => {
                    return Err(Error::data(format!("cell {} has a non-finite mean", row.key)))
                }
                _ => {}
            }
            if let Some(v) = row.variance {
                if row.count < 2 || !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::data(format!(
                        "cell {} has variance {v} with count {}",
                        row.key, row.count
                    )));
                }
            }
        }
        Ok(Self { schema, role, rows })
    }

    /// Count-only table built from `(key, count)` pairs.
    pub fn from_counts(
        schema: Arc<CovariateSchema>,
        role: CellRole,
        counts: impl IntoIterator<Item = (CellKey, u64)>,
    ) -> Result<Self> {
        let rows = counts
            .into_iter()
            .map(|(key, count)| CellRow {
                key,
                count,
                mean: None,
                variance: None,
            })
            .collect();
        Self::new(schema, role, rows)
    }

    pub fn schema(&self) -> &Arc<CovariateSchema> {
        &self.schema
    }

    pub fn role(&self) -> CellRole {
        self.role
    }

    pub fn rows(&self) -> &[CellRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellRow> {
        self.rows
            .binary_search_by(|r| r.key.cmp(key))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn count(&self, key: &CellKey) -> u64 {
        self.get(key).map_or(0, |r| r.count)
    }

    pub fn total_count(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Keys of rows with a positive count.
    pub fn occupied_keys(&self) -> impl Iterator<Item = &CellKey> {
        self.rows.iter().filter(|r| r.count > 0).map(|r| &r.key)
    }

    /// Pooled within-cell variance `Σ (n_j-1) s_j² / Σ (n_j-1)` over cells
    /// carrying a variance.
    pub fn pooled_variance(&self) -> Option<f64> {
        let (ss, df) = self
            .rows
            .iter()
            .filter_map(|r| r.variance.map(|v| (v * (r.count - 1) as f64, (r.count - 1) as f64)))
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        (df > 0.0).then(|| ss / df)
    }

    /// Cell variance, falling back to `pooled` for cells with fewer than two units.
    pub fn variance_or(&self, row: &CellRow, pooled: f64) -> f64 {
        row.variance.unwrap_or(pooled)
    }

    pub fn with_role(mut self, role: CellRole) -> Self {
        self.role = role;
        self
    }
}

/// Cross-tabulates units with observed outcome: per-cell count, mean and
/// unbiased (n-1) variance. Cells without units are omitted.
pub fn build_cell_table(data: &Microdata, role: CellRole) -> Result<CellTable> {
    // (count, sum) first; variance uses a second centred pass.
    let mut acc: BTreeMap<CellKey, (u64, f64)> = BTreeMap::new();
    for i in 0..data.len() {
        if let Some(y) = data.outcome(i) {
            let e = acc.entry(data.key(i)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += y;
        }
    }
    let means: BTreeMap<&CellKey, f64> = acc.iter().map(|(k, &(n, s))| (k, s / n as f64)).collect();
    let mut ss: BTreeMap<CellKey, f64> = BTreeMap::new();
    for i in 0..data.len() {
        if let Some(y) = data.outcome(i) {
            let key = data.key(i);
            let d = y - means[&key];
            *ss.entry(key).or_insert(0.0) += d * d;
        }
    }
    let rows = acc
        .iter()
        .map(|(key, &(n, sum))| CellRow {
            key: key.clone(),
            count: n,
            mean: Some(sum / n as f64),
            variance: (n >= 2).then(|| ss[key] / (n - 1) as f64),
        })
        .collect();
    CellTable::new(Arc::clone(data.schema()), role, rows)
}

/// Counts every unit per cell, ignoring outcomes.
pub fn count_cells(data: &Microdata, role: CellRole) -> Result<CellTable> {
    let mut counts: BTreeMap<CellKey, u64> = BTreeMap::new();
    for i in 0..data.len() {
        *counts.entry(data.key(i)).or_insert(0) += 1;
    }
    CellTable::from_counts(Arc::clone(data.schema()), role, counts)
}

/// Partition of the occupied cells of two tables.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellAlignment {
    pub shared: Vec<CellKey>,
    /// Occupied in `b` only.
    pub population_only: Vec<CellKey>,
    /// Occupied in `a` only.
    pub sample_only: Vec<CellKey>,
}

/// Aligns the occupied cells of a sample-side table `a` against a
/// population-side table `b`.
pub fn align_cells(a: &CellTable, b: &CellTable) -> Result<CellAlignment> {
    if a.schema() != b.schema() {
        return Err(Error::Schema("cannot align cell tables with different schemas".into()));
    }
    let ka: BTreeSet<&CellKey> = a.occupied_keys().collect();
    let kb: BTreeSet<&CellKey> = b.occupied_keys().collect();
    Ok(CellAlignment {
        shared: ka.intersection(&kb).map(|&k| k.clone()).collect(),
        population_only: kb.difference(&ka).map(|&k| k.clone()).collect(),
        sample_only: ka.difference(&kb).map(|&k| k.clone()).collect(),
    })
}

/// Domain over which an estimate is reported.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupFilter {
    All,
    Level { var: usize, level: u32 },
    Cells(BTreeSet<CellKey>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub filter: GroupFilter,
}

impl Group {
    pub fn contains(&self, key: &CellKey) -> bool {
        self.contains_codes(key.levels())
    }

    pub fn contains_codes(&self, codes: &[u32]) -> bool {
        match &self.filter {
            GroupFilter::All => true,
            GroupFilter::Level { var, level } => codes[*var] == *level,
            GroupFilter::Cells(set) => set.contains(&CellKey(codes.to_vec())),
        }
    }
}

/// Ordered list of reporting domains (cells may belong to several).
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    groups: Vec<Group>,
}

impl Grouping {
    pub fn new(groups: Vec<Group>) -> Self {
        Self { groups }
    }

    pub fn overall() -> Self {
        Self::new(vec![Group {
            label: "overall".into(),
            filter: GroupFilter::All,
        }])
    }

    /// `overall` followed by one group per level of `var`, labelled `var:level`.
    pub fn overall_and_levels(schema: &CovariateSchema, var: &str) -> Result<Self> {
        let v = schema
            .var_index(var)
            .ok_or_else(|| Error::config(format!("unknown grouping variable `{var}`")))?;
        let mut groups = Self::overall().groups;
        for (l, label) in schema.variables()[v].levels.iter().enumerate() {
            groups.push(Group {
                label: format!("{var}:{label}"),
                filter: GroupFilter::Level {
                    var: v,
                    level: l as u32,
                },
            });
        }
        Ok(Self::new(groups))
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.label.clone()).collect()
    }
}
