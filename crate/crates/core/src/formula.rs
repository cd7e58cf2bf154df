//! Minimal model-formula grammar and treatment-coded design rows.
//!
//! Grammar: terms joined by `+`; `a*b` expands to `a + b + a:b`; `a:b` is a
//! pairwise interaction; `psi` is the numeric inclusion-probability
//! predictor; `(1|psi)` requests a varying intercept over psi groups.

use std::sync::Arc;

use crate::cells::CovariateSchema;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Main(usize),
    Interaction(usize, usize),
    Psi,
}

/// Parsed right-hand side of a model formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelTerms {
    pub terms: Vec<Term>,
    pub psi_group_intercept: bool,
}

impl ModelTerms {
    pub fn main_effects(schema: &CovariateSchema) -> Self {
        Self {
            terms: (0..schema.n_vars()).map(Term::Main).collect(),
            psi_group_intercept: false,
        }
    }

    pub fn parse(formula: &str, schema: &CovariateSchema) -> Result<Self> {
        let mut terms: Vec<Term> = Vec::new();
        let mut psi_group_intercept = false;
        let push = |t: Term, terms: &mut Vec<Term>| {
            if !terms.contains(&t) {
                terms.push(t);
            }
        };
        let var = |name: &str| {
            schema
                .var_index(name)
                .ok_or_else(|| Error::config(format!("formula references unknown variable `{name}`")))
        };
        let cleaned: String = formula.chars().filter(|c| !c.is_whitespace()).collect();
        let rhs = cleaned.split_once('~').map_or(cleaned.as_str(), |(_, r)| r);
        if rhs.is_empty() {
            return Err(Error::config("empty model formula"));
        }
        for raw in rhs.split('+') {
            match raw {
                "" => return Err(Error::config(format!("malformed formula `{formula}`"))),
                "1" => {}
                "psi" => push(Term::Psi, &mut terms),
                "(1|psi)" => psi_group_intercept = true,
                t if t.contains('*') || t.contains(':') => {
                    let interaction_only = t.contains(':');
                    let parts: Vec<&str> = t.split(['*', ':']).collect();
                    if parts.len() != 2 || (t.contains('*') && t.contains(':')) {
                        return Err(Error::config(format!(
                            "only pairwise interactions are supported, got `{t}`"
                        )));
                    }
                    let (a, b) = (var(parts[0])?, var(parts[1])?);
                    if a == b {
                        return Err(Error::config(format!("self-interaction `{t}`")));
                    }
                    if !interaction_only {
                        push(Term::Main(a), &mut terms);
                        push(Term::Main(b), &mut terms);
                    }
                    push(Term::Interaction(a.min(b), a.max(b)), &mut terms);
                }
                name => push(Term::Main(var(name)?), &mut terms),
            }
        }
        Ok(Self {
            terms,
            psi_group_intercept,
        })
    }

    pub fn uses_psi(&self) -> bool {
        self.psi_group_intercept || self.terms.contains(&Term::Psi)
    }

    /// Same model without `psi` and `(1|psi)`.
    pub fn without_psi(&self) -> Self {
        Self {
            terms: self.terms.iter().copied().filter(|t| *t != Term::Psi).collect(),
            psi_group_intercept: false,
        }
    }

    pub fn to_formula(&self, schema: &CovariateSchema) -> String {
        let name = |v: usize| schema.variables()[v].name.as_str();
        let mut parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| match *t {
                Term::Main(v) => name(v).to_string(),
                Term::Interaction(a, b) => format!("{}:{}", name(a), name(b)),
                Term::Psi => "psi".to_string(),
            })
            .collect();
        if self.psi_group_intercept {
            parts.push("(1|psi)".into());
        }
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join(" + ")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Intercept,
    Dummy { var: usize, level: u32 },
    Pair { a: usize, la: u32, b: usize, lb: u32 },
    Psi,
}

/// Treatment-coded design (first level of each factor is the reference)
/// with a leading intercept column.
#[derive(Debug, Clone)]
pub struct Design {
    schema: Arc<CovariateSchema>,
    columns: Vec<Column>,
    labels: Vec<String>,
}

impl Design {
    pub fn new(schema: Arc<CovariateSchema>, terms: &ModelTerms) -> Self {
        let mut columns = vec![Column::Intercept];
        let mut labels = vec!["(Intercept)".to_string()];
        let vars = schema.variables();
        for term in &terms.terms {
            match *term {
                Term::Main(v) => {
                    for l in 1..vars[v].levels.len() {
                        columns.push(Column::Dummy { var: v, level: l as u32 });
                        labels.push(format!("{}[{}]", vars[v].name, vars[v].levels[l]));
                    }
                }
                Term::Interaction(a, b) => {
                    for la in 1..vars[a].levels.len() {
                        for lb in 1..vars[b].levels.len() {
                            columns.push(Column::Pair {
                                a,
                                la: la as u32,
                                b,
                                lb: lb as u32,
                            });
                            labels.push(format!(
                                "{}[{}]:{}[{}]",
                                vars[a].name, vars[a].levels[la], vars[b].name, vars[b].levels[lb]
                            ));
                        }
                    }
                }
                Term::Psi => {
                    columns.push(Column::Psi);
                    labels.push("psi".into());
                }
            }
        }
        Self {
            schema,
            columns,
            labels,
        }
    }

    pub fn schema(&self) -> &Arc<CovariateSchema> {
        &self.schema
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn uses_psi(&self) -> bool {
        self.columns.contains(&Column::Psi)
    }

    /// Fills `out` with the design row for a cell with level codes `codes`.
    pub fn fill_row(&self, codes: &[u32], psi: f64, out: &mut [f64]) {
        for (slot, col) in out.iter_mut().zip(&self.columns) {
            *slot = match *col {
                Column::Intercept => 1.0,
                Column::Dummy { var, level } => (codes[var] == level) as u8 as f64,
                Column::Pair { a, la, b, lb } => (codes[a] == la && codes[b] == lb) as u8 as f64,
                Column::Psi => psi,
            };
        }
    }

    pub fn row(&self, codes: &[u32], psi: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        self.fill_row(codes, psi, &mut out);
        out
    }
}
