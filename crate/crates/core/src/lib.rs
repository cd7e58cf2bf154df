//! Finite-population inference from nonprobability samples.

pub mod cells;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod formula;
pub mod hb;
pub mod io;
pub mod mrp;
pub mod numeric;
pub mod pipeline;
pub mod sim;
pub mod wfpbb;

pub use cells::{
    align_cells, build_cell_table, count_cells, CellAlignment, CellKey, CellRole, CellRow, CellTable,
    CovariateSchema, Group, GroupFilter, Grouping, Microdata, Variable,
};
pub use error::{Error, ErrorKind, Result};
pub use formula::{Design, ModelTerms, Term};
pub use estimators::{Diagnostic, EstimateSummary, Estimates, Margin};
pub use hb::{McmcConfig, OutcomeModelSpec};
pub use mrp::{MrpOptions, MrpResult, MrpVariant};
pub use pipeline::{run_method, Inputs, Method, MethodRun, Settings};
pub use sim::{run_study, Scenario, SimConfig, SimReport};

/// Library version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
