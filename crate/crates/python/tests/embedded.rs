use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;

fn run(code: &str) {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(mrpkit_module);
        Python::initialize();
    });
    use mrpkit_py::mrpkit_module;
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.display(py);
            panic!("python code failed: {e}");
        }
    });
}

#[test]
fn module_surface() {
    run(r#"
import mrpkit
assert mrpkit.__version__
assert "MRP-INT" in mrpkit.METHODS
assert issubclass(mrpkit.DataError, mrpkit.MrpkitError)
for name in ["estimate", "run_study", "synthetic_populations", "PopulationSpec", "SimConfig"]:
    assert hasattr(mrpkit, name), name
"#);
}

#[test]
fn poststratified_estimate_from_columns() {
    run(r#"
import mrpkit
sample = {"g": ["a", "a", "a", "b"], "outcome": [1.0, 2.0, 3.0, 10.0]}
population = {"g": ["a", "b"], "count": [10, 30]}
[unw, ps] = mrpkit.estimate(sample, "UnW,PS", population=population)
assert abs(unw.estimates[0].estimate - 4.0) < 1e-12
assert abs(ps.estimates[0].estimate - (0.25 * 2.0 + 0.75 * 10.0)) < 1e-12
"#);
}

#[test]
fn errors_map_to_python_exceptions() {
    run(r#"
import mrpkit
try:
    mrpkit.estimate({"g": ["a"], "outcome": [1.0]}, "PS")
except mrpkit.UsageError:
    pass
else:
    raise AssertionError("PS without a population should fail")
cfg = mrpkit.SimConfig()
try:
    cfg.replications = 0
except mrpkit.UsageError:
    assert cfg.replications == 50
else:
    raise AssertionError("zero replications should fail")
"#);
}
