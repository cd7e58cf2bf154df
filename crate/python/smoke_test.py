"""Smoke test of the mrpkit Python module.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/mrpkit-*.whl
    python python/smoke_test.py
"""

import csv
import math
import os
import random
import tempfile

import mrpkit


def make_data(seed=3):
    rng = random.Random(seed)
    ages, edus = ["18-34", "35-64", "65+"], ["low", "high"]
    effect = {("18-34", "low"): 1.0, ("18-34", "high"): 2.0, ("35-64", "low"): 2.5,
              ("35-64", "high"): 3.5, ("65+", "low"): 4.0, ("65+", "high"): 5.5}
    pop = {k: rng.randint(800, 3000) for k in effect}
    include = {"18-34": 0.08, "35-64": 0.04, "65+": 0.01}

    sample = {"age": [], "edu": [], "outcome": []}
    for (a, e), n in pop.items():
        for _ in range(n):
            if rng.random() < include[a]:
                sample["age"].append(a)
                sample["edu"].append(e)
                sample["outcome"].append(effect[a, e] + rng.gauss(0, 1))

    keys = list(pop)
    reference = {"age": [], "edu": [], "weight": []}
    total = sum(pop.values())
    for _ in range(400):
        a, e = rng.choices(keys, weights=[pop[k] for k in keys])[0]
        reference["age"].append(a)
        reference["edu"].append(e)
        reference["weight"].append(total / 400)

    population = {"age": [k[0] for k in keys], "edu": [k[1] for k in keys],
                  "count": [pop[k] for k in keys]}
    truth = sum(effect[k] * pop[k] for k in keys) / total
    return sample, reference, population, truth


def main():
    print("mrpkit", mrpkit.__version__, "methods:", ", ".join(mrpkit.METHODS))
    sample, reference, population, truth = make_data()

    results = mrpkit.estimate(
        sample, ["UnW", "PS", "IPW", "MRP-P"], population=population, reference=reference,
        group_by="age", iterations=600, warmup=300, jackknife_groups=10, seed=7,
    )
    by_method = {r.method: r for r in results}
    for r in results:
        overall = r.estimates[0]
        print(f"{r.method:6s} overall {overall.estimate:.3f} (se {overall.se:.3f})  truth {truth:.3f}")
        assert overall.group == "overall"
        assert overall.ci_low <= overall.estimate <= overall.ci_high
    assert abs(by_method["PS"].estimates[0].estimate - truth) < 0.2
    assert by_method["UnW"].estimates[0].estimate < truth  # younger people over-represented
    mrp = by_method["MRP-P"]
    assert mrp.max_rhat is not None and mrp.max_rhat < 1.1
    draws = dict(mrp.group_draws)
    assert len(draws["overall"]) == 2 * 300

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "sample.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(sample)
            w.writerows(zip(*sample.values()))
        again = mrpkit.estimate(path, "UnW")
        assert math.isclose(again[0].estimates[0].estimate, by_method["UnW"].estimates[0].estimate)

    names, pops = mrpkit.synthetic_populations(reference, population_size=5000, replicates=4, seed=2)
    assert names == ["age", "edu"] and len(pops) == 4
    assert all(sum(p.values()) == 5000 for p in pops)
    print("synthetic population 1:", dict(sorted(pops[0].items())))

    spec = mrpkit.PopulationSpec({
        "cell": ["a", "b"], "N": [600, 400], "psi": [0.1, 0.4],
        "meanR": [1.0, 3.0], "meanM": [0.5, 2.0], "sd": [1.0, 1.0],
    })
    bias = spec.analytic_bias(100, sigma_theta=1.0)
    assert math.isclose(bias["bias_unw"], spec.respondent_mean - spec.population_mean, abs_tol=1e-12)
    assert math.isclose(bias["bias_mrp"], bias["bias_mrp_first"] + bias["bias_mrp_second"], abs_tol=1e-12)
    mc = spec.monte_carlo_bias(2000, seed=1)
    assert abs(mc["bias_ps"] - bias["bias_ps"]) < 5 * mc["se_ps"] + 1e-9
    print("bias:", {k: round(v, 4) for k, v in bias.items()})

    cfg = mrpkit.SimConfig(population_size=3000, n_nonprob=200, n_ref=200, replications=2,
                           iterations=300, warmup=150, jackknife_groups=4, methods=["UnW", "PS", "MRP-P"])
    cfg.scenario = "incorrect"
    assert mrpkit.SimConfig.from_toml(cfg.to_toml()).to_toml() == cfg.to_toml()
    report = mrpkit.run_study(cfg)
    row = report.row("PS", "overall")
    assert row is not None and row["replications"] + report.excluded == 2
    print("study rows:", len(report.rows), "excluded:", report.excluded)

    for bad, exc in [
        (lambda: mrpkit.estimate(sample, "nope"), mrpkit.UsageError),
        (lambda: mrpkit.estimate({"age": ["1"], "outcome": ["x"]}, "UnW"), mrpkit.DataError),
        (lambda: mrpkit.SimConfig(replicatons=3), mrpkit.UsageError),
    ]:
        try:
            bad()
        except exc as e:
            assert isinstance(e, mrpkit.MrpkitError)
        else:
            raise AssertionError(f"expected {exc.__name__}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
