use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mrpkit::cells::{build_cell_table, CellKey, CellRole, CellTable, CovariateSchema, Grouping, Microdata};
use mrpkit::estimators::{
    dr_mean, fit_inclusion_model, greg_mean, ipw_mean, jackknife_se, poststratified_mean, rake_weights,
    unweighted_mean, Margin, WeightVector,
};
use mrpkit::ModelTerms;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn schema(vars: &[(&str, usize)]) -> Arc<CovariateSchema> {
    Arc::new(CovariateSchema::numbered(vars).unwrap())
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    (m, v.sqrt())
}

#[test]
fn two_by_two_ipf_matches_closed_form() {
    let s = schema(&[("r", 2), ("c", 2)]);
    let counts = [[10, 20], [30, 40]];
    let mut codes = Vec::new();
    for (r, row) in counts.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            for _ in 0..n {
                codes.extend([r as u32, c as u32]);
            }
        }
    }
    let data = Microdata::from_codes(Arc::clone(&s), codes, None, None, None).unwrap();
    let margins = [
        Margin {
            var: 0,
            targets: vec![50.0, 50.0],
        },
        Margin {
            var: 1,
            targets: vec![60.0, 40.0],
        },
    ];
    let base = WeightVector::uniform(data.len(), 1.0).unwrap();
    let raked = rake_weights(&data, &margins, &base, 1e-12, 500).unwrap();
    assert!(raked.converged);
    // IPF keeps the odds ratio 10·40/(20·30); solve for the fitted (0,0) cell
    let x = (-190.0 + 60_100f64.sqrt()) / 2.0;
    let fitted = [[x, 50.0 - x], [60.0 - x, x - 10.0]];
    for i in 0..data.len() {
        let (r, c) = (data.code(i, 0) as usize, data.code(i, 1) as usize);
        assert_abs_diff_eq!(raked.weights.as_slice()[i], fitted[r][c] / counts[r][c] as f64, epsilon = 1e-9);
    }
}

#[test]
fn matching_margins_are_a_fixed_point() {
    let s = schema(&[("a", 3), ("b", 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codes: Vec<u32> = (0..90).flat_map(|i| [i % 3, rng.random_range(0..2)]).collect();
    let data = Microdata::from_codes(Arc::clone(&s), codes, None, None, None).unwrap();
    let margins: Vec<Margin> = (0..2)
        .map(|v| {
            let mut t = vec![0.0; s.n_levels(v)];
            for i in 0..data.len() {
                t[data.code(i, v) as usize] += 2.0;
            }
            Margin { var: v, targets: t }
        })
        .collect();
    let base = WeightVector::uniform(data.len(), 2.0).unwrap();
    let raked = rake_weights(&data, &margins, &base, 1e-8, 500).unwrap();
    assert!(raked.weights.as_slice().iter().all(|&w| (w - 2.0).abs() < 1e-12));
}

#[test]
fn greg_matches_matrix_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = schema(&[("a", 3), ("b", 2)]);
    let groups = Grouping::overall_and_levels(&s, "a").unwrap();
    for _ in 0..20 {
        let n = rng.random_range(30..120);
        let codes: Vec<[u32; 2]> = (0..n)
            .map(|i| [(i % 3) as u32, rng.random_range(0..2)])
            .collect();
        let y: Vec<f64> = codes
            .iter()
            .map(|c| c[0] as f64 - 2.0 * c[1] as f64 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = Microdata::from_codes(
            Arc::clone(&s),
            codes.iter().flatten().copied().collect(),
            Some(y.iter().map(|&v| Some(v)).collect()),
            None,
            None,
        )
        .unwrap();
        let pop_counts: Vec<(CellKey, u64)> = s.all_keys().map(|k| (k, rng.random_range(50..500))).collect();
        let pop = CellTable::from_counts(Arc::clone(&s), CellRole::Population, pop_counts.clone()).unwrap();
        let got = greg_mean(&data, &ModelTerms::parse("a + b", &s).unwrap(), &pop, &groups, None).unwrap();

        // treatment-coded design [1, a=2, a=3, b=2]
        let x_of = |a: u32, b: u32| [1.0, (a == 1) as u8 as f64, (a == 2) as u8 as f64, (b == 1) as u8 as f64];
        let x = DMatrix::from_fn(n, 4, |i, j| x_of(codes[i][0], codes[i][1])[j]);
        let beta = (x.transpose() * &x)
            .lu()
            .solve(&(x.transpose() * DVector::from_vec(y.clone())))
            .unwrap();
        let big_n: f64 = pop_counts.iter().map(|p| p.1 as f64).sum();
        let w = big_n / n as f64;
        for g in groups.groups() {
            let (mut synthetic, mut size) = (0.0, 0.0);
            for (k, c) in &pop_counts {
                if g.contains(k) {
                    let xr = x_of(k.level(0), k.level(1));
                    synthetic += *c as f64 * (0..4).map(|j| xr[j] * beta[j]).sum::<f64>();
                    size += *c as f64;
                }
            }
            let resid: f64 = (0..n)
                .filter(|&i| g.contains_codes(&codes[i]))
                .map(|i| w * (y[i] - (0..4).map(|j| x[(i, j)] * beta[j]).sum::<f64>()))
                .sum();
            assert_abs_diff_eq!(got.get(&g.label).unwrap().estimate, (synthetic + resid) / size, epsilon = 1e-10);
        }
    }
}

#[test]
fn saturated_one_variable_greg_is_poststratification() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = schema(&[("a", 4)]);
    let codes: Vec<u32> = (0..80).map(|i| i % 4).collect();
    let y: Vec<Option<f64>> = codes.iter().map(|&c| Some(c as f64 + rng.random::<f64>())).collect();
    let data = Microdata::from_codes(Arc::clone(&s), codes, Some(y), None, None).unwrap();
    let pop = CellTable::from_counts(Arc::clone(&s), CellRole::Population, s.all_keys().map(|k| (k, rng.random_range(10..900)))).unwrap();
    let g = Grouping::overall();
    let greg = greg_mean(&data, &ModelTerms::parse("a", &s).unwrap(), &pop, &g, None).unwrap();
    let ps = poststratified_mean(&build_cell_table(&data, CellRole::Sample).unwrap(), &pop, &g).unwrap();
    assert_abs_diff_eq!(greg.get("overall").unwrap().estimate, ps.get("overall").unwrap().estimate, epsilon = 1e-10);
}

/// Stratum-level nonprobability units plus a reference sample, stacked with
/// the inclusion indicator.
fn stacked(s: &Arc<CovariateSchema>, strata: &[(u32, usize, usize)], y: impl Fn(u32) -> f64) -> (Microdata, Microdata) {
    let mut codes = Vec::new();
    let mut out = Vec::new();
    let mut inc = Vec::new();
    let mut sample_codes = Vec::new();
    let mut sample_y = Vec::new();
    for &(level, n_in, n_out) in strata {
        for k in 0..n_in + n_out {
            codes.push(level);
            let included = k < n_in;
            inc.push(included);
            out.push(included.then(|| y(level)));
            if included {
                sample_codes.push(level);
                sample_y.push(Some(y(level)));
            }
        }
    }
    let all = Microdata::from_codes(Arc::clone(s), codes, Some(out), None, Some(inc)).unwrap();
    let sample = Microdata::from_codes(Arc::clone(s), sample_codes, Some(sample_y), None, None).unwrap();
    (all, sample)
}

#[test]
fn ipw_two_strata_hand_computed() {
    let s = schema(&[("stratum", 2)]);
    // rates 0.5 and 0.25 on strata of 40 and 80 units
    let (all, sample) = stacked(&s, &[(0, 20, 20), (1, 20, 60)], |l| l as f64 + 1.0);
    let fit = fit_inclusion_model(&all, &ModelTerms::parse("stratum", &s).unwrap()).unwrap();
    assert_abs_diff_eq!(fit.predict(&[0]), 0.5, epsilon = 1e-7);
    assert_abs_diff_eq!(fit.predict(&[1]), 0.25, epsilon = 1e-7);
    let est = ipw_mean(&sample, &fit, &Grouping::overall(), None).unwrap();
    // (20·2·1 + 20·4·2) / (20·2 + 20·4)
    assert_abs_diff_eq!(est.get("overall").unwrap().estimate, 5.0 / 3.0, epsilon = 1e-6);
}

#[test]
fn equal_propensities_give_the_sample_mean() {
    let s = schema(&[("stratum", 3)]);
    let (all, sample) = stacked(&s, &[(0, 5, 20), (1, 9, 11), (2, 16, 39)], |l| (l * l) as f64);
    let fit = fit_inclusion_model(&all, &ModelTerms::parse("1", &s).unwrap()).unwrap();
    assert_abs_diff_eq!(fit.predict(&[2]), 30.0 / 100.0, epsilon = 1e-9);
    let ipw = ipw_mean(&sample, &fit, &Grouping::overall(), None).unwrap();
    let unw = unweighted_mean(&build_cell_table(&sample, CellRole::Sample).unwrap(), &Grouping::overall()).unwrap();
    assert_abs_diff_eq!(ipw.get("overall").unwrap().estimate, unw.get("overall").unwrap().estimate, epsilon = 1e-12);
}

#[test]
fn null_covariate_coefficient_is_near_zero() {
    let s = schema(&[("x", 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let codes: Vec<u32> = (0..400).map(|i| i % 2).collect();
        let inc: Vec<bool> = (0..400).map(|_| rng.random::<f64>() < 0.3).collect();
        let data = Microdata::from_codes(Arc::clone(&s), codes, None, None, Some(inc)).unwrap();
        let fit = fit_inclusion_model(&data, &ModelTerms::parse("x", &s).unwrap()).unwrap();
        let z = fit.coefficients[1] / fit.covariance()[(1, 1)].sqrt();
        assert!(z.abs() < 4.0, "z = {z}");
    }
}

/// Finite population with two covariates; inclusion is logistic in both.
struct World {
    schema: Arc<CovariateSchema>,
    codes: Vec<[u32; 2]>,
    y: Vec<f64>,
    pi: Vec<f64>,
    truth: f64,
}

impl World {
    fn new(n: usize, informative: bool, rng: &mut ChaCha8Rng) -> Self {
        let schema = schema(&[("x1", 3), ("x2", 2)]);
        let codes: Vec<[u32; 2]> = (0..n).map(|_| [rng.random_range(0..3), rng.random_range(0..2)]).collect();
        let y: Vec<f64> = codes
            .iter()
            .map(|c| 1.0 + 2.0 * c[0] as f64 - 1.5 * c[1] as f64 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pi = codes
            .iter()
            .map(|c| {
                let eta = if informative { -3.0 + 0.6 * c[0] as f64 - 0.9 * c[1] as f64 } else { -2.5 };
                1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let truth = y.iter().sum::<f64>() / n as f64;
        Self {
            schema,
            codes,
            y,
            pi,
            truth,
        }
    }

    fn population(&self) -> CellTable {
        let mut counts = std::collections::BTreeMap::new();
        for c in &self.codes {
            *counts.entry(CellKey::new(c.to_vec())).or_insert(0u64) += 1;
        }
        CellTable::from_counts(Arc::clone(&self.schema), CellRole::Population, counts).unwrap()
    }

    /// Poisson sample stacked on the rest of the population as reference.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Microdata {
        let inc: Vec<bool> = self.pi.iter().map(|&p| rng.random::<f64>() < p).collect();
        let y = self.y.iter().zip(&inc).map(|(&v, &i)| i.then_some(v)).collect();
        Microdata::from_codes(
            Arc::clone(&self.schema),
            self.codes.iter().flatten().copied().collect(),
            Some(y),
            None,
            Some(inc),
        )
        .unwrap()
    }
}

fn ipw_point(stack: &Microdata, terms: &ModelTerms) -> mrpkit::Result<Vec<f64>> {
    let sample = stack.filter_included(true);
    let fit = fit_inclusion_model(stack, terms)?;
    Ok(vec![ipw_mean(&sample, &fit, &Grouping::overall(), None)?.get("overall").unwrap().estimate])
}

#[test]
fn ipw_is_unbiased_under_mcar() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let world = World::new(10_000, false, &mut rng);
    let terms = ModelTerms::parse("x1 + x2", &world.schema).unwrap();
    let rel: Vec<f64> = (0..1000)
        .map(|_| (ipw_point(&world.draw(&mut rng), &terms).unwrap()[0] - world.truth) / world.truth)
        .collect();
    let (m, sd) = mean_sd(&rel);
    assert!(m.abs() < 3.0 * sd / (rel.len() as f64).sqrt(), "relative bias {m}, MC SE {}", sd / 31.6);
}

#[test]
fn jackknife_tracks_monte_carlo_spread_of_ipw() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let world = World::new(20_000, true, &mut rng);
    let terms = ModelTerms::parse("x1 + x2", &world.schema).unwrap();
    let mut est = Vec::new();
    let mut se = Vec::new();
    for rep in 0..1000 {
        let stack = world.draw(&mut rng);
        est.push(ipw_point(&stack, &terms).unwrap()[0]);
        let jk = jackknife_se(|d| ipw_point(d, &terms), &stack, 20, rep).unwrap();
        assert!(jk.failed.is_empty());
        se.push(jk.se[0]);
    }
    let (_, sd) = mean_sd(&est);
    let avg_se = se.iter().sum::<f64>() / se.len() as f64;
    assert!((avg_se / sd - 1.0).abs() < 0.15, "average jackknife SE {avg_se}, Monte Carlo SD {sd}");
}

fn dr_point(stack: &Microdata, ps_terms: &str, outcome_terms: &str, world: &World, pop: &CellTable) -> f64 {
    let sample = stack.filter_included(true);
    let fit = fit_inclusion_model(stack, &ModelTerms::parse(ps_terms, &world.schema).unwrap()).unwrap();
    let terms = ModelTerms::parse(outcome_terms, &world.schema).unwrap();
    dr_mean(&sample, &fit, &terms, pop, &Grouping::overall())
        .unwrap()
        .get("overall")
        .unwrap()
        .estimate
}

#[test]
fn dr_survives_one_wrong_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let world = World::new(20_000, true, &mut rng);
    let pop = world.population();
    let mut right_outcome = Vec::new();
    let mut right_propensity = Vec::new();
    let mut neither = Vec::new();
    for _ in 0..1000 {
        let stack = world.draw(&mut rng);
        right_outcome.push(dr_point(&stack, "1", "x1 + x2", &world, &pop) - world.truth);
        right_propensity.push(dr_point(&stack, "x1 + x2", "x1", &world, &pop) - world.truth);
        neither.push(dr_point(&stack, "1", "x1", &world, &pop) - world.truth);
    }
    for (name, err) in [("wrong propensities", &right_outcome), ("wrong outcome model", &right_propensity)] {
        let (m, sd) = mean_sd(err);
        assert!(m.abs() < 3.0 * sd / (err.len() as f64).sqrt(), "{name}: bias {m}, MC SE {}", sd / 31.6);
    }
    // both wrong is visibly biased
    let (m, sd) = mean_sd(&neither);
    assert!(m.abs() > 10.0 * sd / (neither.len() as f64).sqrt());
}

#[test]
fn zero_residuals_leave_the_prediction() {
    let s = schema(&[("a", 3)]);
    let codes: Vec<u32> = (0..30).map(|i| i % 3).collect();
    let y: Vec<Option<f64>> = codes.iter().map(|&c| Some(2.0 + 3.0 * c as f64)).collect();
    let data = Microdata::from_codes(Arc::clone(&s), codes.clone(), Some(y), None, None).unwrap();
    let inc: Vec<bool> = (0..60).map(|i| i < 30).collect();
    let stack_codes: Vec<u32> = codes.iter().chain(codes.iter()).copied().collect();
    let stack = Microdata::from_codes(Arc::clone(&s), stack_codes, None, None, Some(inc)).unwrap();
    let fit = fit_inclusion_model(&stack, &ModelTerms::parse("a", &s).unwrap()).unwrap();
    let pop = CellTable::from_counts(
        Arc::clone(&s),
        CellRole::Population,
        [(CellKey::new(vec![0]), 100), (CellKey::new(vec![1]), 300), (CellKey::new(vec![2]), 600)],
    )
    .unwrap();
    let dr = dr_mean(&data, &fit, &ModelTerms::parse("a", &s).unwrap(), &pop, &Grouping::overall()).unwrap();
    assert_abs_diff_eq!(dr.get("overall").unwrap().estimate, 0.1 * 2.0 + 0.3 * 5.0 + 0.6 * 8.0, epsilon = 1e-10);
}

#[test]
fn weighted_estimates_are_scale_invariant() {
    let s = schema(&[("stratum", 2)]);
    let (all, sample) = stacked(&s, &[(0, 12, 30), (1, 25, 40)], |l| 3.0 * l as f64 - 1.0);
    let fit = fit_inclusion_model(&all, &ModelTerms::parse("stratum", &s).unwrap()).unwrap();
    let base = ipw_mean(&sample, &fit, &Grouping::overall(), None).unwrap().get("overall").unwrap().estimate;
    let w: Vec<f64> = (0..sample.len()).map(|i| 1.0 / fit.predict(sample.codes(i))).collect();
    for scale in [1e-3, 7.0, 1e4] {
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let est = mrpkit::estimators::weighted_mean(&sample, &scaled, &Grouping::overall(), "IPW").unwrap();
        assert_abs_diff_eq!(est.get("overall").unwrap().estimate, base, epsilon = 1e-12);
    }
}
