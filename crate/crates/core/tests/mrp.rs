use std::collections::BTreeMap;
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mrpkit::cells::{build_cell_table, CellKey, CellRole, CellRow, CellTable, CovariateSchema, Grouping, Microdata};
use mrpkit::estimators::poststratified_mean;
use mrpkit::mrp::{
    mrp_estimate, poststratify_draws, shrinkage_estimate, shrunken_cell_means, CellWeights, MrpOptions, MrpVariant,
    PsiPredictor,
};
use mrpkit::sim::{draw_samples, generate_population, SimConfig, CORRECT_MODEL};
use mrpkit::{McmcConfig, ModelTerms, OutcomeModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn keys(n: usize) -> Vec<CellKey> {
    (0..n as u32).map(|i| CellKey::new(vec![i])).collect()
}

#[test]
fn psi_groups_follow_rounding() {
    let values: BTreeMap<CellKey, f64> = keys(3).into_iter().zip([0.12, 0.14, 0.31]).collect();
    let p = PsiPredictor::new(values, 1).unwrap();
    assert_eq!(p.n_groups(), 2);
    assert_eq!(p.group_labels(), vec!["0.1", "0.3"]);
    let k = keys(3);
    assert_eq!((p.group(&k[0]), p.group(&k[1]), p.group(&k[2])), (Some(0), Some(0), Some(1)));

    let same: BTreeMap<CellKey, f64> = keys(5).into_iter().map(|k| (k, 0.42)).collect();
    assert_eq!(PsiPredictor::new(same, 2).unwrap().n_groups(), 1);
}

#[test]
fn psi_partition_matches_rounding_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for digits in [1, 2] {
        let values: BTreeMap<CellKey, f64> = keys(200).into_iter().map(|k| (k, rng.random_range(0.001..0.999))).collect();
        let p = PsiPredictor::new(values.clone(), digits).unwrap();
        let scale = 10f64.powi(digits as i32);
        let rounded: BTreeMap<&CellKey, i64> = values.iter().map(|(k, v)| (k, (v * scale).round() as i64)).collect();
        for (a, ra) in &rounded {
            for (b, rb) in &rounded {
                assert_eq!(p.group(a) == p.group(b), ra == rb);
            }
        }
        let mut distinct: Vec<i64> = rounded.values().copied().collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(p.n_groups(), distinct.len());
    }
}

#[test]
fn shrinkage_arithmetic() {
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 2)]).unwrap());
    let row = |l: u32, mean: f64| CellRow {
        key: CellKey::new(vec![l]),
        count: 4,
        mean: Some(mean),
        variance: Some(1.0),
    };
    let sample = CellTable::new(Arc::clone(&schema), CellRole::Sample, vec![row(0, 2.0), row(1, -2.0)]).unwrap();
    let (theta, delta) = shrunken_cell_means(&sample, 0.5).unwrap();
    assert_abs_diff_eq!(delta[0], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(theta[0], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(theta[1], -1.0, epsilon = 1e-15);
}

#[test]
fn diffuse_shrinkage_is_poststratification() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 3), ("b", 2)]).unwrap());
    let codes: Vec<u32> = (0..150).flat_map(|i| [i % 3, (i / 3) % 2]).collect();
    let y: Vec<Option<f64>> = (0..150).map(|_| Some(rng.random_range(0.0..5.0))).collect();
    let data = Microdata::from_codes(Arc::clone(&schema), codes, Some(y), None, None).unwrap();
    let sample = build_cell_table(&data, CellRole::Sample).unwrap();
    let pop = CellTable::from_counts(Arc::clone(&schema), CellRole::Population, schema.all_keys().map(|k| (k, rng.random_range(10..100)))).unwrap();
    let groups = Grouping::overall_and_levels(&schema, "a").unwrap();
    let ps = poststratified_mean(&sample, &pop, &groups).unwrap();
    let mut previous = f64::INFINITY;
    for sigma_theta in [1.0, 10.0, 100.0, 1e4] {
        let shr = shrinkage_estimate(&sample, &pop, sigma_theta, &groups).unwrap();
        let gap = groups
            .labels()
            .iter()
            .map(|g| (shr.get(g).unwrap().estimate - ps.get(g).unwrap().estimate).abs())
            .fold(0.0, f64::max);
        assert!(gap <= previous);
        previous = gap;
    }
    assert!(previous < 1e-6);
}

#[test]
fn poststratified_draws_match_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 3), ("b", 4)]).unwrap());
    let keys: Vec<CellKey> = schema.all_keys().collect();
    let groups = Grouping::overall_and_levels(&schema, "b").unwrap();
    let draws: Vec<Vec<f64>> = (0..50).map(|_| (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let fixed: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..50.0)).collect();
    let per: Vec<Vec<f64>> = (0..50).map(|_| (0..12).map(|_| rng.random_range(0.0..50.0)).collect()).collect();
    for weights in [CellWeights::Fixed(fixed.clone()), CellWeights::PerDraw(per.clone())] {
        let out = poststratify_draws(&draws, &keys, &weights, &groups).unwrap();
        for (g, group) in groups.groups().iter().enumerate() {
            for d in 0..50 {
                let w = match &weights {
                    CellWeights::Fixed(w) => w,
                    CellWeights::PerDraw(w) => &w[d],
                };
                let mask: Vec<f64> = keys.iter().map(|k| group.contains(k) as u8 as f64).collect();
                let num: f64 = (0..12).map(|j| mask[j] * w[j] * draws[d][j]).sum();
                let den: f64 = (0..12).map(|j| mask[j] * w[j]).sum();
                assert_abs_diff_eq!(out[g][d], num / den, epsilon = 1e-12);
            }
        }
    }
    // equal weights give plain averages; one cell per group is the identity
    let eq = poststratify_draws(&draws, &keys, &CellWeights::Fixed(vec![1.0; 12]), &Grouping::overall()).unwrap();
    for d in 0..50 {
        assert_abs_diff_eq!(eq[0][d], draws[d].iter().sum::<f64>() / 12.0, epsilon = 1e-12);
    }
    let one = Arc::new(CovariateSchema::numbered(&[("a", 12)]).unwrap());
    let single = poststratify_draws(&draws, &one.all_keys().collect::<Vec<_>>(), &CellWeights::Fixed(fixed), &Grouping::overall_and_levels(&one, "a").unwrap()).unwrap();
    for j in 0..12 {
        for d in 0..50 {
            assert_abs_diff_eq!(single[j + 1][d], draws[d][j], epsilon = 1e-12);
        }
    }
}

fn small_world() -> (Microdata, Microdata, CellTable) {
    let cfg = SimConfig {
        population_size: 8000,
        n_nonprob: 500,
        n_ref: 400,
        ..SimConfig::default()
    };
    let pop = generate_population(&cfg).unwrap();
    let (sample, reference) = draw_samples(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    (sample, reference, pop.cells)
}

#[test]
fn every_variant_reports_every_group() {
    let (sample, reference, cells) = small_world();
    let groups = Grouping::overall_and_levels(sample.schema(), "age").unwrap();
    let spec = OutcomeModelSpec::new(ModelTerms::parse(CORRECT_MODEL, sample.schema()).unwrap());
    let cfg = McmcConfig::default();
    let opts = MrpOptions {
        synthetic_populations: 10,
        ..MrpOptions::default()
    };
    for variant in MrpVariant::ALL {
        let r = mrp_estimate(variant, &sample, Some(&cells), Some(&reference), &spec, &cfg, &groups, &opts).unwrap();
        assert_eq!(r.estimates.summaries.len(), groups.len(), "{variant}");
        for (s, d) in r.estimates.summaries.iter().zip(&r.group_draws) {
            assert_eq!(d.len(), 2 * 1000);
            assert!(s.ci_low < s.estimate && s.estimate < s.ci_high && s.se > 0.0);
            assert_eq!(s.method, variant.tag());
        }
        assert!(r.max_rhat < 1.05, "{variant}: R-hat {}", r.max_rhat);
    }
}

#[test]
fn sample_and_population_variants_coincide_under_full_coverage() {
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 2), ("b", 3)]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codes: Vec<u32> = (0..300).flat_map(|i| [i % 2, (i / 2) % 3]).collect();
    let y: Vec<Option<f64>> = codes.chunks(2).map(|c| Some(c[0] as f64 + c[1] as f64 + rng.random::<f64>())).collect();
    let data = Microdata::from_codes(Arc::clone(&schema), codes, Some(y), None, None).unwrap();
    let pop = CellTable::from_counts(Arc::clone(&schema), CellRole::Population, schema.all_keys().map(|k| (k, rng.random_range(100..1000)))).unwrap();
    let spec = OutcomeModelSpec::new(ModelTerms::parse("a + b", &schema).unwrap());
    let groups = Grouping::overall_and_levels(&schema, "b").unwrap();
    let run = |v| {
        mrp_estimate(v, &data, Some(&pop), None, &spec, &McmcConfig::default(), &groups, &MrpOptions::default()).unwrap()
    };
    let (s, p) = (run(MrpVariant::S), run(MrpVariant::P));
    for g in groups.labels() {
        assert_eq!(s.estimates.get(&g).unwrap().estimate, p.estimates.get(&g).unwrap().estimate);
    }
}

#[test]
fn missing_inputs_are_usage_errors() {
    let (sample, _, cells) = small_world();
    let spec = OutcomeModelSpec::new(ModelTerms::main_effects(sample.schema()));
    let cfg = McmcConfig {
        iterations: 200,
        warmup: 100,
        ..McmcConfig::default()
    };
    let g = Grouping::overall();
    let o = MrpOptions::default();
    let err = mrp_estimate(MrpVariant::R, &sample, Some(&cells), None, &spec, &cfg, &g, &o).unwrap_err();
    assert_eq!(err.kind(), mrpkit::ErrorKind::Usage);
    let err = mrp_estimate(MrpVariant::P, &sample, None, None, &spec, &cfg, &g, &o).unwrap_err();
    assert_eq!(err.kind(), mrpkit::ErrorKind::Usage);
}

proptest! {
    #[test]
    fn shrunken_means_lie_between_cell_and_sample_mean(
        means in prop::collection::vec(-10.0f64..10.0, 2..8),
        sigma_theta in 0.05f64..20.0,
    ) {
        let schema = Arc::new(CovariateSchema::numbered(&[("a", means.len())]).unwrap());
        let rows: Vec<CellRow> = means.iter().enumerate().map(|(j, &m)| CellRow {
            key: CellKey::new(vec![j as u32]),
            count: 3 + j as u64,
            mean: Some(m),
            variance: Some(1.0 + j as f64),
        }).collect();
        let n: f64 = rows.iter().map(|r| r.count as f64).sum();
        let grand: f64 = rows.iter().map(|r| r.count as f64 * r.mean.unwrap()).sum::<f64>() / n;
        let sample = CellTable::new(schema, CellRole::Sample, rows).unwrap();
        let (theta, _) = shrunken_cell_means(&sample, sigma_theta).unwrap();
        for (t, m) in theta.iter().zip(&means) {
            prop_assert!(*t >= m.min(grand) - 1e-12 && *t <= m.max(grand) + 1e-12);
        }
    }
}
