use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use mrpkit::cells::{align_cells, build_cell_table, CellKey, CellRole, CellTable, CovariateSchema, Microdata};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_units_match_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 2), ("b", 3)]).unwrap());
    let mut codes = Vec::new();
    let mut ys = Vec::new();
    let mut oracle: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for _ in 0..200 {
        let (a, b) = (rng.random_range(0..2), rng.random_range(0..3));
        let y = rng.random_range(-10.0..10.0);
        codes.extend([a, b]);
        ys.push(Some(y));
        oracle.entry((a, b)).or_default().push(y);
    }
    let data = Microdata::from_codes(Arc::clone(&schema), codes, Some(ys), None, None).unwrap();
    let table = build_cell_table(&data, CellRole::Sample).unwrap();
    assert_eq!(table.len(), oracle.len());
    assert_eq!(table.total_count(), 200);
    for ((a, b), ys) in &oracle {
        let row = table.get(&CellKey::new(vec![*a, *b])).unwrap();
        let n = ys.len() as f64;
        let m = ys.iter().sum::<f64>() / n;
        assert_eq!(row.count, ys.len() as u64);
        assert!((row.mean.unwrap() - m).abs() < 1e-12);
        if ys.len() > 1 {
            let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((row.variance.unwrap() - v).abs() < 1e-12);
        } else {
            assert_eq!(row.variance, None);
        }
    }
}

#[test]
fn alignment_matches_set_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 3), ("b", 4), ("c", 5)]).unwrap());
    assert_eq!(schema.n_cells(), 60);
    for _ in 0..50 {
        let pick = |rng: &mut ChaCha8Rng| -> BTreeSet<CellKey> {
            schema.all_keys().filter(|_| rng.random::<f64>() < 0.4).collect()
        };
        let (sa, sb) = (pick(&mut rng), pick(&mut rng));
        let table = |keys: &BTreeSet<CellKey>, role| {
            CellTable::from_counts(Arc::clone(&schema), role, keys.iter().map(|k| (k.clone(), 3))).unwrap()
        };
        let al = align_cells(&table(&sa, CellRole::Sample), &table(&sb, CellRole::Population)).unwrap();
        assert_eq!(al.shared, sa.intersection(&sb).cloned().collect::<Vec<_>>());
        assert_eq!(al.population_only, sb.difference(&sa).cloned().collect::<Vec<_>>());
        assert_eq!(al.sample_only, sa.difference(&sb).cloned().collect::<Vec<_>>());
    }
}

#[test]
fn identical_key_sets_align_completely() {
    let schema = Arc::new(CovariateSchema::numbered(&[("a", 4)]).unwrap());
    let t = CellTable::from_counts(Arc::clone(&schema), CellRole::Population, schema.all_keys().map(|k| (k, 5))).unwrap();
    let al = align_cells(&t, &t).unwrap();
    assert_eq!(al.shared.len(), 4);
    assert!(al.population_only.is_empty() && al.sample_only.is_empty());
}

#[test]
fn labels_resolve_to_codes() {
    let schema = Arc::new(
        CovariateSchema::new(vec![("sex", vec!["f", "m"]), ("region", vec!["north", "south", "west"])]).unwrap(),
    );
    let data = Microdata::from_labels(
        Arc::clone(&schema),
        &[vec!["m", "west"], vec!["f", "north"], vec!["m", "west"]],
        Some(vec![Some(1.0), Some(2.0), Some(5.0)]),
        None,
        None,
    )
    .unwrap();
    let table = build_cell_table(&data, CellRole::Sample).unwrap();
    let row = table.get(&CellKey::new(vec![1, 2])).unwrap();
    assert_eq!((row.count, row.mean), (2, Some(3.0)));
    assert_eq!(schema.labels(&row.key), vec!["m", "west"]);
}

proptest! {
    #[test]
    fn linear_index_is_a_bijection(levels in prop::collection::vec(1usize..5, 1..4)) {
        let vars: Vec<(String, usize)> = levels.iter().enumerate().map(|(i, &l)| (format!("v{i}"), l)).collect();
        let named: Vec<(&str, usize)> = vars.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        let schema = CovariateSchema::numbered(&named).unwrap();
        let keys: Vec<CellKey> = schema.all_keys().collect();
        prop_assert_eq!(keys.len(), levels.iter().product::<usize>());
        for (i, k) in keys.iter().enumerate() {
            prop_assert_eq!(schema.linear_index(k), i);
            prop_assert_eq!(&schema.key_at(i), k);
        }
    }

    #[test]
    fn counts_sum_to_units(codes in prop::collection::vec((0u32..3, 0u32..2), 0..80)) {
        let schema = Arc::new(CovariateSchema::numbered(&[("a", 3), ("b", 2)]).unwrap());
        let flat: Vec<u32> = codes.iter().flat_map(|&(a, b)| [a, b]).collect();
        let data = Microdata::from_codes(schema, flat, None, None, None).unwrap();
        let table = mrpkit::cells::count_cells(&data, CellRole::Population).unwrap();
        prop_assert_eq!(table.total_count(), codes.len() as u64);
        let distinct: BTreeSet<_> = codes.iter().collect();
        prop_assert_eq!(table.len(), distinct.len());
    }
}
