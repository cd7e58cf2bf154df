use std::collections::BTreeMap;

use mrpkit::cells::CellKey;
use mrpkit::sim::{draw_samples, generate_population, run_study, Scenario, SimConfig, AGE_PROBS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SimConfig {
    SimConfig {
        population_size: 5000,
        n_nonprob: 300,
        n_ref: 200,
        ..SimConfig::default()
    }
}

#[test]
fn zero_noise_makes_cells_homogeneous() {
    let cfg = SimConfig {
        noise_sd: 0.0,
        ..small()
    };
    let pop = generate_population(&cfg).unwrap();
    for row in pop.cells.rows() {
        if let Some(v) = row.variance {
            assert!(v < 1e-20, "cell {} has variance {v}", row.key);
        }
    }
}

#[test]
fn default_population_hits_the_internet_share() {
    let pop = generate_population(&SimConfig::default()).unwrap();
    let n = pop.internet.len() as f64;
    let share = pop.internet.iter().filter(|&&b| b).count() as f64 / n;
    let se = (0.65f64 * 0.35 / n).sqrt();
    assert!((share - 0.65).abs() < 3.0 * se, "internet share {share}");
    let mean = pop.data.outcomes().iter().map(|y| y.unwrap()).sum::<f64>() / n;
    // intercept centres the linear predictor; only the noise moves the mean
    let cfg = SimConfig::default();
    assert!((mean - cfg.outcome_mean).abs() < 4.0 * cfg.noise_sd / n.sqrt());
}

#[test]
fn generation_and_sampling_are_deterministic() {
    let a = generate_population(&small()).unwrap();
    let b = generate_population(&small()).unwrap();
    assert_eq!(a.data.outcomes(), b.data.outcomes());
    assert_eq!(a.internet, b.internet);
    let draw = |pop| draw_samples(pop, &small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (s1, r1) = draw(&a);
    let (s2, r2) = draw(&b);
    assert_eq!(s1.outcomes(), s2.outcomes());
    assert_eq!(r1.weights(), r2.weights());
    let other = generate_population(&SimConfig { seed: 2, ..small() }).unwrap();
    assert_ne!(a.data.outcomes(), other.data.outcomes());
}

#[test]
fn equal_rates_sample_internet_users_proportionally() {
    let cfg = SimConfig {
        strata_rates: vec![1.0; 6],
        ..small()
    };
    let pop = generate_population(&cfg).unwrap();
    let mut m = vec![0usize; AGE_PROBS.len()];
    for i in (0..pop.data.len()).filter(|&i| pop.internet[i]) {
        m[pop.data.code(i, 0) as usize] += 1;
    }
    let total: usize = m.iter().sum();
    for (h, &mh) in m.iter().enumerate() {
        let ideal = cfg.n_nonprob as f64 * mh as f64 / total as f64;
        assert!((pop.allocation[h] as f64 - ideal).abs() < 1.0);
    }
    let (sample, reference) = draw_samples(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(sample.len(), cfg.n_nonprob);
    assert_eq!(reference.len(), cfg.n_ref);
    assert!(!reference.has_outcome());
    let w: f64 = reference.weights().unwrap().iter().sum();
    assert!((w - cfg.population_size as f64).abs() < 1e-9);
}

#[test]
fn expected_cell_sizes_follow_inclusion_rates() {
    let cfg = small();
    let pop = generate_population(&cfg).unwrap();
    let spec = pop.spec(1.0).unwrap();
    let reps = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sums: BTreeMap<CellKey, (f64, f64)> = BTreeMap::new();
    let keys: Vec<CellKey> = pop.cells.rows().iter().map(|r| r.key.clone()).collect();
    for _ in 0..reps {
        let (sample, _) = draw_samples(&pop, &cfg, &mut rng).unwrap();
        let mut n: BTreeMap<CellKey, f64> = BTreeMap::new();
        for i in 0..sample.len() {
            *n.entry(sample.key(i)).or_default() += 1.0;
        }
        for k in &keys {
            let c = n.get(k).copied().unwrap_or(0.0);
            let e = sums.entry(k.clone()).or_default();
            e.0 += c;
            e.1 += c * c;
        }
    }
    assert_eq!(spec.cells().len(), keys.len());
    let mut worst = 0.0f64;
    for (k, c) in keys.iter().zip(spec.cells()) {
        let (s, ss) = sums[k];
        let mean = s / reps as f64;
        let var = ss / reps as f64 - mean * mean;
        let expected = c.size as f64 * c.psi;
        if var <= 0.0 {
            assert!((mean - expected).abs() < 1e-9, "cell {k}");
            continue;
        }
        let z = (mean - expected).abs() / (var / reps as f64).sqrt();
        worst = worst.max(z);
    }
    // Bonferroni-scale bound over several hundred cells
    assert!(worst < 4.5, "largest cell deviation {worst:.2} SE");
}

#[test]
fn unweighted_mean_covers_under_mcar() {
    let cfg = SimConfig {
        population_size: 5000,
        n_nonprob: 200,
        n_ref: 100,
        internet_fraction: 1.0,
        strata_rates: vec![1.0; 6],
        // the SE is conditional on cell counts, so keep between-cell spread small
        coefficient_range: [0, 0],
        replications: 1000,
        methods: vec!["UnW".into()],
        ..SimConfig::default()
    };
    let report = run_study(&cfg).unwrap();
    let row = report.row("UnW", "overall").unwrap();
    assert_eq!(row.replications, 1000);
    assert!((0.92..=0.98).contains(&row.coverage), "coverage {}", row.coverage);
}

#[test]
fn config_round_trips_and_rejects_typos() {
    let cfg = SimConfig {
        scenario: Scenario::Incorrect,
        replications: 7,
        methods: vec!["PS".into(), "MRP-R".into()],
        ..SimConfig::default()
    };
    assert_eq!(SimConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(SimConfig::from_toml("replicatons = 3").is_err());
    assert!(SimConfig::from_toml("methods = [\"XYZ\"]").is_err());
    assert!(SimConfig::from_toml("warmup = 5000").is_err());
}
