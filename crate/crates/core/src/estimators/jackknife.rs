use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::Microdata;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeResult {
    /// One standard error per component of the estimator output.
    pub se: Vec<f64>,
    /// Replicate groups whose leave-one-out estimate failed or was non-finite.
    pub failed: Vec<usize>,
    pub seed: u64,
    pub n_groups: usize,
}

/// Delete-a-group jackknife standard errors of a vector-valued estimator.
///
/// Units are shuffled with the seeded generator and dealt round-robin into
/// `n_groups` replicate groups.
pub fn jackknife_se<F>(estimator: F, sample: &Microdata, n_groups: usize, seed: u64) -> Result<JackknifeResult>
where
    F: Fn(&Microdata) -> Result<Vec<f64>>,
{
    jackknife_se_masked(estimator, sample, &vec![true; sample.len()], n_groups, seed)
}

/// As [`jackknife_se`], but only units with `mask[i]` are deleted; the rest
/// are kept in every replicate.
pub fn jackknife_se_masked<F>(
    estimator: F,
    sample: &Microdata,
    mask: &[bool],
    n_groups: usize,
    seed: u64,
) -> Result<JackknifeResult>
where
    F: Fn(&Microdata) -> Result<Vec<f64>>,
{
    if n_groups < 2 {
        return Err(Error::config("the jackknife needs at least 2 replicate groups"));
    }
    if mask.len() != sample.len() {
        return Err(Error::data("jackknife mask length differs from sample size"));
    }
    let mut eligible: Vec<usize> = (0..sample.len()).filter(|&i| mask[i]).collect();
    if eligible.len() < n_groups {
        return Err(Error::config(format!(
            "{} units cannot form {n_groups} replicate groups",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut group_of = vec![usize::MAX; sample.len()];
    for (k, &i) in eligible.iter().enumerate() {
        group_of[i] = k % n_groups;
    }

    let mut replicates: Vec<Vec<f64>> = Vec::with_capacity(n_groups);
    let mut failed = Vec::new();
    let mut width = None;
    for g in 0..n_groups {
        let keep: Vec<usize> = (0..sample.len()).filter(|&i| group_of[i] != g).collect();
        match estimator(&sample.subset(&keep)) {
            Ok(v) => {
                width.get_or_insert(v.len());
                replicates.push(v);
            }
            Err(_) => {
                failed.push(g);
                replicates.push(Vec::new());
            }
        }
    }
    let width = width.ok_or_else(|| Error::numerical("every jackknife replicate failed"))?;
    let mut se = vec![f64::NAN; width];
    for (c, slot) in se.iter_mut().enumerate() {
        let values: Vec<f64> = replicates
            .iter()
            .filter_map(|r| r.get(c).copied())
            .filter(|v| v.is_finite())
            .collect();
        let g = values.len();
        if g < 2 {
            continue;
        }
        let mean = values.iter().sum::<f64>() / g as f64;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        *slot = ((g - 1) as f64 / g as f64 * ss).sqrt();
    }
    for (g, r) in replicates.iter().enumerate() {
        if !failed.contains(&g) && (r.len() != width || r.iter().any(|v| !v.is_finite())) {
            failed.push(g);
        }
    }
    failed.sort_unstable();
    Ok(JackknifeResult {
        se,
        failed,
        seed,
        n_groups,
    })
}
