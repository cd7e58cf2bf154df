//! Weighted finite population Bayesian bootstrap.
//!
//! A weighted reference sample is turned into synthetic populations of size
//! `N` in two stages: a Bayesian bootstrap resample of the parent units,
//! then a weighted Pólya urn that draws the `N - n` non-observed units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use rayon::prelude::*;

use crate::cells::{CellKey, CellRole, CellTable, Microdata};
use crate::error::{Error, Result};
use crate::estimators::WeightVector;

/// One Bayesian bootstrap resample of the parent sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReplicate {
    /// Number of copies `r_i` of each parent unit; sums to `n`.
    pub counts: Vec<u32>,
    /// Recalibrated weights `w_i^l`; sum to `N`, zero where `r_i = 0`.
    pub weights: Vec<f64>,
}

/// Replicate counts for `l` Bayesian bootstrap resamples of `n` units.
///
/// Each replicate is a multinomial draw of size `n` with uniform-Dirichlet
/// cell probabilities.
pub fn bayesian_bootstrap<R: Rng + ?Sized>(n: usize, l: usize, rng: &mut R) -> Result<Vec<Vec<u32>>> {
    if n == 0 || l == 0 {
        return Err(Error::config("the Bayesian bootstrap needs n >= 1 and L >= 1"));
    }
    Ok((0..l).map(|_| bootstrap_counts(n, rng)).collect())
}

fn bootstrap_counts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u32> {
    let g: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let mut mass_left: f64 = g.iter().sum();
    let mut left = n as u64;
    let mut counts = vec![0u32; n];
    for (i, gi) in g.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == n {
            counts[i] = left as u32;
            break;
        }
        let p = (gi / mass_left).clamp(0.0, 1.0);
        let k = Binomial::new(left, p).expect("valid binomial").sample(rng);
        counts[i] = k as u32;
        left -= k;
        mass_left -= gi;
    }
    counts
}

/// `w_i^l = N w_i r_i / Σ_j w_j r_j`.
pub fn recalibrate_weights(base: &WeightVector, counts: &[u32], population_size: u64) -> Result<BootstrapReplicate> {
    if counts.len() != base.len() {
        return Err(Error::data("replicate counts and base weights differ in length"));
    }
    let total: f64 = base
        .as_slice()
        .iter()
        .zip(counts)
        .map(|(w, &r)| w * r as f64)
        .sum();
    if total <= 0.0 {
        return Err(Error::data("all replicate counts are zero"));
    }
    let scale = population_size as f64 / total;
    let weights = base
        .as_slice()
        .iter()
        .zip(counts)
        .map(|(w, &r)| scale * w * r as f64)
        .collect();
    Ok(BootstrapReplicate {
        counts: counts.to_vec(),
        weights,
    })
}

/// Binary indexed tree over non-negative weights with prefix-sum search.
#[derive(Debug, Clone)]
struct FenwickTree {
    tree: Vec<f64>,
}

impl FenwickTree {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; n + 1];
        for (i, v) in values.iter().enumerate() {
            tree[i + 1] += v;
            let parent = (i + 1) + ((i + 1) & (i + 1).wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i + 1];
            }
        }
        Self { tree }
    }

    fn add(&mut self, index: usize, delta: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.tree.len() - 1;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Weighted Pólya urn seeded with a bootstrap replicate.
///
/// At draw `k` unit `i` is selected with probability proportional to
/// `w_i^l - r_i + l_{i,k-1} (N - n)/n`, where `l_{i,k-1}` counts its earlier
/// selections. With one copy per unit this is the usual urn
/// `(w_i^l - 1 + l_{i,k-1}(N-n)/n) / (N - n + (k-1)(N-n)/n)`.
/// Negative numerators are clamped at zero.
#[derive(Debug, Clone)]
pub struct PolyaUrn {
    base: Vec<f64>,
    selections: Vec<u64>,
    step: f64,
    tree: FenwickTree,
    clamped: usize,
}

impl PolyaUrn {
    pub fn new(replicate: &BootstrapReplicate, population_size: u64) -> Result<Self> {
        let n: u64 = replicate.counts.iter().map(|&r| r as u64).sum();
        if population_size <= n {
            return Err(Error::config(format!(
                "population size {population_size} must exceed the sample size {n}"
            )));
        }
        let step = (population_size - n) as f64 / n as f64;
        let base: Vec<f64> = replicate
            .weights
            .iter()
            .zip(&replicate.counts)
            .map(|(w, &r)| if r == 0 { 0.0 } else { w - r as f64 })
            .collect();
        let clamped = replicate
            .counts
            .iter()
            .zip(&base)
            .filter(|(&r, &b)| r > 0 && b < 0.0)
            .count();
        let initial: Vec<f64> = base.iter().map(|b| b.max(0.0)).collect();
        Ok(Self {
            tree: FenwickTree::new(&initial),
            selections: vec![0; base.len()],
            base,
            step,
            clamped,
        })
    }

    fn numerator(&self, i: usize) -> f64 {
        (self.base[i] + self.selections[i] as f64 * self.step).max(0.0)
    }

    /// Selection probabilities for the next draw.
    pub fn probabilities(&self) -> Vec<f64> {
        let num: Vec<f64> = (0..self.base.len()).map(|i| self.numerator(i)).collect();
        let total: f64 = num.iter().sum();
        num.into_iter().map(|v| v / total).collect()
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let total = self.tree.total();
        let mut i = self.tree.find(rng.random::<f64>() * total);
        if self.numerator(i) <= 0.0 {
            // rounding pushed the target past the last positive entry
            i = (0..self.base.len()).rev().find(|&j| self.numerator(j) > 0.0).unwrap_or(i);
        }
        let before = self.numerator(i);
        self.selections[i] += 1;
        self.tree.add(i, self.numerator(i) - before);
        i
    }

    /// Number of earlier selections of every unit.
    pub fn selections(&self) -> &[u64] {
        &self.selections
    }

    /// Units whose numerator was clamped at zero.
    pub fn clamped_units(&self) -> usize {
        self.clamped
    }
}

/// Parent-unit multiplicities of one synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub multiplicity: Vec<u64>,
    pub clamped_units: usize,
}

impl SyntheticPopulation {
    pub fn size(&self) -> u64 {
        self.multiplicity.iter().sum()
    }

    /// Population cell counts `N̂_j` implied by the parent covariates.
    pub fn cell_counts(&self, parent: &Microdata) -> Result<CellTable> {
        if parent.len() != self.multiplicity.len() {
            return Err(Error::data("synthetic population and parent sample differ in size"));
        }
        let mut counts = std::collections::BTreeMap::<CellKey, u64>::new();
        for (i, &m) in self.multiplicity.iter().enumerate() {
            if m > 0 {
                *counts.entry(parent.key(i)).or_default() += m;
            }
        }
        CellTable::from_counts(parent.schema().clone(), CellRole::Population, counts)
    }
}

/// Runs the `N - n` Pólya draws on top of the bootstrap sample.
pub fn polya_urn_expand<R: Rng + ?Sized>(
    replicate: &BootstrapReplicate,
    population_size: u64,
    rng: &mut R,
) -> Result<SyntheticPopulation> {
    let mut urn = PolyaUrn::new(replicate, population_size)?;
    let n: u64 = replicate.counts.iter().map(|&r| r as u64).sum();
    for _ in 0..(population_size - n) {
        urn.draw(rng);
    }
    Ok(SyntheticPopulation {
        multiplicity: replicate
            .counts
            .iter()
            .zip(urn.selections())
            .map(|(&r, &l)| r as u64 + l)
            .collect(),
        clamped_units: urn.clamped_units(),
    })
}

pub fn estimate_pop_cells(populations: &[SyntheticPopulation], parent: &Microdata) -> Result<Vec<CellTable>> {
    populations.iter().map(|p| p.cell_counts(parent)).collect()
}

/// Full WFPBB: `l` synthetic populations from a weighted reference sample.
///
/// Replicate `k` uses its own ChaCha stream of `seed`, so the output does
/// not depend on how replicates are scheduled across threads.
pub fn synthetic_populations(
    reference: &Microdata,
    population_size: u64,
    l: usize,
    seed: u64,
) -> Result<Vec<SyntheticPopulation>> {
    if reference.is_empty() || l == 0 {
        return Err(Error::config("WFPBB needs a non-empty reference sample and L >= 1"));
    }
    let base = WeightVector::new((0..reference.len()).map(|i| reference.weight(i)).collect())?;
    (0..l)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let counts = bootstrap_counts(reference.len(), &mut rng);
            let replicate = recalibrate_weights(&base, &counts, population_size)?;
            polya_urn_expand(&replicate, population_size, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenwick_prefix_search() {
        let t = FenwickTree::new(&[1.0, 0.0, 2.0, 3.0, 0.5]);
        assert!((t.total() - 6.5).abs() < 1e-15);
        assert_eq!(t.find(0.5), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(2.99), 2);
        assert_eq!(t.find(3.0), 3);
        assert_eq!(t.find(6.4), 4);
    }

    #[test]
    fn single_unit_bootstrap_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = bayesian_bootstrap(1, 5, &mut rng).unwrap();
        assert!(reps.iter().all(|r| r == &vec![1]));
    }

    #[test]
    fn recalibration_arithmetic() {
        let base = WeightVector::new(vec![2.0, 1.0, 1.0]).unwrap();
        let r = recalibrate_weights(&base, &[1, 1, 1], 40).unwrap();
        assert_eq!(r.weights, vec![20.0, 10.0, 10.0]);
    }

    #[test]
    fn equal_weights_start_uniform() {
        let base = WeightVector::uniform(4, 5.0).unwrap();
        let r = recalibrate_weights(&base, &[1, 1, 1, 1], 20).unwrap();
        let urn = PolyaUrn::new(&r, 20).unwrap();
        for p in urn.probabilities() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn small_weights_are_clamped() {
        let base = WeightVector::new(vec![10.0, 0.05]).unwrap();
        let r = recalibrate_weights(&base, &[1, 1], 5).unwrap();
        let urn = PolyaUrn::new(&r, 5).unwrap();
        assert_eq!(urn.clamped_units(), 1);
        let p = urn.probabilities();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 1.0).abs() < 1e-15);
    }
}
