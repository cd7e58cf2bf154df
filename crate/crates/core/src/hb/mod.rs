//! MCMC engine: blocked Gibbs for the hierarchical linear outcome model and
//! adaptive random-walk Metropolis for the Bayesian logistic inclusion model.

mod linear;
mod logistic;

pub use linear::{sample_posterior_linear, ErrorFamily, LinearPosterior, OutcomeModelSpec, PriorSpec};
pub use logistic::{sample_posterior_logistic, LogisticPosterior, LogisticPrior};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{batch_mcse, mean, median};

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Initial multiplier of the `2.38/√p` random-walk scale (logistic sampler).
    pub proposal_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            iterations: 2000,
            warmup: 1000,
            seed: 1,
            proposal_scale: 1.0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::config("at least one chain is required"));
        }
        if self.warmup >= self.iterations {
            return Err(Error::config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return Err(Error::config("proposal scale must be positive"));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        self.iterations - self.warmup
    }

    /// Independent stream for one chain.
    pub(crate) fn chain_rng(&self, chain: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chain as u64 + 1);
        rng
    }
}

/// Post-warmup draws, stored draw-major (`draws[d * n_params + k]`) with
/// chains concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    draws: Vec<f64>,
    chain: Vec<u32>,
    iteration: Vec<u32>,
    warmup: usize,
}

impl PosteriorDraws {
    pub(crate) fn from_chains(names: Vec<String>, chains: Vec<Vec<Vec<f64>>>, warmup: usize) -> Result<Self> {
        let p = names.len();
        let mut out = Self {
            names,
            draws: Vec::new(),
            chain: Vec::new(),
            iteration: Vec::new(),
            warmup,
        };
        for (c, rows) in chains.into_iter().enumerate() {
            for (t, row) in rows.into_iter().enumerate() {
                debug_assert_eq!(row.len(), p);
                if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "non-finite draw of {} in chain {c}",
                        out.names[k]
                    )));
                }
                out.draws.extend(row);
                out.chain.push(c as u32);
                out.iteration.push((warmup + t + 1) as u32);
            }
        }
        if out.chain.is_empty() {
            return Err(Error::numerical("no post-warmup draws"));
        }
        Ok(out)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chain.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chain.last().map_or(0, |&c| c as usize + 1)
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn chain_of(&self, draw: usize) -> u32 {
        self.chain[draw]
    }

    pub fn iteration_of(&self, draw: usize) -> u32 {
        self.iteration[draw]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, draw: usize, param: usize) -> f64 {
        self.draws[draw * self.names.len() + param]
    }

    pub fn row(&self, draw: usize) -> &[f64] {
        let p = self.names.len();
        &self.draws[draw * p..(draw + 1) * p]
    }

    pub fn column(&self, param: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.value(d, param)).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.param_index(name).map(|k| self.column(k))
    }

    /// Draws of one parameter split by chain.
    pub fn by_chain(&self, param: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains()];
        for d in 0..self.n_draws() {
            out[self.chain[d] as usize].push(self.value(d, param));
        }
        out
    }

    pub fn mean(&self, param: usize) -> f64 {
        mean(&self.column(param))
    }

    pub fn median(&self, param: usize) -> f64 {
        median(&self.column(param))
    }

    /// Batch-means Monte Carlo standard error of the posterior mean, using
    /// 20 batches per chain.
    pub fn mcse_mean(&self, param: usize) -> f64 {
        let chains = self.by_chain(param);
        let per: Vec<f64> = chains
            .iter()
            .map(|c| batch_mcse(c, 20, mean).powi(2))
            .collect();
        (per.iter().sum::<f64>()).sqrt() / chains.len() as f64
    }

    /// Batch-means Monte Carlo standard error of the posterior sd.
    pub fn mcse_sd(&self, param: usize) -> f64 {
        let chains = self.by_chain(param);
        let m = self.mean(param);
        let per: Vec<f64> = chains
            .iter()
            .map(|c| {
                let sq: Vec<f64> = c.iter().map(|v| (v - m).powi(2)).collect();
                batch_mcse(&sq, 20, mean).powi(2)
            })
            .collect();
        let var_mcse = per.iter().sum::<f64>().sqrt() / chains.len() as f64;
        let sd = crate::numeric::sd(&self.column(param));
        var_mcse / (2.0 * sd.max(f64::MIN_POSITIVE))
    }
}

/// Split-chain potential scale reduction factor for every parameter.
///
/// A parameter whose draws are all identical gets 1; one that is constant
/// within every half-chain but differs between them gets infinity.
pub fn rhat(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    if draws.n_chains() < 2 {
        return Err(Error::config("R-hat needs at least two chains"));
    }
    let per_chain = draws.n_draws() / draws.n_chains();
    if per_chain < 100 {
        return Err(Error::config(format!(
            "R-hat needs at least 100 post-warmup draws per chain, got {per_chain}"
        )));
    }
    Ok((0..draws.n_params()).map(|k| split_rhat(&draws.by_chain(k))).collect())
}

pub(crate) fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[c.len() - n..]])
        .collect();
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| crate::numeric::variance(h)).sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = n as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// One univariate slice-sampling update (stepping out, then shrinkage).
pub(crate) fn slice_sample<R: Rng + ?Sized, F: Fn(f64) -> f64>(x0: f64, log_f: F, width: f64, rng: &mut R) -> f64 {
    let f0 = log_f(x0);
    let level = f0 + rng.random::<f64>().ln();
    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let mut steps = 0;
    while log_f(left) > level && steps < 100 {
        left -= width;
        steps += 1;
    }
    steps = 0;
    while log_f(right) > level && steps < 100 {
        right += width;
        steps += 1;
    }
    loop {
        let x = left + (right - left) * rng.random::<f64>();
        if log_f(x) > level {
            return x;
        }
        if x < x0 {
            left = x;
        } else {
            right = x;
        }
        if right - left < 1e-14 * (1.0 + x0.abs()) {
            return x0;
        }
    }
}
