//! Ask/tell evolutionary optimizers over flat genotypes and the genetic
//! operators used by the hybrid workflows.
//!
//! `ask` is a pure function of `(state, key)`; `tell` consumes the candidates
//! and their fitnesses (higher is better) and updates the state in place.

mod ars;
mod cem;
mod cmaes;
mod openes;
mod operators;
mod ves;

pub use ars::{ArsConfig, ArsState};
pub use cem::{CemConfig, CemState};
pub use cmaes::{CmaConfig, CmaState};
pub use openes::{NoiseTable, OpenEsConfig, OpenEsState};
pub use operators::{gaussian_mutate, tournament_select, uniform_crossover};
pub use ves::{VesConfig, VesState};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;

/// Candidates emitted by `ask`.
///
/// With mirrored sampling candidate `i` is `mean + sign_i * sigma * directions[i / 2]`
/// where `sign_i` is `+1` for even and `-1` for odd `i`; otherwise candidate `i`
/// uses `directions[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub params: Vec<ParamVector>,
    pub directions: Vec<Vec<f64>>,
    pub mirrored: bool,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Direction of candidate `i` with its sign applied.
    pub fn noise(&self, i: usize) -> (f64, &[f64]) {
        if self.mirrored {
            (if i % 2 == 0 { 1.0 } else { -1.0 }, &self.directions[i / 2])
        } else {
            (1.0, &self.directions[i])
        }
    }
}

/// Outcome flags of a `tell`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TellReport {
    /// The fitnesses carried no usable signal and the update was skipped.
    pub degenerate: bool,
    /// The covariance had to be re-conditioned before factorisation.
    pub reconditioned: bool,
}

/// Centered ranks in `[-0.5, 0.5]`; tied values share their average rank.
pub fn centered_ranks(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && f[idx[j + 1]] == f[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks.iter().map(|r| r / (n - 1) as f64 - 0.5).collect()
}

/// Indices sorted by descending fitness; ties keep index order.
pub fn argsort_desc(f: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.len()).collect();
    idx.sort_by(|&a, &b| f[b].total_cmp(&f[a]));
    idx
}

pub(crate) fn standard_normal(key: RngKey, d: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub(crate) fn check_fitness(f: &[f64], n: usize) -> Result<()> {
    if f.len() != n {
        return Err(Error::shape(format!("{} fitnesses for {n} candidates", f.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite fitness"));
    }
    Ok(())
}

/// Mirrored or plain isotropic sampling shared by OpenES, VanillaES and ARS.
pub(crate) fn sample_isotropic(
    mean: &[f64],
    sigma: f64,
    n: usize,
    mirrored: bool,
    key: RngKey,
    table: Option<&NoiseTable>,
) -> Result<Candidates> {
    if n < 2 {
        return Err(Error::invalid("population size must be at least 2"));
    }
    if mirrored && n % 2 != 0 {
        return Err(Error::invalid("mirrored sampling needs an even population"));
    }
    let d = mean.len();
    let n_dirs = if mirrored { n / 2 } else { n };
    let directions: Vec<Vec<f64>> = (0..n_dirs)
        .map(|j| {
            let k = key.fold_in(j as u64);
            match table {
                Some(t) => t.sample(k, d),
                None => Ok(standard_normal(k, d)),
            }
        })
        .collect::<Result<_>>()?;
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let (sign, eps) = if mirrored {
            (if i % 2 == 0 { 1.0 } else { -1.0 }, &directions[i / 2])
        } else {
            (1.0, &directions[i])
        };
        let p: Vec<f64> = mean
            .iter()
            .zip(eps)
            .map(|(m, e)| m + sign * sigma * e)
            .collect();
        params.push(ParamVector(p));
    }
    Ok(Candidates {
        params,
        directions,
        mirrored,
    })
}

/// Any of the supported search-distribution optimizers.
#[derive(Clone, Debug, PartialEq)]
pub enum EcState {
    OpenEs(OpenEsState),
    Ars(ArsState),
    Ves(VesState),
    Cma(CmaState),
    Cem(CemState),
}

impl EcState {
    pub fn name(&self) -> &'static str {
        match self {
            EcState::OpenEs(_) => "openes",
            EcState::Ars(_) => "ars",
            EcState::Ves(_) => "ves",
            EcState::Cma(_) => "cmaes",
            EcState::Cem(_) => "cem",
        }
    }

    /// Centre of the search distribution.
    pub fn mean(&self) -> &[f64] {
        match self {
            EcState::OpenEs(s) => &s.mean,
            EcState::Ars(s) => &s.mean,
            EcState::Ves(s) => &s.mean,
            EcState::Cma(s) => &s.mean,
            EcState::Cem(s) => &s.mean,
        }
    }

    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        match self {
            EcState::OpenEs(s) => s.ask(key, n),
            EcState::Ars(s) => s.ask(key, n),
            EcState::Ves(s) => s.ask(key, n),
            EcState::Cma(s) => s.ask(key, n),
            EcState::Cem(s) => s.ask(key, n),
        }
    }

    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        match self {
            EcState::OpenEs(s) => s.tell(cands, fitness),
            EcState::Ars(s) => s.tell(cands, fitness),
            EcState::Ves(s) => s.tell(cands, fitness),
            EcState::Cma(s) => s.tell(cands, fitness),
            EcState::Cem(s) => s.tell(cands, fitness),
        }
    }

    /// Step-size summary for metrics.
    pub fn sigma(&self) -> f64 {
        match self {
            EcState::OpenEs(s) => s.sigma,
            EcState::Ars(s) => s.sigma,
            EcState::Ves(s) => s.sigma,
            EcState::Cma(s) => s.sigma,
            EcState::Cem(s) => {
                (s.var.iter().sum::<f64>() / s.var.len().max(1) as f64).sqrt()
            }
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        match self {
            EcState::OpenEs(s) => s.save(ck, prefix),
            EcState::Ars(s) => s.save(ck, prefix),
            EcState::Ves(s) => s.save(ck, prefix),
            EcState::Cma(s) => s.save(ck, prefix),
            EcState::Cem(s) => s.save(ck, prefix),
        }
    }

    /// Restores the mutable parts of `self` from a checkpoint written by [`EcState::save`].
    pub fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        match self {
            EcState::OpenEs(s) => s.load(ck, prefix),
            EcState::Ars(s) => s.load(ck, prefix),
            EcState::Ves(s) => s.load(ck, prefix),
            EcState::Cma(s) => s.load(ck, prefix),
            EcState::Cem(s) => s.load(ck, prefix),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centered_rank_example() {
        assert_eq!(centered_ranks(&[3.0, 1.0, 2.0]), vec![0.5, -0.5, 0.0]);
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(centered_ranks(&[1.0, 1.0, 1.0]), vec![0.0; 3]);
        assert_eq!(centered_ranks(&[2.0, 1.0, 2.0]), vec![0.25, -0.5, 0.25]);
    }

    #[test]
    fn mirrored_pairs_sum_to_twice_mean() {
        let mean = vec![0.3, -1.2, 5.0];
        let c = sample_isotropic(&mean, 0.7, 4, true, RngKey::from_seed(1), None).unwrap();
        for j in 0..2 {
            for k in 0..3 {
                let sum = c.params[2 * j][k] + c.params[2 * j + 1][k];
                assert!((sum - 2.0 * mean[k]).abs() <= 1e-15 * (1.0 + mean[k].abs() * 4.0));
            }
        }
        assert!(sample_isotropic(&mean, 0.7, 3, true, RngKey::from_seed(1), None).is_err());
        assert!(sample_isotropic(&mean, 0.7, 1, false, RngKey::from_seed(1), None).is_err());
    }

    proptest! {
        #[test]
        fn ranks_in_range_and_sum_to_zero(v in proptest::collection::vec(-1e6f64..1e6, 2..50)) {
            let r = centered_ranks(&v);
            prop_assert!(r.iter().all(|x| (-0.5..=0.5).contains(x)));
            prop_assert!(r.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
