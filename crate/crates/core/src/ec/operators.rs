use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;

/// Best of `k` distinct uniformly drawn members; ties go to the earlier draw.
pub fn tournament_select(fitness: &[f64], key: RngKey, k: usize) -> Result<usize> {
    let n = fitness.len();
    if n == 0 || k == 0 {
        return Err(Error::invalid("tournament needs a population and k >= 1"));
    }
    let k = k.min(n);
    let mut rng = key.rng();
    let mut pool: Vec<usize> = (0..n).collect();
    let mut best: Option<usize> = None;
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
        let c = pool[i];
        best = match best {
            Some(b) if fitness[b] > fitness[c] || (fitness[b] == fitness[c] && b < c) => Some(b),
            _ => Some(c),
        };
    }
    Ok(best.expect("k >= 1"))
}

/// Adds `N(0, std^2)` to each coordinate independently with probability `prob`.
pub fn gaussian_mutate(params: &[f64], key: RngKey, std: f64, prob: f64) -> ParamVector {
    let mut rng = key.rng();
    params
        .iter()
        .map(|&p| {
            if prob > 0.0 && rng.random::<f64>() < prob {
                p + std * rng.sample::<f64, _>(StandardNormal)
            } else {
                p
            }
        })
        .collect::<Vec<_>>()
        .into()
}

/// Takes each coordinate from `a` or `b` with equal probability.
pub fn uniform_crossover(a: &[f64], b: &[f64], key: RngKey) -> Result<ParamVector> {
    if a.len() != b.len() {
        return Err(Error::shape("crossover parents differ in length"));
    }
    let mut rng = key.rng();
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| if rng.random::<bool>() { x } else { y })
        .collect::<Vec<_>>()
        .into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_tournament_is_argmax() {
        let f = [0.3, 5.0, -1.0, 5.0, 2.0];
        for s in 0..50 {
            assert_eq!(tournament_select(&f, RngKey::from_seed(s), 5).unwrap(), 1);
        }
    }

    #[test]
    fn tournament_prefers_fitter() {
        let f: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut counts = [0usize; 10];
        for s in 0..2000 {
            counts[tournament_select(&f, RngKey::from_seed(s), 3).unwrap()] += 1;
        }
        assert_eq!(counts[0] + counts[1], 0);
        assert!(counts[9] > counts[5]);
    }

    #[test]
    fn zero_prob_mutation_is_identity() {
        let p = vec![1.0, 2.0, 3.0];
        assert_eq!(gaussian_mutate(&p, RngKey::from_seed(0), 0.1, 0.0).0, p);
        let m = gaussian_mutate(&p, RngKey::from_seed(0), 0.1, 1.0);
        assert!(m.iter().zip(&p).all(|(a, b)| a != b));
    }

    #[test]
    fn self_crossover_is_identity() {
        let a = vec![0.5, -1.0, 7.0];
        assert_eq!(uniform_crossover(&a, &a, RngKey::from_seed(3)).unwrap().0, a);
        assert!(uniform_crossover(&a, &a[..2], RngKey::from_seed(3)).is_err());
    }
}
