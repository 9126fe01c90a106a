use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{argsort_desc, check_fitness, standard_normal, Candidates, TellReport};
use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmaConfig {
    pub pop_size: usize,
    pub num_elites: usize,
    pub sigma: f64,
    /// Largest genotype dimension for which a dense covariance is allowed.
    pub max_dim: usize,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            pop_size: 128,
            num_elites: 64,
            sigma: 0.1,
            max_dim: 4096,
        }
    }
}

/// Strategy constants derived from dimension and recombination weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CmaParams {
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl CmaParams {
    pub fn new(d: usize, mu: usize) -> Self {
        let n = d as f64;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let s: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        CmaParams {
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Full-covariance (mu/mu_w, lambda) CMA-ES.
#[derive(Clone, Debug, PartialEq)]
pub struct CmaState {
    pub mean: ParamVector,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    /// Eigenvectors of `cov` (columns).
    pub basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    pub scales: DVector<f64>,
    pub generation: u64,
    /// Generation at which `basis`/`scales` were last computed.
    pub eigen_generation: u64,
    pub params: CmaParams,
    pub cfg: CmaConfig,
}

impl CmaState {
    pub fn new(mean: ParamVector, cfg: CmaConfig) -> Result<Self> {
        let d = mean.len();
        if d > cfg.max_dim {
            return Err(Error::Capacity {
                dim: d,
                cap: cfg.max_dim,
            });
        }
        if d == 0 || cfg.num_elites == 0 || cfg.num_elites > cfg.pop_size || !(cfg.sigma > 0.0) {
            return Err(Error::invalid("CMA-ES needs d >= 1, 1 <= mu <= lambda and sigma > 0"));
        }
        Ok(CmaState {
            mean,
            sigma: cfg.sigma,
            cov: DMatrix::identity(d, d),
            p_sigma: DVector::zeros(d),
            p_c: DVector::zeros(d),
            basis: DMatrix::identity(d, d),
            scales: DVector::from_element(d, 1.0),
            generation: 0,
            eigen_generation: 0,
            params: CmaParams::new(d, cfg.num_elites),
            cfg,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Candidate `k` is `mean + sigma * B D z_k`; `directions[k]` stores `y_k = B D z_k`.
    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        if n < 2 {
            return Err(Error::invalid("population size must be at least 2"));
        }
        let d = self.dim();
        let mut params = Vec::with_capacity(n);
        let mut directions = Vec::with_capacity(n);
        for k in 0..n {
            let z = DVector::from_vec(standard_normal(key.fold_in(k as u64), d));
            let y = &self.basis * z.component_mul(&self.scales);
            let x: Vec<f64> = self
                .mean
                .iter()
                .zip(y.iter())
                .map(|(m, yi)| m + self.sigma * yi)
                .collect();
            params.push(ParamVector(x));
            directions.push(y.as_slice().to_vec());
        }
        Ok(Candidates {
            params,
            directions,
            mirrored: false,
        })
    }

    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        check_fitness(fitness, cands.len())?;
        let d = self.dim();
        let p = &self.params;
        let mu = p.weights.len();
        if cands.len() < mu {
            return Err(Error::invalid("fewer candidates than parents"));
        }
        let order = argsort_desc(fitness);
        let ys: Vec<DVector<f64>> = order[..mu]
            .iter()
            .map(|&i| DVector::from_column_slice(&cands.directions[i]))
            .collect();
        let mut y_w = DVector::zeros(d);
        for (w, y) in p.weights.iter().zip(&ys) {
            y_w.axpy(*w, y, 1.0);
        }
        for (m, yi) in self.mean.iter_mut().zip(y_w.iter()) {
            *m += self.sigma * yi;
        }
        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let bt_y = self.basis.transpose() * &y_w;
        let inv_sqrt_y = &self.basis * bt_y.component_div(&self.scales);
        self.p_sigma = &self.p_sigma * (1.0 - p.c_sigma)
            + inv_sqrt_y * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let g = self.generation + 1;
        let ps_norm = self.p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powf(2.0 * g as f64)).sqrt()
            < (1.4 + 2.0 / (d as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());
        let delta_h = (1.0 - h) * p.c_c * (2.0 - p.c_c);
        let mut cov = &self.cov * (1.0 - p.c_1 - p.c_mu + p.c_1 * delta_h);
        cov.ger(p.c_1, &self.p_c, &self.p_c, 1.0);
        for (w, y) in p.weights.iter().zip(&ys) {
            cov.ger(p.c_mu * w, y, y, 1.0);
        }
        symmetrize(&mut cov);
        self.cov = cov;
        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.generation = g;
        let mut report = TellReport::default();
        if !self.sigma.is_finite() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("CMA-ES state diverged"));
        }
        let lag = (1.0 / (10.0 * d as f64 * (p.c_1 + p.c_mu))).floor().max(1.0) as u64;
        if g - self.eigen_generation >= lag {
            report.reconditioned = self.decompose()?;
        }
        Ok(report)
    }

    /// Refreshes the eigen factorisation; returns whether re-conditioning was needed.
    fn decompose(&mut self) -> Result<bool> {
        let d = self.dim();
        let mut reconditioned = false;
        for _ in 0..8 {
            let eig = SymmetricEigen::new(self.cov.clone());
            let ok = eig.eigenvalues.iter().all(|v| v.is_finite() && *v > 0.0)
                && eig.eigenvectors.iter().all(|v| v.is_finite());
            if ok {
                self.basis = eig.eigenvectors;
                self.scales = eig.eigenvalues.map(f64::sqrt);
                self.eigen_generation = self.generation;
                return Ok(reconditioned);
            }
            reconditioned = true;
            for i in 0..d {
                self.cov[(i, i)] += 1e-10;
            }
            // a negative eigenvalue far below the ridge needs a larger shift
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min.is_finite() && min <= 0.0 {
                for i in 0..d {
                    self.cov[(i, i)] += -min;
                }
            }
        }
        Err(Error::numeric("covariance matrix cannot be factorised"))
    }

    /// Largest absolute asymmetry `|C_ij - C_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..i {
                worst = worst.max((self.cov[(i, j)] - self.cov[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}mean"), &self.mean);
        ck.put_f64(&format!("{p}sigma"), self.sigma);
        ck.put_f64s(&format!("{p}cov"), self.cov.as_slice());
        ck.put_f64s(&format!("{p}p_sigma"), self.p_sigma.as_slice());
        ck.put_f64s(&format!("{p}p_c"), self.p_c.as_slice());
        ck.put_f64s(&format!("{p}basis"), self.basis.as_slice());
        ck.put_f64s(&format!("{p}scales"), self.scales.as_slice());
        ck.put_u64s(&format!("{p}generations"), &[self.generation, self.eigen_generation]);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let d = self.dim();
        let mean = ck.f64s_len(&format!("{p}mean"), d)?;
        let cov = ck.f64s_len(&format!("{p}cov"), d * d)?;
        let ps = ck.f64s_len(&format!("{p}p_sigma"), d)?;
        let pc = ck.f64s_len(&format!("{p}p_c"), d)?;
        let basis = ck.f64s_len(&format!("{p}basis"), d * d)?;
        let scales = ck.f64s_len(&format!("{p}scales"), d)?;
        let gens = ck.u64s(&format!("{p}generations"))?;
        if gens.len() != 2 {
            return Err(Error::Checkpoint("bad generation counters".into()));
        }
        self.sigma = ck.f64(&format!("{p}sigma"))?;
        self.mean = ParamVector(mean);
        self.cov = DMatrix::from_vec(d, d, cov);
        self.p_sigma = DVector::from_vec(ps);
        self.p_c = DVector::from_vec(pc);
        self.basis = DMatrix::from_vec(d, d, basis);
        self.scales = DVector::from_vec(scales);
        self.generation = gens[0];
        self.eigen_generation = gens[1];
        Ok(())
    }
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let d = c.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn capacity_guard() {
        let cfg = CmaConfig {
            max_dim: 8,
            ..Default::default()
        };
        let err = CmaState::new(ParamVector(vec![0.0; 9]), cfg).unwrap_err();
        assert!(matches!(err, Error::Capacity { dim: 9, cap: 8 }));
    }

    #[test]
    fn default_strategy_parameters() {
        let c = CmaConfig::default();
        assert_eq!((c.pop_size, c.num_elites, c.sigma), (128, 64, 0.1));
        let p = CmaParams::new(10, 64);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.weights.iter().all(|w| *w > 0.0));
        assert!(p.c_1 + p.c_mu <= 1.0);
    }

    #[test]
    fn scalar_run_shrinks_mean() {
        let mut s = CmaState::new(ParamVector(vec![1.0]), CmaConfig::default()).unwrap();
        let start = s.mean[0].abs();
        for g in 0..50 {
            let c = s.ask(RngKey::from_seed(3).fold_in(g), 128).unwrap();
            let f: Vec<f64> = c.params.iter().map(|p| -sphere(p)).collect();
            s.tell(&c, &f).unwrap();
        }
        assert!(s.mean[0].abs() < start * 1e-3);
    }

    #[test]
    fn sphere_10d_converges_symmetric() {
        let mut s = CmaState::new(ParamVector(vec![1.0; 10]), CmaConfig::default()).unwrap();
        let mut best = f64::INFINITY;
        for g in 0..300 {
            let c = s.ask(RngKey::from_seed(1).fold_in(g), 128).unwrap();
            let f: Vec<f64> = c.params.iter().map(|p| -sphere(p)).collect();
            s.tell(&c, &f).unwrap();
            assert!(s.asymmetry() <= 1e-12);
            best = best.min(sphere(&s.mean));
            if best < 1e-6 {
                break;
            }
        }
        assert!(best < 1e-6, "best {best}");
    }
}
