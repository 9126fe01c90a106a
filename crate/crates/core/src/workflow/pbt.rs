//! Population-based training over inner workflows, with either the classic
//! truncation-selection exploit/explore step or pairwise CSO-style updates.

use rand::seq::SliceRandom;
use rand::Rng;

use super::ppo::PpoWorkflow;
use super::{evaluate, parse_choice, Counters, EvalReport, EvalSettings, Metrics, Workflow, EVAL, INIT, STEP};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::ec::argsort_desc;
use crate::error::{Error, Result};
use crate::exec::{Executor, RngKey};
use crate::rl::{ActMode, MlpPolicy};

/// Coordinate system in which a hyperparameter is sampled and perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    /// `ln |x|`, keeping the sign of the range.
    Log,
    /// `ln (1 - x)`, for values that approach 1 from below.
    Log1m,
}

impl Scale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Scale::Linear),
            "log" => Some(Scale::Log),
            "log1m" => Some(Scale::Log1m),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchDim {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
}

impl SearchDim {
    pub fn new(name: &str, low: f64, high: f64, scale: Scale) -> Result<Self> {
        let ok = low < high
            && low.is_finite()
            && high.is_finite()
            && match scale {
                Scale::Linear => true,
                Scale::Log => low * high > 0.0,
                Scale::Log1m => high < 1.0,
            };
        if !ok {
            return Err(Error::config(
                format!("pbt.search.{name}"),
                format!("invalid range [{low}, {high}] for {scale:?} scale"),
            ));
        }
        Ok(SearchDim {
            name: name.to_string(),
            low,
            high,
            scale,
        })
    }

    fn sign(&self) -> f64 {
        if self.high < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn to_u(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log => x.abs().ln(),
            Scale::Log1m => (1.0 - x).ln(),
        }
    }

    pub fn from_u(&self, u: f64) -> f64 {
        match self.scale {
            Scale::Linear => u,
            Scale::Log => self.sign() * u.exp(),
            Scale::Log1m => 1.0 - u.exp(),
        }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.low, self.high)
    }

    /// Uniform in the scale's coordinates.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let (a, b) = (self.to_u(self.low), self.to_u(self.high));
        self.clamp(self.from_u(a + (b - a) * rng.random::<f64>()))
    }

    /// Explore step: scale by `f` in the key's scale, then clamp.
    pub fn perturb(&self, x: f64, f: f64) -> f64 {
        let y = match self.scale {
            Scale::Linear | Scale::Log => x * f,
            Scale::Log1m => 1.0 - (1.0 - x) * f,
        };
        self.clamp(y)
    }
}

/// One CSO coordinate update: `v' = r1 v + r2 (teacher - student)`, `student' = student + v'`.
/// Returns `(student', v')`.
pub fn cso_update(student: f64, teacher: f64, v: f64, r1: f64, r2: f64) -> (f64, f64) {
    let v = r1 * v + r2 * (teacher - student);
    (student + v, v)
}

/// An inner workflow whose hyperparameters PBT can set.
pub trait Inner: Workflow + Clone + Sync {
    fn set_key(&mut self, key: RngKey);
    fn set_hyper(&mut self, name: &str, value: f64) -> Result<()>;
    /// Higher is better; averaged over `episodes` noise-free episodes.
    fn meta_objective(&self, exec: &Executor, episodes: usize, key: RngKey) -> Result<f64>;
}

impl Inner for PpoWorkflow {
    fn set_key(&mut self, key: RngKey) {
        PpoWorkflow::set_key(self, key);
    }

    fn set_hyper(&mut self, name: &str, value: f64) -> Result<()> {
        let c = &mut self.cfg;
        match name {
            "actor_loss_weight" => c.actor_loss_weight = value,
            "critic_loss_weight" => c.critic_loss_weight = value,
            "entropy_weight" => c.entropy_weight = value,
            "gamma" => c.gamma = value,
            "gae_lambda" => c.gae_lambda = value,
            "clip_eps" => c.clip_eps = value,
            _ => return Err(Error::config(format!("pbt.search.{name}"), "not a PPO hyperparameter")),
        }
        Ok(())
    }

    fn meta_objective(&self, exec: &Executor, episodes: usize, key: RngKey) -> Result<f64> {
        let p = MlpPolicy::new(&self.agent.actor_spec, &self.agent.actor, self.env.action_space, ActMode::Deterministic)
            .with_norm(Some(&self.norm));
        Ok(evaluate(exec, &self.env, &[p], episodes, self.eval.num_envs, key)?.mean)
    }
}

/// Inner workflow with a closed-form meta-objective `-(log10 x - log10 optimum)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInner {
    pub x: f64,
    pub optimum: f64,
    counters: Counters,
}

impl SyntheticInner {
    pub fn new(x: f64, optimum: f64) -> Self {
        SyntheticInner {
            x,
            optimum,
            counters: Counters::default(),
        }
    }

    pub fn objective(&self) -> f64 {
        let d = self.x.log10() - self.optimum.log10();
        -d * d
    }
}

impl Workflow for SyntheticInner {
    fn id(&self) -> &'static str {
        "synthetic"
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, _: &Executor) -> Result<Metrics> {
        self.counters.iteration += 1;
        Ok(Metrics::default())
    }

    fn evaluate(&self, _: &Executor) -> Result<EvalReport> {
        let f = self.objective();
        Ok(EvalReport {
            mean: f,
            std: 0.0,
            episodes: 1,
            per_agent: vec![f],
        })
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        ck.put_f64("x", self.x);
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.counters = Counters::load(ck)?;
        self.x = ck.f64("x")?;
        Ok(())
    }
}

impl Inner for SyntheticInner {
    fn set_key(&mut self, _: RngKey) {}

    fn set_hyper(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "x" => {
                self.x = value;
                Ok(())
            }
            _ => Err(Error::config(format!("pbt.search.{name}"), "the synthetic workflow only has `x`")),
        }
    }

    fn meta_objective(&self, _: &Executor, _: usize, _: RngKey) -> Result<f64> {
        Ok(self.objective())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member<I> {
    pub inner: I,
    pub hypers: Vec<f64>,
    pub velocity: Vec<f64>,
    pub meta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PbtSettings {
    pub warmup_steps: u64,
    pub steps_per_iter: u64,
    pub perturb_factor: f64,
    pub selection_ratio: f64,
    pub meta_episodes: usize,
    pub cso: bool,
    /// CSO draws `r1, r2` per hyperparameter rather than once per pair.
    pub per_coordinate: bool,
}

#[derive(Clone, Debug)]
pub struct PbtWorkflow<I> {
    pub members: Vec<Member<I>>,
    pub dims: Vec<SearchDim>,
    pub settings: PbtSettings,
    pub eval: EvalSettings,
    key: RngKey,
    counters: Counters,
}

impl<I: Inner> PbtWorkflow<I> {
    /// `make(j, key)` builds member `j`'s inner workflow; hyperparameters are
    /// drawn uniformly in each dimension's scale.
    pub fn new(
        n: usize,
        dims: Vec<SearchDim>,
        settings: PbtSettings,
        eval: EvalSettings,
        key: RngKey,
        make: impl Fn(usize, RngKey) -> Result<I>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("pbt.pop_size", "must be at least 2"));
        }
        if !(0.0..=0.5).contains(&settings.selection_ratio) {
            return Err(Error::config("pbt.selection_ratio", "must lie in [0, 0.5]"));
        }
        let mut members = Vec::with_capacity(n);
        for j in 0..n {
            let mkey = key.fold_in(INIT).fold_in(j as u64);
            let mut rng = mkey.fold_in(0).rng();
            let hypers: Vec<f64> = dims.iter().map(|d| d.sample(&mut rng)).collect();
            let mut inner = make(j, mkey.fold_in(1))?;
            for (d, &h) in dims.iter().zip(&hypers) {
                inner.set_hyper(&d.name, h)?;
            }
            members.push(Member {
                inner,
                velocity: vec![0.0; dims.len()],
                hypers,
                meta: f64::NEG_INFINITY,
            });
        }
        Ok(PbtWorkflow {
            members,
            dims,
            settings,
            eval,
            key,
            counters: Counters::default(),
        })
    }

    fn best(&self) -> usize {
        argsort_desc(&self.members.iter().map(|m| m.meta).collect::<Vec<_>>())[0]
    }

    /// Truncation selection: the bottom `ceil(ratio n)` copy inner state and
    /// perturbed hyperparameters from a uniformly drawn top member.
    pub fn exploit_explore(&mut self, key: RngKey) -> Result<()> {
        let n = self.members.len();
        let q = ((self.settings.selection_ratio * n as f64).ceil() as usize).min(n / 2);
        let meta: Vec<f64> = self.members.iter().map(|m| m.meta).collect();
        let order = argsort_desc(&meta);
        let mut rng = key.rng();
        for &b in &order[n - q..] {
            let src = order[rng.random_range(0..q)];
            let f = self.settings.perturb_factor;
            let hypers: Vec<f64> = self
                .dims
                .iter()
                .zip(&self.members[src].hypers)
                .map(|(d, &x)| d.perturb(x, if rng.random::<bool>() { 1.0 + f } else { 1.0 - f }))
                .collect();
            let mut inner = self.members[src].inner.clone();
            for (d, &h) in self.dims.iter().zip(&hypers) {
                inner.set_hyper(&d.name, h)?;
            }
            let m = &mut self.members[b];
            m.inner = inner;
            m.hypers = hypers;
            m.meta = meta[src];
        }
        Ok(())
    }

    /// Pairwise update: in every shuffled pair the lower-scoring student takes the
    /// teacher's inner state and moves its hyperparameters towards the teacher's.
    pub fn cso_step(&mut self, key: RngKey) -> Result<()> {
        let n = self.members.len();
        let mut rng = key.rng();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for pair in perm.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            let (t, s) = if self.members[a].meta >= self.members[b].meta {
                (a, b)
            } else {
                (b, a)
            };
            let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
            let teacher = self.members[t].clone();
            let student = &mut self.members[s];
            for (k, d) in self.dims.iter().enumerate() {
                if self.settings.per_coordinate && k > 0 {
                    r1 = rng.random();
                    r2 = rng.random();
                }
                let (u, v) = cso_update(
                    d.to_u(student.hypers[k]),
                    d.to_u(teacher.hypers[k]),
                    student.velocity[k],
                    r1,
                    r2,
                );
                student.velocity[k] = v;
                student.hypers[k] = d.clamp(d.from_u(u));
            }
            student.inner = teacher.inner;
            for (d, &h) in self.dims.iter().zip(&student.hypers) {
                student.inner.set_hyper(&d.name, h)?;
            }
            student.meta = teacher.meta;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl<I: Inner + 'static> Workflow for PbtWorkflow<I> {
    fn id(&self) -> &'static str {
        if self.settings.cso {
            "pbt-cso"
        } else {
            "pbt"
        }
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, exec: &Executor) -> Result<Metrics> {
        let it = self.counters.iteration;
        let k = self.key.fold_in(STEP).fold_in(it);
        let steps = self.settings.steps_per_iter + if it == 0 { self.settings.warmup_steps } else { 0 };
        let episodes = self.settings.meta_episodes.max(1);
        let members = &self.members;
        let results = exec.map_indexed(members.len(), |j| -> Result<(I, f64)> {
            let seq = Executor::sequential();
            let mut inner = members[j].inner.clone();
            inner.set_key(k.fold_in(0).fold_in(j as u64));
            for _ in 0..steps {
                inner.step(&seq)?;
            }
            let meta = inner.meta_objective(&seq, episodes, k.fold_in(1).fold_in(j as u64))?;
            Ok((inner, meta))
        });
        for (m, r) in self.members.iter_mut().zip(results) {
            let (inner, meta) = r?;
            let (before, after) = (m.inner.counters(), inner.counters());
            self.counters.env_steps += after.env_steps - before.env_steps;
            self.counters.episodes += after.episodes - before.episodes;
            self.counters.rl_updates += after.rl_updates - before.rl_updates;
            m.inner = inner;
            m.meta = meta;
        }
        let metas: Vec<f64> = self.members.iter().map(|m| m.meta).collect();
        let mut out = Metrics::default();
        out.push("meta/max", metas.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        out.push("meta/mean", metas.iter().sum::<f64>() / metas.len() as f64);
        out.push("meta/median", median(metas.clone()));
        let best = self.best();
        for (i, d) in self.dims.iter().enumerate() {
            out.push(format!("hyper/{}/best", d.name), self.members[best].hypers[i]);
            out.push(
                format!("hyper/{}/median", d.name),
                median(self.members.iter().map(|m| m.hypers[i]).collect()),
            );
        }
        if self.settings.cso {
            self.cso_step(k.fold_in(2))?;
        } else {
            self.exploit_explore(k.fold_in(2))?;
        }
        self.counters.iteration += 1;
        Ok(out)
    }

    /// Evaluates the member with the highest recorded meta-objective.
    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let m = &self.members[self.best()];
        let mut inner = m.inner.clone();
        inner.set_key(self.key.fold_in(EVAL).fold_in(self.counters.iteration));
        inner.evaluate(exec)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        for (j, m) in self.members.iter().enumerate() {
            let mut sub = Checkpoint::new(m.inner.id());
            m.inner.save(&mut sub);
            ck.put_nested(&format!("m{j}."), &sub);
        }
        let flat = |f: &dyn Fn(&Member<I>) -> Vec<f64>| self.members.iter().flat_map(f).collect::<Vec<f64>>();
        ck.put_f64s("hypers", &flat(&|m| m.hypers.clone()));
        ck.put_f64s("velocity", &flat(&|m| m.velocity.clone()));
        ck.put_f64s("meta", &flat(&|m| vec![m.meta]));
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        let n = self.members.len();
        let h = self.dims.len();
        let hypers = ck.f64s_len("hypers", n * h)?;
        let velocity = ck.f64s_len("velocity", n * h)?;
        let meta = ck.f64s_len("meta", n)?;
        let counters = Counters::load(ck)?;
        let mut members = self.members.clone();
        for (j, m) in members.iter_mut().enumerate() {
            m.inner.load(&ck.nested(&format!("m{j}.")))?;
            m.hypers = hypers[j * h..(j + 1) * h].to_vec();
            m.velocity = velocity[j * h..(j + 1) * h].to_vec();
            m.meta = meta[j];
            for (d, &x) in self.dims.iter().zip(&m.hypers) {
                m.inner.set_hyper(&d.name, x)?;
            }
        }
        self.members = members;
        self.counters = counters;
        Ok(())
    }
}

const PPO_HYPERS: &[&str] = &[
    "actor_loss_weight",
    "critic_loss_weight",
    "entropy_weight",
    "gamma",
    "gae_lambda",
    "clip_eps",
];

fn search_dims(cfg: &Config, names: &[&str]) -> Result<Vec<SearchDim>> {
    names
        .iter()
        .map(|n| {
            let p = format!("pbt.search.{n}");
            let scale_key = format!("{p}.scale");
            let scale = Scale::parse(cfg.str(&scale_key))
                .ok_or_else(|| Error::config(&scale_key, "expected linear, log or log1m"))?;
            SearchDim::new(n, cfg.f64(&format!("{p}.low")), cfg.f64(&format!("{p}.high")), scale)
        })
        .collect()
}

pub fn settings_from_config(cfg: &Config, cso: bool) -> Result<PbtSettings> {
    let per_coordinate = parse_choice(cfg, "pbt.cso_coefficients", &["coordinate", "pair"])? == "coordinate";
    let perturb_factor = cfg.f64("pbt.perturb_factor");
    if !(0.0..1.0).contains(&perturb_factor) {
        return Err(Error::config("pbt.perturb_factor", "must lie in [0, 1)"));
    }
    Ok(PbtSettings {
        warmup_steps: cfg.u64("pbt.warmup_steps")?,
        steps_per_iter: cfg.u64("pbt.workflow_steps_per_iter")?,
        perturb_factor,
        selection_ratio: cfg.f64("pbt.selection_ratio"),
        meta_episodes: cfg.usize("pbt.meta_episodes")?,
        cso,
        per_coordinate,
    })
}

/// PBT over the inner workflow named by `pbt.inner`.
pub fn build(cfg: &Config, cso: bool) -> Result<Box<dyn Workflow>> {
    let key = RngKey::from_seed(cfg.u64("seed")?);
    let n = cfg.usize("pbt.pop_size")?;
    let settings = settings_from_config(cfg, cso)?;
    let eval = EvalSettings::from_config(cfg)?;
    Ok(match parse_choice(cfg, "pbt.inner", &["ppo", "synthetic"])? {
        "ppo" => Box::new(PbtWorkflow::new(n, search_dims(cfg, PPO_HYPERS)?, settings, eval, key, |_, k| {
            PpoWorkflow::with_key(cfg, k)
        })?),
        _ => {
            let optimum = cfg.positive("synthetic.optimum")?;
            Box::new(PbtWorkflow::new(n, search_dims(cfg, &["x"])?, settings, eval, key, |_, _| {
                Ok(SyntheticInner::new(1.0, optimum))
            })?)
        }
    })
}
