//! Experiment configuration: a fixed schema of dotted keys with documented
//! defaults, loaded from TOML and overridden by `key=value` pairs.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s}"),
        }
    }
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "a boolean",
            Value::Int(_) => "an integer",
            Value::Float(_) => "a number",
            Value::Str(_) => "a string",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Bool(b) => (*b).into(),
            Value::Int(i) => (*i).into(),
            Value::Float(x) => serde_json::Number::from_f64(*x).map_or(serde_json::Value::Null, Into::into),
            Value::Str(s) => s.clone().into(),
        }
    }
}

pub struct KeyDef {
    pub key: &'static str,
    pub default: fn() -> Value,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($key:literal => $kind:ident($val:expr), $doc:literal;)*) => {
        &[$(KeyDef { key: $key, default: || Value::$kind($val.into()), doc: $doc },)*]
    };
}

/// Every accepted key, its default and a one-line description.
pub static SCHEMA: &[KeyDef] = keys! {
    "workflow" => Str("es"), "es | ppo | td3 | erl | cemrl | pbt | pbt-cso";
    "seed" => Int(0), "root random seed";

    "env.name" => Str("pendulum"), "pendulum | cartpole";
    "env.max_episode_steps" => Int(0), "episode time limit; 0 keeps the environment default (200 / 500)";
    "env.fixed_horizon" => Bool(false), "never terminate early, only truncate at the time limit";

    "exec.workers" => Int(0), "worker threads; 0 uses every available core";

    "budget.iterations" => Int(100), "stop after this many iterations (0 = no limit)";
    "budget.env_steps" => Int(0), "stop once this many environment steps were sampled (0 = no limit)";
    "budget.episodes" => Int(0), "stop once this many training episodes completed (0 = no limit)";

    "eval.interval" => Int(10), "evaluate after every this many iterations (0 = never)";
    "eval.episodes" => Int(128), "episodes per evaluation";
    "eval.num_envs" => Int(16), "parallel environment lanes per evaluated agent";

    "checkpoint.interval" => Int(0), "also checkpoint every this many iterations (0 = only at the end)";
    "output.dir" => Str("runs/default"), "directory for metrics.jsonl, timing.jsonl and checkpoint.bin";

    "obs_norm.vbn_steps" => Int(10000), "random-action timesteps used to fit fixed normalization statistics";

    "es.algo" => Str("openes"), "openes | ars | ves | cmaes";
    "es.pop_size" => Int(128), "candidates per iteration (CMA-ES lambda)";
    "es.fitness_episodes" => Int(16), "episodes averaged into each candidate's fitness";
    "es.hidden" => Str("16,16"), "hidden layer widths of the policy";
    "es.layer_norm" => Bool(false), "layer normalization on hidden layers";
    "es.obs_norm" => Str("vbn"), "none | vbn | rs";
    "openes.sigma" => Float(0.02), "perturbation std";
    "openes.lr" => Float(0.01), "Adam learning rate";
    "openes.weight_decay" => Float(0.005), "decoupled weight decay";
    "openes.mirrored" => Bool(true), "antithetic sampling";
    "openes.noise_table_size" => Int(0), "pre-built shared noise table length; 0 samples noise on the fly";
    "ars.num_elites" => Int(16), "top directions used per update";
    "ars.sigma" => Float(0.03), "perturbation std";
    "ars.lr" => Float(0.02), "SGD step size";
    "ves.num_elites" => Int(16), "recombined candidates";
    "ves.sigma" => Float(0.02), "fixed perturbation std";
    "ves.mirrored" => Bool(true), "antithetic sampling";
    "cmaes.num_elites" => Int(64), "mu";
    "cmaes.sigma" => Float(0.1), "initial step size";
    "cmaes.max_dim" => Int(4096), "refuse genotypes longer than this";

    "ppo.hidden" => Str("256,256"), "hidden widths of actor and critic";
    "ppo.layer_norm" => Bool(false), "layer normalization on hidden layers";
    "ppo.obs_norm" => Str("none"), "none | vbn | rs";
    "ppo.actor_loss_weight" => Float(1.0), "clipped surrogate weight";
    "ppo.critic_loss_weight" => Float(0.5), "value loss weight";
    "ppo.entropy_weight" => Float(-0.01), "entropy weight (negative rewards entropy)";
    "ppo.gamma" => Float(0.99), "discount factor";
    "ppo.gae_lambda" => Float(0.95), "GAE factor";
    "ppo.clip_eps" => Float(0.2), "ratio clip";
    "ppo.lr" => Float(3e-4), "Adam learning rate";
    "ppo.max_grad_norm" => Float(10.0), "global gradient-norm clip";
    "ppo.epochs" => Int(4), "passes over each rollout";
    "ppo.minibatch_size" => Int(256), "rows per gradient step";
    "ppo.num_envs" => Int(4), "parallel lanes";
    "ppo.rollout_len" => Int(512), "steps per lane per iteration";
    "ppo.normalize_advantages" => Bool(true), "standardize advantages per minibatch";

    "td3.hidden" => Str("256,256"), "hidden widths of actor and critics";
    "td3.layer_norm" => Bool(false), "layer normalization on hidden layers";
    "td3.gamma" => Float(0.99), "discount factor";
    "td3.tau" => Float(0.005), "soft update ratio";
    "td3.exploration_noise" => Float(0.1), "Gaussian std added to rollout actions";
    "td3.policy_noise" => Float(0.2), "target smoothing noise std";
    "td3.noise_clip" => Float(0.5), "target smoothing noise clip";
    "td3.batch_size" => Int(256), "minibatch size";
    "td3.actor_lr" => Float(3e-4), "actor Adam learning rate";
    "td3.critic_lr" => Float(3e-4), "critic Adam learning rate";
    "td3.actor_update_interval" => Int(2), "critic steps per actor step (standalone TD3)";
    "td3.random_timesteps" => Int(10000), "uniform-random steps collected before learning (standalone TD3)";
    "td3.num_envs" => Int(1), "parallel lanes (standalone TD3)";
    "td3.rollout_steps" => Int(2), "steps per lane per iteration (standalone TD3)";
    "td3.updates_per_step" => Int(1), "gradient updates per sampled step (standalone TD3)";
    "td3.buffer_size" => Int(1_000_000), "replay capacity";

    "erl.pop_size" => Int(10), "population size";
    "erl.fitness_episodes" => Int(1), "episodes per fitness evaluation";
    "erl.warmup_iters" => Int(10), "initial iterations without RL updates";
    "erl.random_timesteps" => Int(0), "uniform-random steps prefilled into the buffer";
    "erl.rl_updates" => Str("aligned"), "aligned (updates = sampled timesteps) | fixed";
    "erl.fixed_updates" => Int(4096), "RL updates per iteration in fixed mode";
    "erl.elites" => Int(1), "members copied unchanged";
    "erl.tournament_size" => Int(3), "tournament size for parent selection";
    "erl.mutation_std" => Float(0.1), "Gaussian mutation std";
    "erl.mutation_prob" => Float(0.1), "per-coordinate mutation probability";
    "erl.sync_period" => Int(1), "copy the RL actor into the population every this many iterations";
    "erl.rl_episodes" => Int(1), "exploration episodes sampled by the RL actor per iteration";
    "erl.hidden" => Str("256,256"), "hidden widths of actors and critics";
    "erl.layer_norm" => Bool(true), "layer normalization on hidden layers";
    "erl.actor_update_interval" => Int(1), "critic steps per actor step";

    "cemrl.pop_size" => Int(10), "population size";
    "cemrl.num_elites" => Int(5), "elites refitting the distribution";
    "cemrl.num_rl_agents" => Int(5), "candidates receiving RL updates per iteration";
    "cemrl.init_var" => Float(1e-3), "initial per-coordinate variance";
    "cemrl.noise_start" => Float(1e-3), "initial additive variance floor";
    "cemrl.noise_end" => Float(1e-5), "final additive variance floor";
    "cemrl.noise_decay_iters" => Int(1000), "iterations over which the floor decays";
    "cemrl.fitness_episodes" => Int(1), "episodes per fitness evaluation";
    "cemrl.warmup_iters" => Int(10), "initial iterations without RL updates";
    "cemrl.random_timesteps" => Int(25600), "uniform-random steps prefilled into the buffer";
    "cemrl.rl_updates" => Str("aligned"), "aligned (updates = previous iteration's timesteps) | fixed";
    "cemrl.fixed_updates" => Int(4096), "RL updates per iteration in fixed mode";
    "cemrl.hidden" => Str("256,256"), "hidden widths of actors and critic";
    "cemrl.layer_norm" => Bool(true), "layer normalization on hidden layers";
    "cemrl.actor_update_interval" => Int(1), "critic steps per actor step";

    "pbt.inner" => Str("ppo"), "ppo | synthetic";
    "pbt.pop_size" => Int(128), "population size";
    "pbt.warmup_steps" => Int(256), "inner steps before the first selection";
    "pbt.workflow_steps_per_iter" => Int(64), "inner steps per meta-iteration";
    "pbt.perturb_factor" => Float(0.2), "explore multiplies by 1 +/- this";
    "pbt.selection_ratio" => Float(0.2), "fraction replaced / protected";
    "pbt.meta_episodes" => Int(16), "episodes for the meta-objective";
    "pbt.cso_coefficients" => Str("coordinate"), "coordinate | pair: how CSO draws r1, r2";
    "pbt.search.actor_loss_weight.low" => Float(0.01), "";
    "pbt.search.actor_loss_weight.high" => Float(10.0), "";
    "pbt.search.actor_loss_weight.scale" => Str("log"), "linear | log | log1m";
    "pbt.search.critic_loss_weight.low" => Float(0.01), "";
    "pbt.search.critic_loss_weight.high" => Float(10.0), "";
    "pbt.search.critic_loss_weight.scale" => Str("log"), "";
    "pbt.search.entropy_weight.low" => Float(-1.0), "";
    "pbt.search.entropy_weight.high" => Float(-1e-5), "";
    "pbt.search.entropy_weight.scale" => Str("log"), "";
    "pbt.search.gamma.low" => Float(0.86466), "";
    "pbt.search.gamma.high" => Float(0.99999), "";
    "pbt.search.gamma.scale" => Str("log1m"), "";
    "pbt.search.gae_lambda.low" => Float(0.63212), "";
    "pbt.search.gae_lambda.high" => Float(0.99999), "";
    "pbt.search.gae_lambda.scale" => Str("log1m"), "";
    "pbt.search.clip_eps.low" => Float(0.01), "";
    "pbt.search.clip_eps.high" => Float(0.5), "";
    "pbt.search.clip_eps.scale" => Str("log"), "";
    "pbt.search.x.low" => Float(1e-5), "synthetic inner workflow";
    "pbt.search.x.high" => Float(10.0), "";
    "pbt.search.x.scale" => Str("log"), "";
    "synthetic.optimum" => Float(0.01), "argmax of the synthetic meta-objective -(log10 x - log10 optimum)^2";
};

/// Keys that describe how a run is executed rather than what it computes.
/// They are left out of the metrics header.
pub const RUNTIME_KEYS: &[&str] = &["exec.workers", "output.dir", "checkpoint.interval"];

/// Fully resolved configuration: every schema key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA.iter().map(|d| (d.key.to_string(), (d.default)())).collect(),
        }
    }
}

fn def(key: &str) -> Option<&'static KeyDef> {
    SCHEMA.iter().find(|d| d.key == key)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut cfg = Config::default();
        for (key, v) in flat {
            let value = match v {
                toml::Value::Boolean(b) => Value::Bool(b),
                toml::Value::Integer(i) => Value::Int(i),
                toml::Value::Float(x) => Value::Float(x),
                toml::Value::String(s) => Value::Str(s),
                toml::Value::Array(a) => {
                    // hidden = [64, 64] is accepted as "64,64"
                    let parts: Option<Vec<String>> = a.iter().map(|x| x.as_integer().map(|i| i.to_string())).collect();
                    match parts {
                        Some(p) => Value::Str(p.join(",")),
                        None => return Err(Error::config(key, "arrays must hold integers")),
                    }
                }
                _ => return Err(Error::config(key, "unsupported value type")),
            };
            cfg.insert(&key, value)?;
        }
        Ok(cfg)
    }

    fn insert(&mut self, key: &str, value: Value) -> Result<()> {
        let d = def(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        let coerced = match ((d.default)(), value) {
            (Value::Bool(_), v @ Value::Bool(_)) => v,
            (Value::Int(_), v @ Value::Int(_)) => v,
            (Value::Int(_), Value::Float(x)) if x.fract() == 0.0 && x.abs() < 9e15 => Value::Int(x as i64),
            (Value::Float(_), Value::Int(i)) => Value::Float(i as f64),
            (Value::Float(_), v @ Value::Float(_)) => v,
            (Value::Str(_), v @ Value::Str(_)) => v,
            (want, got) => {
                return Err(Error::config(key, format!("expected {}, got {}", want.kind(), got.kind())));
            }
        };
        self.values.insert(key.to_string(), coerced);
        Ok(())
    }

    /// Applies a `key=value` override; the value is parsed according to the key's type.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let d = def(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        let value = match (d.default)() {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| Error::config(key, "expected true or false"))?),
            Value::Int(_) => match raw.parse::<i64>() {
                Ok(i) => Value::Int(i),
                Err(_) => Value::Float(raw.parse().map_err(|_| Error::config(key, "expected an integer"))?),
            },
            Value::Float(_) => Value::Float(raw.parse().map_err(|_| Error::config(key, "expected a number"))?),
            Value::Str(_) => Value::Str(raw.to_string()),
        };
        self.insert(key, value)
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` missing from the schema"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(x) => *x,
            Value::Int(i) => *i as f64,
            v => panic!("config key `{key}` is {}", v.kind()),
        }
    }

    pub fn i64(&self, key: &str) -> i64 {
        match self.get(key) {
            Value::Int(i) => *i,
            v => panic!("config key `{key}` is {}", v.kind()),
        }
    }

    /// Non-negative integer value.
    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.i64(key)).map_err(|_| Error::config(key, "must be non-negative"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        u64::try_from(self.i64(key)).map_err(|_| Error::config(key, "must be non-negative"))
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(b) => *b,
            v => panic!("config key `{key}` is {}", v.kind()),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(s) => s,
            v => panic!("config key `{key}` is {}", v.kind()),
        }
    }

    /// Positive float.
    pub fn positive(&self, key: &str) -> Result<f64> {
        let v = self.f64(key);
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::config(key, format!("must be positive, got {v}")))
        }
    }

    /// Comma-separated hidden widths.
    pub fn hidden(&self, key: &str) -> Result<Vec<usize>> {
        crate::net::parse_hidden(self.str(key))
            .ok_or_else(|| Error::config(key, "expected comma-separated positive widths, e.g. \"64,64\""))
    }

    /// Every key with its value, in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Provenance for the metrics header: every key except [`RUNTIME_KEYS`].
    pub fn provenance(&self) -> serde_json::Map<String, serde_json::Value> {
        self.iter()
            .filter(|(k, _)| !RUNTIME_KEYS.contains(k) && !k.starts_with("budget."))
            .map(|(k, v)| (k.to_string(), v.to_json()))
            .collect()
    }

    /// Markdown table of the schema.
    pub fn describe() -> String {
        let mut s = String::from("| key | default | description |\n|---|---|---|\n");
        for d in SCHEMA {
            s.push_str(&format!("| `{}` | `{}` | {} |\n", d.key, (d.default)(), d.doc));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_tables_flatten_to_dotted_keys() {
        let c = Config::from_toml_str("workflow = \"ppo\"\n[ppo]\nlr = 1e-3\nepochs = 2\nhidden = [64, 64]\n").unwrap();
        assert_eq!(c.str("workflow"), "ppo");
        assert_eq!(c.f64("ppo.lr"), 1e-3);
        assert_eq!(c.i64("ppo.epochs"), 2);
        assert_eq!(c.hidden("ppo.hidden").unwrap(), vec![64, 64]);
        let d = Config::from_toml_str("[td3]\nbuffer_size = 1e6\n").unwrap();
        assert_eq!(d.i64("td3.buffer_size"), 1_000_000);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        match Config::from_toml_str("[ppo]\nlearning_rate = 1.0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ppo.learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(Config::from_toml_str("seed = \"x\"\n").is_err());
        assert!(Config::from_toml_str("seed = 1.5\n").is_err());
        let mut c = Config::default();
        assert!(c.set("es.algo").is_err());
        assert!(c.set("nope=1").is_err());
        assert!(c.set("es.mirrored=true").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::from_toml_str("seed = 3\n[es]\nalgo = \"openes\"\n").unwrap();
        c.set("es.algo=ars").unwrap();
        c.set("seed=7").unwrap();
        c.set("openes.lr=0.5").unwrap();
        assert_eq!((c.str("es.algo"), c.i64("seed"), c.f64("openes.lr")), ("ars", 7, 0.5));
    }

    #[test]
    fn every_key_has_a_default_of_its_type() {
        let c = Config::default();
        for d in SCHEMA {
            assert_eq!(c.get(d.key), &(d.default)());
        }
        let mut seen = std::collections::HashSet::new();
        assert!(SCHEMA.iter().all(|d| seen.insert(d.key)), "duplicate key");
        assert_eq!(c.i64("pbt.pop_size"), 128);
        assert_eq!(c.i64("pbt.meta_episodes"), 16);
    }
}
