use std::time::Instant;

use super::{Counters, Metrics, Workflow};
use crate::cli::config::Config;
use crate::error::Result;
use crate::exec::Executor;

/// Stop conditions; each non-zero field is a limit and training stops at the
/// first one reached. All zero means no training at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Budget {
    pub iterations: u64,
    pub env_steps: u64,
    pub episodes: u64,
}

impl Budget {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Budget {
            iterations: cfg.u64("budget.iterations")?,
            env_steps: cfg.u64("budget.env_steps")?,
            episodes: cfg.u64("budget.episodes")?,
        })
    }

    pub fn iterations(n: u64) -> Self {
        Budget {
            iterations: n,
            ..Budget::default()
        }
    }

    pub fn reached(&self, c: &Counters) -> bool {
        let hit = |limit: u64, v: u64| limit > 0 && v >= limit;
        *self == Budget::default()
            || hit(self.iterations, c.iteration)
            || hit(self.env_steps, c.env_steps)
            || hit(self.episodes, c.episodes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LearnOptions {
    pub budget: Budget,
    /// Evaluate after iteration `i` whenever `i % eval_interval == 0` (0 = never).
    pub eval_interval: u64,
    /// Checkpoint after iteration `i` whenever `i % checkpoint_interval == 0`
    /// (0 = only at the end).
    pub checkpoint_interval: u64,
}

impl LearnOptions {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(LearnOptions {
            budget: Budget::from_config(cfg)?,
            eval_interval: cfg.u64("eval.interval")?,
            checkpoint_interval: cfg.u64("checkpoint.interval")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Step,
    Eval,
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Step => "step",
            RecordKind::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub counters: Counters,
    pub metrics: Metrics,
    /// Wall-clock time of the step or evaluation; kept out of the metrics stream.
    pub elapsed_ms: f64,
}

pub trait RecordSink {
    fn record(&mut self, rec: &Record) -> Result<()>;

    fn checkpoint(&mut self, _wf: &dyn Workflow) -> Result<()> {
        Ok(())
    }
}

impl RecordSink for Vec<Record> {
    fn record(&mut self, rec: &Record) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Steps `wf` until the budget is met, evaluating and checkpointing on cadence.
/// A final checkpoint is always written, also when no step was taken.
pub fn learn(wf: &mut dyn Workflow, exec: &Executor, opts: &LearnOptions, sink: &mut dyn RecordSink) -> Result<()> {
    while !opts.budget.reached(&wf.counters()) {
        let t = Instant::now();
        let metrics = wf.step(exec)?;
        let counters = wf.counters();
        sink.record(&Record {
            kind: RecordKind::Step,
            counters,
            metrics,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
        })?;
        let i = counters.iteration;
        if opts.eval_interval > 0 && i % opts.eval_interval == 0 {
            let t = Instant::now();
            let rep = wf.evaluate(exec)?;
            let mut m = Metrics::default();
            m.push("eval/episode_return_mean", rep.mean);
            m.push("eval/episode_return_std", rep.std);
            m.push("eval/episodes", rep.episodes as f64);
            sink.record(&Record {
                kind: RecordKind::Eval,
                counters,
                metrics: m,
                elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
            })?;
        }
        if opts.checkpoint_interval > 0 && i % opts.checkpoint_interval == 0 {
            sink.checkpoint(wf)?;
        }
    }
    sink.checkpoint(wf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::SyntheticInner;

    struct Counting(Vec<Record>, usize);

    impl RecordSink for Counting {
        fn record(&mut self, rec: &Record) -> Result<()> {
            self.0.push(rec.clone());
            Ok(())
        }

        fn checkpoint(&mut self, _: &dyn Workflow) -> Result<()> {
            self.1 += 1;
            Ok(())
        }
    }

    #[test]
    fn record_count_is_steps_plus_evals() {
        for (k, c) in [(0, 3), (7, 3), (9, 3), (5, 0), (4, 1)] {
            let mut wf = SyntheticInner::new(1.0, 0.01);
            let mut sink = Counting(Vec::new(), 0);
            let opts = LearnOptions {
                budget: Budget::iterations(k),
                eval_interval: c,
                checkpoint_interval: 0,
            };
            learn(&mut wf, &Executor::sequential(), &opts, &mut sink).unwrap();
            let evals = if c == 0 { 0 } else { k / c };
            assert_eq!(sink.0.len() as u64, k + evals);
            assert_eq!(sink.1, 1);
            assert_eq!(wf.counters().iteration, k);
        }
    }

    #[test]
    fn first_reached_limit_stops() {
        let b = Budget {
            iterations: 10,
            env_steps: 100,
            episodes: 0,
        };
        let c = |iteration, env_steps| Counters {
            iteration,
            env_steps,
            ..Counters::default()
        };
        assert!(!b.reached(&c(9, 99)));
        assert!(b.reached(&c(10, 0)));
        assert!(b.reached(&c(1, 100)));
        assert!(Budget::default().reached(&c(0, 0)));
    }
}
