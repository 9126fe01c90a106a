use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value as Json};

use super::checkpoint::Checkpoint;
use super::config::Config;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::workflow::{build, learn, Counters, LearnOptions, Record, RecordSink, Workflow};

/// Overrides `output.dir` unless `--out` is given.
pub const OUT_DIR_ENV: &str = "ERL_OUT_DIR";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    /// `key=value` assignments applied after the file, in order.
    pub overrides: Vec<String>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    /// Continue from `checkpoint.bin` in the output directory if present.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub counters: Counters,
    pub resumed: bool,
}

/// Process exit status for an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

/// Loads the config file (if any) and applies the overrides.
pub fn load_config(args: &RunArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", p.display())))?;
            Config::from_toml_str(&text)?
        }
        None => Config::default(),
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    if let Some(w) = args.workers {
        cfg.set(&format!("exec.workers={w}"))?;
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &Config) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    match std::env::var(OUT_DIR_ENV) {
        Ok(d) if !d.is_empty() => PathBuf::from(d),
        _ => PathBuf::from(cfg.str("output.dir")),
    }
}

pub fn header(cfg: &Config, workflow: &str) -> Json {
    json!({"type": "header", "workflow": workflow, "config": Json::Object(cfg.provenance())})
}

pub fn record_json(rec: &Record) -> Json {
    let c = rec.counters;
    let mut m = Map::new();
    m.insert("type".into(), rec.kind.name().into());
    m.insert("iteration".into(), c.iteration.into());
    m.insert("env_steps".into(), c.env_steps.into());
    m.insert("episodes".into(), c.episodes.into());
    m.insert("rl_updates".into(), c.rl_updates.into());
    for (k, v) in &rec.metrics.0 {
        m.insert(k.clone(), Json::from(*v));
    }
    Json::Object(m)
}

/// Appends metric lines and writes checkpoints into one directory.
pub struct RunSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunSink {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(RunSink {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
        })
    }

    fn line(&mut self, v: &Json) -> Result<()> {
        writeln!(self.metrics, "{v}")?;
        self.metrics.flush()?;
        Ok(())
    }
}

impl RecordSink for RunSink {
    fn record(&mut self, rec: &Record) -> Result<()> {
        self.line(&record_json(rec))?;
        let t = json!({"type": rec.kind.name(), "iteration": rec.counters.iteration, "ms": rec.elapsed_ms});
        writeln!(self.timing, "{t}")?;
        self.timing.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, wf: &dyn Workflow) -> Result<()> {
        let mut ck = Checkpoint::new(wf.id());
        wf.save(&mut ck);
        let tmp = self.dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        ck.save(&tmp)?;
        fs::rename(&tmp, self.dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }
}

/// Keeps the header and every record at or before `iteration`.
fn truncate_lines(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: Json = serde_json::from_str(&line)
            .map_err(|e| Error::Checkpoint(format!("{} is damaged: {e}", path.display())))?;
        let keep = match v.get("iteration").and_then(Json::as_u64) {
            Some(i) => i <= iteration,
            None => true,
        };
        if keep {
            kept.push(line);
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Builds the workflow, trains it to budget and writes metrics plus a final checkpoint.
pub fn run(args: &RunArgs) -> Result<RunSummary> {
    let cfg = load_config(args)?;
    let mut wf = build(&cfg)?;
    let opts = LearnOptions::from_config(&cfg)?;
    let exec = Executor::new(cfg.usize("exec.workers")?)?;
    let dir = out_dir(args, &cfg);
    fs::create_dir_all(&dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let resumed = args.resume && ck_path.exists() && dir.join(METRICS_FILE).exists();
    let mut sink = if resumed {
        let ck = Checkpoint::load(&ck_path, Some(wf.id()))?;
        wf.load(&ck)?;
        let it = wf.counters().iteration;
        truncate_lines(&dir.join(METRICS_FILE), it)?;
        truncate_lines(&dir.join(TIMING_FILE), it)?;
        RunSink::open(&dir, true)?
    } else {
        let mut s = RunSink::open(&dir, false)?;
        s.line(&header(&cfg, wf.id()))?;
        s
    };
    learn(wf.as_mut(), &exec, &opts, &mut sink)?;
    Ok(RunSummary {
        out_dir: dir,
        counters: wf.counters(),
        resumed,
    })
}
