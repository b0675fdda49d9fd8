//! Many independent GAP runs over snippets from each bucket, an
//! append-only JSON-Lines run log, and aggregation into medians.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ascent::{run_gap, EpochEntry, GapConfig, RunContext, RunRecord};
use crate::checkpoint;
use crate::config::derive_seed;
use crate::corpus::{familiarity_score, sample_snippets, Bucket, DeskCorpora, Snippet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, EvalReport, Task};
use crate::model::ModelParams;
use crate::stats;

/// One scheduled run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub index: usize,
    pub seed: u64,
    pub snippet: Snippet,
}

/// Samples `runs_per_bucket` snippets from each bucket. Run ids are
/// `<bucket tag>-<i:03>`; the seed of run `index` is derived from the
/// master seed and that index alone.
pub fn plan_runs(
    corpora: &DeskCorpora,
    buckets: &[Bucket],
    runs_per_bucket: usize,
    snippet_len: usize,
    snippet_seed: u64,
    run_seed: u64,
) -> Result<Vec<RunSpec>> {
    let mut specs = Vec::new();
    for &b in buckets {
        let snippets = sample_snippets(corpora.bucket(b), runs_per_bucket, snippet_len, derive_seed(snippet_seed, b as u64))?;
        for (i, snippet) in snippets.into_iter().enumerate() {
            let index = specs.len();
            specs.push(RunSpec {
                run_id: format!("{}-{i:03}", b.tag()),
                index,
                seed: derive_seed(run_seed, index as u64),
                snippet,
            });
        }
    }
    Ok(specs)
}

// ---------------------------------------------------------------------------
// Run log

/// Per-epoch line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub run_id: String,
    pub snippet_id: String,
    pub bucket: Option<Bucket>,
    pub epoch: usize,
    pub snippet_nll: f32,
    pub score: f64,
    pub metrics: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Closing line of a run; a run counts as logged only once this is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub run_id: String,
    pub snippet_id: String,
    pub bucket: Option<Bucket>,
    pub snippet_offset: usize,
    pub snippet_len: usize,
    pub familiarity: Option<f64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub steps_taken: usize,
    pub eval_cap: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub baseline_score: f64,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrade_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Epoch(EpochLine),
    Run(RunLine),
}

/// A logged run: the record plus sweep-level facts about it.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedRun {
    pub record: RunRecord,
    pub snippet_offset: usize,
    pub familiarity: Option<f64>,
    pub eval_cap: usize,
}

impl LoggedRun {
    pub fn run_line(&self) -> RunLine {
        let r = &self.record;
        RunLine {
            run_id: r.run_id.clone(),
            snippet_id: r.snippet_id.clone(),
            bucket: r.bucket,
            snippet_offset: self.snippet_offset,
            snippet_len: r.snippet_len,
            familiarity: self.familiarity,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            max_steps: r.max_steps,
            steps_taken: r.steps_taken(),
            eval_cap: self.eval_cap,
            seed: r.seed,
            best_epoch: r.best_epoch,
            best_score: r.best_score,
            baseline_score: r.baseline_score,
            degraded: r.degraded,
            degrade_reason: r.degrade_reason.clone(),
            base_digest: r.base_digest.clone(),
        }
    }

    /// The run's lines, epochs first, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let r = &self.record;
        let mut out = String::new();
        for e in &r.entries {
            let line = LogLine::Epoch(EpochLine {
                run_id: r.run_id.clone(),
                snippet_id: r.snippet_id.clone(),
                bucket: r.bucket,
                epoch: e.epoch,
                snippet_nll: e.snippet_nll,
                score: e.score,
                metrics: e.eval.clone(),
                wall_ms: e.wall_ms,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&LogLine::Run(self.run_line()))?);
        out.push('\n');
        Ok(out)
    }

    fn from_lines(run: RunLine, epochs: Vec<EpochLine>) -> Self {
        let entries = epochs
            .into_iter()
            .map(|e| EpochEntry {
                epoch: e.epoch,
                snippet_nll: e.snippet_nll,
                score: e.score,
                eval: e.metrics,
                wall_ms: e.wall_ms,
            })
            .collect();
        LoggedRun {
            record: RunRecord {
                run_id: run.run_id,
                snippet_id: run.snippet_id,
                bucket: run.bucket,
                snippet_len: run.snippet_len,
                batch_size: run.batch_size,
                learning_rate: run.learning_rate,
                max_steps: run.max_steps,
                seed: run.seed,
                entries,
                best_epoch: run.best_epoch,
                best_score: run.best_score,
                baseline_score: run.baseline_score,
                degraded: run.degraded,
                degrade_reason: run.degrade_reason,
                base_digest: run.base_digest,
            },
            snippet_offset: run.snippet_offset,
            familiarity: run.familiarity,
            eval_cap: run.eval_cap,
        }
    }
}

/// Complete runs in a log, sorted by run id. Lines that do not parse (a
/// torn final write) and epochs of runs that never closed are ignored; if
/// a run id closes twice the first wins.
pub fn parse_log(text: &str) -> Vec<LoggedRun> {
    let mut epochs: BTreeMap<String, Vec<EpochLine>> = BTreeMap::new();
    let mut runs: BTreeMap<String, LoggedRun> = BTreeMap::new();
    for line in text.lines() {
        match serde_json::from_str::<LogLine>(line) {
            Ok(LogLine::Epoch(e)) => {
                if !runs.contains_key(&e.run_id) {
                    epochs.entry(e.run_id.clone()).or_default().push(e);
                }
            }
            Ok(LogLine::Run(r)) => {
                if runs.contains_key(&r.run_id) {
                    continue;
                }
                let mut es = epochs.remove(&r.run_id).unwrap_or_default();
                // keep only the last attempt's epochs if a run was restarted
                if let Some(start) = es.iter().rposition(|e| e.epoch == 0) {
                    es.drain(..start);
                }
                runs.insert(r.run_id.clone(), LoggedRun::from_lines(r, es));
            }
            Err(_) => {}
        }
    }
    runs.into_values().collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LoggedRun>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_log(&text))
}

/// Rewrites `path` to contain only complete runs. Returns their ids.
pub fn compact_log(path: &Path) -> Result<BTreeSet<String>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let runs = read_log(path)?;
    let mut text = String::new();
    for r in &runs {
        text.push_str(&r.to_jsonl()?);
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(runs.into_iter().map(|r| r.record.run_id).collect())
}

/// Serializes whole-run appends from concurrent workers.
pub struct LogAppender {
    file: Mutex<File>,
    path: PathBuf,
}

impl LogAppender {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Mutex::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, run: &LoggedRun) -> Result<()> {
        let text = run.to_jsonl()?;
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(text.as_bytes())
            .and_then(|()| f.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

// ---------------------------------------------------------------------------
// Execution

pub struct SweepJob<'a> {
    pub base: &'a ModelParams,
    pub base_digest: Option<String>,
    pub specs: Vec<RunSpec>,
    pub gap: GapConfig,
    pub tasks: &'a [Task],
    pub eval_cap: usize,
    pub eval_seed: u64,
    pub baseline: EvalReport,
    pub jobs: usize,
    pub timing: bool,
    pub log_path: PathBuf,
    /// Keep complete runs already in the log instead of starting over.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub scheduled: usize,
    /// Runs executed by this invocation (the rest were already logged).
    pub executed: usize,
    pub runs: Vec<LoggedRun>,
}

fn execute(job: &SweepJob<'_>, spec: &RunSpec) -> Result<LoggedRun> {
    let mut snippet = spec.snippet.clone();
    let familiarity = familiarity_score(job.base, &snippet).ok();
    snippet.familiarity = familiarity;
    let cfg = GapConfig {
        seed: spec.seed,
        ..job.gap.clone()
    };
    let ctx = RunContext {
        run_id: spec.run_id.clone(),
        baseline: Some(job.baseline.clone()),
        timing: job.timing,
        base_digest: job.base_digest.clone(),
    };
    let mut eval = |p: &ModelParams| evaluate_suite(p, job.tasks, job.eval_cap, job.eval_seed);
    let record = match run_gap(job.base, &snippet, &cfg, &ctx, &mut eval) {
        Ok(out) => out.record,
        Err(e @ (Error::Io { .. } | Error::Dataset { .. })) => return Err(e),
        // any other failure is kept as a degraded run so the sweep goes on
        Err(e) => RunRecord {
            run_id: spec.run_id.clone(),
            snippet_id: snippet.id.clone(),
            bucket: snippet.bucket,
            snippet_len: snippet.tokens.len(),
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            max_steps: cfg.max_steps,
            seed: cfg.seed,
            entries: Vec::new(),
            best_epoch: None,
            best_score: None,
            baseline_score: job.baseline.primary_score(),
            degraded: true,
            degrade_reason: Some(e.to_string()),
            base_digest: job.base_digest.clone(),
        },
    };
    Ok(LoggedRun {
        record,
        snippet_offset: snippet.offset,
        familiarity,
        eval_cap: job.eval_cap,
    })
}

/// Runs every spec not already logged, appending each finished run to the
/// log as one write. Individual runs never abort the sweep; only I/O
/// failures do.
pub fn run_sweep(job: &SweepJob<'_>) -> Result<SweepOutcome> {
    let done = if job.resume {
        compact_log(&job.log_path)?
    } else {
        if job.log_path.exists() {
            fs::remove_file(&job.log_path).map_err(|e| Error::io(&job.log_path, e))?;
        }
        BTreeSet::new()
    };
    let appender = LogAppender::open(&job.log_path)?;
    let todo: Vec<&RunSpec> = job.specs.iter().filter(|s| !done.contains(&s.run_id)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        todo.par_iter().try_for_each(|spec| {
            let run = execute(job, spec)?;
            appender.append(&run)
        })
    })?;
    let wanted: BTreeSet<&str> = job.specs.iter().map(|s| s.run_id.as_str()).collect();
    let runs: Vec<LoggedRun> = read_log(&job.log_path)?
        .into_iter()
        .filter(|r| wanted.contains(r.record.run_id.as_str()))
        .collect();
    Ok(SweepOutcome {
        scheduled: job.specs.len(),
        executed: todo.len(),
        runs,
    })
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub run_id: String,
    pub bucket: Option<Bucket>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub delta_vs_baseline: f64,
    pub familiarity: Option<f64>,
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: Bucket,
    pub completed: usize,
    pub degraded: usize,
    pub median_best_score: Option<f64>,
    pub iqr_best_score: Option<f64>,
    pub above_baseline: usize,
    pub median_familiarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub scheduled: usize,
    pub completed: usize,
    pub degraded: usize,
    pub degraded_runs: Vec<String>,
    pub baseline_score: f64,
    pub overall_median: f64,
    pub buckets: Vec<BucketSummary>,
    /// Buckets with a median, ordered from lowest to highest median score.
    pub median_ordering: Vec<Bucket>,
    /// Completed runs, sorted by run id.
    pub scatter: Vec<ScatterPoint>,
    pub outliers: Vec<String>,
    /// Highest best score among non-outlier runs; lowest run id on ties.
    pub best_run: Option<String>,
}

/// Pure summary of logged runs. Degraded runs are counted but never enter
/// medians or the scatter. A run is an outlier when its best score is more
/// than three interquartile ranges below its bucket's median.
pub fn aggregate(runs: &[LoggedRun], baseline_score: f64) -> Result<SweepSummary> {
    let mut sorted: Vec<&LoggedRun> = runs.iter().collect();
    sorted.sort_by(|a, b| a.record.run_id.cmp(&b.record.run_id));
    let completed: Vec<&LoggedRun> = sorted
        .iter()
        .copied()
        .filter(|r| !r.record.degraded && r.record.best_score.is_some())
        .collect();
    if completed.is_empty() {
        return Err(Error::Empty("completed runs"));
    }
    let degraded_runs: Vec<String> = sorted
        .iter()
        .filter(|r| r.record.degraded || r.record.best_score.is_none())
        .map(|r| r.record.run_id.clone())
        .collect();

    let mut present: Vec<Bucket> = sorted.iter().filter_map(|r| r.record.bucket).collect();
    present.sort();
    present.dedup();

    let mut buckets = Vec::new();
    let mut thresholds: BTreeMap<Bucket, f64> = BTreeMap::new();
    for &b in &present {
        let in_bucket: Vec<&&LoggedRun> = completed.iter().filter(|r| r.record.bucket == Some(b)).collect();
        let scores: Vec<f64> = in_bucket.iter().filter_map(|r| r.record.best_score).collect();
        let fam: Vec<f64> = in_bucket.iter().filter_map(|r| r.familiarity).collect();
        let median = stats::median(&scores);
        let iqr = stats::iqr(&scores);
        if let (Some(m), Some(q)) = (median, iqr) {
            thresholds.insert(b, m - 3.0 * q);
        }
        buckets.push(BucketSummary {
            bucket: b,
            completed: scores.len(),
            degraded: sorted
                .iter()
                .filter(|r| r.record.bucket == Some(b) && (r.record.degraded || r.record.best_score.is_none()))
                .count(),
            median_best_score: median,
            iqr_best_score: iqr,
            above_baseline: scores.iter().filter(|&&s| s > baseline_score).count(),
            median_familiarity: stats::median(&fam),
        });
    }

    let scatter: Vec<ScatterPoint> = completed
        .iter()
        .map(|r| {
            let s = r.record.best_score.expect("completed run has a score");
            ScatterPoint {
                run_id: r.record.run_id.clone(),
                bucket: r.record.bucket,
                best_epoch: r.record.best_epoch.unwrap_or(0),
                best_score: s,
                delta_vs_baseline: s - baseline_score,
                familiarity: r.familiarity,
                outlier: r.record.bucket.and_then(|b| thresholds.get(&b)).is_some_and(|&t| s < t),
            }
        })
        .collect();
    let mut best: Option<&ScatterPoint> = None;
    for p in scatter.iter().filter(|p| !p.outlier) {
        if best.map_or(true, |b| p.best_score > b.best_score) {
            best = Some(p);
        }
    }
    let mut ordering: Vec<(Bucket, f64)> =
        buckets.iter().filter_map(|b| b.median_best_score.map(|m| (b.bucket, m))).collect();
    ordering.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let all_scores: Vec<f64> = scatter.iter().map(|p| p.best_score).collect();

    Ok(SweepSummary {
        scheduled: sorted.len(),
        completed: completed.len(),
        degraded: degraded_runs.len(),
        degraded_runs,
        baseline_score,
        overall_median: stats::median(&all_scores).expect("non-empty"),
        buckets,
        median_ordering: ordering.into_iter().map(|(b, _)| b).collect(),
        outliers: scatter.iter().filter(|p| p.outlier).map(|p| p.run_id.clone()).collect(),
        best_run: best.map(|p| p.run_id.clone()),
        scatter,
    })
}

/// The majority-degraded failure: more than half the scheduled runs.
pub fn check_degraded(summary_degraded: usize, scheduled: usize) -> Result<()> {
    if summary_degraded * 2 > scheduled {
        return Err(Error::MajorityDegraded {
            degraded: summary_degraded,
            scheduled,
        });
    }
    Ok(())
}

/// Re-runs one logged run from the base model and writes its best-epoch
/// parameters. Runs are deterministic, so this reproduces the logged
/// result exactly.
pub fn materialize_best(job: &SweepJob<'_>, run_id: &str, path: &Path) -> Result<LoggedRun> {
    let spec = job
        .specs
        .iter()
        .find(|s| s.run_id == run_id)
        .ok_or_else(|| Error::Config(format!("no scheduled run {run_id:?}")))?;
    let mut snippet = spec.snippet.clone();
    snippet.familiarity = familiarity_score(job.base, &snippet).ok();
    let cfg = GapConfig {
        seed: spec.seed,
        ..job.gap.clone()
    };
    let ctx = RunContext {
        run_id: spec.run_id.clone(),
        baseline: Some(job.baseline.clone()),
        timing: false,
        base_digest: job.base_digest.clone(),
    };
    let mut eval = |p: &ModelParams| evaluate_suite(p, job.tasks, job.eval_cap, job.eval_seed);
    let out = run_gap(job.base, &snippet, &cfg, &ctx, &mut eval)?;
    checkpoint::save(&out.best_params, path)?;
    Ok(LoggedRun {
        record: out.record,
        snippet_offset: snippet.offset,
        familiarity: snippet.familiarity,
        eval_cap: job.eval_cap,
    })
}
