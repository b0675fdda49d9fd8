//! The end-to-end stages over a fixed output directory layout:
//!
//! ```text
//! <out>/corpora/manifest.jsonl      corpora, one file per document
//! <out>/tasks/index.json            validation datasets (JSON-Lines each)
//! <out>/base.gapc                   pretrained base checkpoint
//! <out>/pretrain_log.jsonl          training log
//! <out>/familiarity.json            bucket familiarity gate
//! <out>/baseline.json               epoch-0 evaluation of the base
//! <out>/runs.jsonl                  sweep run log
//! <out>/best.gapc                   best-epoch weights of the sweep's best run
//! <out>/report/                     scatter.csv, medians.csv, scatter.svg, summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{PipelineConfig, SeedStream};
use crate::corpus::{build_desk_corpora, build_desk_tasks, familiarity_gate, load_desk_corpora, write_desk_corpora, FamiliarityGate};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, EvalReport, Task, TaskKind};
use crate::model::ModelParams;
use crate::pretrain::{build_stream, pretrain, windows};
use crate::report::write_report;
use crate::sweep::{aggregate, check_degraded, materialize_best, plan_runs, read_log, run_sweep, LoggedRun, SweepJob, SweepSummary};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpora_dir(&self) -> PathBuf {
        self.root.join("corpora")
    }
    pub fn manifest(&self) -> PathBuf {
        self.corpora_dir().join("manifest.jsonl")
    }
    pub fn tasks_dir(&self) -> PathBuf {
        self.root.join("tasks")
    }
    pub fn tasks_index(&self) -> PathBuf {
        self.tasks_dir().join("index.json")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base.gapc")
    }
    pub fn last_good_checkpoint(&self) -> PathBuf {
        self.root.join("last_good.gapc")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain_log.jsonl")
    }
    pub fn familiarity(&self) -> PathBuf {
        self.root.join("familiarity.json")
    }
    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.json")
    }
    pub fn runs_log(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best.gapc")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn single_run_dir(&self) -> PathBuf {
        self.root.join("single")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskIndexEntry {
    pub name: String,
    pub kind: TaskKind,
    /// Relative to the index file.
    pub file: PathBuf,
}

/// Generates corpora and validation datasets under `<out>`.
pub fn build_corpora(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let corpora = build_desk_corpora(&cfg.corpora, cfg.derived_seed(SeedStream::Corpora))?;
    write_desk_corpora(&layout.corpora_dir(), &corpora)?;
    let tasks = build_desk_tasks(cfg.corpora.task_examples, cfg.derived_seed(SeedStream::Tasks));
    let mut index = Vec::new();
    for t in &tasks {
        let file = PathBuf::from(format!("{}.jsonl", t.name));
        t.save(&layout.tasks_dir().join(&file))?;
        index.push(TaskIndexEntry {
            name: t.name.clone(),
            kind: t.kind(),
            file,
        });
    }
    write_json(&layout.tasks_index(), &index)
}

pub fn load_tasks(layout: &Layout) -> Result<Vec<Task>> {
    let index: Vec<TaskIndexEntry> = read_json(&layout.tasks_index())?;
    index
        .iter()
        .map(|e| Task::load(&e.name, e.kind, &layout.tasks_dir().join(&e.file)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub first_train_loss: f64,
    pub last_train_loss: f64,
    pub best_held_out_loss: Option<f64>,
    pub gate: FamiliarityGate,
}

/// Pretrains the base model on the training corpus plus the duplicated
/// memorized documents, then measures the familiarity gate.
pub fn pretrain_base(cfg: &PipelineConfig, layout: &Layout) -> Result<PretrainSummary> {
    let corpora = load_desk_corpora(&layout.manifest())?;
    let docs = corpora.pretraining_documents(cfg.derived_seed(SeedStream::PretrainShuffle));
    let stream = build_stream(&docs);
    let held_out = windows(corpora.validation.tokens(), cfg.model.max_seq_len);
    if held_out.is_empty() {
        return Err(Error::InsufficientText {
            corpus: corpora.validation.id().to_string(),
            have: corpora.validation.tokens().len(),
            need: cfg.model.max_seq_len,
        });
    }
    let init = ModelParams::init(cfg.model.clone(), cfg.derived_seed(SeedStream::ModelInit))?;
    let out = pretrain(init, &stream, &held_out, &cfg.pretrain, &layout.last_good_checkpoint())?;
    checkpoint::save(&out.params, &layout.base_checkpoint())?;
    let mut log = String::new();
    for e in &out.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    let log_path = layout.pretrain_log();
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    let gate = familiarity_gate(
        &out.params,
        &corpora,
        cfg.sweep.gate_snippets,
        cfg.gap.snippet_len,
        cfg.derived_seed(SeedStream::Gate),
    )?;
    write_json(&layout.familiarity(), &gate)?;
    Ok(PretrainSummary {
        steps_run: out.steps_run,
        stopped_early: out.stopped_early,
        first_train_loss: out.log.first().map_or(f64::NAN, |e| e.train_loss),
        last_train_loss: out.log.last().map_or(f64::NAN, |e| e.train_loss),
        best_held_out_loss: out.log.iter().filter_map(|e| e.held_out_loss).reduce(f64::min),
        gate,
    })
}

fn base_path(cfg: &PipelineConfig, layout: &Layout) -> PathBuf {
    cfg.sweep.base_checkpoint.clone().unwrap_or_else(|| layout.base_checkpoint())
}

/// Evaluates a checkpoint on the validation suite.
pub fn evaluate_checkpoint(cfg: &PipelineConfig, layout: &Layout, path: &Path) -> Result<EvalReport> {
    let params = checkpoint::load(path)?;
    let tasks = load_tasks(layout)?;
    evaluate_suite(&params, &tasks, cfg.sweep.eval_cap, cfg.derived_seed(SeedStream::EvalSubsample))
}

struct Prepared {
    base: ModelParams,
    digest: String,
    tasks: Vec<Task>,
    baseline: EvalReport,
    specs: Vec<crate::sweep::RunSpec>,
}

fn prepare(cfg: &PipelineConfig, layout: &Layout) -> Result<Prepared> {
    let path = base_path(cfg, layout);
    let base = checkpoint::load(&path)?;
    let digest = checkpoint::file_digest(&path)?;
    let corpora = load_desk_corpora(&layout.manifest())?;
    let gate = familiarity_gate(
        &base,
        &corpora,
        cfg.sweep.gate_snippets,
        cfg.gap.snippet_len,
        cfg.derived_seed(SeedStream::Gate),
    )?;
    write_json(&layout.familiarity(), &gate)?;
    if !gate.passed {
        let medians: Vec<String> = gate.medians.iter().map(|(b, m)| format!("{b}={m:.4}")).collect();
        return Err(Error::ValidityGate(format!(
            "median familiarity must rise from memorized to out_of_distribution, got {}",
            medians.join(", ")
        )));
    }
    let tasks = load_tasks(layout)?;
    let baseline = evaluate_suite(&base, &tasks, cfg.sweep.eval_cap, cfg.derived_seed(SeedStream::EvalSubsample))?;
    write_json(&layout.baseline(), &baseline)?;
    let specs = plan_runs(
        &corpora,
        &cfg.sweep.buckets,
        cfg.sweep.runs_per_bucket,
        cfg.gap.snippet_len,
        cfg.derived_seed(SeedStream::Snippets),
        cfg.derived_seed(SeedStream::Runs),
    )?;
    Ok(Prepared {
        base,
        digest,
        tasks,
        baseline,
        specs,
    })
}

fn job<'a>(cfg: &PipelineConfig, layout: &Layout, p: &'a Prepared, resume: bool) -> SweepJob<'a> {
    SweepJob {
        base: &p.base,
        base_digest: Some(p.digest.clone()),
        specs: p.specs.clone(),
        gap: cfg.gap.clone(),
        tasks: &p.tasks,
        eval_cap: cfg.sweep.eval_cap,
        eval_seed: cfg.derived_seed(SeedStream::EvalSubsample),
        baseline: p.baseline.clone(),
        jobs: cfg.sweep.jobs,
        timing: cfg.sweep.timing,
        log_path: layout.runs_log(),
        resume,
    }
}

/// Aggregates the run log into the report directory. A pure function of
/// `runs.jsonl` and `baseline.json`.
pub fn report(layout: &Layout) -> Result<SweepSummary> {
    let runs = read_log(&layout.runs_log())?;
    let baseline_score = match read_json::<EvalReport>(&layout.baseline()) {
        Ok(b) => b.primary_score(),
        Err(Error::Io { .. }) => runs.first().map_or(0.0, |r| r.record.baseline_score),
        Err(e) => return Err(e),
    };
    let summary = aggregate(&runs, baseline_score)?;
    write_report(&summary, &layout.report_dir())?;
    Ok(summary)
}

/// Runs the sweep, writes the report and the best run's checkpoint. Fails
/// with [`Error::MajorityDegraded`] after writing everything if more than
/// half the runs degraded.
pub fn sweep(cfg: &PipelineConfig, layout: &Layout, resume: bool) -> Result<SweepSummary> {
    let prepared = prepare(cfg, layout)?;
    let job = job(cfg, layout, &prepared, resume);
    let outcome = run_sweep(&job)?;
    let summary = report(layout)?;
    if let Some(best) = &summary.best_run {
        materialize_best(&job, best, &layout.best_checkpoint())?;
    }
    check_degraded(outcome.runs.iter().filter(|r| r.record.degraded).count(), outcome.scheduled)?;
    Ok(summary)
}

/// One scheduled run by id, with its best-epoch checkpoint, written under
/// `<out>/single/`.
pub fn single_run(cfg: &PipelineConfig, layout: &Layout, run_id: &str) -> Result<LoggedRun> {
    let prepared = prepare(cfg, layout)?;
    let job = job(cfg, layout, &prepared, false);
    let dir = layout.single_run_dir();
    let run = materialize_best(&job, run_id, &dir.join(format!("{run_id}.gapc")))?;
    let path = dir.join(format!("{run_id}.jsonl"));
    fs::write(&path, run.to_jsonl()?).map_err(|e| Error::io(&path, e))?;
    Ok(run)
}

/// Corpora, pretraining and the sweep, in order.
pub fn run_pipeline(cfg: &PipelineConfig, layout: &Layout) -> Result<SweepSummary> {
    build_corpora(cfg, layout)?;
    pretrain_base(cfg, layout)?;
    sweep(cfg, layout, false)
}
