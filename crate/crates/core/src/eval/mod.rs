//! Validation tasks: dialogue generation scored by unigram F1 / diversity /
//! length, and verbalizer classification scored by accuracy.

pub mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::fnv1a64;
use crate::decode::{continuation_logprobs, greedy_decode};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::{detokenize, tokenize, EOS, NEWLINE};

pub use metrics::{diversity, normalize, unigram_f1};

/// Generation budget per response.
pub const MAX_NEW_TOKENS: usize = 32;
/// Per-dataset example cap.
pub const DEFAULT_EVAL_CAP: usize = 320;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub turns: Vec<String>,
    pub reference: String,
}

impl DialogueExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.turns.is_empty() {
            return Err("dialogue needs at least one turn".into());
        }
        if self.reference.trim().is_empty() {
            return Err("dialogue reference is empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub prompt: String,
    pub options: Vec<String>,
    pub label: usize,
}

impl ClassificationExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.options.len() < 2 {
            return Err("classification needs at least two options".into());
        }
        if self.label >= self.options.len() {
            return Err(format!("label {} out of range", self.label));
        }
        for (i, o) in self.options.iter().enumerate() {
            if o.is_empty() {
                return Err("empty option".into());
            }
            if self.options[..i].contains(o) {
                return Err(format!("duplicate option {o:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Dialogue,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Dialogue(Vec<DialogueExample>),
    Classification(Vec<ClassificationExample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub data: TaskData,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self.data {
            TaskData::Dialogue(_) => TaskKind::Dialogue,
            TaskData::Classification(_) => TaskKind::Classification,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TaskData::Dialogue(v) => v.len(),
            TaskData::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads a JSON-Lines dataset; blank lines are ignored.
    pub fn load(name: &str, kind: TaskKind, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, msg: String| Error::Dataset {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let data = match kind {
            TaskKind::Dialogue => {
                let mut v = Vec::new();
                for (i, line) in lines {
                    let ex: DialogueExample = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
                    ex.validate().map_err(|m| bad(i + 1, m))?;
                    v.push(ex);
                }
                TaskData::Dialogue(v)
            }
            TaskKind::Classification => {
                let mut v = Vec::new();
                for (i, line) in lines {
                    let ex: ClassificationExample =
                        serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
                    ex.validate().map_err(|m| bad(i + 1, m))?;
                    v.push(ex);
                }
                TaskData::Classification(v)
            }
        };
        Ok(Self {
            name: name.to_string(),
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        match &self.data {
            TaskData::Dialogue(v) => {
                for ex in v {
                    out.push_str(&serde_json::to_string(ex)?);
                    out.push('\n');
                }
            }
            TaskData::Classification(v) => {
                for ex in v {
                    out.push_str(&serde_json::to_string(ex)?);
                    out.push('\n');
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `"User 1: a\nUser 2: b\n...\nUser 2:"`. Speakers alternate starting
/// from User 1 and the prompt always ends on an open `User 2:` line.
pub fn build_dialogue_prompt(turns: &[String]) -> Result<String> {
    if turns.is_empty() {
        return Err(Error::Empty("turn list"));
    }
    let mut lines: Vec<String> = turns
        .iter()
        .enumerate()
        .map(|(i, t)| format!("User {}: {}", i % 2 + 1, t))
        .collect();
    lines.push("User 2:".to_string());
    Ok(lines.join("\n"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub n_tokens: usize,
}

/// Greedy response of at most [`MAX_NEW_TOKENS`] tokens, cut at the first
/// generated newline and trimmed.
pub fn generate_response(params: &ModelParams, example: &DialogueExample) -> Result<Generation> {
    let prompt = tokenize(&build_dialogue_prompt(&example.turns)?);
    let out = greedy_decode(params, &prompt, MAX_NEW_TOKENS, &[NEWLINE, EOS])?;
    let text = detokenize(&out).trim().to_string();
    let n_tokens = tokenize(&text).len();
    Ok(Generation { text, n_tokens })
}

/// Index of the option with the highest raw continuation log-likelihood;
/// ties go to the lowest index.
pub fn verbalizer_classify(params: &ModelParams, example: &ClassificationExample) -> Result<usize> {
    let scores = option_scores(params, example)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn option_scores(params: &ModelParams, example: &ClassificationExample) -> Result<Vec<f64>> {
    let prompt = tokenize(&example.prompt);
    let options: Vec<Vec<u32>> = example.options.iter().map(|o| tokenize(o)).collect();
    continuation_logprobs(params, &prompt, &options)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub kind: Option<TaskKind>,
    pub n_examples: usize,
    pub n_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unigram_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Mean unigram F1 across dialogue tasks.
    pub mean_f1: Option<f64>,
    pub mean_diversity: Option<f64>,
    pub mean_gen_length: Option<f64>,
    /// Mean accuracy across classification tasks.
    pub mean_accuracy: Option<f64>,
}

impl EvalReport {
    /// Score used for best-epoch selection: mean dialogue F1, falling back
    /// to mean classification accuracy when there are no dialogue tasks.
    pub fn primary_score(&self) -> f64 {
        self.mean_f1.or(self.mean_accuracy).unwrap_or(0.0)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Deterministic subset of `min(cap, len)` example indices, ascending.
pub fn subsample_indices(task_name: &str, len: usize, cap: usize, seed: u64) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(task_name.as_bytes()));
    let mut idx = index::sample(&mut rng, len, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// A fixed set of tasks evaluated with a per-task cap and sampling seed.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub tasks: Vec<Task>,
    pub cap: usize,
    pub seed: u64,
}

impl EvalSuite {
    pub fn evaluate(&self, params: &ModelParams) -> Result<EvalReport> {
        evaluate_suite(params, &self.tasks, self.cap, self.seed)
    }
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::SequenceTooLong { .. })
}

pub fn evaluate_suite(params: &ModelParams, tasks: &[Task], cap: usize, seed: u64) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let (mut f1s, mut divs, mut lens, mut accs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for task in tasks {
        let picked = subsample_indices(&task.name, task.len(), cap, seed);
        let mut m = TaskMetrics {
            kind: Some(task.kind()),
            ..Default::default()
        };
        match &task.data {
            TaskData::Dialogue(examples) => {
                let (mut f, mut d, mut l) = (Vec::new(), Vec::new(), Vec::new());
                for &i in &picked {
                    let ex = &examples[i];
                    match generate_response(params, ex) {
                        Ok(g) => {
                            f.push(unigram_f1(&g.text, &ex.reference));
                            d.push(diversity(&g.text));
                            l.push(g.n_tokens as f64);
                        }
                        Err(e) if skippable(&e) => m.n_skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                m.n_examples = f.len();
                m.unigram_f1 = mean(&f);
                m.diversity = mean(&d);
                m.gen_length = mean(&l);
                f1s.extend(m.unigram_f1);
                divs.extend(m.diversity);
                lens.extend(m.gen_length);
            }
            TaskData::Classification(examples) => {
                let mut correct = Vec::new();
                for &i in &picked {
                    let ex = &examples[i];
                    match verbalizer_classify(params, ex) {
                        Ok(pred) => correct.push(if pred == ex.label { 1.0 } else { 0.0 }),
                        Err(e) if skippable(&e) => m.n_skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                m.n_examples = correct.len();
                m.accuracy = mean(&correct);
                accs.extend(m.accuracy);
            }
        }
        report.tasks.insert(task.name.clone(), m);
    }
    report.mean_f1 = mean(&f1s);
    report.mean_diversity = mean(&divs);
    report.mean_gen_length = mean(&lens);
    report.mean_accuracy = mean(&accs);
    Ok(report)
}
