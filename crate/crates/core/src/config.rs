//! `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ascent::{GapConfig, UpdateRule};
use crate::corpus::{Bucket, DeskCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_EVAL_CAP;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;

/// Parsed `key = value` pairs. Values are consumed with [`KvConfig::take`];
/// [`KvConfig::finish`] rejects whatever was never consumed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if values.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Removes and parses `key`, leaving `slot` untouched when absent.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((line, v)) = self.values.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {v:?} ({e})")))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn parse_buckets(s: &str) -> Result<Vec<Bucket>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: Bucket = part.parse()?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("buckets must list at least one bucket".into()));
    }
    Ok(out)
}

fn parse_rule(s: &str) -> Result<UpdateRule> {
    match s {
        "adam" => Ok(UpdateRule::Adam),
        "plain" => Ok(UpdateRule::Plain),
        _ => Err(Error::Config(format!("update_rule must be adam or plain, got {s:?}"))),
    }
}

/// Sweep-level settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub runs_per_bucket: usize,
    pub buckets: Vec<Bucket>,
    /// Examples evaluated per task (at most this many).
    pub eval_cap: usize,
    pub jobs: usize,
    /// Record per-epoch wall-clock time in the run log.
    pub timing: bool,
    /// Base checkpoint; defaults to the one `pretrain` writes.
    pub base_checkpoint: Option<PathBuf>,
    /// Snippets per bucket measured by the familiarity gate.
    pub gate_snippets: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            runs_per_bucket: 100,
            buckets: Bucket::ALL.to_vec(),
            eval_cap: 16,
            jobs: 1,
            timing: false,
            base_checkpoint: None,
            gate_snippets: 100,
        }
    }
}

/// Every setting of the pipeline, from corpus generation to the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpora: DeskCorpusConfig,
    pub pretrain: PretrainConfig,
    pub gap: GapConfig,
    pub sweep: SweepSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            corpora: DeskCorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            gap: GapConfig::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.take("seed", &mut c.seed)?;

        let m = &mut c.model;
        kv.take("n_layers", &mut m.n_layers)?;
        kv.take("n_heads", &mut m.n_heads)?;
        kv.take("d_model", &mut m.d_model)?;
        kv.take("d_ff", &mut m.d_ff)?;
        kv.take("max_seq_len", &mut m.max_seq_len)?;
        kv.take("tie_embeddings", &mut m.tie_embeddings)?;

        let d = &mut c.corpora;
        kv.take("train_docs", &mut d.train_docs)?;
        kv.take("train_doc_bytes", &mut d.train_doc_bytes)?;
        kv.take("memorized_docs", &mut d.memorized_docs)?;
        kv.take("memorized_doc_bytes", &mut d.memorized_doc_bytes)?;
        kv.take("memorized_copies", &mut d.memorized_copies)?;
        kv.take("held_out_docs", &mut d.held_out_docs)?;
        kv.take("validation_docs", &mut d.validation_docs)?;
        kv.take("ood_docs", &mut d.ood_docs)?;
        kv.take("doc_bytes", &mut d.doc_bytes)?;
        kv.take("min_snippets", &mut d.min_snippets)?;
        kv.take("task_examples", &mut d.task_examples)?;

        let p = &mut c.pretrain;
        kv.take("pretrain_steps", &mut p.max_steps)?;
        kv.take("pretrain_batch_windows", &mut p.batch_windows)?;
        kv.take("pretrain_learning_rate", &mut p.learning_rate)?;
        kv.take("pretrain_warmup_steps", &mut p.warmup_steps)?;
        kv.take("pretrain_min_lr_ratio", &mut p.min_lr_ratio)?;
        kv.take("pretrain_eval_every", &mut p.eval_every)?;
        kv.take("pretrain_patience", &mut p.patience)?;

        let g = &mut c.gap;
        kv.take("learning_rate", &mut g.learning_rate)?;
        kv.take("max_steps", &mut g.max_steps)?;
        kv.take("batch_size", &mut g.batch_size)?;
        kv.take("snippet_len", &mut g.snippet_len)?;
        kv.take("adam_beta1", &mut g.adam_beta1)?;
        kv.take("adam_beta2", &mut g.adam_beta2)?;
        kv.take("adam_eps", &mut g.adam_eps)?;
        kv.take("weight_decay", &mut g.weight_decay)?;
        kv.take("dropout", &mut g.dropout)?;
        let mut rule = String::from("adam");
        kv.take("update_rule", &mut rule)?;
        g.rule = parse_rule(&rule)?;

        let s = &mut c.sweep;
        kv.take("runs_per_bucket", &mut s.runs_per_bucket)?;
        kv.take("eval_cap", &mut s.eval_cap)?;
        kv.take("jobs", &mut s.jobs)?;
        kv.take("timing", &mut s.timing)?;
        kv.take("gate_snippets", &mut s.gate_snippets)?;
        let mut buckets = String::new();
        kv.take("buckets", &mut buckets)?;
        if !buckets.is_empty() {
            s.buckets = parse_buckets(&buckets)?;
        }
        let mut base = String::new();
        kv.take("base_checkpoint", &mut base)?;
        if !base.is_empty() {
            s.base_checkpoint = Some(PathBuf::from(base));
        }
        kv.finish()?;
        c.corpora.snippet_len = c.gap.snippet_len;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvConfig::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.gap.validate()?;
        if self.sweep.runs_per_bucket == 0 {
            return Err(Error::Config("runs_per_bucket must be >= 1".into()));
        }
        if self.sweep.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.sweep.eval_cap == 0 || self.sweep.eval_cap > DEFAULT_EVAL_CAP {
            return Err(Error::Config(format!("eval_cap must be in 1..={DEFAULT_EVAL_CAP}")));
        }
        if self.gap.snippet_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "snippet_len {} exceeds max_seq_len {}",
                self.gap.snippet_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// An independent seed for one named consumer of randomness.
    pub fn derived_seed(&self, stream: SeedStream) -> u64 {
        derive_seed(self.seed, stream as u64)
    }
}

/// Consumers of the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Corpora = 1,
    Tasks = 2,
    ModelInit = 3,
    PretrainShuffle = 4,
    Snippets = 5,
    EvalSubsample = 6,
    Gate = 7,
    Runs = 8,
}

/// Deterministic seed mixing: the first output of a ChaCha stream keyed by
/// `master` and selected by `index`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = PipelineConfig::from_kv(
            KvConfig::parse(
                "# sweep\nseed = 9\nruns_per_bucket = 3  # small\n\nbuckets = mem, ood\nlearning_rate = 1e-4\nupdate_rule = plain\ntiming = true\n",
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sweep.runs_per_bucket, 3);
        assert_eq!(c.sweep.buckets, vec![Bucket::Memorized, Bucket::OutOfDistribution]);
        assert_eq!(c.gap.learning_rate, 1e-4);
        assert_eq!(c.gap.rule, UpdateRule::Plain);
        assert!(c.sweep.timing);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense",
            "seed = 1\nseed = 2",
            "colour = blue",
            "max_steps = many",
            "runs_per_bucket = 0",
            "batch_size = 4",
            "eval_cap = 321",
            "buckets = github",
            " = 3",
        ] {
            let r = KvConfig::parse(text).and_then(PipelineConfig::from_kv);
            assert!(matches!(r, Err(Error::Config(_) | Error::GapConfig(_))), "{text:?} -> {r:?}");
        }
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(PipelineConfig::from_kv(KvConfig::parse("").unwrap()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_master() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }
}
