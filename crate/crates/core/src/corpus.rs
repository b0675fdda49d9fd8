//! Familiarity-bucketed corpora, snippet sampling and familiarity scoring.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Task, TaskData};
use crate::model::{per_token_nll, ModelParams};
use crate::synth;
use crate::tokenizer::tokenize;

pub const SNIPPET_LEN: usize = 200;
pub const TRAIN_ID: &str = "train";
pub const VALIDATION_ID: &str = "validation";

/// How familiar the base model is with a corpus, by provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    /// Heavily duplicated in pretraining.
    Memorized,
    /// Same distribution as pretraining, never trained on.
    InDomain,
    /// A different domain, never trained on.
    OutOfDistribution,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Memorized, Bucket::InDomain, Bucket::OutOfDistribution];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Memorized => "memorized",
            Bucket::InDomain => "in_domain",
            Bucket::OutOfDistribution => "out_of_distribution",
        }
    }

    /// Short prefix used in snippet and run ids.
    pub fn tag(self) -> &'static str {
        match self {
            Bucket::Memorized => "mem",
            Bucket::InDomain => "ind",
            Bucket::OutOfDistribution => "ood",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s || b.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown bucket {s:?}")))
    }
}

/// A tokenized collection of documents. Snippets never straddle two
/// documents.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    id: String,
    bucket: Option<Bucket>,
    documents: Vec<String>,
    tokens: Vec<u32>,
    doc_starts: Vec<usize>,
}

impl Corpus {
    pub fn new(id: impl Into<String>, bucket: Option<Bucket>, documents: Vec<String>) -> Self {
        let mut tokens = Vec::new();
        let mut doc_starts = Vec::with_capacity(documents.len());
        for d in &documents {
            doc_starts.push(tokens.len());
            tokens.extend(tokenize(d));
        }
        Self {
            id: id.into(),
            bucket,
            documents,
            tokens,
            doc_starts,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bucket(&self) -> Option<Bucket> {
        self.bucket
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Token range of document `i` within [`Corpus::tokens`].
    pub fn doc_span(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.doc_starts.get(i + 1).copied().unwrap_or(self.tokens.len());
        self.doc_starts[i]..end
    }

    pub fn doc_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[self.doc_span(i)]
    }

    /// Disjoint windows of `len` tokens that fit inside single documents.
    pub fn non_overlapping_windows(&self, len: usize) -> usize {
        (0..self.documents.len()).map(|i| self.doc_span(i).len() / len).sum()
    }

    fn window_count(&self, len: usize) -> usize {
        (0..self.documents.len())
            .map(|i| (self.doc_span(i).len() + 1).saturating_sub(len))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub corpus_id: String,
    pub bucket: Option<Bucket>,
    /// Start position in the corpus token stream.
    pub offset: usize,
    pub tokens: Vec<u32>,
    /// Mean per-token NLL under the base model, once measured.
    pub familiarity: Option<f64>,
}

/// `n` windows of exactly `len` tokens at uniformly drawn offsets (with
/// replacement across draws), each inside a single document.
pub fn sample_snippets(corpus: &Corpus, n: usize, len: usize, seed: u64) -> Result<Vec<Snippet>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let total = corpus.window_count(len);
    if len == 0 || total == 0 {
        return Err(Error::InsufficientText {
            corpus: corpus.id.clone(),
            have: corpus.tokens.len(),
            need: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.gen_range(0..total);
        let mut doc = 0;
        loop {
            let windows = (corpus.doc_span(doc).len() + 1).saturating_sub(len);
            if r < windows {
                break;
            }
            r -= windows;
            doc += 1;
        }
        let offset = corpus.doc_span(doc).start + r;
        out.push(Snippet {
            id: format!("{}-{i:03}", corpus.id),
            corpus_id: corpus.id.clone(),
            bucket: corpus.bucket,
            offset,
            tokens: corpus.tokens[offset..offset + len].to_vec(),
            familiarity: None,
        });
    }
    Ok(out)
}

/// Mean per-token NLL (nats); lower means more familiar.
pub fn familiarity_score(params: &ModelParams, snippet: &Snippet) -> Result<f64> {
    let per = per_token_nll(params, &snippet.tokens)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Sizes for the synthetic corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskCorpusConfig {
    /// In-domain documents used for pretraining.
    pub train_docs: usize,
    pub train_doc_bytes: usize,
    /// Short documents injected into pretraining `memorized_copies` times.
    pub memorized_docs: usize,
    pub memorized_doc_bytes: usize,
    pub memorized_copies: usize,
    pub held_out_docs: usize,
    /// Pretraining-distribution documents reserved for early stopping.
    pub validation_docs: usize,
    pub ood_docs: usize,
    pub doc_bytes: usize,
    /// Minimum disjoint snippets each bucket must offer.
    pub min_snippets: usize,
    pub snippet_len: usize,
    /// Examples per generated validation dataset.
    pub task_examples: usize,
}

impl Default for DeskCorpusConfig {
    fn default() -> Self {
        Self {
            train_docs: 300,
            train_doc_bytes: 1600,
            memorized_docs: 110,
            memorized_doc_bytes: SNIPPET_LEN + 10,
            memorized_copies: 50,
            held_out_docs: 30,
            validation_docs: 4,
            ood_docs: 30,
            doc_bytes: 1600,
            min_snippets: 100,
            snippet_len: SNIPPET_LEN,
            task_examples: 400,
        }
    }
}

/// Pretraining text plus the three familiarity buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskCorpora {
    pub train: Corpus,
    pub validation: Corpus,
    pub memorized: Corpus,
    pub in_domain: Corpus,
    pub out_of_distribution: Corpus,
    pub memorized_copies: usize,
}

impl DeskCorpora {
    pub fn bucket(&self, b: Bucket) -> &Corpus {
        match b {
            Bucket::Memorized => &self.memorized,
            Bucket::InDomain => &self.in_domain,
            Bucket::OutOfDistribution => &self.out_of_distribution,
        }
    }

    /// Pretraining documents: the training text once plus every memorized
    /// document `memorized_copies` times, in a seeded shuffled order.
    pub fn pretraining_documents(&self, seed: u64) -> Vec<&str> {
        use rand::seq::SliceRandom;
        let mut docs: Vec<&str> = self.train.documents().iter().map(String::as_str).collect();
        for _ in 0..self.memorized_copies {
            docs.extend(self.memorized.documents().iter().map(String::as_str));
        }
        docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        docs
    }
}

fn substream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Generates the desk corpora. The memorized and held-out documents share
/// the pretraining distribution; the out-of-distribution documents are
/// code-like text.
pub fn build_desk_corpora(cfg: &DeskCorpusConfig, seed: u64) -> Result<DeskCorpora> {
    let mut rng = substream(seed, 1);
    let train = (0..cfg.train_docs)
        .map(|_| synth::natural_document(&mut rng, cfg.train_doc_bytes))
        .collect();
    let mut rng = substream(seed, 2);
    let memorized = (0..cfg.memorized_docs)
        .map(|_| synth::natural_document(&mut rng, cfg.memorized_doc_bytes))
        .collect();
    let mut rng = substream(seed, 3);
    let held_out = (0..cfg.held_out_docs)
        .map(|_| synth::natural_document(&mut rng, cfg.doc_bytes))
        .collect();
    let mut rng = substream(seed, 4);
    let ood = (0..cfg.ood_docs)
        .map(|_| synth::code_document(&mut rng, cfg.doc_bytes))
        .collect();
    let mut rng = substream(seed, 5);
    let validation = (0..cfg.validation_docs)
        .map(|_| synth::natural_document(&mut rng, cfg.doc_bytes))
        .collect();

    let corpora = DeskCorpora {
        train: Corpus::new(TRAIN_ID, None, train),
        validation: Corpus::new(VALIDATION_ID, None, validation),
        memorized: Corpus::new(Bucket::Memorized.as_str(), Some(Bucket::Memorized), memorized),
        in_domain: Corpus::new(Bucket::InDomain.as_str(), Some(Bucket::InDomain), held_out),
        out_of_distribution: Corpus::new(
            Bucket::OutOfDistribution.as_str(),
            Some(Bucket::OutOfDistribution),
            ood,
        ),
        memorized_copies: cfg.memorized_copies,
    };
    for b in Bucket::ALL {
        let c = corpora.bucket(b);
        let have = c.non_overlapping_windows(cfg.snippet_len);
        if have < cfg.min_snippets {
            return Err(Error::InsufficientText {
                corpus: c.id().to_string(),
                have: c.tokens().len(),
                need: cfg.min_snippets * cfg.snippet_len,
            });
        }
    }
    if corpora.train.tokens().len() < cfg.snippet_len {
        return Err(Error::InsufficientText {
            corpus: "train".into(),
            have: corpora.train.tokens().len(),
            need: cfg.snippet_len,
        });
    }
    Ok(corpora)
}

/// Validation datasets drawn from the pretraining distribution.
pub fn build_desk_tasks(n: usize, seed: u64) -> Vec<Task> {
    let mut rng = substream(seed, 10);
    let short = (0..n).map(|_| synth::dialogue_example(&mut rng, 0)).collect();
    let mut rng = substream(seed, 11);
    let long = (0..n).map(|_| synth::dialogue_example(&mut rng, 1)).collect();
    let mut rng = substream(seed, 12);
    let slot = (0..n).map(|_| synth::slot_fill_example(&mut rng)).collect();
    let mut rng = substream(seed, 13);
    let answer = (0..n).map(|_| synth::answer_match_example(&mut rng)).collect();
    vec![
        Task {
            name: "dialogue_short".into(),
            data: TaskData::Dialogue(short),
        },
        Task {
            name: "dialogue_long".into(),
            data: TaskData::Dialogue(long),
        },
        Task {
            name: "slot_fill".into(),
            data: TaskData::Classification(slot),
        },
        Task {
            name: "answer_match".into(),
            data: TaskData::Classification(answer),
        },
    ]
}

// ---------------------------------------------------------------------------
// On-disk corpora

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocLayout {
    /// One document per line.
    Lines,
    /// One document per file.
    Files,
}

/// One line of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub bucket: Option<Bucket>,
    pub layout: DocLayout,
    /// Paths relative to the manifest's directory.
    pub files: Vec<PathBuf>,
    pub token_count: usize,
    /// Times each document is included in pretraining (0 = held out).
    pub pretrain_copies: usize,
}

pub fn read_documents(entry: &ManifestEntry, base: &Path) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for f in &entry.files {
        let path = base.join(f);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match entry.layout {
            DocLayout::Files => docs.push(text),
            DocLayout::Lines => docs.extend(text.lines().filter(|l| !l.is_empty()).map(str::to_owned)),
        }
    }
    Ok(docs)
}

pub fn load_corpus(entry: &ManifestEntry, base: &Path) -> Result<Corpus> {
    Ok(Corpus::new(entry.id.clone(), entry.bucket, read_documents(entry, base)?))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_corpus_files(dir: &Path, corpus: &Corpus, copies: usize) -> Result<ManifestEntry> {
    let sub = dir.join(corpus.id());
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut files = Vec::new();
    for (i, d) in corpus.documents().iter().enumerate() {
        let rel = PathBuf::from(corpus.id()).join(format!("{i:05}.txt"));
        let path = dir.join(&rel);
        fs::write(&path, d).map_err(|e| Error::io(&path, e))?;
        files.push(rel);
    }
    Ok(ManifestEntry {
        id: corpus.id().to_string(),
        bucket: corpus.bucket(),
        layout: DocLayout::Files,
        files,
        token_count: corpus.tokens().len(),
        pretrain_copies: copies,
    })
}

/// Writes every corpus as one-file-per-document plus `manifest.jsonl`.
pub fn write_desk_corpora(dir: &Path, corpora: &DeskCorpora) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = [
        write_corpus_files(dir, &corpora.train, 1)?,
        write_corpus_files(dir, &corpora.validation, 0)?,
        write_corpus_files(dir, &corpora.memorized, corpora.memorized_copies)?,
        write_corpus_files(dir, &corpora.in_domain, 0)?,
        write_corpus_files(dir, &corpora.out_of_distribution, 0)?,
    ];
    let mut out = String::new();
    for e in &entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads corpora back from a manifest. The unbucketed corpora are found by
/// id; the memorized bucket's `pretrain_copies` is its duplication factor.
pub fn load_desk_corpora(manifest: &Path) -> Result<DeskCorpora> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    let find = |b: Bucket| {
        entries
            .iter()
            .find(|e| e.bucket == Some(b))
            .ok_or_else(|| Error::Config(format!("manifest has no corpus for bucket {b}")))
    };
    let by_id = |id: &str| {
        entries
            .iter()
            .find(|e| e.bucket.is_none() && e.id == id)
            .ok_or_else(|| Error::Config(format!("manifest has no corpus {id:?}")))
    };
    let mem = find(Bucket::Memorized)?;
    Ok(DeskCorpora {
        train: load_corpus(by_id(TRAIN_ID)?, base)?,
        validation: load_corpus(by_id(VALIDATION_ID)?, base)?,
        memorized: load_corpus(mem, base)?,
        in_domain: load_corpus(find(Bucket::InDomain)?, base)?,
        out_of_distribution: load_corpus(find(Bucket::OutOfDistribution)?, base)?,
        memorized_copies: mem.pretrain_copies,
    })
}

/// Median familiarity per bucket, measured on sampled snippets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamiliarityGate {
    pub medians: Vec<(Bucket, f64)>,
    pub passed: bool,
}

/// Checks that median familiarity is strictly ordered
/// memorized < in-domain < out-of-distribution.
pub fn familiarity_gate(params: &ModelParams, corpora: &DeskCorpora, n: usize, len: usize, seed: u64) -> Result<FamiliarityGate> {
    let mut medians = Vec::new();
    for b in Bucket::ALL {
        let snippets = sample_snippets(corpora.bucket(b), n, len, seed ^ (b as u64 + 1))?;
        let scores = snippets
            .iter()
            .map(|s| familiarity_score(params, s))
            .collect::<Result<Vec<_>>>()?;
        medians.push((b, crate::stats::median(&scores).ok_or(Error::Empty("familiarity sample"))?));
    }
    let passed = medians.windows(2).all(|w| w[0].1 < w[1].1);
    Ok(FamiliarityGate { medians, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::VOCAB_SIZE;

    fn small_cfg() -> DeskCorpusConfig {
        DeskCorpusConfig {
            train_docs: 4,
            train_doc_bytes: 400,
            memorized_docs: 6,
            memorized_doc_bytes: 60,
            memorized_copies: 3,
            held_out_docs: 3,
            validation_docs: 1,
            ood_docs: 3,
            doc_bytes: 300,
            min_snippets: 3,
            snippet_len: 50,
            task_examples: 5,
        }
    }

    #[test]
    fn bucket_names_round_trip() {
        for b in Bucket::ALL {
            assert_eq!(b.as_str().parse::<Bucket>().unwrap(), b);
            assert_eq!(b.tag().parse::<Bucket>().unwrap(), b);
        }
        assert!("github".parse::<Bucket>().is_err());
    }

    #[test]
    fn snippets_have_exact_length_and_stay_inside_documents() {
        let c = Corpus::new("c", None, vec!["a".repeat(30), "b".repeat(12), "c".repeat(25)]);
        let snips = sample_snippets(&c, 200, 10, 4).unwrap();
        assert_eq!(snips.len(), 200);
        for s in &snips {
            assert_eq!(s.tokens.len(), 10);
            let first = s.tokens[0];
            assert!(s.tokens.iter().all(|&t| t == first), "snippet crosses a document boundary");
        }
        assert_eq!(snips, sample_snippets(&c, 200, 10, 4).unwrap());
        assert!(sample_snippets(&c, 0, 10, 4).unwrap().is_empty());
    }

    #[test]
    fn short_corpus_is_an_error() {
        let c = Corpus::new("c", None, vec!["abc".into()]);
        assert!(matches!(sample_snippets(&c, 1, 10, 0), Err(Error::InsufficientText { .. })));
    }

    #[test]
    fn uniform_model_familiarity_is_log_v() {
        let p = ModelParams::zeros(ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_ff: 4,
            max_seq_len: 32,
            vocab_size: VOCAB_SIZE,
            tie_embeddings: true,
        })
        .unwrap();
        let c = Corpus::new("c", None, vec!["hello world, hello there".into()]);
        let s = &sample_snippets(&c, 1, 20, 0).unwrap()[0];
        assert!((familiarity_score(&p, s).unwrap() - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn corpora_are_seeded_and_sized() {
        let cfg = small_cfg();
        let a = build_desk_corpora(&cfg, 5).unwrap();
        assert_eq!(a, build_desk_corpora(&cfg, 5).unwrap());
        assert_ne!(a.train, build_desk_corpora(&cfg, 6).unwrap().train);
        for b in Bucket::ALL {
            assert!(a.bucket(b).non_overlapping_windows(cfg.snippet_len) >= cfg.min_snippets);
        }
        assert_eq!(
            a.pretraining_documents(0).len(),
            cfg.train_docs + cfg.memorized_docs * cfg.memorized_copies
        );
    }

    #[test]
    fn insufficient_bucket_text_is_rejected() {
        let cfg = DeskCorpusConfig {
            min_snippets: 1000,
            ..small_cfg()
        };
        assert!(matches!(build_desk_corpora(&cfg, 0), Err(Error::InsufficientText { .. })));
    }

    #[test]
    fn corpora_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = build_desk_corpora(&small_cfg(), 1).unwrap();
        let manifest = write_desk_corpora(dir.path(), &a).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 5);
        assert_eq!(entries[2].pretrain_copies, 3);
        assert_eq!(load_desk_corpora(&manifest).unwrap(), a);
    }

    #[test]
    fn line_layout_reads_one_document_per_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("docs.txt"), "first doc\nsecond doc\n").unwrap();
        let entry = ManifestEntry {
            id: "x".into(),
            bucket: Some(Bucket::InDomain),
            layout: DocLayout::Lines,
            files: vec!["docs.txt".into()],
            token_count: 0,
            pretrain_copies: 0,
        };
        let c = load_corpus(&entry, dir.path()).unwrap();
        assert_eq!(c.documents(), &["first doc".to_string(), "second doc".to_string()]);
    }
}
