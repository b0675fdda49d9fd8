//! Gradient ascent post-training: Adam-preconditioned ascent on the LM loss
//! of a single snippet, evaluated after every step.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Bucket, Snippet};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{lm_nll, nll_with_grads, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Adam,
    /// Unpreconditioned `w ± α·g`.
    Plain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Increase the loss (the GAP update).
    #[default]
    Ascent,
    /// Decrease the loss; used as a sign control and for pretraining.
    Descent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub snippet_len: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub rule: UpdateRule,
    pub direction: Direction,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            max_steps: 15,
            batch_size: 1,
            snippet_len: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            dropout: 0.0,
            seed: 0,
            rule: UpdateRule::Adam,
            direction: Direction::Ascent,
        }
    }
}

impl GapConfig {
    /// A zero learning rate is accepted so that a run can serve as a no-op
    /// control.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::GapConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size is fixed at 1, got {}", self.batch_size));
        }
        if self.snippet_len < 2 {
            return bad(format!("snippet_len must be >= 2, got {}", self.snippet_len));
        }
        if self.weight_decay != 0.0 {
            return bad("weight_decay is fixed at 0".into());
        }
        if self.dropout != 0.0 {
            return bad("dropout is fixed at 0".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// Adam moments, kept in f64, one pair per named tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every tensor in `params`. All gradients are
    /// checked before anything is modified, so a rejected step leaves both
    /// the parameters and the state untouched.
    pub fn apply<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        cfg: &GapConfig,
    ) -> Result<()> {
        let mut params: Vec<(&String, &mut Tensor)> = params.into_iter().collect();
        let t = self.t + 1;
        for (name, p) in &params {
            let g = grads.get(*name).ok_or_else(|| Error::MissingParam(format!("gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: (*name).clone(),
                    step: t,
                });
            }
        }
        self.t = t;
        let sign = cfg.direction.sign();
        let lr = cfg.learning_rate;
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[*name].data();
            let theta = p.data_mut();
            match cfg.rule {
                UpdateRule::Plain => {
                    for (w, &gi) in theta.iter_mut().zip(g) {
                        *w = (*w as f64 + sign * lr * gi as f64) as f32;
                    }
                }
                UpdateRule::Adam => {
                    let m = self.m.entry((*name).clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry((*name).clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        let gi = g[i] as f64;
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        theta[i] = (theta[i] as f64 + sign * lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One ascent step on the model, in the direction given by `cfg`.
pub fn adam_ascent_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &GapConfig,
) -> Result<()> {
    state.apply(params.iter_mut(), grads, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    /// Snippet NLL (summed nats) at this epoch's parameters.
    pub snippet_nll: f32,
    pub score: f64,
    pub eval: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub snippet_id: String,
    pub bucket: Option<Bucket>,
    pub snippet_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub entries: Vec<EpochEntry>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub baseline_score: f64,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrade_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_digest: Option<String>,
}

impl RunRecord {
    /// `best_score - baseline_score`, when a best epoch exists.
    pub fn delta_vs_baseline(&self) -> Option<f64> {
        self.best_score.map(|s| s - self.baseline_score)
    }

    /// Ascent steps actually taken.
    pub fn steps_taken(&self) -> usize {
        self.entries.last().map_or(0, |e| e.epoch)
    }
}

/// Argmax of the score over epochs 1.., earliest epoch on ties.
pub fn select_best_epoch(entries: &[EpochEntry]) -> Result<usize> {
    let mut best: Option<&EpochEntry> = None;
    for e in entries.iter().filter(|e| e.epoch >= 1) {
        if best.map_or(true, |b| e.score > b.score) {
            best = Some(e);
        }
    }
    best.map(|e| e.epoch).ok_or(Error::Empty("run record after the baseline epoch"))
}

/// Per-run settings outside the ascent hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct RunContext {
    pub run_id: String,
    /// Epoch-0 evaluation if already known; every run from the same base
    /// shares it.
    pub baseline: Option<EvalReport>,
    /// Record wall-clock time per epoch. Off for byte-reproducible logs.
    pub timing: bool,
    pub base_digest: Option<String>,
}

pub struct RunOutcome {
    pub record: RunRecord,
    /// Parameters at the best epoch, or the base parameters when no ascent
    /// epoch completed.
    pub best_params: ModelParams,
}

fn degrading(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// Runs up to `cfg.max_steps` ascent steps on `snippet`, evaluating after
/// each. The Adam state is created fresh for the run. A non-finite loss or
/// gradient truncates the run at the last finite epoch and marks it
/// degraded.
pub fn run_gap(
    base: &ModelParams,
    snippet: &Snippet,
    cfg: &GapConfig,
    ctx: &RunContext,
    evaluate: &mut dyn FnMut(&ModelParams) -> Result<EvalReport>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if snippet.tokens.len() != cfg.snippet_len {
        return Err(Error::GapConfig(format!(
            "snippet {} has {} tokens, expected {}",
            snippet.id,
            snippet.tokens.len(),
            cfg.snippet_len
        )));
    }
    let clock = Instant::now();
    let wall = |timing: bool| timing.then(|| clock.elapsed().as_millis() as u64);

    let mut params = base.clone();
    let mut state = AdamState::new();
    let (nll0, mut grads) = nll_with_grads(&params, &snippet.tokens)?;
    let baseline = match &ctx.baseline {
        Some(b) => b.clone(),
        None => evaluate(&params)?,
    };
    let baseline_score = baseline.primary_score();
    let mut entries = vec![EpochEntry {
        epoch: 0,
        snippet_nll: nll0,
        score: baseline_score,
        eval: baseline,
        wall_ms: wall(ctx.timing),
    }];
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut degrade_reason = None;

    for t in 1..=cfg.max_steps {
        let step = adam_ascent_step(&mut params, &grads, &mut state, cfg).and_then(|()| {
            if t < cfg.max_steps {
                nll_with_grads(&params, &snippet.tokens)
            } else {
                lm_nll(&params, &snippet.tokens).map(|l| (l, BTreeMap::new()))
            }
        });
        let (nll, next_grads) = match step {
            Ok(x) => x,
            Err(e) if degrading(&e) => {
                degrade_reason = Some(format!("epoch {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let eval = match evaluate(&params) {
            Ok(r) => r,
            Err(e) if degrading(&e) => {
                degrade_reason = Some(format!("epoch {t} evaluation: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let score = eval.primary_score();
        if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
            best = Some((t, score, params.clone()));
        }
        entries.push(EpochEntry {
            epoch: t,
            snippet_nll: nll,
            score,
            eval,
            wall_ms: wall(ctx.timing),
        });
        grads = next_grads;
    }

    let (best_epoch, best_score, best_params) = match best {
        Some((e, s, p)) => (Some(e), Some(s), p),
        None => (None, None, base.clone()),
    };
    debug_assert_eq!(best_epoch, select_best_epoch(&entries).ok());
    let record = RunRecord {
        run_id: ctx.run_id.clone(),
        snippet_id: snippet.id.clone(),
        bucket: snippet.bucket,
        snippet_len: snippet.tokens.len(),
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        entries,
        best_epoch,
        best_score,
        baseline_score,
        degraded: degrade_reason.is_some(),
        degrade_reason,
        base_digest: ctx.base_digest.clone(),
    };
    Ok(RunOutcome { record, best_params })
}
