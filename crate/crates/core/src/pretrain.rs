//! Base-model pretraining: Adam descent on next-token cross-entropy over a
//! token stream read sequentially in fixed-length windows.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ascent::{AdamState, Direction, GapConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{lm_nll, nll_with_grads, ModelParams};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub max_steps: usize,
    /// Windows per optimizer step.
    pub batch_windows: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// The cosine schedule decays to `learning_rate * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub eval_every: usize,
    /// Stop after this many held-out evaluations without improvement.
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1800,
            batch_windows: 4,
            learning_rate: 3e-3,
            warmup_steps: 50,
            min_lr_ratio: 0.1,
            eval_every: 100,
            patience: 3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if self.max_steps == 0 || self.batch_windows == 0 || self.eval_every == 0 {
            return bad("max_steps, batch_windows and eval_every must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must be in [0, 1]");
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay over the remaining steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.max_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.learning_rate * self.min_lr_ratio;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Concatenates documents into one stream, each followed by EOS.
pub fn build_stream<S: AsRef<str>>(docs: &[S]) -> Vec<u32> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(tokenize(d.as_ref()));
        out.push(EOS);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    /// Mean per-token NLL of this step's batch.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_loss: Option<f64>,
}

pub struct PretrainOutcome {
    /// Parameters with the lowest held-out loss seen.
    pub params: ModelParams,
    pub log: Vec<LogEntry>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Mean per-token NLL over windows.
pub fn mean_loss(params: &ModelParams, windows: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        total += lm_nll(params, w)? as f64;
        count += w.len() - 1;
    }
    if count == 0 {
        return Err(Error::Empty("held-out windows"));
    }
    Ok(total / count as f64)
}

/// Splits a stream into consecutive non-overlapping windows of `len`.
pub fn windows(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
    stream.chunks_exact(len).map(<[u32]>::to_vec).collect()
}

/// Trains `init` on `stream`. On a non-finite loss or gradient, the last
/// parameters that passed a held-out evaluation are written to
/// `last_good` and [`Error::Diverged`] is returned.
pub fn pretrain(
    init: ModelParams,
    stream: &[u32],
    held_out: &[Vec<u32>],
    cfg: &PretrainConfig,
    last_good: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let window = init.config().max_seq_len;
    if stream.len() < window {
        return Err(Error::InsufficientText {
            corpus: "pretraining stream".into(),
            have: stream.len(),
            need: window,
        });
    }
    let mut params = init;
    let mut state = AdamState::new();
    let mut opt = GapConfig {
        direction: Direction::Descent,
        ..GapConfig::default()
    };
    let mut best = (mean_loss(&params, held_out)?, params.clone());
    let mut log = Vec::new();
    let mut cursor = 0usize;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut steps_run = 0;

    let diverged = |step: usize, good: &ModelParams| -> Error {
        let path = PathBuf::from(last_good);
        match checkpoint::save(good, &path) {
            Ok(()) => Error::Diverged { step, path },
            Err(e) => e,
        }
    };

    for step in 0..cfg.max_steps {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss = 0.0f64;
        let mut positions = 0usize;
        for _ in 0..cfg.batch_windows {
            if cursor + window > stream.len() {
                cursor = 0;
            }
            let w = &stream[cursor..cursor + window];
            cursor += window;
            let (l, grads) = match nll_with_grads(&params, w) {
                Ok(x) => x,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, &best.1)),
                Err(e) => return Err(e),
            };
            loss += l as f64;
            positions += window - 1;
            for (name, g) in grads {
                let a = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (x, &y) in a.iter_mut().zip(g.data()) {
                    *x += y as f64;
                }
            }
        }
        let scale = 1.0 / positions as f64;
        let grads: BTreeMap<String, Tensor> = acc
            .into_iter()
            .map(|(name, a)| {
                let shape = params.get(&name).map(|t| t.shape().to_vec())?;
                Tensor::new(shape, a.iter().map(|&x| (x * scale) as f32).collect()).map(|t| (name, t))
            })
            .collect::<Result<_>>()?;
        opt.learning_rate = cfg.lr_at(step);
        match state.apply(params.iter_mut(), &grads, &opt) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => return Err(diverged(step, &best.1)),
            Err(e) => return Err(e),
        }
        if !params.all_finite() {
            return Err(diverged(step, &best.1));
        }
        steps_run = step + 1;
        let mut entry = LogEntry {
            step: steps_run,
            lr: opt.learning_rate,
            train_loss: loss * scale,
            held_out_loss: None,
        };
        if steps_run % cfg.eval_every == 0 || steps_run == cfg.max_steps {
            let h = match mean_loss(&params, held_out) {
                Ok(h) => h,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, &best.1)),
                Err(e) => return Err(e),
            };
            entry.held_out_loss = Some(h);
            if h < best.0 {
                best = (h, params.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            log.push(entry);
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        } else {
            log.push(entry);
        }
    }
    Ok(PretrainOutcome {
        params: best.1,
        log,
        steps_run,
        stopped_early,
    })
}
