//! Inference without a graph: one token at a time with per-layer key/value
//! caches. Uses the same row kernels as [`crate::model::forward`], so logits
//! match the recorded forward pass bit for bit.

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{check_tokens, ModelParams, LN_EPS};
use crate::tensor::Tensor;

struct LayerWeights<'a> {
    ln1: (&'a Tensor, &'a Tensor),
    wq: (&'a Tensor, &'a Tensor),
    wk: (&'a Tensor, &'a Tensor),
    wv: (&'a Tensor, &'a Tensor),
    wo: (&'a Tensor, &'a Tensor),
    ln2: (&'a Tensor, &'a Tensor),
    w1: (&'a Tensor, &'a Tensor),
    w2: (&'a Tensor, &'a Tensor),
}

#[derive(Clone, Default)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Incremental decoder state over a borrowed parameter snapshot.
#[derive(Clone)]
pub struct DecodeState<'a> {
    params: &'a ModelParams,
    caches: Vec<LayerCache>,
    len: usize,
}

fn pair<'a>(p: &'a ModelParams, w: &str, b: &str) -> Result<(&'a Tensor, &'a Tensor)> {
    Ok((p.get(w)?, p.get(b)?))
}

impl<'a> DecodeState<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            caches: vec![LayerCache::default(); params.config().n_layers],
            len: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn layer(&self, i: usize) -> Result<LayerWeights<'a>> {
        let p = self.params;
        let n = |s: &str| format!("blocks.{i}.{s}");
        Ok(LayerWeights {
            ln1: pair(p, &n("ln1.gain"), &n("ln1.bias"))?,
            wq: pair(p, &n("attn.wq"), &n("attn.bq"))?,
            wk: pair(p, &n("attn.wk"), &n("attn.bk"))?,
            wv: pair(p, &n("attn.wv"), &n("attn.bv"))?,
            wo: pair(p, &n("attn.wo"), &n("attn.bo"))?,
            ln2: pair(p, &n("ln2.gain"), &n("ln2.bias"))?,
            w1: pair(p, &n("mlp.w1"), &n("mlp.b1"))?,
            w2: pair(p, &n("mlp.w2"), &n("mlp.b2"))?,
        })
    }

    /// Consumes one token. Returns next-token logits when `want_logits`.
    pub fn push(&mut self, token: u32, want_logits: bool) -> Result<Option<Vec<f32>>> {
        let cfg = self.params.config();
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        check_tokens(cfg, &[token])?;
        let d = cfg.d_model;
        let tok = self.params.get("tok_emb")?;
        let pos = self.params.get("pos_emb")?;
        let mut x: Vec<f32> = tok
            .row(token as usize)
            .iter()
            .zip(pos.row(self.len))
            .map(|(a, b)| a + b)
            .collect();

        let mut acc = vec![0.0f64; d.max(cfg.d_ff)];
        let mut a = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut att = vec![0.0f32; d];
        let mut o = vec![0.0f32; d];
        let mut h = vec![0.0f32; cfg.d_ff];
        let mut scores = Vec::new();

        for i in 0..cfg.n_layers {
            let w = self.layer(i)?;
            kernels::layernorm_row(&x, w.ln1.0.data(), w.ln1.1.data(), LN_EPS, &mut a);
            affine(&a, w.wq, &mut acc, &mut q);
            let cache = &mut self.caches[i];
            let base = cache.keys.len();
            cache.keys.resize(base + d, 0.0);
            cache.values.resize(base + d, 0.0);
            affine(&a, w.wk, &mut acc, &mut cache.keys[base..]);
            affine(&a, w.wv, &mut acc, &mut cache.values[base..]);
            kernels::attention_row(&q, &cache.keys, &cache.values, cfg.n_heads, &mut scores, &mut att, None);
            affine(&att, w.wo, &mut acc, &mut o);
            add_in_place(&mut x, &o);
            kernels::layernorm_row(&x, w.ln2.0.data(), w.ln2.1.data(), LN_EPS, &mut a);
            affine(&a, w.w1, &mut acc, &mut h);
            for v in h.iter_mut() {
                *v = kernels::gelu(*v);
            }
            affine(&h, w.w2, &mut acc, &mut o);
            add_in_place(&mut x, &o);
        }
        self.len += 1;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        if !want_logits {
            return Ok(None);
        }

        let (gain, bias) = pair(self.params, "ln_f.gain", "ln_f.bias")?;
        kernels::layernorm_row(&x, gain.data(), bias.data(), LN_EPS, &mut a);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        if cfg.tie_embeddings {
            kernels::matmul_transb_row(&a, tok.data(), &mut logits);
        } else {
            let head = self.params.get("head.weight")?;
            let mut acc = vec![0.0f64; cfg.vocab_size];
            kernels::matmul_row(&a, head.data(), cfg.vocab_size, &mut acc, &mut logits);
        }
        add_in_place(&mut logits, self.params.get("head.bias")?.data());
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(Some(logits))
    }

    /// Feeds a prompt and returns logits after its last token.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let (last, init) = tokens
            .split_last()
            .ok_or(Error::SequenceTooShort { len: 0, min: 1 })?;
        for &t in init {
            self.push(t, false)?;
        }
        Ok(self.push(*last, true)?.expect("logits requested"))
    }
}

fn affine(x: &[f32], (w, b): (&Tensor, &Tensor), acc: &mut [f64], out: &mut [f32]) {
    let n = b.len();
    kernels::matmul_row(x, w.data(), n, acc, &mut out[..n]);
    add_in_place(&mut out[..n], b.data());
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Greedy decoding: appends the argmax token (lowest id on ties) until a
/// token in `stop` is produced or `max_new` tokens have been generated.
/// Returns only the new tokens, without the stop token.
pub fn greedy_decode(params: &ModelParams, prompt: &[u32], max_new: usize, stop: &[u32]) -> Result<Vec<u32>> {
    let max = params.config().max_seq_len;
    if prompt.len() + max_new > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max,
        });
    }
    check_tokens(params.config(), prompt)?;
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut state = DecodeState::new(params);
    let mut logits = state.prefill(prompt)?;
    let mut out = Vec::with_capacity(max_new);
    for step in 0..max_new {
        let next = kernels::argmax(&logits) as u32;
        if stop.contains(&next) {
            break;
        }
        out.push(next);
        if step + 1 < max_new {
            logits = state.push(next, true)?.expect("logits requested");
        }
    }
    Ok(out)
}

fn check_option(params: &ModelParams, prompt: &[u32], option: &[u32]) -> Result<()> {
    if option.is_empty() {
        return Err(Error::Empty("option"));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let max = params.config().max_seq_len;
    if prompt.len() + option.len() > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + option.len(),
            max,
        });
    }
    check_tokens(params.config(), option)
}

fn score_from(state: &mut DecodeState<'_>, mut logits: Vec<f32>, option: &[u32]) -> Result<f64> {
    let mut nll = 0.0f64;
    for (i, &t) in option.iter().enumerate() {
        nll += kernels::nll_row(&logits, t as usize);
        if i + 1 < option.len() {
            logits = state.push(t, true)?.expect("logits requested");
        }
    }
    Ok(-nll)
}

/// `Σ log p(option_i | prompt ⧺ option_<i)`.
pub fn continuation_logprob(params: &ModelParams, prompt: &[u32], option: &[u32]) -> Result<f64> {
    check_tokens(params.config(), prompt)?;
    check_option(params, prompt, option)?;
    let mut state = DecodeState::new(params);
    let logits = state.prefill(prompt)?;
    score_from(&mut state, logits, option)
}

/// [`continuation_logprob`] for several options, sharing the prompt prefix.
pub fn continuation_logprobs(params: &ModelParams, prompt: &[u32], options: &[Vec<u32>]) -> Result<Vec<f64>> {
    check_tokens(params.config(), prompt)?;
    for o in options {
        check_option(params, prompt, o)?;
    }
    let mut base = DecodeState::new(params);
    let logits = base.prefill(prompt)?;
    options
        .iter()
        .map(|o| score_from(&mut base.clone(), logits.clone(), o))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, per_token_nll, ModelConfig};
    use crate::tokenizer::{tokenize, VOCAB_SIZE};

    fn cfg(tied: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 40,
            vocab_size: VOCAB_SIZE,
            tie_embeddings: tied,
        }
    }

    #[test]
    fn cached_logits_match_graph_logits_bitwise() {
        for tied in [true, false] {
            let p = ModelParams::init(cfg(tied), 11).unwrap();
            let x = tokenize("bit-identical rows");
            let f = forward(&p, &x).unwrap();
            let full = f.graph.value(f.logits);
            let mut st = DecodeState::new(&p);
            for (i, &t) in x.iter().enumerate() {
                let l = st.push(t, true).unwrap().unwrap();
                assert_eq!(l.as_slice(), full.row(i), "tied={tied} row {i}");
            }
        }
    }

    #[test]
    fn zero_budget_generates_nothing() {
        let p = ModelParams::init(cfg(true), 0).unwrap();
        assert!(greedy_decode(&p, &tokenize("hi"), 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn prompt_plus_budget_must_fit() {
        let p = ModelParams::init(cfg(true), 0).unwrap();
        let prompt = vec![10; 30];
        assert!(matches!(
            greedy_decode(&p, &prompt, 11, &[]),
            Err(Error::SequenceTooLong { len: 41, max: 40 })
        ));
        assert_eq!(greedy_decode(&p, &prompt, 10, &[]).unwrap().len(), 10);
    }

    #[test]
    fn decode_is_deterministic() {
        let p = ModelParams::init(cfg(true), 4).unwrap();
        let a = greedy_decode(&p, &tokenize("once"), 12, &[]).unwrap();
        let b = greedy_decode(&p, &tokenize("once"), 12, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_model_option_logprob() {
        let p = ModelParams::zeros(cfg(true)).unwrap();
        let lp = continuation_logprob(&p, &tokenize("q"), &tokenize("abc")).unwrap();
        assert!((lp + 3.0 * (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn option_logprob_matches_per_token_slice() {
        let p = ModelParams::init(cfg(false), 9).unwrap();
        let prompt = tokenize("User 1: hi\nUser 2:");
        let option = tokenize(" hello");
        let direct = continuation_logprob(&p, &prompt, &option).unwrap();
        let mut joined = prompt.clone();
        joined.extend(&option);
        let per = per_token_nll(&p, &joined).unwrap();
        let sliced: f64 = per[prompt.len() - 1..].iter().sum();
        assert_eq!(direct, -sliced);
        let shared = continuation_logprobs(&p, &prompt, &[option.clone(), tokenize(" x")]).unwrap();
        assert_eq!(shared[0], direct);
    }

    #[test]
    fn option_errors() {
        let p = ModelParams::zeros(cfg(true)).unwrap();
        assert!(matches!(continuation_logprob(&p, &tokenize("a"), &[]), Err(Error::Empty(_))));
        assert!(continuation_logprob(&p, &vec![10; 30], &vec![10; 12]).is_err());
    }
}
