//! Decoder-only transformer: configuration, parameters and the
//! differentiable forward pass.
//!
//! Blocks are pre-norm (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`) with
//! learned absolute positions, GELU MLPs and a final layer norm. The output
//! projection is tied to the token embedding unless `tie_embeddings` is off;
//! a separate output bias always exists.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::VOCAB_SIZE;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Desk-scale default: fits a 200-token snippet plus a 32-token decode.
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            max_seq_len: 232,
            vocab_size: VOCAB_SIZE,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ModelConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Integer fields in checkpoint order.
    pub fn to_fields(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("n_layers", self.n_layers as u64),
            ("n_heads", self.n_heads as u64),
            ("d_model", self.d_model as u64),
            ("d_ff", self.d_ff as u64),
            ("max_seq_len", self.max_seq_len as u64),
            ("vocab_size", self.vocab_size as u64),
            ("tie_embeddings", self.tie_embeddings as u64),
        ]
    }

    pub fn from_fields(fields: &[(String, u64)]) -> Result<Self> {
        let get = |name: &str| {
            fields
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Checkpoint(format!("missing config field {name}")))
        };
        let cfg = Self {
            n_layers: get("n_layers")? as usize,
            n_heads: get("n_heads")? as usize,
            d_model: get("d_model")? as usize,
            d_ff: get("d_ff")? as usize,
            max_seq_len: get("max_seq_len")? as usize,
            vocab_size: get("vocab_size")? as usize,
            tie_embeddings: get("tie_embeddings")? != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter name with its shape, in sorted order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut m = BTreeMap::new();
        m.insert("tok_emb".to_string(), vec![v, d]);
        m.insert("pos_emb".to_string(), vec![self.max_seq_len, d]);
        for i in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            m.insert(p("ln1.gain"), vec![d]);
            m.insert(p("ln1.bias"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                m.insert(p(&format!("attn.{w}")), vec![d, d]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                m.insert(p(&format!("attn.{b}")), vec![d]);
            }
            m.insert(p("ln2.gain"), vec![d]);
            m.insert(p("ln2.bias"), vec![d]);
            m.insert(p("mlp.w1"), vec![d, f]);
            m.insert(p("mlp.b1"), vec![f]);
            m.insert(p("mlp.w2"), vec![f, d]);
            m.insert(p("mlp.b2"), vec![d]);
        }
        m.insert("ln_f.gain".to_string(), vec![d]);
        m.insert("ln_f.bias".to_string(), vec![d]);
        if !self.tie_embeddings {
            m.insert("head.weight".to_string(), vec![d, v]);
        }
        m.insert("head.bias".to_string(), vec![v]);
        m
    }
}

/// All trainable weights of one model, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Random initialization: N(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2·n_layers)`, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if is_bias(&name) {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    resid_std
                } else {
                    std
                };
                let dist = Normal::new(0.0f32, s).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, tensors })
    }

    /// All-zero parameters with unit layer-norm gains. Every position then
    /// predicts the uniform distribution.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with(".gain") { 1.0 } else { 0.0 };
                let t = Tensor::full(&shape, fill);
                (name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles parameters from named tensors, checking that names and
    /// shapes match `config` exactly.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            let t = tensors.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "from_tensors",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "from_tensors" });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::ModelConfig(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.rsplit('.').next().is_some_and(|s| s.starts_with('b') && s.len() == 2)
}

/// A recorded forward pass with handles to its parameter leaves.
pub struct Forward {
    pub graph: Graph,
    pub params: BTreeMap<String, NodeId>,
    pub logits: NodeId,
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Records the forward pass for `tokens` and returns logits `[T × V]`.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Forward> {
    let cfg = params.config();
    check_tokens(cfg, tokens)?;
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params.tensors() {
        ids.insert(name.clone(), g.param(t.clone())?);
    }
    let p = |name: &str| -> Result<NodeId> {
        ids.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    };

    let token_ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.gather(p("tok_emb")?, &token_ids)?;
    let pos = g.gather(p("pos_emb")?, &positions)?;
    let mut x = g.add(tok, pos)?;

    for i in 0..cfg.n_layers {
        let n = |s: &str| p(&format!("blocks.{i}.{s}"));
        let a = g.layernorm(x, n("ln1.gain")?, n("ln1.bias")?, LN_EPS)?;
        let q = linear(&mut g, a, n("attn.wq")?, n("attn.bq")?)?;
        let k = linear(&mut g, a, n("attn.wk")?, n("attn.bk")?)?;
        let v = linear(&mut g, a, n("attn.wv")?, n("attn.bv")?)?;
        let att = g.causal_attention(q, k, v, cfg.n_heads)?;
        let o = linear(&mut g, att, n("attn.wo")?, n("attn.bo")?)?;
        x = g.add(x, o)?;
        let m = g.layernorm(x, n("ln2.gain")?, n("ln2.bias")?, LN_EPS)?;
        let h = linear(&mut g, m, n("mlp.w1")?, n("mlp.b1")?)?;
        let h = g.gelu(h)?;
        let h = linear(&mut g, h, n("mlp.w2")?, n("mlp.b2")?)?;
        x = g.add(x, h)?;
    }
    let xf = g.layernorm(x, p("ln_f.gain")?, p("ln_f.bias")?, LN_EPS)?;
    let raw = if cfg.tie_embeddings {
        g.matmul_transb(xf, p("tok_emb")?)?
    } else {
        g.matmul(xf, p("head.weight")?)?
    };
    let logits = g.add_row_bias(raw, p("head.bias")?)?;
    Ok(Forward {
        graph: g,
        params: ids,
        logits,
    })
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Forward pass plus summed next-token loss over positions `2..=N`.
pub struct LossGraph {
    pub forward: Forward,
    pub loss: NodeId,
}

pub fn loss_graph(params: &ModelParams, x: &[u32]) -> Result<LossGraph> {
    if x.len() < 2 {
        return Err(Error::SequenceTooShort { len: x.len(), min: 2 });
    }
    check_tokens(params.config(), x)?;
    let mut forward = forward(params, &x[..x.len() - 1])?;
    let targets: Vec<usize> = x[1..].iter().map(|&t| t as usize).collect();
    let loss = forward.graph.softmax_cross_entropy(forward.logits, &targets)?;
    Ok(LossGraph { forward, loss })
}

/// `-Σ_{n=2..N} log p(x_n | x_<n)`.
pub fn lm_nll(params: &ModelParams, x: &[u32]) -> Result<f32> {
    let lg = loss_graph(params, x)?;
    Ok(lg.forward.graph.value(lg.loss).item())
}

/// Per-position terms of [`lm_nll`]; element `i` is `-log p(x_{i+2} | x_{≤i+1})`.
///
/// Summing these in order in `f64` and rounding to `f32` reproduces
/// [`lm_nll`] bit for bit.
pub fn per_token_nll(params: &ModelParams, x: &[u32]) -> Result<Vec<f64>> {
    let lg = loss_graph(params, x)?;
    let rows = lg
        .forward
        .graph
        .row_losses(lg.loss)
        .ok_or_else(|| Error::Graph("loss node is not a cross-entropy".into()))?;
    Ok(rows.to_vec())
}

/// Loss and gradients of [`lm_nll`] with respect to every parameter.
pub fn nll_with_grads(params: &ModelParams, x: &[u32]) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let lg = loss_graph(params, x)?;
    let graph = &lg.forward.graph;
    let grads = graph.backward(lg.loss)?;
    let mut out = BTreeMap::new();
    for (name, id) in &lg.forward.params {
        let g = grads
            .get(*id)
            .cloned()
            .ok_or_else(|| Error::Graph(format!("no gradient for {name}")))?;
        out.insert(name.clone(), g);
    }
    Ok((graph.value(lg.loss).item(), out))
}
