//! Straightforward `f64` re-implementation of the language model loss, used
//! as the finite-difference oracle for reverse-mode gradients.

use std::collections::BTreeMap;

use gap_core::model::LN_EPS;
use gap_core::{ModelConfig, ModelParams};

pub type Weights = BTreeMap<String, Vec<f64>>;

pub fn weights_of(params: &ModelParams) -> Weights {
    params
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

fn layernorm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / s * gain[i] + bias[i])
        .collect()
}

/// `x · W + b` with `W` stored `[in × out]`.
fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Summed next-token negative log-likelihood of `tokens`.
pub fn nll(cfg: &ModelConfig, w: &Weights, tokens: &[u32]) -> f64 {
    let d = cfg.d_model;
    let t_len = tokens.len() - 1;
    let get = |n: &str| w.get(n).unwrap_or_else(|| panic!("missing {n}")).as_slice();
    let mut h: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let tok = tokens[t] as usize;
            (0..d)
                .map(|c| get("tok_emb")[tok * d + c] + get("pos_emb")[t * d + c])
                .collect()
        })
        .collect();
    let dh = d / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let a: Vec<Vec<f64>> = h
            .iter()
            .map(|x| layernorm(x, get(&p("ln1.gain")), get(&p("ln1.bias"))))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| linear(x, get(&p("attn.wq")), get(&p("attn.bq")))).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| linear(x, get(&p("attn.wk")), get(&p("attn.bk")))).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| linear(x, get(&p("attn.wv")), get(&p("attn.bv")))).collect();
        for i in 0..t_len {
            let mut att = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let pj = (s - m).exp() / z;
                    for c in cols.clone() {
                        att[c] += pj * v[j][c];
                    }
                }
            }
            let o = linear(&att, get(&p("attn.wo")), get(&p("attn.bo")));
            for c in 0..d {
                h[i][c] += o[c];
            }
        }
        for x in h.iter_mut() {
            let m = layernorm(x, get(&p("ln2.gain")), get(&p("ln2.bias")));
            let f: Vec<f64> = linear(&m, get(&p("mlp.w1")), get(&p("mlp.b1"))).into_iter().map(gelu).collect();
            let o = linear(&f, get(&p("mlp.w2")), get(&p("mlp.b2")));
            for c in 0..d {
                x[c] += o[c];
            }
        }
    }
    let vocab = cfg.vocab_size;
    let mut total = 0.0;
    for (t, x) in h.iter().enumerate() {
        let xf = layernorm(x, get("ln_f.gain"), get("ln_f.bias"));
        let logits: Vec<f64> = (0..vocab)
            .map(|j| {
                let dotp: f64 = if cfg.tie_embeddings {
                    (0..d).map(|c| xf[c] * get("tok_emb")[j * d + c]).sum()
                } else {
                    (0..d).map(|c| xf[c] * get("head.weight")[c * vocab + j]).sum()
                };
                dotp + get("head.bias")[j]
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[tokens[t + 1] as usize];
    }
    total
}

/// Central difference of [`nll`] in coordinate `(name, index)`.
pub fn central_difference(cfg: &ModelConfig, w: &Weights, tokens: &[u32], name: &str, index: usize, h: f64) -> f64 {
    let mut plus = w.clone();
    plus.get_mut(name).unwrap()[index] += h;
    let mut minus = w.clone();
    minus.get_mut(name).unwrap()[index] -= h;
    (nll(cfg, &plus, tokens) - nll(cfg, &minus, tokens)) / (2.0 * h)
}

/// Denominator floor for [`relative_error`]. Some coordinates have an exact
/// zero gradient (key biases shift every attention score of a row equally)
/// and only rounding residue survives on both sides.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}
