//! Row-level numeric kernels shared by the differentiable graph and the
//! cached inference path.
//!
//! Every reduction accumulates in `f64` in ascending index order and the
//! result is rounded to `f32` once. Both forward paths call exactly these
//! functions on exactly the same rows, which is what makes their outputs
//! bit-identical.

/// `out[j] = Σ_k a[k] · b[k, j]` for a row `a` of length `k` and a
/// row-major `b` of shape `[k × n]`.
pub fn matmul_row(a: &[f32], b: &[f32], n: usize, acc: &mut [f64], out: &mut [f32]) {
    debug_assert_eq!(b.len(), a.len() * n);
    let acc = &mut acc[..n];
    acc.fill(0.0);
    for (kk, &av) in a.iter().enumerate() {
        let av = av as f64;
        let brow = &b[kk * n..(kk + 1) * n];
        for (s, &bv) in acc.iter_mut().zip(brow) {
            *s += av * bv as f64;
        }
    }
    for (o, &s) in out.iter_mut().zip(acc.iter()) {
        *o = s as f32;
    }
}

/// `out[j] = Σ_k a[k] · b[j, k]` for a row-major `b` of shape `[n × k]`.
pub fn matmul_transb_row(a: &[f32], b: &[f32], out: &mut [f32]) {
    let k = a.len();
    for (j, o) in out.iter_mut().enumerate() {
        let brow = &b[j * k..(j + 1) * k];
        *o = dot(a, brow) as f32;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x as f64 * y as f64;
    }
    s
}

/// Statistics saved by [`layernorm_row`] for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct NormStats {
    pub mean: f64,
    pub inv_std: f64,
}

pub fn layernorm_row(x: &[f32], gain: &[f32], bias: &[f32], eps: f64, out: &mut [f32]) -> NormStats {
    let d = x.len() as f64;
    let mut sum = 0.0f64;
    for &v in x {
        sum += v as f64;
    }
    let mean = sum / d;
    let mut var = 0.0f64;
    for &v in x {
        let c = v as f64 - mean;
        var += c * c;
    }
    var /= d;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        let xhat = (x[i] as f64 - mean) * inv_std;
        out[i] = (xhat * gain[i] as f64 + bias[i] as f64) as f32;
    }
    NormStats { mean, inv_std }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + 0.044715 * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

pub fn gelu_grad(x: f32) -> f64 {
    let x = x as f64;
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Causal multi-head attention for query row `i`.
///
/// `keys` and `values` hold rows `0..=i` in row-major `[i+1 × d]` layout.
/// When `probs` is given it receives the attention weights, head-major,
/// `n_heads × (i+1)` entries.
pub fn attention_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    n_heads: usize,
    scores: &mut Vec<f64>,
    out: &mut [f32],
    mut probs: Option<&mut [f64]>,
) {
    let d = q.len();
    let dh = d / n_heads;
    let n_keys = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    scores.resize(n_keys, 0.0);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = dot(qh, kh) * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut total = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
        for c in cols {
            let mut acc = 0.0f64;
            for (j, &p) in scores.iter().enumerate() {
                acc += p * values[j * d + c] as f64;
            }
            out[c] = acc as f32;
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n_keys..(h + 1) * n_keys].copy_from_slice(scores);
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f32]) -> f64 {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut total = 0.0f64;
    for &v in x {
        total += (v as f64 - max).exp();
    }
    max + total.ln()
}

/// `-log softmax(logits)[target]`.
pub fn nll_row(logits: &[f32], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target] as f64
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
