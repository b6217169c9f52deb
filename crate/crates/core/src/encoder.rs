//! Transformer encoder over the 2T-token sequence: post-layer-norm blocks of
//! multi-head self-attention and a two-linear feed-forward, residuals around
//! both. Output shape equals input shape.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, Result, Scalar, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            heads: 4,
            model_dim: 256,
            ffn_dim: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 {
            return Err("encoder needs at least one layer".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must lie in [0,1)", self.dropout));
        }
        Ok(())
    }
}

/// Per-layer trainable tensors, already registered on the graph.
pub struct EncoderLayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`
/// (`(n, d)` each), per head, heads concatenated then mixed by `wo`/`bo`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    wo: Var,
    bo: Var,
) -> Result<Var> {
    let (n, d) = (g.shape(q)[0], g.shape(q)[1]);
    if g.shape(k) != [n, d] || g.shape(v) != [n, d] {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            scope: "attention".into(),
            details: format!(
                "q {:?}, k {:?}, v {:?}",
                g.shape(q),
                g.shape(k),
                g.shape(v)
            ),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            scope: "attention".into(),
            details: format!("dim {d} not divisible by {heads} heads"),
        });
    }
    let dk = d / heads;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let r = h * dk..(h + 1) * dk;
        let qh = g.slice_cols(q, r.clone())?;
        let kh = g.slice_cols(k, r.clone())?;
        let vh = g.slice_cols(v, r)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let scaled = g.scale(logits, scale)?;
        let weights = g.softmax_rows(scaled)?;
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    let mixed = g.matmul(concat, wo)?;
    g.add(mixed, bo)
}

/// Attention weights of one head for inspection/tests: `softmax(QK^T/sqrt(dk))`.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    heads: usize,
    q: Var,
    k: Var,
    head: usize,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dk = d / heads;
    let r = head * dk..(head + 1) * dk;
    let qh = g.slice_cols(q, r.clone())?;
    let kh = g.slice_cols(k, r)?;
    let kt = g.transpose(kh)?;
    let logits = g.matmul(qh, kt)?;
    let scaled = g.scale(logits, T::from_f64(1.0 / (dk as f64).sqrt()))?;
    g.softmax_rows(scaled)
}

fn dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let shape: Vec<usize> = g.shape(x).to_vec();
            let keep = T::from_f64(1.0 / (1.0 - rate));
            let mask = ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
                if rng.gen_bool(rate) {
                    T::zero()
                } else {
                    keep
                }
            });
            let m = g.input(mask)?;
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// One encoder layer, post-norm as written:
/// `F~ = LN(MHA(F) + F)`, `F' = LN(FFN(F~) + F~)`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &EncoderLayerVars,
    x: Var,
    mut train_rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let eps = T::from_f64(1e-5);
    let q = g.matmul(x, vars.wq)?;
    let q = g.add(q, vars.bq)?;
    let k = g.matmul(x, vars.wk)?;
    let k = g.add(k, vars.bk)?;
    let v = g.matmul(x, vars.wv)?;
    let v = g.add(v, vars.bv)?;
    let attn = attention(g, cfg.heads, q, k, v, vars.wo, vars.bo)?;
    let attn = dropout(g, attn, cfg.dropout, &mut train_rng)?;
    let res1 = g.add(attn, x)?;
    let normed1 = g.layer_norm_rows(res1, vars.norm1_gamma, vars.norm1_beta, eps)?;

    let h = g.matmul(normed1, vars.ffn_w1)?;
    let h = g.add(h, vars.ffn_b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, vars.ffn_w2)?;
    let h = g.add(h, vars.ffn_b2)?;
    let h = dropout(g, h, cfg.dropout, &mut train_rng)?;
    let res2 = g.add(h, normed1)?;
    g.layer_norm_rows(res2, vars.norm2_gamma, vars.norm2_beta, eps)
}

/// N-layer encoder. `train_rng` enables dropout; pass `None` for
/// deterministic evaluation.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    layers: &[EncoderLayerVars],
    x: Var,
    mut train_rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        g.push_scope(&format!("encoder.layer{i}"));
        h = encoder_layer(g, cfg, layer, h, train_rng.as_deref_mut())?;
        g.pop_scope();
    }
    Ok(h)
}
