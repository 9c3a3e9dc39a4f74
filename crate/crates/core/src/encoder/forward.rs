use alloc::vec::Vec;

use rand::RngCore;

use super::dropout::{draw_mask, DropoutMode, DropoutPlacement, DROPKEY_SENTINEL};
use super::params::{BoundLayer, BoundParams};
use super::{ModelConfig, NormPlacement};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::matrix::Matrix;

/// Per-layer activations that the explicit regularizers consume.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input of the attention sublayer, after normalization and before the
    /// Q/K/V projections (and before any implicit input dropout).
    pub attn_input: Var,
    /// Softmax attention weights per head, before any implicit dropout.
    pub attn: Vec<Var>,
    /// Input of the feed-forward sublayer.
    pub ffn_input: Var,
    /// `relu(ffn_input W_ff1^T)`, before any implicit dropout.
    pub ffn_hidden: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `1 x num_classes` logits for the sequence.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

/// `(Q, K, V) = (X W_q^T, X W_k^T, X W_v^T)`.
pub fn project_qkv(g: &mut Graph, x: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var, Var)> {
    Ok((g.matmul_t(x, w_q)?, g.matmul_t(x, w_k)?, g.matmul_t(x, w_v)?))
}

/// Single-head scaled dot-product attention. Returns `(A, A V)` with
/// `A = softmax(Q K^T / sqrt(d_k))`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d_k = g.shape(q).1;
    let s = g.matmul_t(q, k)?;
    let s = g.scale(s, 1.0 / math::sqrt(d_k as f64));
    let a = g.row_softmax(s);
    let out = g.matmul(a, v)?;
    Ok((a, out))
}

/// `relu(X W_ff1^T) W_ff2^T`.
pub fn feed_forward(g: &mut Graph, x: Var, w_ff1: Var, w_ff2: Var) -> Result<Var> {
    let h = g.matmul_t(x, w_ff1)?;
    let h = g.relu(h);
    g.matmul_t(h, w_ff2)
}

struct Masks<'a, 'r> {
    placements: &'a [DropoutPlacement],
    rng: Option<&'r mut dyn RngCore>,
}

impl Masks<'_, '_> {
    fn rate(&self, mode: DropoutMode) -> Option<f64> {
        self.placements
            .iter()
            .find(|p| p.mode == mode && p.is_active())
            .map(|p| p.rate)
    }

    fn draw(&mut self, mode: DropoutMode, target: &Matrix, p: f64) -> Result<Matrix> {
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::contract("training-mode dropout needs an rng"))?;
        Ok(draw_mask(mode, target, p, rng))
    }

    fn inverted(&mut self, g: &mut Graph, x: Var, mode: DropoutMode) -> Result<Var> {
        let Some(p) = self.rate(mode) else {
            return Ok(x);
        };
        let keep = self.draw(mode, g.value(x), p)?;
        let scaled = g.leaf(keep.scale(1.0 / (1.0 - p)));
        g.hadamard(x, scaled)
    }
}

fn attention_block(
    g: &mut Graph,
    config: &ModelConfig,
    layer: &BoundLayer,
    x: Var,
    masks: &mut Masks<'_, '_>,
) -> Result<(Var, Vec<Var>)> {
    let x_in = masks.inverted(g, x, DropoutMode::InputTokens)?;
    let dh = config.head_dim();
    let mut heads = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (w_q, w_k, w_v) = if config.heads == 1 {
            (layer.w_q, layer.w_k, layer.w_v)
        } else {
            (
                g.slice_rows(layer.w_q, h * dh, dh)?,
                g.slice_rows(layer.w_k, h * dh, dh)?,
                g.slice_rows(layer.w_v, h * dh, dh)?,
            )
        };
        let (q, k, v) = project_qkv(g, x_in, w_q, w_k, w_v)?;
        let s = g.matmul_t(q, k)?;
        let mut s = g.scale(s, 1.0 / math::sqrt(dh as f64));
        if let Some(p) = masks.rate(DropoutMode::ScoresPrekey) {
            let keep = masks.draw(DropoutMode::ScoresPrekey, g.value(s), p)?;
            s = g.mask_fill(s, keep, DROPKEY_SENTINEL)?;
        }
        let a = g.row_softmax(s);
        weights.push(a);
        let mut mixed = a;
        if let Some(p) = masks.rate(DropoutMode::AttentionWeights) {
            let keep = masks.draw(DropoutMode::AttentionWeights, g.value(a), p)?;
            let keep = g.leaf(keep);
            let dropped = g.hadamard(a, keep)?;
            mixed = g.row_normalize(dropped)?;
        }
        heads.push(g.matmul(mixed, v)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((g.matmul_t(joined, layer.w_o)?, weights))
}

fn ffn_block(g: &mut Graph, layer: &BoundLayer, x: Var, masks: &mut Masks<'_, '_>) -> Result<(Var, Var)> {
    let h = g.matmul_t(x, layer.w_ff1)?;
    let hidden = g.relu(h);
    let dropped = masks.inverted(g, hidden, DropoutMode::FfHidden)?;
    Ok((g.matmul_t(dropped, layer.w_ff2)?, hidden))
}

/// Runs the encoder on one token matrix (`n x input_dim`, `n <= max_tokens`).
///
/// With `train == false` no masks are drawn and the result is a pure
/// function of the tokens and parameters. With `train == true`, every active
/// placement draws masks from `rng`, which must then be present.
pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    params: &BoundParams,
    tokens: &Matrix,
    placements: &[DropoutPlacement],
    train: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<ForwardTrace> {
    if tokens.cols() != config.input_dim || tokens.rows() > config.max_tokens {
        return Err(Error::shape(
            "encoder input",
            tokens.shape(),
            (config.max_tokens, config.input_dim),
        ));
    }
    for p in placements {
        p.validate()?;
    }
    let active: &[DropoutPlacement] = if train { placements } else { &[] };
    if active.iter().any(DropoutPlacement::is_active) && rng.is_none() {
        return Err(Error::contract("training-mode dropout needs an rng"));
    }
    let mut masks = Masks {
        placements: active,
        rng,
    };

    let n = tokens.rows() + 1;
    let x = g.leaf(tokens.clone());
    let emb = g.matmul_t(x, params.embed_w)?;
    let emb = g.add_row(emb, params.embed_b)?;
    let seq = g.concat_rows(&[params.cls, emb])?;
    let pos = g.slice_rows(params.pos, 0, n)?;
    let mut h = g.add(seq, pos)?;

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let trace = match config.norm {
            NormPlacement::Pre => {
                let attn_input = g.layer_norm(h, layer.norm1_gain, layer.norm1_bias)?;
                let (attn_out, attn) = attention_block(g, config, layer, attn_input, &mut masks)?;
                h = g.add(h, attn_out)?;
                let ffn_input = g.layer_norm(h, layer.norm2_gain, layer.norm2_bias)?;
                let (ffn_out, ffn_hidden) = ffn_block(g, layer, ffn_input, &mut masks)?;
                h = g.add(h, ffn_out)?;
                LayerTrace {
                    attn_input,
                    attn,
                    ffn_input,
                    ffn_hidden,
                }
            }
            NormPlacement::Post => {
                let attn_input = h;
                let (attn_out, attn) = attention_block(g, config, layer, attn_input, &mut masks)?;
                let sum = g.add(h, attn_out)?;
                let ffn_input = g.layer_norm(sum, layer.norm1_gain, layer.norm1_bias)?;
                let (ffn_out, ffn_hidden) = ffn_block(g, layer, ffn_input, &mut masks)?;
                let sum = g.add(ffn_input, ffn_out)?;
                h = g.layer_norm(sum, layer.norm2_gain, layer.norm2_bias)?;
                LayerTrace {
                    attn_input,
                    attn,
                    ffn_input,
                    ffn_hidden,
                }
            }
        };
        layers.push(trace);
    }
    if config.norm == NormPlacement::Pre {
        h = g.layer_norm(h, params.final_gain, params.final_bias)?;
    }
    let cls = g.slice_rows(h, 0, 1)?;
    let logits = g.matmul_t(cls, params.head_w)?;
    let logits = g.add_row(logits, params.head_b)?;
    Ok(ForwardTrace { logits, layers })
}
