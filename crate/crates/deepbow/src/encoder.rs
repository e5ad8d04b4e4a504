//! Transformer encoder with layer-aggregated pooling.
//!
//! One encoder instance owns its embedding table and `L` pre-norm
//! transformer layers. Besides the final-layer token outputs it produces a
//! pooled text vector: each layer's token mean is projected through that
//! layer's `W_m`/`b_m`, the per-layer summaries are concatenated, and the
//! concatenation is projected through `W_agg`/`b_agg`. Sinusoidal positional
//! encodings are added to the embeddings; they contribute no parameters.
//!
//! The forward pass always runs on an autodiff [`Tape`], whether the caller
//! wants gradients or not — inference just reads the values off the tape and
//! drops it. One code path means the trained function and the served
//! function cannot drift apart.

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::math::{self, Matrix};
use crate::params::{Init, ParamStore, TensorId};
use crate::{DeepBowError, Result};

/// Tensor handles for one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: TensorId,
    pub b_q: TensorId,
    pub w_k: TensorId,
    pub b_k: TensorId,
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
    pub w_ffn1: TensorId,
    pub b_ffn1: TensorId,
    pub w_ffn2: TensorId,
    pub b_ffn2: TensorId,
    /// Mean-pool projection for this layer's summary.
    pub w_m: TensorId,
    pub b_m: TensorId,
}

/// Tensor handles for a full encoder (one stream).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: TensorId,
    pub layers: Vec<LayerParams>,
    pub w_agg: TensorId,
    pub b_agg: TensorId,
    pub vocab_size: usize,
    pub cfg: ModelConfig,
}

impl EncoderParams {
    /// Registers all tensors for one encoder under `prefix` (e.g. "char").
    /// Weight matrices initialize uniform ±1/√fan_in; embeddings use the
    /// model width as fan-in so token vectors start at unit-ish scale;
    /// biases start at zero.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.d;
        let embed = store.register(
            &format!("{prefix}.embed"),
            vocab_size,
            d,
            Init::UniformFanIn(d),
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut weight = |name: &str, rows: usize, cols: usize| {
                store.register(
                    &format!("{prefix}.layer{i}.{name}"),
                    rows,
                    cols,
                    Init::UniformFanIn(rows),
                )
            };
            let w_q = weight("w_q", d, d);
            let w_k = weight("w_k", d, d);
            let w_v = weight("w_v", d, d);
            let w_o = weight("w_o", d, d);
            let w_ffn1 = weight("w_ffn1", d, cfg.ffn);
            let w_ffn2 = weight("w_ffn2", cfg.ffn, d);
            let w_m = weight("w_m", d, d);
            let mut bias = |name: &str, cols: usize| {
                store.register(&format!("{prefix}.layer{i}.{name}"), 1, cols, Init::Zero)
            };
            let b_q = bias("b_q", d);
            let b_k = bias("b_k", d);
            let b_v = bias("b_v", d);
            let b_o = bias("b_o", d);
            let b_ffn1 = bias("b_ffn1", cfg.ffn);
            let b_ffn2 = bias("b_ffn2", d);
            let b_m = bias("b_m", d);
            layers.push(LayerParams {
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                w_ffn1,
                b_ffn1,
                w_ffn2,
                b_ffn2,
                w_m,
                b_m,
            });
        }
        let w_agg = store.register(
            &format!("{prefix}.w_agg"),
            cfg.layers * d,
            d,
            Init::UniformFanIn(cfg.layers * d),
        );
        let b_agg = store.register(&format!("{prefix}.b_agg"), 1, d, Init::Zero);
        EncoderParams {
            embed,
            layers,
            w_agg,
            b_agg,
            vocab_size,
            cfg: cfg.clone(),
        }
    }
}

/// Tape handles for one encoded sequence.
pub struct TapeEncoding {
    /// Final-layer token outputs, (len × d).
    pub token_outputs: NodeId,
    /// Aggregated pooled vector, (1 × d).
    pub pooled: NodeId,
    /// Per-layer pooled summaries, each (1 × d).
    pub per_layer_pooled: Vec<NodeId>,
}

/// Plain-value result of encoding a sequence.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub token_outputs: Matrix,
    pub pooled: Vec<f64>,
    pub per_layer_pooled: Vec<Vec<f64>>,
}

/// Fixed sinusoidal positional encodings, (n × d).
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[d - 1] = (pos as f64 * rate).sin();
        }
    }
    pe
}

/// Runs the encoder forward on `tape`. Token indices must already be
/// validated against the embedding table (see [`encode`]).
pub fn encode_on_tape(tape: &mut Tape, params: &EncoderParams, tokens: &[u32]) -> TapeEncoding {
    assert!(!tokens.is_empty(), "encode of empty sequence");
    let cfg = &params.cfg;
    let d = cfg.d;
    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let embedded = tape.embed(params.embed, tokens);
    let pe = tape.constant(positional_encoding(tokens.len(), d));
    let mut x = tape.add(embedded, pe);

    let mut per_layer_pooled = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        // Self-attention block, pre-norm.
        let normed = tape.layer_norm_rows(x);
        let q = tape.linear(normed, layer.w_q, Some(layer.b_q));
        let k = tape.linear(normed, layer.w_k, Some(layer.b_k));
        let v = tape.linear(normed, layer.w_v, Some(layer.b_v));
        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(weights, vh));
        }
        let merged = tape.concat_cols(&head_outputs);
        let attn = tape.linear(merged, layer.w_o, Some(layer.b_o));
        x = tape.add(x, attn);

        // Feed-forward block, pre-norm.
        let normed = tape.layer_norm_rows(x);
        let inner = tape.linear(normed, layer.w_ffn1, Some(layer.b_ffn1));
        let inner = tape.gelu(inner);
        let ffn = tape.linear(inner, layer.w_ffn2, Some(layer.b_ffn2));
        x = tape.add(x, ffn);

        // This layer's pooled summary.
        let mean = tape.mean_rows(x);
        per_layer_pooled.push(tape.linear(mean, layer.w_m, Some(layer.b_m)));
    }

    let stacked = tape.concat_cols(&per_layer_pooled);
    let pooled = tape.linear(stacked, params.w_agg, Some(params.b_agg));
    TapeEncoding {
        token_outputs: x,
        pooled,
        per_layer_pooled,
    }
}

/// Runs the encoder and extracts plain values. Errors on an empty sequence
/// or a token index outside the embedding table.
pub fn encode(store: &ParamStore, params: &EncoderParams, tokens: &[u32]) -> Result<EncodedText> {
    if tokens.is_empty() {
        return Err(DeepBowError::Input("cannot encode an empty sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.vocab_size) {
        return Err(DeepBowError::Input(format!(
            "token index {bad} outside vocabulary space {}",
            params.vocab_size
        )));
    }
    let mut tape = Tape::new(store);
    let enc = encode_on_tape(&mut tape, params, tokens);
    Ok(EncodedText {
        token_outputs: tape.value(enc.token_outputs).clone(),
        pooled: tape.value(enc.pooled).data.clone(),
        per_layer_pooled: enc
            .per_layer_pooled
            .iter()
            .map(|&id| tape.value(id).data.clone())
            .collect(),
    })
}

/// Eq.-2-style pooling weights: softmax over the unscaled dot products of
/// `h_c` with each row of `h_w`. Always a probability vector.
pub fn attention_pool(h_c: &[f64], h_w: &Matrix) -> Vec<f64> {
    assert!(h_w.rows >= 1, "attention_pool over empty matrix");
    let mut weights: Vec<f64> = (0..h_w.rows).map(|i| math::dot(h_c, h_w.row(i))).collect();
    math::softmax_in_place(&mut weights);
    weights
}

/// Convex combination Σᵢ weights[i]·h_w[i].
pub fn weighted_word_summary(weights: &[f64], h_w: &Matrix) -> Vec<f64> {
    assert_eq!(weights.len(), h_w.rows, "summary weight count");
    let mut out = vec![0.0; h_w.cols];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(h_w.row(i)) {
            *o += w * x;
        }
    }
    out
}
