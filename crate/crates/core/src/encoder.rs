//! Fine-grained branch: per-frame concatenation, linear projection, learnable
//! positional embedding, a post-norm Transformer encoder and temporal mean
//! pooling.
//!
//! Linear weights are stored `[out × in]` and applied to row-major activations
//! as `U · Wᵀ`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CmtaError, Result};
use crate::params::{xavier_uniform, zeros_bias, ParamStore};
use crate::tensor::{c, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl EncoderLayerParams {
    pub fn register<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        model_dim: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = model_dim;
        let mut add = |name: &str, t: Tensor<F>| store.add(format!("{prefix}.{name}"), t);
        EncoderLayerParams {
            w_q: add("w_q", xavier_uniform(d, d, rng)),
            w_k: add("w_k", xavier_uniform(d, d, rng)),
            w_v: add("w_v", xavier_uniform(d, d, rng)),
            w_o: add("w_o", xavier_uniform(d, d, rng)),
            w_1: add("w_1", xavier_uniform(ff_dim, d, rng)),
            b_1: add("b_1", zeros_bias(ff_dim)),
            w_2: add("w_2", xavier_uniform(d, ff_dim, rng)),
            b_2: add("b_2", zeros_bias(d)),
            ln1_g: add("ln1_g", Tensor::filled(&[d], F::one())),
            ln1_b: add("ln1_b", zeros_bias(d)),
            ln2_g: add("ln2_g", Tensor::filled(&[d], F::one())),
            ln2_b: add("ln2_b", zeros_bias(d)),
        }
    }

    pub fn ids(&self) -> [usize; 12] {
        [
            self.w_q, self.w_k, self.w_v, self.w_o, self.w_1, self.b_1, self.w_2, self.b_2, self.ln1_g,
            self.ln1_b, self.ln2_g, self.ln2_b,
        ]
    }

    pub fn bind<'a, F: Real>(&self, tape: &mut Tape<'a, F>, store: &'a ParamStore<F>) -> EncoderLayerVars {
        let [w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2, ln1_g, ln1_b, ln2_g, ln2_b] =
            self.ids().map(|id| store.bind(tape, id));
        EncoderLayerVars {
            w_q,
            w_k,
            w_v,
            w_o,
            w_1,
            b_1,
            w_2,
            b_2,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
        }
    }
}

/// All fine-branch parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub model_dim: usize,
    pub clip_len: usize,
    pub heads: usize,
    pub w_p: usize,
    pub b_p: usize,
    pub pos: usize,
    pub layers: Vec<EncoderLayerParams>,
}

pub struct EncoderVars {
    pub w_p: Var,
    pub b_p: Var,
    pub pos: Var,
    pub layers: Vec<EncoderLayerVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub clip_len: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderParams {
    pub fn register<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, shape: EncoderShape, rng: &mut R) -> Result<Self> {
        if shape.heads == 0 || !shape.model_dim.is_multiple_of(shape.heads) {
            return Err(CmtaError::config(format!(
                "model_dim {} must be divisible by heads {}",
                shape.model_dim, shape.heads
            )));
        }
        let w_p = store.add("enc.w_p", xavier_uniform(shape.model_dim, shape.input_dim, rng));
        let b_p = store.add("enc.b_p", zeros_bias(shape.model_dim));
        let pos = store.add("enc.pos", xavier_uniform(shape.clip_len, shape.model_dim, rng));
        let layers = (0..shape.layers)
            .map(|l| EncoderLayerParams::register(store, &format!("enc.layer{l}"), shape.model_dim, shape.ff_dim, rng))
            .collect();
        Ok(EncoderParams {
            input_dim: shape.input_dim,
            model_dim: shape.model_dim,
            clip_len: shape.clip_len,
            heads: shape.heads,
            w_p,
            b_p,
            pos,
            layers,
        })
    }

    pub fn ids(&self) -> Vec<usize> {
        let mut ids = vec![self.w_p, self.b_p, self.pos];
        for l in &self.layers {
            ids.extend(l.ids());
        }
        ids
    }

    pub fn bind<'a, F: Real>(&self, tape: &mut Tape<'a, F>, store: &'a ParamStore<F>) -> EncoderVars {
        EncoderVars {
            w_p: store.bind(tape, self.w_p),
            b_p: store.bind(tape, self.b_p),
            pos: store.bind(tape, self.pos),
            layers: self.layers.iter().map(|l| l.bind(tape, store)).collect(),
        }
    }
}

/// `x_t = [v_t; e_t]`, visual first, for every frame.
pub fn fuse_frames<F: Real>(tape: &mut Tape<'_, F>, visual: Var, textual: Var) -> Result<Var> {
    if tape.value(visual).rows() != tape.value(textual).rows() {
        return Err(CmtaError::config("visual and textual frame counts differ"));
    }
    tape.concat_cols(&[visual, textual])
}

/// `U_0[t] = W_p·x_t + b_p + P[t]`.
pub fn embed_sequence<F: Real>(tape: &mut Tape<'_, F>, x: Var, vars: &EncoderVars) -> Result<Var> {
    let (frames, pos_len) = (tape.value(x).rows(), tape.value(vars.pos).rows());
    if frames != pos_len {
        return Err(CmtaError::config(format!(
            "clip has {frames} frames but the positional embedding is bound to {pos_len}"
        )));
    }
    let u = tape.matmul_bt(x, vars.w_p)?;
    let u = tape.add_row(u, vars.b_p)?;
    tape.add(u, vars.pos)
}

/// Multi-head scaled dot-product self-attention followed by the output
/// projection. Also returns the per-head `T×T` attention matrices.
pub fn self_attention_with_weights<F: Real>(
    tape: &mut Tape<'_, F>,
    u: Var,
    layer: &EncoderLayerVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(u).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(CmtaError::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = tape.matmul_bt(u, layer.w_q)?;
    let k = tape.matmul_bt(u, layer.w_k)?;
    let v = tape.matmul_bt(u, layer.w_v)?;
    let scale = c::<F>(1.0 / (dk as f64).sqrt());

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        weights.push(attn);
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((tape.matmul_bt(cat, layer.w_o)?, weights))
}

pub fn self_attention<F: Real>(tape: &mut Tape<'_, F>, u: Var, layer: &EncoderLayerVars, heads: usize) -> Result<Var> {
    Ok(self_attention_with_weights(tape, u, layer, heads)?.0)
}

/// ReLU feed-forward `W_2·relu(W_1·u + b_1) + b_2`, row-wise.
pub fn feed_forward<F: Real>(tape: &mut Tape<'_, F>, u: Var, layer: &EncoderLayerVars) -> Result<Var> {
    let h = tape.matmul_bt(u, layer.w_1)?;
    let h = tape.add_row(h, layer.b_1)?;
    let h = tape.relu(h);
    let o = tape.matmul_bt(h, layer.w_2)?;
    tape.add_row(o, layer.b_2)
}

/// Inverted dropout applied to sublayer outputs during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn apply_dropout<F: Real>(tape: &mut Tape<'_, F>, x: Var, dropout: &mut Option<&mut Dropout<'_>>) -> Result<Var> {
    let Some(d) = dropout.as_deref_mut() else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.rate;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask: Vec<F> = (0..n)
        .map(|_| if d.rng.random::<f64>() < keep { c::<F>(1.0 / keep) } else { F::zero() })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// One post-norm encoder layer:
/// `U ← LN(U + Attn(U))`, then `U ← LN(U + FFN(U))`.
pub fn encoder_layer<F: Real>(
    tape: &mut Tape<'_, F>,
    u: Var,
    layer: &EncoderLayerVars,
    heads: usize,
    dropout: &mut Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let a = self_attention(tape, u, layer, heads)?;
    let a = apply_dropout(tape, a, dropout)?;
    let r = tape.add(u, a)?;
    let u = tape.layer_norm(r, layer.ln1_g, layer.ln1_b)?;
    let f = feed_forward(tape, u, layer)?;
    let f = apply_dropout(tape, f, dropout)?;
    let r = tape.add(u, f)?;
    tape.layer_norm(r, layer.ln2_g, layer.ln2_b)
}

pub fn encoder_forward<F: Real>(
    tape: &mut Tape<'_, F>,
    u0: Var,
    vars: &EncoderVars,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let mut u = u0;
    for layer in &vars.layers {
        u = encoder_layer(tape, u, layer, heads, &mut dropout)?;
    }
    Ok(u)
}

/// `h_fine = (1/T)·Σ_t U[t]`
pub fn temporal_pool<F: Real>(tape: &mut Tape<'_, F>, u: Var) -> Var {
    tape.mean_rows(u)
}
