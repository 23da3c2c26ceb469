//! Layers built on the tape ops: linear, layer norm, embeddings,
//! sinusoidal positions, and the pre-norm transformer block.
//!
//! Parameter structs own plain tensors; `lift` puts them on a tape as
//! differentiable leaves for one forward/backward pass. `tensors` /
//! `tensors_mut` enumerate parameters in a fixed order shared by the
//! optimizer and the checkpoint codec.

use rand::Rng;

use crate::autodiff::{concat_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Xavier/Glorot uniform init for a `[rows × cols]` weight.
pub fn xavier_uniform<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Gaussian init (Box-Muller over the shared RNG stream).
pub fn normal_init<S: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            S::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Deterministic sinusoidal positional encoding, `[len × dim]`.
pub fn positional_encoding<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(vec![len, dim]);
    for t in 0..len {
        let row = out.row_mut(t);
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = (t as f64) / 10000f64.powf(2.0 * pair / dim as f64);
            row[i] = S::from_f64(if i % 2 == 0 { rate.sin() } else { rate.cos() });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>, // [in × out]
    pub bias: Tensor<S>,   // [out]
}

pub struct LinearVars<S: Scalar> {
    pub weight: Var<S>,
    pub bias: Var<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: xavier_uniform(rng, d_in, d_out),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn lift(&self, tape: &Tape<S>) -> LinearVars<S> {
        LinearVars {
            weight: tape.var(self.weight.clone()),
            bias: tape.var(self.bias.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<S: Scalar> LinearVars<S> {
    pub fn forward(&self, x: &Var<S>) -> Result<Var<S>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    /// Lifted parameters, in the same order as [`Linear::tensors`].
    pub fn vars(&self) -> Vec<Var<S>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

pub struct LayerNormVars<S: Scalar> {
    pub gain: Var<S>,
    pub bias: Var<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(vec![dim], S::one()),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn lift(&self, tape: &Tape<S>) -> LayerNormVars<S> {
        LayerNormVars {
            gain: tape.var(self.gain.clone()),
            bias: tape.var(self.bias.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.gain, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

impl<S: Scalar> LayerNormVars<S> {
    pub fn forward(&self, x: &Var<S>) -> Result<Var<S>> {
        x.layer_norm(&self.gain, &self.bias, S::from_f64(LAYER_NORM_EPS))
    }

    pub fn vars(&self) -> Vec<Var<S>> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// One pre-norm transformer block: multi-head attention and a two-layer
/// feed-forward, each behind a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock<S: Scalar> {
    pub heads: usize,
    pub wq: Vec<Tensor<S>>, // per head, [d × dk]
    pub wk: Vec<Tensor<S>>,
    pub wv: Vec<Tensor<S>>,
    pub out_proj: Linear<S>,
    pub ln_attn: LayerNormParams<S>,
    pub ln_ffn: LayerNormParams<S>,
    pub ffn_in: Linear<S>,
    pub ffn_out: Linear<S>,
}

pub struct AttentionBlockVars<S: Scalar> {
    heads: usize,
    wq: Vec<Var<S>>,
    wk: Vec<Var<S>>,
    wv: Vec<Var<S>>,
    out_proj: LinearVars<S>,
    ln_attn: LayerNormVars<S>,
    ln_ffn: LayerNormVars<S>,
    ffn_in: LinearVars<S>,
    ffn_out: LinearVars<S>,
}

impl<S: Scalar> AttentionBlock<S> {
    pub fn init(rng: &mut impl Rng, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by head count {heads}"
            )));
        }
        let dk = d_model / heads;
        let proj = |rng: &mut _| (0..heads).map(|_| xavier_uniform(rng, d_model, dk)).collect();
        Ok(AttentionBlock {
            heads,
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            out_proj: Linear::init(rng, d_model, d_model),
            ln_attn: LayerNormParams::init(d_model),
            ln_ffn: LayerNormParams::init(d_model),
            ffn_in: Linear::init(rng, d_model, d_ff),
            ffn_out: Linear::init(rng, d_ff, d_model),
        })
    }

    pub fn lift(&self, tape: &Tape<S>) -> AttentionBlockVars<S> {
        AttentionBlockVars {
            heads: self.heads,
            wq: self.wq.iter().map(|w| tape.var(w.clone())).collect(),
            wk: self.wk.iter().map(|w| tape.var(w.clone())).collect(),
            wv: self.wv.iter().map(|w| tape.var(w.clone())).collect(),
            out_proj: self.out_proj.lift(tape),
            ln_attn: self.ln_attn.lift(tape),
            ln_ffn: self.ln_ffn.lift(tape),
            ffn_in: self.ffn_in.lift(tape),
            ffn_out: self.ffn_out.lift(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = Vec::new();
        out.extend(self.wq.iter());
        out.extend(self.wk.iter());
        out.extend(self.wv.iter());
        out.extend(self.out_proj.tensors());
        out.extend(self.ln_attn.tensors());
        out.extend(self.ln_ffn.tensors());
        out.extend(self.ffn_in.tensors());
        out.extend(self.ffn_out.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        out.extend(self.wq.iter_mut());
        out.extend(self.wk.iter_mut());
        out.extend(self.wv.iter_mut());
        out.extend(self.out_proj.tensors_mut());
        out.extend(self.ln_attn.tensors_mut());
        out.extend(self.ln_ffn.tensors_mut());
        out.extend(self.ffn_in.tensors_mut());
        out.extend(self.ffn_out.tensors_mut());
        out
    }
}

impl<S: Scalar> AttentionBlockVars<S> {
    /// Lifted parameters, in the same order as [`AttentionBlock::tensors`].
    pub fn vars(&self) -> Vec<Var<S>> {
        let mut out: Vec<Var<S>> = Vec::new();
        out.extend(self.wq.iter().cloned());
        out.extend(self.wk.iter().cloned());
        out.extend(self.wv.iter().cloned());
        out.extend(self.out_proj.vars());
        out.extend(self.ln_attn.vars());
        out.extend(self.ln_ffn.vars());
        out.extend(self.ffn_in.vars());
        out.extend(self.ffn_out.vars());
        out
    }

    /// Run the block over `x` `[T × d_model]`. With `causal` set, position
    /// `t` attends to positions `<= t`; `visible` overrides the mask with
    /// explicit per-row visible lengths.
    pub fn forward(&self, x: &Var<S>, causal: bool, visible: Option<&[usize]>) -> Result<Var<S>> {
        let t_len = x.rows();
        let vis: Vec<usize> = match visible {
            Some(v) => v.to_vec(),
            None if causal => (0..t_len).map(|t| t + 1).collect(),
            None => vec![t_len; t_len],
        };

        let normed = self.ln_attn.forward(x)?;
        let dk = normed.cols() / self.heads;
        let inv_sqrt_dk = S::from_f64(1.0 / (dk as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = normed.matmul(&self.wq[h])?;
            let k = normed.matmul(&self.wk[h])?;
            let v = normed.matmul(&self.wv[h])?;
            let scores = q.matmul_nt(&k)?.scale(inv_sqrt_dk);
            let probs = scores.masked_softmax_rows(vis.clone())?;
            head_outs.push(probs.matmul(&v)?);
        }
        let merged = concat_cols(&head_outs)?;
        let attended = x.add(&self.out_proj.forward(&merged)?)?;

        let normed2 = self.ln_ffn.forward(&attended)?;
        let ff = self
            .ffn_out
            .forward(&self.ffn_in.forward(&normed2)?.relu())?;
        attended.add(&ff)
    }
}

/// Stack of pre-norm blocks with a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack<S: Scalar> {
    pub blocks: Vec<AttentionBlock<S>>,
    pub final_ln: LayerNormParams<S>,
}

pub struct TransformerStackVars<S: Scalar> {
    blocks: Vec<AttentionBlockVars<S>>,
    final_ln: LayerNormVars<S>,
}

impl<S: Scalar> TransformerStack<S> {
    pub fn init(
        rng: &mut impl Rng,
        layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|_| AttentionBlock::init(rng, d_model, heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(TransformerStack {
            blocks,
            final_ln: LayerNormParams::init(d_model),
        })
    }

    pub fn lift(&self, tape: &Tape<S>) -> TransformerStackVars<S> {
        TransformerStackVars {
            blocks: self.blocks.iter().map(|b| b.lift(tape)).collect(),
            final_ln: self.final_ln.lift(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = Vec::new();
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend(self.final_ln.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend(self.final_ln.tensors_mut());
        out
    }
}

impl<S: Scalar> TransformerStackVars<S> {
    pub fn forward(&self, x: &Var<S>, causal: bool, visible: Option<&[usize]>) -> Result<Var<S>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, causal, visible)?;
        }
        self.final_ln.forward(&h)
    }

    pub fn vars(&self) -> Vec<Var<S>> {
        let mut out: Vec<Var<S>> = Vec::new();
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.extend(self.final_ln.vars());
        out
    }
}

/// Learned lookup table, `[vocab × dim]`.
#[derive(Clone, Debug)]
pub struct Embedding<S: Scalar> {
    pub table: Tensor<S>,
}

pub struct EmbeddingVars<S: Scalar> {
    pub table: Var<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn init(rng: &mut impl Rng, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: normal_init(rng, vec![vocab, dim], 0.02),
        }
    }

    pub fn lift(&self, tape: &Tape<S>) -> EmbeddingVars<S> {
        EmbeddingVars {
            table: tape.var(self.table.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.table]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.table]
    }
}

impl<S: Scalar> EmbeddingVars<S> {
    pub fn forward(&self, ids: &[usize]) -> Result<Var<S>> {
        self.table.gather_rows(ids)
    }

    pub fn vars(&self) -> Vec<Var<S>> {
        vec![self.table.clone()]
    }
}
