//! Stage 2: autoregressive generation of code streams from a condition
//! token sequence.
//!
//! The code transformer runs causally over `[condition tokens | (code,
//! duration) pairs]` and predicts the next code id (including a reserved
//! End id = K). The duration transformer reads, for each code position,
//! the hidden state that predicted that code plus an extra embedding of
//! the code itself, and regresses its real-valued duration; inference
//! rounds half-away-from-zero and clamps to ≥ 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{positional_encoding, Embedding, Linear, TransformerStack};
use crate::autodiff::{concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, DecaySchedule, LrSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    /// Condition token vocabulary size.
    pub text_vocab: usize,
    /// Codebook size K; the End id is K, one past the code range.
    pub num_codes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub code_layers: usize,
    pub duration_layers: usize,
    pub ff_dim: usize,
    /// Durations 1..=max_duration get their own embedding bucket; larger
    /// values share one overflow bucket.
    pub max_duration: usize,
    /// Hard cap on conditions + codes the model will attend over.
    pub max_len: usize,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            text_vocab: 16,
            num_codes: 64,
            d_model: 64,
            heads: 4,
            code_layers: 3,
            duration_layers: 2,
            ff_dim: 128,
            max_duration: 64,
            max_len: 256,
        }
    }
}

impl GptConfig {
    pub fn end_token(&self) -> usize {
        self.num_codes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.text_vocab,
            self.num_codes,
            self.d_model,
            self.heads,
            self.code_layers,
            self.duration_layers,
            self.ff_dim,
            self.max_duration,
            self.max_len,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn duration_bucket(&self, d: usize) -> usize {
        debug_assert!(d >= 1);
        d.min(self.max_duration + 1) - 1
    }
}

/// A finished generation: code ids (ending with End unless truncated)
/// plus one positive integer duration per non-End code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSequence {
    pub indices: Vec<usize>,
    pub durations: Vec<usize>,
    /// Set when max_len was reached before End was emitted.
    pub truncated: bool,
}

impl CodeSequence {
    /// Code ids without the End marker.
    pub fn codes(&self) -> &[usize] {
        if self.truncated {
            &self.indices
        } else {
            &self.indices[..self.indices.len() - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64 },
    TopK { k: usize, temperature: f64 },
}

#[derive(Clone, Debug)]
pub struct CodeGpt<S: Scalar> {
    pub config: GptConfig,
    pub text_embed: Embedding<S>,
    pub code_embed: Embedding<S>,     // [K × d]: End is never an input
    pub duration_embed: Embedding<S>, // bucketed durations
    pub code_stack: TransformerStack<S>,
    pub code_head: Linear<S>, // d → K+1
    /// Extra code embedding feeding the duration transformer (f_code).
    pub dur_code_embed: Embedding<S>,
    pub duration_stack: TransformerStack<S>,
    pub duration_head: Linear<S>, // d → 1
}

pub struct CodeGptVars<S: Scalar> {
    text_embed: crate::autodiff::nn::EmbeddingVars<S>,
    code_embed: crate::autodiff::nn::EmbeddingVars<S>,
    duration_embed: crate::autodiff::nn::EmbeddingVars<S>,
    code_stack: crate::autodiff::nn::TransformerStackVars<S>,
    code_head: crate::autodiff::nn::LinearVars<S>,
    dur_code_embed: crate::autodiff::nn::EmbeddingVars<S>,
    duration_stack: crate::autodiff::nn::TransformerStackVars<S>,
    duration_head: crate::autodiff::nn::LinearVars<S>,
}

impl<S: Scalar> CodeGpt<S> {
    pub fn init(config: GptConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(CodeGpt {
            text_embed: Embedding::init(rng, config.text_vocab, d),
            code_embed: Embedding::init(rng, config.num_codes, d),
            duration_embed: Embedding::init(rng, config.max_duration + 1, d),
            code_stack: TransformerStack::init(
                rng,
                config.code_layers,
                d,
                config.heads,
                config.ff_dim,
            )?,
            code_head: Linear::init(rng, d, config.num_codes + 1),
            dur_code_embed: Embedding::init(rng, config.num_codes, d),
            duration_stack: TransformerStack::init(
                rng,
                config.duration_layers,
                d,
                config.heads,
                config.ff_dim,
            )?,
            duration_head: Linear::init(rng, d, 1),
            config,
        })
    }

    pub fn lift(&self, tape: &Tape<S>) -> CodeGptVars<S> {
        CodeGptVars {
            text_embed: self.text_embed.lift(tape),
            code_embed: self.code_embed.lift(tape),
            duration_embed: self.duration_embed.lift(tape),
            code_stack: self.code_stack.lift(tape),
            code_head: self.code_head.lift(tape),
            dur_code_embed: self.dur_code_embed.lift(tape),
            duration_stack: self.duration_stack.lift(tape),
            duration_head: self.duration_head.lift(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = self.text_embed.tensors();
        v.extend(self.code_embed.tensors());
        v.extend(self.duration_embed.tensors());
        v.extend(self.code_stack.tensors());
        v.extend(self.code_head.tensors());
        v.extend(self.dur_code_embed.tensors());
        v.extend(self.duration_stack.tensors());
        v.extend(self.duration_head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.text_embed.tensors_mut();
        v.extend(self.code_embed.tensors_mut());
        v.extend(self.duration_embed.tensors_mut());
        v.extend(self.code_stack.tensors_mut());
        v.extend(self.code_head.tensors_mut());
        v.extend(self.dur_code_embed.tensors_mut());
        v.extend(self.duration_stack.tensors_mut());
        v.extend(self.duration_head.tensors_mut());
        v
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    fn check_prefix(&self, y: &[usize], codes: &[usize], durations: &[usize]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptyInput("condition token sequence is empty"));
        }
        if let Some(&bad) = y.iter().find(|&&t| t >= self.config.text_vocab) {
            return Err(Error::IndexOutOfRange {
                what: "condition token",
                index: bad,
                size: self.config.text_vocab,
            });
        }
        if codes.len() != durations.len() {
            return Err(Error::Dimension(format!(
                "{} codes vs {} durations",
                codes.len(),
                durations.len()
            )));
        }
        if codes.iter().any(|&c| c == self.config.end_token()) {
            return Err(Error::Contract("prefix contains the End token".into()));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > self.config.num_codes) {
            return Err(Error::IndexOutOfRange {
                what: "code",
                index: bad,
                size: self.config.num_codes,
            });
        }
        if let Some((pos, &d)) = durations.iter().enumerate().find(|(_, &d)| d == 0) {
            return Err(Error::Duration(d, pos));
        }
        if y.len() + codes.len() > self.config.max_len {
            return Err(Error::Capacity(format!(
                "prefix length {} exceeds max_len {}",
                y.len() + codes.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Logits `[K+1]` for the next code given the prefix. Incremental
    /// decoding and teacher forcing share this exact computation.
    pub fn next_code_logits(
        &self,
        y: &[usize],
        codes: &[usize],
        durations: &[usize],
    ) -> Result<Vec<S>> {
        self.check_prefix(y, codes, durations)?;
        let tape = Tape::new();
        let vars = self.lift(&tape);
        let h = vars.code_hidden(&tape, &self.config, y, codes, durations)?;
        let logits = vars.code_head.forward(&h)?;
        let last = logits.rows() - 1;
        Ok(logits.with_value(|t| t.row(last).to_vec()))
    }

    /// Real-valued duration predictions for every code in `codes`. The
    /// last code's duration is the one being predicted, so
    /// `embedded_durations` covers only the earlier codes.
    pub fn predict_durations(
        &self,
        y: &[usize],
        codes: &[usize],
        embedded_durations: &[usize],
    ) -> Result<Vec<S>> {
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        self.check_prefix(y, &codes[..codes.len() - 1], embedded_durations)?;
        if codes.contains(&self.config.end_token()) {
            return Err(Error::Contract("cannot predict a duration for End".into()));
        }
        let tape = Tape::new();
        let vars = self.lift(&tape);
        let h = vars.code_hidden(
            &tape,
            &self.config,
            y,
            &codes[..codes.len() - 1],
            embedded_durations,
        )?;
        let pred = vars.duration_forward(&tape, &self.config, &h, y.len(), codes)?;
        Ok(pred.with_value(|t| t.data().to_vec()))
    }

    /// Autoregressive generation with End-token termination. Greedy
    /// sampling ignores the rng entirely.
    pub fn generate(
        &self,
        y: &[usize],
        sampling: Sampling,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<CodeSequence> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        self.check_prefix(y, &[], &[])?;
        let capacity = self.config.max_len.saturating_sub(y.len()).max(1);
        let limit = max_len.min(capacity);
        let mut codes: Vec<usize> = Vec::new();
        let mut durations: Vec<usize> = Vec::new();
        loop {
            let logits = self.next_code_logits(y, &codes, &durations)?;
            let next = sample_index(&logits, sampling, rng);
            if next == self.config.end_token() {
                let mut indices = codes;
                indices.push(self.config.end_token());
                return Ok(CodeSequence {
                    indices,
                    durations,
                    truncated: false,
                });
            }
            codes.push(next);
            let preds = self.predict_durations(y, &codes, &durations)?;
            let d = round_duration(*preds.last().expect("one prediction per code"));
            durations.push(d);
            if codes.len() >= limit {
                return Ok(CodeSequence {
                    indices: codes,
                    durations,
                    truncated: true,
                });
            }
        }
    }
}

impl<S: Scalar> CodeGptVars<S> {
    /// Lifted parameters, in the same order as [`CodeGpt::tensors`].
    pub fn vars(&self) -> Vec<Var<S>> {
        let mut v = self.text_embed.vars();
        v.extend(self.code_embed.vars());
        v.extend(self.duration_embed.vars());
        v.extend(self.code_stack.vars());
        v.extend(self.code_head.vars());
        v.extend(self.dur_code_embed.vars());
        v.extend(self.duration_stack.vars());
        v.extend(self.duration_head.vars());
        v
    }

    /// Causal hidden states over `[conditions | (code, duration) pairs]`.
    fn code_hidden(
        &self,
        tape: &Tape<S>,
        config: &GptConfig,
        y: &[usize],
        codes: &[usize],
        durations: &[usize],
    ) -> Result<Var<S>> {
        let cond = self.text_embed.forward(y)?;
        let input = if codes.is_empty() {
            cond
        } else {
            let buckets: Vec<usize> =
                durations.iter().map(|&d| config.duration_bucket(d)).collect();
            let code_part = self
                .code_embed
                .forward(codes)?
                .add(&self.duration_embed.forward(&buckets)?)?;
            concat_rows(&[cond, code_part])?
        };
        let pe = tape.constant(positional_encoding(input.rows(), config.d_model));
        self.code_stack.forward(&input.add(&pe)?, true, None)
    }

    /// Teacher-forced logits for the positions predicting codes 1..=M and
    /// then End: rows `N_y−1 .. N_y+M−1` of the hidden states.
    fn code_logits_all(&self, h: &Var<S>, n_y: usize) -> Result<Var<S>> {
        let rows = h.rows();
        let sliced = h.slice_rows(n_y - 1, rows)?;
        self.code_head.forward(&sliced)
    }

    /// Duration predictions `[M × 1]`: for code i, the hidden state that
    /// predicted it plus the extra embedding of the code itself, run
    /// through the causal duration stack.
    fn duration_forward(
        &self,
        tape: &Tape<S>,
        _config: &GptConfig,
        h: &Var<S>,
        n_y: usize,
        codes: &[usize],
    ) -> Result<Var<S>> {
        let m = codes.len();
        if n_y - 1 + m > h.rows() {
            return Err(Error::Contract(format!(
                "duration slice [{}, {}) out of range for {} hidden rows",
                n_y - 1,
                n_y - 1 + m,
                h.rows()
            )));
        }
        let base = h.slice_rows(n_y - 1, n_y - 1 + m)?;
        let f_code = self.dur_code_embed.forward(codes)?;
        let x = base.add(&f_code)?;
        let _ = tape;
        let hidden = self.duration_stack.forward(&x, true, None)?;
        self.duration_head.forward(&hidden)
    }
}

/// Round half away from zero and clamp to at least one frame.
pub fn round_duration<S: Scalar>(x: S) -> usize {
    if !x.is_finite() {
        return 1;
    }
    let r = x.round().to_f64().unwrap_or(1.0);
    (r as i64).max(1) as usize
}

/// Stable softmax over a logit slice.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let exps: Vec<S> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum = exps.iter().fold(S::zero(), |a, &v| a + v);
    exps.into_iter().map(|v| v / sum).collect()
}

fn sample_index<S: Scalar>(logits: &[S], sampling: Sampling, rng: &mut impl Rng) -> usize {
    match sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::Temperature { temperature } => {
            let t = S::from_f64(temperature.max(1e-6));
            let scaled: Vec<S> = logits.iter().map(|&v| v / t).collect();
            sample_from(&softmax(&scaled), rng)
        }
        Sampling::TopK { k, temperature } => {
            let t = S::from_f64(temperature.max(1e-6));
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
            let keep = &order[..k.clamp(1, logits.len())];
            let scaled: Vec<S> = keep.iter().map(|&i| logits[i] / t).collect();
            keep[sample_from(&softmax(&scaled), rng)]
        }
    }
}

/// First maximal element (lowest index wins ties).
fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_from<S: Scalar>(probs: &[S], rng: &mut impl Rng) -> usize {
    let u = S::from_f64(rng.gen::<f64>());
    let mut acc = S::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ── Training ─────────────────────────────────────────────────────────

/// One supervised example: condition tokens plus the target code stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GptExample {
    pub tokens: Vec<usize>,
    pub codes: Vec<usize>,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GptTrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for GptTrainOptions {
    fn default() -> Self {
        GptTrainOptions {
            iterations: 3000,
            batch_size: 8,
            seed: 0,
            lr: LrSchedule {
                peak: 1e-3,
                floor: 0.0,
                warmup: 100,
                total: 3000,
                decay: DecaySchedule::Linear,
            },
            betas: [0.9, 0.99],
            weight_decay: 1e-4,
            log_every: 50,
        }
    }
}

impl GptTrainOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        GptTrainOptions {
            iterations,
            lr: LrSchedule {
                total: iterations,
                ..Self::default().lr
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GptTrainRecord {
    pub iteration: usize,
    pub code_loss: f64,
    pub duration_loss: f64,
    pub total: f64,
    pub lr: f64,
}

/// Teacher-forced loss over one batch: mean code NLL (End included) plus
/// mean squared duration error (End position excluded).
fn batch_loss<S: Scalar>(
    model: &CodeGpt<S>,
    batch: &[&GptExample],
    iteration: usize,
) -> Result<(GptTrainRecord, Vec<Tensor<S>>)> {
    let tape = Tape::new();
    let vars = model.lift(&tape);
    let inv_b = S::from_f64(1.0 / batch.len() as f64);
    let mut code_sum: Option<Var<S>> = None;
    let mut dur_sum: Option<Var<S>> = None;

    for ex in batch {
        model.check_prefix(&ex.tokens, &ex.codes, &ex.durations)?;
        if ex.codes.is_empty() {
            return Err(Error::EmptyInput("example with no codes"));
        }
        let h = vars.code_hidden(&tape, &model.config, &ex.tokens, &ex.codes, &ex.durations)?;
        let logits = vars.code_logits_all(&h, ex.tokens.len())?;
        let mut targets = ex.codes.clone();
        targets.push(model.config.end_token());
        let nll = logits.softmax_cross_entropy(&targets)?;

        let pred = vars.duration_forward(&tape, &model.config, &h, ex.tokens.len(), &ex.codes)?;
        let truth = tape.constant(Tensor::new(
            vec![ex.codes.len(), 1],
            ex.durations
                .iter()
                .map(|&d| S::from_f64(d as f64))
                .collect(),
        )?);
        let diff = pred.sub(&truth)?;
        let mse = diff.mul(&diff)?.mean_all();

        code_sum = Some(match code_sum {
            Some(a) => a.add(&nll)?,
            None => nll,
        });
        dur_sum = Some(match dur_sum {
            Some(a) => a.add(&mse)?,
            None => mse,
        });
    }

    let code_mean = code_sum.unwrap().scale(inv_b);
    let dur_mean = dur_sum.unwrap().scale(inv_b);
    let loss = code_mean.add(&dur_mean)?;
    let total = loss.item().to_f64().unwrap_or(f64::NAN);
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: "loss is not finite".into(),
        });
    }
    loss.backward()?;
    let grads: Vec<Tensor<S>> = vars.vars().iter().map(Var::grad).collect();
    Ok((
        GptTrainRecord {
            iteration,
            code_loss: code_mean.item().to_f64().unwrap(),
            duration_loss: dur_mean.item().to_f64().unwrap(),
            total,
            lr: 0.0,
        },
        grads,
    ))
}

pub fn train<S: Scalar>(
    model: &mut CodeGpt<S>,
    data: &[GptExample],
    opts: &GptTrainOptions,
) -> Result<Vec<GptTrainRecord>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut optimizer: AdamW<S> = AdamW::new(&model.param_shapes(), opts.betas, opts.weight_decay);
    let mut log = Vec::new();
    for iteration in 0..opts.iterations {
        let batch: Vec<&GptExample> = (0..opts.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let (mut record, grads) = batch_loss(model, &batch, iteration)?;
        let lr = opts.lr.at(iteration);
        record.lr = lr;
        optimizer.step(&mut model.tensors_mut(), &grads, S::from_f64(lr));
        if iteration % opts.log_every == 0 || iteration + 1 == opts.iterations {
            log.push(record);
        }
    }
    Ok(log)
}

/// Loss of a batch without updating the model.
pub fn eval_loss<S: Scalar>(model: &CodeGpt<S>, batch: &[&GptExample]) -> Result<GptTrainRecord> {
    batch_loss(model, batch, 0).map(|(r, _)| r)
}
