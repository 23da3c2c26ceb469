//! Stage 1: dynamic vector-quantized autoencoder over frame sequences.
//!
//! Encoder: frame embedding + positions → bidirectional transformer →
//! per-frame information weights → cumsum segmentation → weighted
//! downsampling → latent projection → nearest-code quantization.
//! Decoder: length regulator → transformer → output projection.

pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{
    positional_encoding, LayerNormParams, LayerNormVars, Linear, LinearVars, TransformerStack,
    TransformerStackVars,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quantizer::{self, Codebook};
use crate::sampler::{self, InfoMlp, InfoMlpVars, InfoWeights, Segmentation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvqVaeConfig {
    /// Frame dimension d.
    pub input_dim: usize,
    /// Latent dimension d_h inside the transformers.
    pub hidden_dim: usize,
    /// Code dimension d_c.
    pub code_dim: usize,
    /// Codebook size K.
    pub num_codes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Commitment weight λ1.
    pub lambda_commit: f64,
    /// Budget weight λ2.
    pub lambda_budget: f64,
    /// Auxiliary-term weight λ3 (the term itself is a pluggable hook).
    pub lambda_aux: f64,
    /// Expected downsampling rate R in the budget hinge.
    pub expected_rate: f64,
    /// Information threshold O.
    pub threshold: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub smooth_l1_beta: f64,
}

impl Default for DvqVaeConfig {
    /// Desk-scale defaults, CPU-trainable.
    fn default() -> Self {
        DvqVaeConfig {
            input_dim: 8,
            hidden_dim: 64,
            code_dim: 64,
            num_codes: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 128,
            lambda_commit: 1.0,
            lambda_budget: 0.5,
            lambda_aux: 1.0,
            expected_rate: 4.0,
            threshold: 1.0,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            smooth_l1_beta: 1.0,
        }
    }
}

impl DvqVaeConfig {
    /// Full-scale preset (GPU-class sizing; selectable, not the default).
    pub fn full_scale() -> Self {
        DvqVaeConfig {
            hidden_dim: 512,
            code_dim: 512,
            num_codes: 1024,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            ff_dim: 2048,
            expected_rate: 12.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_dim,
            self.hidden_dim,
            self.code_dim,
            self.num_codes,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ff_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.lambda_commit < 0.0 || self.lambda_budget < 0.0 || self.lambda_aux < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.expected_rate <= 1.0 {
            return Err(Error::Config("expected_rate must exceed 1".into()));
        }
        if self.threshold <= 0.0 || self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("threshold and beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) && self.ema_decay != 0.0 {
            // decay of exactly 1.0 would freeze the codebook forever
            if self.ema_decay >= 1.0 {
                return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// What `encode` reports for one sequence.
#[derive(Clone, Debug)]
pub struct EncodeResult<S: Scalar> {
    pub code_indices: Vec<usize>,
    pub durations: Vec<usize>,
    pub info_weights: Vec<S>,
    /// Pre-quantization latents, `[M × d_c]`.
    pub latents: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DvqVae<S: Scalar> {
    pub config: DvqVaeConfig,
    pub input_proj: Linear<S>,
    pub input_ln: LayerNormParams<S>,
    pub encoder: TransformerStack<S>,
    pub info_mlp: InfoMlp<S>,
    pub latent_proj: Linear<S>,
    pub codebook: Codebook<S>,
    pub dec_input: Linear<S>,
    pub decoder: TransformerStack<S>,
    pub output_proj: Linear<S>,
}

pub struct DvqVaeVars<S: Scalar> {
    pub input_proj: LinearVars<S>,
    pub input_ln: LayerNormVars<S>,
    pub encoder: TransformerStackVars<S>,
    pub info_mlp: InfoMlpVars<S>,
    pub latent_proj: LinearVars<S>,
    pub dec_input: LinearVars<S>,
    pub decoder: TransformerStackVars<S>,
    pub output_proj: LinearVars<S>,
}

/// Encoder-side intermediates of one sequence.
pub struct EncoderOut<S: Scalar> {
    pub info: InfoWeights<S>,
    pub segmentation: Segmentation,
    /// Pre-quantization latents on the tape, `[M × d_c]`.
    pub latents: Var<S>,
    pub durations: Vec<usize>,
}

impl<S: Scalar> DvqVae<S> {
    pub fn init(config: DvqVaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let dh = config.hidden_dim;
        let dc = config.code_dim;
        let codes = crate::autodiff::nn::normal_init(rng, vec![config.num_codes, dc], 0.02);
        Ok(DvqVae {
            input_proj: Linear::init(rng, d, dh),
            input_ln: LayerNormParams::init(dh),
            encoder: TransformerStack::init(rng, config.encoder_layers, dh, config.heads, config.ff_dim)?,
            info_mlp: InfoMlp::init(rng, dh),
            latent_proj: Linear::init(rng, dh, dc),
            codebook: Codebook {
                ema_embed_sum: codes.clone(),
                codes,
                ema_cluster_size: vec![S::one(); config.num_codes],
                decay: S::from_f64(config.ema_decay),
                eps: S::from_f64(config.ema_eps),
            },
            dec_input: Linear::init(rng, dc, dh),
            decoder: TransformerStack::init(rng, config.decoder_layers, dh, config.heads, config.ff_dim)?,
            output_proj: Linear::init(rng, dh, d),
            config,
        })
    }

    pub fn lift(&self, tape: &Tape<S>) -> DvqVaeVars<S> {
        DvqVaeVars {
            input_proj: self.input_proj.lift(tape),
            input_ln: self.input_ln.lift(tape),
            encoder: self.encoder.lift(tape),
            info_mlp: self.info_mlp.lift(tape),
            latent_proj: self.latent_proj.lift(tape),
            dec_input: self.dec_input.lift(tape),
            decoder: self.decoder.lift(tape),
            output_proj: self.output_proj.lift(tape),
        }
    }

    /// Trainable parameters in fixed order (codebook excluded: EMA-owned).
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = self.input_proj.tensors();
        v.extend(self.input_ln.tensors());
        v.extend(self.encoder.tensors());
        v.extend(self.info_mlp.tensors());
        v.extend(self.latent_proj.tensors());
        v.extend(self.dec_input.tensors());
        v.extend(self.decoder.tensors());
        v.extend(self.output_proj.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.input_proj.tensors_mut();
        v.extend(self.input_ln.tensors_mut());
        v.extend(self.encoder.tensors_mut());
        v.extend(self.info_mlp.tensors_mut());
        v.extend(self.latent_proj.tensors_mut());
        v.extend(self.dec_input.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v.extend(self.output_proj.tensors_mut());
        v
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub(crate) fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.numel() == 0 || x.rows() == 0 {
            return Err(Error::EmptyInput("sequence has no frames"));
        }
        if x.cols() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "frame dim {} does not match model input_dim {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        if !x.is_finite() {
            return Err(Error::Contract("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Deterministic encode: sequence → (codes, durations, weights, latents).
    pub fn encode(&self, x: &Tensor<S>) -> Result<EncodeResult<S>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let vars = self.lift(&tape);
        let out = vars.encoder_pass(&tape, x, &self.config)?;
        let q = quantizer::quantize(&out.latents.value(), &self.codebook)?;
        Ok(EncodeResult {
            code_indices: q.indices,
            durations: out.durations,
            info_weights: out.info.values(),
            latents: out.latents.value(),
        })
    }

    /// Deterministic decode: (codes, durations) → `[sum(durations) × d]`.
    pub fn decode(&self, codes: &[usize], durations: &[usize]) -> Result<Tensor<S>> {
        if codes.is_empty() {
            return Err(Error::EmptyInput("no codes to decode"));
        }
        if codes.len() != durations.len() {
            return Err(Error::Dimension(format!(
                "{} codes vs {} durations",
                codes.len(),
                durations.len()
            )));
        }
        let k = self.codebook.num_codes();
        if let Some(&bad) = codes.iter().find(|&&c| c >= k) {
            return Err(Error::IndexOutOfRange {
                what: "code",
                index: bad,
                size: k,
            });
        }
        if let Some((pos, &d)) = durations.iter().enumerate().find(|(_, &d)| d == 0) {
            return Err(Error::Duration(d, pos));
        }
        let mut zq = Tensor::zeros(vec![codes.len(), self.codebook.code_dim()]);
        for (i, &c) in codes.iter().enumerate() {
            zq.row_mut(i).copy_from_slice(self.codebook.codes.row(c));
        }
        let tape = Tape::new();
        let vars = self.lift(&tape);
        let zq_var = tape.constant(zq);
        let x_re = vars.decoder_pass(&tape, &zq_var, durations)?;
        Ok(x_re.value())
    }
}

impl<S: Scalar> DvqVaeVars<S> {
    /// Lifted parameters, in the same order as [`DvqVae::tensors`].
    pub fn vars(&self) -> Vec<Var<S>> {
        let mut v = self.input_proj.vars();
        v.extend(self.input_ln.vars());
        v.extend(self.encoder.vars());
        v.extend(self.info_mlp.vars());
        v.extend(self.latent_proj.vars());
        v.extend(self.dec_input.vars());
        v.extend(self.decoder.vars());
        v.extend(self.output_proj.vars());
        v
    }

    /// Embedding + positions → transformer → weights → segmentation →
    /// weighted downsampling → latent projection.
    pub fn encoder_pass(
        &self,
        tape: &Tape<S>,
        x: &Tensor<S>,
        config: &DvqVaeConfig,
    ) -> Result<EncoderOut<S>> {
        let t_len = x.rows();
        let xv = tape.constant(x.clone());
        let embedded = self
            .input_ln
            .forward(&self.input_proj.forward(&xv)?)?
            .relu();
        let pe = tape.constant(positional_encoding(t_len, config.hidden_dim));
        let h = self.encoder.forward(&embedded.add(&pe)?, false, None)?;

        let info = sampler::info_weights(&h, &self.info_mlp, S::from_f64(config.threshold))?;
        let segmentation = info.segmentation();
        let (z_h, durations) = sampler::downsample(&h, &info, &segmentation)?;
        let latents = self.latent_proj.forward(&z_h)?;
        Ok(EncoderOut {
            info,
            segmentation,
            latents,
            durations,
        })
    }

    /// Length regulator → input projection + positions → transformer →
    /// output projection.
    pub fn decoder_pass(
        &self,
        tape: &Tape<S>,
        zq: &Var<S>,
        durations: &[usize],
    ) -> Result<Var<S>> {
        let expanded = zq.repeat_rows(durations)?;
        let embedded = self.dec_input.forward(&expanded)?;
        let pe = tape.constant(positional_encoding(expanded.rows(), embedded.cols()));
        let h = self.decoder.forward(&embedded.add(&pe)?, false, None)?;
        self.output_proj.forward(&h)
    }
}

/// Smooth-L1 on positions plus smooth-L1 on consecutive-frame velocity.
/// With a single frame the velocity term is skipped.
pub fn reconstruction_loss<S: Scalar>(x_re: &Var<S>, x: &Var<S>, beta: S) -> Result<Var<S>> {
    let positional = x_re.smooth_l1(x, beta)?;
    let t_len = x.rows();
    if t_len < 2 {
        return Ok(positional);
    }
    let vel_re = velocity_var(x_re)?;
    let vel_x = velocity_var(x)?;
    positional.add(&vel_re.smooth_l1(&vel_x, beta)?)
}

fn velocity_var<S: Scalar>(x: &Var<S>) -> Result<Var<S>> {
    let t_len = x.rows();
    let tail = x.slice_rows(1, t_len)?;
    let head = x.slice_rows(0, t_len - 1)?;
    tail.sub(&head)
}

/// Mean over rows of the squared Euclidean distance between two
/// `[M × d]` tensors, as a differentiable node of `a`.
pub fn mean_sq_distance<S: Scalar>(a: &Var<S>, b_const: &Tensor<S>) -> Result<Var<S>> {
    let tape = a.tape();
    let b = tape.constant(b_const.clone());
    let diff = a.sub(&b)?;
    let rows = S::from_f64(a.rows() as f64);
    Ok(diff.mul(&diff)?.sum_all().scale(S::one() / rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_config() -> DvqVaeConfig {
        DvqVaeConfig {
            input_dim: 3,
            hidden_dim: 8,
            code_dim: 8,
            num_codes: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 16,
            ..DvqVaeConfig::default()
        }
    }

    fn random_sequence(rng: &mut ChaCha20Rng, t: usize, d: usize) -> Tensor<f64> {
        crate::autodiff::nn::normal_init(rng, vec![t, d], 1.0)
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.expected_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lambda_budget = -0.1;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn encode_is_reproducible_and_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        let x = random_sequence(&mut rng, 12, 3);
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x).unwrap();
        assert_eq!(a.code_indices, b.code_indices);
        assert_eq!(a.durations, b.durations);
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.durations.iter().sum::<usize>(), 12);
        assert_eq!(a.code_indices.len(), a.durations.len());
        assert!(a.code_indices.iter().all(|&c| c < 6));
    }

    #[test]
    fn durations_sum_to_input_length_on_random_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        for _ in 0..100 {
            let t = 1 + (rng.gen::<u32>() % 30) as usize;
            let x = random_sequence(&mut rng, t, 3);
            let enc = model.encode(&x).unwrap();
            assert_eq!(enc.durations.iter().sum::<usize>(), t);
            assert!(enc.code_indices.len() <= t);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        let x = Tensor::<f64>::zeros(vec![0, 3]);
        assert!(matches!(model.encode(&x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn decode_length_equals_duration_sum_and_round_trip_length_holds() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        let x = random_sequence(&mut rng, 17, 3);
        let enc = model.encode(&x).unwrap();
        let dec = model.decode(&enc.code_indices, &enc.durations).unwrap();
        assert_eq!(dec.rows(), 17);
        assert_eq!(dec.cols(), 3);
        assert!(dec.is_finite());

        // determinism
        let dec2 = model.decode(&enc.code_indices, &enc.durations).unwrap();
        assert_eq!(dec, dec2);
    }

    #[test]
    fn decode_rejects_bad_codes_and_durations() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        assert!(matches!(
            model.decode(&[99], &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            model.decode(&[1, 2], &[3, 0]),
            Err(Error::Duration(0, 1))
        ));
    }

    #[test]
    fn reconstruction_loss_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap());
        // identical inputs → 0
        let same = reconstruction_loss(&x, &x, 1.0).unwrap();
        assert_eq!(same.item(), 0.0);

        // constant offset c: positional term 0.5 c²/β per element, velocity 0
        let c = 0.3;
        let shifted = x.add_scalar(c);
        let loss = reconstruction_loss(&shifted, &x, 1.0).unwrap();
        assert!((loss.item() - 0.5 * c * c).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_matches_hand_summed_terms() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let tape = Tape::new();
        let a_t = random_sequence(&mut rng, 5, 2);
        let b_t = random_sequence(&mut rng, 5, 2);
        let a = tape.constant(a_t.clone());
        let b = tape.constant(b_t.clone());
        let got = reconstruction_loss(&a, &b, 1.0).unwrap().item();

        let smooth = |x: &Tensor<f64>, y: &Tensor<f64>| -> f64 {
            let n = x.numel() as f64;
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| {
                    let d: f64 = p - q;
                    if d.abs() < 1.0 {
                        0.5 * d * d
                    } else {
                        d.abs() - 0.5
                    }
                })
                .sum::<f64>()
                / n
        };
        let expect = smooth(&a_t, &b_t) + smooth(&a_t.velocity(), &b_t.velocity());
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn single_frame_skips_velocity_term() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0f64, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0f64, 2.0]]).unwrap());
        let loss = reconstruction_loss(&a, &b, 1.0).unwrap();
        assert!((loss.item() - 0.25).abs() < 1e-12); // 0.5·1²/2 elements
    }

    #[test]
    fn straight_through_carries_decoder_gradient_to_encoder() {
        // end-to-end: loss on decoder output must move encoder params
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = DvqVae::<f64>::init(tiny_config(), &mut rng).unwrap();
        let x = random_sequence(&mut rng, 9, 3);

        let tape = Tape::new();
        let vars = model.lift(&tape);
        let out = vars.encoder_pass(&tape, &x, &model.config).unwrap();
        let q = quantizer::quantize(&out.latents.value(), &model.codebook).unwrap();
        let st = quantizer::straight_through(&out.latents, &q.quantized);
        let x_re = vars.decoder_pass(&tape, &st, &out.durations).unwrap();
        let xv = tape.constant(x.clone());
        let loss = reconstruction_loss(&x_re, &xv, 1.0).unwrap();
        loss.backward().unwrap();

        let w1_grad = vars.input_proj.weight.grad();
        assert!(
            w1_grad.data().iter().any(|&g| g != 0.0),
            "encoder input projection receives no gradient"
        );
    }
}
