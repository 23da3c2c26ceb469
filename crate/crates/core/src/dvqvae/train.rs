//! Stage-1 training: AdamW on the autoencoder parameters, EMA + restart
//! on the codebook. Single trainer thread owns both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dvqvae::{mean_sq_distance, reconstruction_loss, DvqVae};
use crate::error::{Error, Result};
use crate::optim::{AdamW, DecaySchedule, LrSchedule};
use crate::quantizer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub restart_enabled: bool,
    pub restart_threshold: f64,
    /// Emit a record every this many iterations (and always on the last).
    pub log_every: usize,
}

impl TrainOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        TrainOptions {
            iterations,
            lr: LrSchedule {
                total: iterations,
                ..Self::default().lr
            },
            ..Self::default()
        }
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 2000,
            batch_size: 4,
            seed: 0,
            lr: LrSchedule {
                peak: 1e-3,
                floor: 1e-4,
                warmup: 100,
                total: 2000,
                decay: DecaySchedule::Cosine,
            },
            betas: [0.9, 0.99],
            weight_decay: 1e-4,
            restart_enabled: true,
            restart_threshold: 1.0,
            log_every: 50,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub recon: f64,
    pub embed: f64,
    pub commit: f64,
    pub budget: f64,
    pub aux: f64,
    pub total: f64,
    /// Batch frames / batch codes.
    pub mean_rate: f64,
    /// Distinct codes used across the batch / K.
    pub utilization: f64,
    /// Mean per-sequence sum of information weights.
    pub info_sum: f64,
    pub lr: f64,
    pub restarts: usize,
}

/// Pluggable auxiliary loss: receives the tape, the reconstructed
/// sequence, and the dataset index of the item. The default (None)
/// contributes zero.
pub type AuxLossFn<S> = dyn Fn(&Tape<S>, &Var<S>, usize) -> Result<Var<S>>;

struct IterationOut<S: Scalar> {
    record: TrainRecord,
    grads: Vec<Tensor<S>>,
    latents: Tensor<S>,
    indices: Vec<usize>,
}

/// Train in place; the caller owns checkpointing. Aborts with a
/// divergence error if the loss stops being finite.
pub fn train<S: Scalar>(
    model: &mut DvqVae<S>,
    data: &[Tensor<S>],
    opts: &TrainOptions,
    aux: Option<&AuxLossFn<S>>,
) -> Result<Vec<TrainRecord>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty"));
    }
    for x in data {
        model.check_input(x)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut optimizer: AdamW<S> = AdamW::new(&model.param_shapes(), opts.betas, opts.weight_decay);

    // Codebook seeded from the latents of the first batch.
    {
        let mut latents: Vec<Vec<S>> = Vec::new();
        for _ in 0..opts.batch_size.min(data.len()) {
            let x = &data[rng.gen_range(0..data.len())];
            let enc = model.encode(x)?;
            for i in 0..enc.latents.rows() {
                latents.push(enc.latents.row(i).to_vec());
            }
        }
        let stacked = Tensor::from_rows(&latents)?;
        model.codebook = quantizer::Codebook::init_from_latents(
            model.config.num_codes,
            &stacked,
            S::from_f64(model.config.ema_decay),
            S::from_f64(model.config.ema_eps),
            &mut rng,
        );
    }

    let mut log = Vec::new();
    for iteration in 0..opts.iterations {
        let batch: Vec<usize> = (0..opts.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let out = run_iteration(model, data, &batch, iteration, opts, aux)?;

        let lr = S::from_f64(opts.lr.at(iteration));
        optimizer.step(&mut model.tensors_mut(), &out.grads, lr);

        quantizer::ema_update(&mut model.codebook, &out.latents, &out.indices);
        let restarts = if opts.restart_enabled {
            quantizer::restart_dead_codes(
                &mut model.codebook,
                &out.latents,
                S::from_f64(opts.restart_threshold),
                &mut rng,
            )
        } else {
            0
        };

        if iteration % opts.log_every == 0 || iteration + 1 == opts.iterations {
            log.push(TrainRecord {
                restarts,
                ..out.record
            });
        }
    }
    Ok(log)
}

/// Forward + backward over one batch. The model is only read here; the
/// optimizer applies the returned gradients afterwards.
fn run_iteration<S: Scalar>(
    model: &DvqVae<S>,
    data: &[Tensor<S>],
    batch: &[usize],
    iteration: usize,
    opts: &TrainOptions,
    aux: Option<&AuxLossFn<S>>,
) -> Result<IterationOut<S>> {
    let cfg = &model.config;
    let tape = Tape::new();
    let vars = model.lift(&tape);
    let inv_b = S::from_f64(1.0 / batch.len() as f64);

    let mut recon_sum: Option<Var<S>> = None;
    let mut embed_sum: Option<Var<S>> = None;
    let mut budget_sum: Option<Var<S>> = None;
    let mut aux_sum: Option<Var<S>> = None;
    let mut commit_acc = 0.0f64;
    let mut frames = 0usize;
    let mut codes_emitted = 0usize;
    let mut used = vec![false; cfg.num_codes];
    let mut info_sum_acc = 0.0f64;
    let mut all_latents: Vec<Vec<S>> = Vec::new();
    let mut all_indices: Vec<usize> = Vec::new();

    for &item in batch {
        let x = &data[item];
        let out = vars.encoder_pass(&tape, x, cfg)?;
        let q = quantizer::quantize(&out.latents.value(), &model.codebook)?;
        let st = quantizer::straight_through(&out.latents, &q.quantized);
        let x_re = vars.decoder_pass(&tape, &st, &out.durations)?;

        let xv = tape.constant(x.clone());
        let recon = reconstruction_loss(&x_re, &xv, S::from_f64(cfg.smooth_l1_beta))?;
        let embed = mean_sq_distance(&out.latents, &q.quantized)?;
        let budget =
            crate::sampler::budget_loss(&out.info, x.rows(), S::from_f64(cfg.expected_rate));
        commit_acc += q.commit_loss.to_f64s();

        recon_sum = accumulate(recon_sum, recon)?;
        embed_sum = accumulate(embed_sum, embed)?;
        budget_sum = accumulate(budget_sum, budget)?;
        if let Some(f) = aux {
            let a = f(&tape, &x_re, item)?;
            aux_sum = accumulate(aux_sum, a)?;
        }

        frames += x.rows();
        codes_emitted += q.indices.len();
        for &i in &q.indices {
            used[i] = true;
        }
        info_sum_acc += out.info.sum().to_f64s();
        let latents = out.latents.value();
        for i in 0..latents.rows() {
            all_latents.push(latents.row(i).to_vec());
        }
        all_indices.extend(q.indices);
    }

    let recon_mean = recon_sum.unwrap().scale(inv_b);
    let embed_mean = embed_sum.unwrap().scale(inv_b);
    let budget_mean = budget_sum.unwrap().scale(inv_b);
    let commit_mean = commit_acc / batch.len() as f64;

    // L = L_re + L_embed + λ1·L_commit + λ2·L_budget + λ3·L_aux.
    // The commitment term carries no gradient: its only free side is the
    // codebook, which is EMA-owned, so it enters the total as a constant.
    let mut loss = recon_mean.add(&embed_mean)?;
    let commit_const = tape.constant(Tensor::scalar(S::from_f64(cfg.lambda_commit * commit_mean)));
    loss = loss.add(&commit_const)?;
    loss = loss.add(&budget_mean.scale(S::from_f64(cfg.lambda_budget)))?;
    let aux_value = match aux_sum {
        Some(a) => {
            let mean = a.scale(inv_b);
            let v = mean.item().to_f64s();
            loss = loss.add(&mean.scale(S::from_f64(cfg.lambda_aux)))?;
            v
        }
        None => 0.0,
    };

    let total = loss.item().to_f64s();
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!(
                "loss is not finite (recon {}, embed {}, budget {})",
                recon_mean.item(),
                embed_mean.item(),
                budget_mean.item()
            ),
        });
    }

    loss.backward()?;
    let grads: Vec<Tensor<S>> = vars.vars().iter().map(Var::grad).collect();

    let record = TrainRecord {
        iteration,
        recon: recon_mean.item().to_f64s(),
        embed: embed_mean.item().to_f64s(),
        commit: commit_mean,
        budget: budget_mean.item().to_f64s(),
        aux: aux_value,
        total,
        mean_rate: frames as f64 / codes_emitted.max(1) as f64,
        utilization: used.iter().filter(|&&u| u).count() as f64 / cfg.num_codes as f64,
        info_sum: info_sum_acc / batch.len() as f64,
        lr: opts.lr.at(iteration),
        restarts: 0,
    };

    Ok(IterationOut {
        record,
        grads,
        latents: Tensor::from_rows(&all_latents)?,
        indices: all_indices,
    })
}

fn accumulate<S: Scalar>(acc: Option<Var<S>>, v: Var<S>) -> Result<Option<Var<S>>> {
    Ok(Some(match acc {
        Some(a) => a.add(&v)?,
        None => v,
    }))
}

/// Mean reconstruction loss of `model` over `data` (forward only).
pub fn eval_reconstruction<S: Scalar>(model: &DvqVae<S>, data: &[Tensor<S>]) -> Result<f64> {
    let beta = S::from_f64(model.config.smooth_l1_beta);
    let mut acc = 0.0;
    for x in data {
        let enc = model.encode(x)?;
        let dec = model.decode(&enc.code_indices, &enc.durations)?;
        let tape = Tape::new();
        let a = tape.constant(dec);
        let b = tape.constant(x.clone());
        acc += reconstruction_loss(&a, &b, beta)?.item().to_f64s();
    }
    Ok(acc / data.len() as f64)
}

/// Total frames / total emitted codes over `data`.
pub fn mean_downsampling_rate<S: Scalar>(model: &DvqVae<S>, data: &[Tensor<S>]) -> Result<f64> {
    let mut frames = 0usize;
    let mut codes = 0usize;
    for x in data {
        let enc = model.encode(x)?;
        frames += x.rows();
        codes += enc.code_indices.len();
    }
    Ok(frames as f64 / codes.max(1) as f64)
}

/// Distinct codes used over `data` / K.
pub fn eval_utilization<S: Scalar>(model: &DvqVae<S>, data: &[Tensor<S>]) -> Result<f64> {
    let mut used = vec![false; model.config.num_codes];
    for x in data {
        for c in model.encode(x)?.code_indices {
            used[c] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / model.config.num_codes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_model(seed: u64) -> DvqVae<f64> {
        let config = crate::dvqvae::DvqVaeConfig {
            input_dim: 3,
            hidden_dim: 8,
            code_dim: 8,
            num_codes: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 16,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DvqVae::init(config, &mut rng).unwrap()
    }

    fn tiny_data(seed: u64, n: usize) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = 4 + (rng.gen::<u32>() % 10) as usize;
                crate::autodiff::nn::normal_init(&mut rng, vec![t, 3], 0.8)
            })
            .collect()
    }

    #[test]
    fn every_parameter_gets_gradient_at_init() {
        let model = tiny_model(11);
        let data = tiny_data(12, 4);
        let opts = TrainOptions {
            iterations: 1,
            batch_size: 4,
            ..Default::default()
        };
        let out = run_iteration(&model, &data, &[0, 1, 2, 3], 0, &opts, None).unwrap();
        for (g, t) in out.grads.iter().zip(model.tensors()) {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "dead parameter of shape {:?}",
                t.shape()
            );
        }
    }

    #[test]
    fn one_iteration_trains_and_logs() {
        let mut model = tiny_model(1);
        let data = tiny_data(2, 6);
        let before = model.tensors()[0].clone();
        let opts = TrainOptions {
            iterations: 1,
            batch_size: 2,
            log_every: 1,
            ..Default::default()
        };
        let log = train(&mut model, &data, &opts, None).unwrap();
        assert_eq!(log.len(), 1);
        assert!(log[0].total.is_finite());
        assert!(log[0].recon >= 0.0 && log[0].embed >= 0.0 && log[0].budget >= 0.0);
        assert_ne!(model.tensors()[0].data(), before.data());
    }

    #[test]
    fn loss_terms_match_independent_recomputation() {
        // λ2 = λ3 = 0 and quantized == latents ⇒ total == recon + 0 + 0
        let mut model = tiny_model(21);
        model.config.lambda_budget = 0.0;
        let data = tiny_data(22, 2);

        // force exact quantization by planting the latents as codes
        let enc = model.encode(&data[0]).unwrap();
        for i in 0..enc.latents.rows().min(model.config.num_codes) {
            model
                .codebook
                .codes
                .row_mut(i)
                .copy_from_slice(enc.latents.row(i));
        }
        let opts = TrainOptions {
            iterations: 1,
            batch_size: 1,
            ..Default::default()
        };
        let out = run_iteration(&model, &data, &[0], 0, &opts, None).unwrap();
        let r = &out.record;
        assert!(r.embed < 1e-20, "embed {}", r.embed);
        assert!((r.total - (r.recon + r.embed + r.commit + 0.0)).abs() < 1e-12);

        // independent recomputation of the reconstruction term
        let enc2 = model.encode(&data[0]).unwrap();
        let dec = model.decode(&enc2.code_indices, &enc2.durations).unwrap();
        let tape = Tape::new();
        let a = tape.constant(dec);
        let b = tape.constant(data[0].clone());
        let recon = reconstruction_loss(&a, &b, 1.0).unwrap().item();
        assert!((recon - r.recon).abs() < 1e-9);
    }

    #[test]
    fn aux_hook_contributes_to_total() {
        let model = tiny_model(31);
        let data = tiny_data(32, 2);
        let opts = TrainOptions {
            iterations: 1,
            batch_size: 2,
            ..Default::default()
        };
        let aux: Box<AuxLossFn<f64>> =
            Box::new(|tape, _x_re, _item| Ok(tape.constant(Tensor::scalar(0.25))));
        let with = run_iteration(&model, &data, &[0, 1], 0, &opts, Some(aux.as_ref())).unwrap();
        let without = run_iteration(&model, &data, &[0, 1], 0, &opts, None).unwrap();
        assert!((with.record.aux - 0.25).abs() < 1e-12);
        let lambda = model.config.lambda_aux;
        assert!((with.record.total - without.record.total - lambda * 0.25).abs() < 1e-9);
    }

    #[test]
    fn poisoned_weights_abort_with_divergence() {
        let mut model = tiny_model(41);
        let data = tiny_data(42, 2);
        // poison the decoder output bias: it reaches the loss directly
        model
            .tensors_mut()
            .last_mut()
            .unwrap()
            .data_mut()[0] = f64::NAN;
        let opts = TrainOptions {
            iterations: 1,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut model, &data, &opts, None),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let run = || {
            let mut model = tiny_model(5);
            let data = tiny_data(6, 5);
            let opts = TrainOptions {
                iterations: 5,
                batch_size: 2,
                log_every: 1,
                ..Default::default()
            };
            let log = train(&mut model, &data, &opts, None).unwrap();
            let bits: Vec<u64> = model.tensors()[0]
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            (log.last().unwrap().total.to_bits(), bits)
        };
        assert_eq!(run(), run());
    }
}
