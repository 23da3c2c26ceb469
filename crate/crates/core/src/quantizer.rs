//! Learnable codebook: nearest-code quantization with straight-through
//! gradients, EMA re-estimation, and dead-code restart.
//!
//! The codebook is not gradient-trained; `ema_update` re-estimates each
//! code as a smoothed cluster mean and `restart_dead_codes` recycles
//! codes whose EMA mass has collapsed. `quantize` is pure given a frozen
//! codebook; the two mutators must be called from the single trainer
//! thread that owns the codebook.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_EMA_EPS: f64 = 1e-5;
pub const DEFAULT_RESTART_THRESHOLD: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Codebook<S: Scalar> {
    /// `[K × d_c]` code vectors.
    pub codes: Tensor<S>,
    /// EMA of per-code assignment counts.
    pub ema_cluster_size: Vec<S>,
    /// EMA of per-code assigned-latent sums, `[K × d_c]`.
    pub ema_embed_sum: Tensor<S>,
    pub decay: S,
    pub eps: S,
}

/// Everything `quantize` reports about one batch of latents.
#[derive(Clone, Debug)]
pub struct QuantizationResult<S: Scalar> {
    pub indices: Vec<usize>,
    /// `quantized[i] == codes[indices[i]]`.
    pub quantized: Tensor<S>,
    /// Mean over rows of ‖z_i − ẑ_i‖²; gradient side lives in the model loss.
    pub embed_loss: S,
    /// Same value by symmetry of the norm; kept separate for reporting.
    pub commit_loss: S,
    /// Distinct codes used / K.
    pub utilization: f64,
}

impl<S: Scalar> Codebook<S> {
    pub fn num_codes(&self) -> usize {
        self.codes.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.cols()
    }

    /// Codebook seeded from training-batch latents, sampled with
    /// replacement so it works even when the batch holds fewer than K rows.
    pub fn init_from_latents(
        k: usize,
        latents: &Tensor<S>,
        decay: S,
        eps: S,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k >= 1 && latents.rows() >= 1);
        let d_c = latents.cols();
        let mut codes = Tensor::zeros(vec![k, d_c]);
        let mut sums = Tensor::zeros(vec![k, d_c]);
        for i in 0..k {
            let pick = rng.gen_range(0..latents.rows());
            codes.row_mut(i).copy_from_slice(latents.row(pick));
            sums.row_mut(i).copy_from_slice(latents.row(pick));
        }
        Codebook {
            codes,
            ema_cluster_size: vec![S::one(); k],
            ema_embed_sum: sums,
            decay,
            eps,
        }
    }
}

/// Nearest-code assignment for each row of `z` (`[N × d_c]`), ties broken
/// by lowest index.
pub fn quantize<S: Scalar>(z: &Tensor<S>, cb: &Codebook<S>) -> Result<QuantizationResult<S>> {
    if z.cols() != cb.code_dim() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: z.shape().to_vec(),
            rhs: cb.codes.shape().to_vec(),
        });
    }
    let n = z.rows();
    let k = cb.num_codes();
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Tensor::zeros(vec![n, z.cols()]);
    let mut err_acc = S::zero();
    let mut used = vec![false; k];
    for i in 0..n {
        let row = z.row(i);
        let mut best = 0usize;
        let mut best_d = S::infinity();
        for c in 0..k {
            let mut d = S::zero();
            for (&a, &b) in row.iter().zip(cb.codes.row(c)) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        indices.push(best);
        used[best] = true;
        quantized.row_mut(i).copy_from_slice(cb.codes.row(best));
        err_acc += best_d;
    }
    let mean_err = err_acc / S::from_f64(n as f64);
    let utilization = used.iter().filter(|&&u| u).count() as f64 / k as f64;
    Ok(QuantizationResult {
        indices,
        quantized,
        embed_loss: mean_err,
        commit_loss: mean_err,
        utilization,
    })
}

/// Straight-through estimator: forward value is `quantized`, backward
/// passes the incoming gradient to `z` unchanged (`z + sg(ẑ − z)`).
pub fn straight_through<S: Scalar>(z: &Var<S>, quantized: &Tensor<S>) -> Var<S> {
    assert_eq!(
        z.shape(),
        quantized.shape().to_vec(),
        "straight_through shapes must match"
    );
    z.tape().push(
        quantized.clone(),
        vec![z.idx],
        Some(Box::new(|args: &crate::autodiff::BackwardArgs<'_, S>| {
            vec![args.out_grad.clone()]
        })),
    )
}

/// EMA re-estimation of cluster sizes, embed sums, and codes from one
/// batch of assignments.
pub fn ema_update<S: Scalar>(cb: &mut Codebook<S>, z: &Tensor<S>, indices: &[usize]) {
    assert_eq!(z.rows(), indices.len());
    let k = cb.num_codes();
    let d_c = cb.code_dim();
    let lam = cb.decay;
    let one_m = S::one() - lam;

    let mut counts = vec![S::zero(); k];
    let mut sums = Tensor::zeros(vec![k, d_c]);
    for (i, &idx) in indices.iter().enumerate() {
        counts[idx] += S::one();
        for (acc, &v) in sums.row_mut(idx).iter_mut().zip(z.row(i)) {
            *acc += v;
        }
    }
    for (slot, cnt) in cb.ema_cluster_size.iter_mut().zip(&counts) {
        *slot = lam * *slot + one_m * *cnt;
    }
    for i in 0..k {
        for (slot, &s) in cb.ema_embed_sum.row_mut(i).iter_mut().zip(sums.row(i)) {
            *slot = lam * *slot + one_m * s;
        }
    }
    recompute_codes(cb);
}

/// codes[k] = ema_embed_sum[k] / max(ema_cluster_size[k], eps·normalizer),
/// where the normalizer is the mean EMA mass per code.
fn recompute_codes<S: Scalar>(cb: &mut Codebook<S>) {
    let k = cb.num_codes();
    let total = cb
        .ema_cluster_size
        .iter()
        .fold(S::zero(), |a, &v| a + v);
    if total == S::zero() {
        return;
    }
    let normalizer = total / S::from_f64(k as f64);
    for i in 0..k {
        let denom = cb.ema_cluster_size[i].max(cb.eps * normalizer);
        for (c, &s) in cb.codes.row_mut(i).iter_mut().zip(cb.ema_embed_sum.row(i)) {
            *c = s / denom;
        }
    }
}

/// Reseed every code whose EMA mass fell below `threshold` from a
/// uniformly sampled row of `batch_z`; its EMA stats reset to
/// `(1, chosen vector)`. Returns the number of restarts.
pub fn restart_dead_codes<S: Scalar>(
    cb: &mut Codebook<S>,
    batch_z: &Tensor<S>,
    threshold: S,
    rng: &mut impl Rng,
) -> usize {
    assert!(batch_z.rows() >= 1, "restart needs a nonempty batch");
    let mut restarts = 0;
    for i in 0..cb.num_codes() {
        if cb.ema_cluster_size[i] < threshold {
            let pick = rng.gen_range(0..batch_z.rows());
            cb.codes.row_mut(i).copy_from_slice(batch_z.row(pick));
            cb.ema_embed_sum
                .row_mut(i)
                .copy_from_slice(batch_z.row(pick));
            cb.ema_cluster_size[i] = S::one();
            restarts += 1;
        }
    }
    restarts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cb_from_rows(rows: &[Vec<f64>]) -> Codebook<f64> {
        let codes = Tensor::from_rows(rows).unwrap();
        let k = codes.rows();
        Codebook {
            ema_embed_sum: codes.clone(),
            ema_cluster_size: vec![1.0; k],
            codes,
            decay: 0.99,
            eps: 1e-5,
        }
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let cb = cb_from_rows(&[
            vec![1., 0.],
            vec![0., 1.],
            vec![2., 2.],
            vec![-3., 0.5],
        ]);
        let z = Tensor::from_rows(&[vec![-3., 0.5]]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.embed_loss, 0.0);
        assert_eq!(q.commit_loss, 0.0);
        assert_eq!(q.quantized.row(0), cb.codes.row(3));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // codes 1 and 4 are equidistant from the query
        let cb = cb_from_rows(&[
            vec![9., 9.],
            vec![1., 0.],
            vec![5., -5.],
            vec![7., 7.],
            vec![-1., 0.],
        ]);
        let z = Tensor::from_rows(&[vec![0., 0.]]).unwrap();
        assert_eq!(quantize(&z, &cb).unwrap().indices, vec![1]);
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = 16;
            let d = 4;
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let cb = cb_from_rows(&rows);
            let z: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let zt = Tensor::from_rows(&z).unwrap();
            let got = quantize(&zt, &cb).unwrap().indices;

            // independent exhaustive scan
            for (i, zrow) in z.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, crow) in rows.iter().enumerate() {
                    let d2: f64 = zrow
                        .iter()
                        .zip(crow)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2 < best_d {
                        best_d = d2;
                        best = c;
                    }
                }
                assert_eq!(got[i], best);
            }
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let cb = cb_from_rows(&rows);
        let z = Tensor::from_rows(
            &(0..5)
                .map(|_| (0..3).map(|_| rng.gen::<f64>() * 3.0).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let first = quantize(&z, &cb).unwrap();
        let second = quantize(&first.quantized, &cb).unwrap();
        assert_eq!(first.indices, second.indices);
        assert_eq!(second.embed_loss, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cb = cb_from_rows(&[vec![0., 0.]]);
        let z = Tensor::from_rows(&[vec![1., 2., 3.]]).unwrap();
        assert!(matches!(
            quantize(&z, &cb),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn straight_through_passes_gradient_and_value() {
        let tape = crate::autodiff::Tape::new();
        let z = tape.var(Tensor::from_rows(&[vec![1.0f64, 2.0]]).unwrap());
        let q = Tensor::from_rows(&[vec![0.9, 2.1]]).unwrap();
        let st = straight_through(&z, &q);
        assert_eq!(st.value(), q);
        st.sum_all().backward().unwrap();
        assert!(z.grad().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn unassigned_code_is_stable_under_ema() {
        let mut cb = cb_from_rows(&[vec![1., 1.], vec![5., 5.]]);
        let before = cb.codes.row(1).to_vec();
        let z = Tensor::from_rows(&[vec![1.2, 0.8]]).unwrap();
        ema_update(&mut cb, &z, &[0]);
        // code 1 got no assignments: sum and count decay together, so the
        // ratio (and hence the code) moves only by the smoothing clamp
        for (a, b) in cb.codes.row(1).iter().zip(&before) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_free_update_is_one_kmeans_step() {
        let mut cb = cb_from_rows(&[vec![10., -10.]]);
        cb.decay = 0.0;
        let z = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.], vec![-1., 0.]]).unwrap();
        ema_update(&mut cb, &z, &[0, 0, 0]);
        let mean = [1.0, 2.0];
        for (c, m) in cb.codes.row(0).iter().zip(mean) {
            assert!((c - m).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_ema_matches_hand_recursion() {
        // three latents: v1, v2 hit code 0 in step one; v3 hits code 1 in
        // step two. Closed-form recursion written out by hand below.
        let v1 = [0.5, 1.0];
        let v2 = [1.5, 2.0];
        let v3 = [-1.0, 0.5];
        let lam = 0.99;
        let eps = 1e-5;

        let mut cb = cb_from_rows(&[vec![0., 0.], vec![1., 1.]]);
        cb.decay = lam;
        cb.eps = eps;
        let step1 = Tensor::from_rows(&[v1.to_vec(), v2.to_vec()]).unwrap();
        ema_update(&mut cb, &step1, &[0, 0]);
        let step2 = Tensor::from_rows(&[v3.to_vec()]).unwrap();
        ema_update(&mut cb, &step2, &[1]);

        // counts: start [1,1] (cb_from_rows seeds mass 1)
        let n0_1 = lam * 1.0 + (1.0 - lam) * 2.0;
        let n1_1 = lam * 1.0;
        let n0_2 = lam * n0_1;
        let n1_2 = lam * n1_1 + (1.0 - lam) * 1.0;
        // sums: start equal to initial codes
        let s0_1: Vec<f64> = (0..2)
            .map(|j| lam * 0.0 + (1.0 - lam) * (v1[j] + v2[j]))
            .collect();
        let s1_1 = [lam * 1.0, lam * 1.0];
        let s0_2: Vec<f64> = s0_1.iter().map(|s| lam * s).collect();
        let s1_2: Vec<f64> = (0..2)
            .map(|j| lam * s1_1[j] + (1.0 - lam) * v3[j])
            .collect();
        let normalizer = (n0_2 + n1_2) / 2.0;
        let c0: Vec<f64> = s0_2.iter().map(|s| s / n0_2.max(eps * normalizer)).collect();
        let c1: Vec<f64> = s1_2.iter().map(|s| s / n1_2.max(eps * normalizer)).collect();

        assert!((cb.ema_cluster_size[0] - n0_2).abs() < 1e-12);
        assert!((cb.ema_cluster_size[1] - n1_2).abs() < 1e-12);
        for j in 0..2 {
            assert!((cb.codes.row(0)[j] - c0[j]).abs() < 1e-12);
            assert!((cb.codes.row(1)[j] - c1[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_invariant_holds_after_random_updates() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut cb = cb_from_rows(&[vec![0., 0.], vec![1., 1.], vec![2., 2.]]);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let z = Tensor::from_rows(&rows).unwrap();
            ema_update(&mut cb, &z, &idx);

            let total: f64 = cb.ema_cluster_size.iter().sum();
            let normalizer = total / 3.0;
            for k in 0..3 {
                let denom = cb.ema_cluster_size[k].max(cb.eps * normalizer);
                for j in 0..2 {
                    let expect = cb.ema_embed_sum.row(k)[j] / denom;
                    assert!((cb.codes.row(k)[j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn restart_skips_live_codes_and_reseeds_dead_ones() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut cb = cb_from_rows(&[vec![0., 0.], vec![9., 9.]]);
        let batch = Tensor::from_rows(&[vec![3., 4.]]).unwrap();
        assert_eq!(restart_dead_codes(&mut cb, &batch, 0.5, &mut rng), 0);
        assert_eq!(cb.codes.row(1), &[9., 9.]);

        cb.ema_cluster_size[1] = 0.1;
        assert_eq!(restart_dead_codes(&mut cb, &batch, 0.5, &mut rng), 1);
        assert_eq!(cb.codes.row(1), &[3., 4.]);
        assert_eq!(cb.ema_cluster_size[1], 1.0);
        assert_eq!(cb.ema_embed_sum.row(1), &[3., 4.]);
    }

    #[test]
    fn quantization_error_never_beats_any_code() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let cb = cb_from_rows(&rows);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0).collect();
            let zt = Tensor::from_rows(&[z.clone()]).unwrap();
            let q = quantize(&zt, &cb).unwrap();
            let chosen: f64 = z
                .iter()
                .zip(q.quantized.row(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            for crow in &rows {
                let other: f64 = z.iter().zip(crow).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(chosen <= other + 1e-15);
            }
        }
    }
}
