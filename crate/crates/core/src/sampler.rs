//! Information-weighted adaptive downsampling and its inverse.
//!
//! A per-frame information weight in (0,1) is accumulated left to right;
//! every time the running sum crosses a multiple of the threshold `O` a
//! new segment starts. Each segment is collapsed to one latent by an
//! I-weighted sum, and the length regulator re-expands codes by their
//! integer durations.
//!
//! Segmentation itself (floor of a cumulative sum) is not differentiable;
//! gradients reach the weights only through the multiplicative path in
//! the weighted sum and through the budget hinge. The segment assignment
//! is held fixed in backward.

use crate::autodiff::nn::Linear;
use crate::autodiff::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Differentiable per-frame weights plus the segmentation threshold.
pub struct InfoWeights<S: Scalar> {
    /// `[T × 1]`, each value in (0,1) (sigmoid output).
    pub weights: Var<S>,
    pub threshold: S,
}

impl<S: Scalar> InfoWeights<S> {
    pub fn values(&self) -> Vec<S> {
        self.weights.with_value(|t| t.data().to_vec())
    }

    pub fn sum(&self) -> S {
        self.weights.with_value(Tensor::sum)
    }

    pub fn segmentation(&self) -> Segmentation {
        Segmentation::from_weights(&self.values(), self.threshold)
    }
}

/// Residual MLP producing the information weight of each frame:
/// `sigmoid(W3 · (relu(W2 h + B2) + h) + B3)`.
#[derive(Clone, Debug)]
pub struct InfoMlp<S: Scalar> {
    pub hidden: Linear<S>, // d_h → d_h
    pub out: Linear<S>,    // d_h → 1
}

pub struct InfoMlpVars<S: Scalar> {
    pub hidden: crate::autodiff::nn::LinearVars<S>,
    pub out: crate::autodiff::nn::LinearVars<S>,
}

impl<S: Scalar> InfoMlp<S> {
    pub fn init(rng: &mut impl rand::Rng, d_h: usize) -> Self {
        InfoMlp {
            hidden: Linear::init(rng, d_h, d_h),
            out: Linear::init(rng, d_h, 1),
        }
    }

    pub fn lift(&self, tape: &Tape<S>) -> InfoMlpVars<S> {
        InfoMlpVars {
            hidden: self.hidden.lift(tape),
            out: self.out.lift(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = self.hidden.tensors();
        v.extend(self.out.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }
}

impl<S: Scalar> InfoMlpVars<S> {
    pub fn vars(&self) -> Vec<Var<S>> {
        let mut v = self.hidden.vars();
        v.extend(self.out.vars());
        v
    }
}

/// Per-frame information weights from latents `h` (`[T × d_h]`).
pub fn info_weights<S: Scalar>(
    h: &Var<S>,
    mlp: &InfoMlpVars<S>,
    threshold: S,
) -> Result<InfoWeights<S>> {
    let inner = mlp.hidden.forward(h)?.relu().add(h)?;
    let weights = mlp.out.forward(&inner)?.sigmoid();
    Ok(InfoWeights { weights, threshold })
}

/// Raw segment markers: `floor(cumsum(I)_t / O)` per frame.
pub fn segment<S: Scalar>(weights: &[S], threshold: S) -> Vec<usize> {
    assert!(threshold > S::zero(), "threshold must be positive");
    let mut acc = S::zero();
    let mut out = Vec::with_capacity(weights.len());
    for &w in weights {
        acc += w;
        out.push((acc / threshold).floor().to_usize().unwrap_or(0));
    }
    out
}

/// Compacted segmentation: dense 0-based ids plus per-segment durations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    /// Non-decreasing, starts at 0, consecutive values differ by 0 or 1.
    pub ids: Vec<usize>,
    /// Frame count per segment; sums to T.
    pub durations: Vec<usize>,
}

impl Segmentation {
    pub fn from_weights<S: Scalar>(weights: &[S], threshold: S) -> Self {
        let raw = segment(weights, threshold);
        Self::from_raw(&raw)
    }

    /// Compact raw markers to dense ids (empty raw ids are dropped).
    pub fn from_raw(raw: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(raw.len());
        let mut durations = Vec::new();
        let mut last_raw = None;
        for &r in raw {
            match last_raw {
                Some(prev) if prev == r => {
                    *durations.last_mut().unwrap() += 1;
                }
                _ => {
                    durations.push(1);
                    last_raw = Some(r);
                }
            }
            ids.push(durations.len() - 1);
        }
        debug_assert_eq!(durations.iter().sum::<usize>(), raw.len());
        Segmentation { ids, durations }
    }

    pub fn num_segments(&self) -> usize {
        self.durations.len()
    }

    pub fn num_frames(&self) -> usize {
        self.ids.len()
    }
}

/// Weighted downsampling: `Z_t = Σ_j H_j · I_j · [S_j = t]`, with the
/// per-segment frame counts returned as durations. Gradients flow to both
/// `h` and the weights; the assignment is constant in backward.
pub fn downsample<S: Scalar>(
    h: &Var<S>,
    info: &InfoWeights<S>,
    seg: &Segmentation,
) -> Result<(Var<S>, Vec<usize>)> {
    let t_len = h.rows();
    if seg.num_frames() != t_len || info.weights.rows() != t_len {
        return Err(Error::Dimension(format!(
            "downsample: {} frames, {} segment ids, {} weights",
            t_len,
            seg.num_frames(),
            info.weights.rows()
        )));
    }
    let d_h = h.cols();
    let m = seg.num_segments();
    let ids = seg.ids.clone();
    let value = h.with_value(|hv| {
        info.weights.with_value(|iv| {
            let mut z = Tensor::zeros(vec![m, d_h]);
            for (j, &s) in ids.iter().enumerate() {
                let w = iv.data()[j];
                for (acc, &x) in z.row_mut(s).iter_mut().zip(hv.row(j)) {
                    *acc += x * w;
                }
            }
            z
        })
    });
    let ids_b = seg.ids.clone();
    let tape = h.tape();
    let z = tape.push(
        value,
        vec![h.idx, info.weights.idx],
        Some(Box::new(move |args: &BackwardArgs<'_, S>| {
            let hv = args.parents[0];
            let iv = args.parents[1];
            let g = args.out_grad;
            let mut dh = Tensor::zeros(hv.shape().to_vec());
            let mut di = Tensor::zeros(iv.shape().to_vec());
            for (j, &s) in ids_b.iter().enumerate() {
                let w = iv.data()[j];
                let grow = g.row(s);
                let mut dot = S::zero();
                for ((o, &gv), &x) in dh.row_mut(j).iter_mut().zip(grow).zip(hv.row(j)) {
                    *o = gv * w;
                    dot += gv * x;
                }
                di.data_mut()[j] = dot;
            }
            vec![dh, di]
        })),
    );
    Ok((z, seg.durations.clone()))
}

/// Expand each row of `zhat` by its duration, in order.
pub fn length_regulate<S: Scalar>(zhat: &Tensor<S>, durations: &[usize]) -> Result<Tensor<S>> {
    if durations.len() != zhat.rows() {
        return Err(Error::Dimension(format!(
            "{} durations for {} rows",
            durations.len(),
            zhat.rows()
        )));
    }
    if let Some((pos, &d)) = durations.iter().enumerate().find(|(_, &d)| d == 0) {
        return Err(Error::Duration(d, pos));
    }
    let total: usize = durations.iter().sum();
    let c = zhat.cols();
    let mut data = Vec::with_capacity(total * c);
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            data.extend_from_slice(zhat.row(i));
        }
    }
    Tensor::new(vec![total, c], data)
}

/// Hinge penalty on total information mass: `max(0, sum(I) − T/R)`.
/// Differentiable with subgradient 0 at the kink.
pub fn budget_loss<S: Scalar>(info: &InfoWeights<S>, t_len: usize, rate: S) -> Var<S> {
    assert!(rate > S::zero(), "expected downsampling rate must be positive");
    let target = S::from_f64(t_len as f64) / rate;
    info.weights.sum_all().add_scalar(-target).relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn segment_matches_hand_applied_case() {
        let ids = segment(&[0.5f64, 0.6, 0.4, 0.7], 1.0);
        assert_eq!(ids, vec![0, 1, 1, 2]);
    }

    #[test]
    fn tiny_weights_make_one_segment() {
        let t = 10;
        let w = vec![0.05f64; t]; // each < O/T
        let ids = segment(&w, 1.0);
        assert!(ids.iter().all(|&s| s == 0));
        let seg = Segmentation::from_raw(&ids);
        assert_eq!(seg.num_segments(), 1);
        assert_eq!(seg.durations, vec![t]);
    }

    /// Independent oracle: per-element loop with an explicit running sum.
    fn segment_oracle(weights: &[f64], threshold: f64) -> Vec<usize> {
        let mut acc = 0.0;
        let mut out = Vec::new();
        for &w in weights {
            acc += w;
            out.push((acc / threshold).floor() as usize);
        }
        out
    }

    #[test]
    fn segment_matches_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..500 {
            let t = rng.gen_range(1..40);
            let w: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() * 0.999 + 0.0005).collect();
            let threshold = rng.gen::<f64>() * 1.9 + 0.1;
            assert_eq!(segment(&w, threshold), segment_oracle(&w, threshold));
        }
    }

    #[test]
    fn downsample_single_segment_is_weighted_column_sum() {
        let tape = Tape::new();
        let h = tape.var(Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap());
        let w = tape.var(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let info = InfoWeights {
            weights: w,
            threshold: 10.0,
        };
        let seg = info.segmentation();
        assert_eq!(seg.num_segments(), 1);
        let (z, d) = downsample(&h, &info, &seg).unwrap();
        assert_eq!(z.value().data(), &[4.0, 6.0]);
        assert_eq!(d, vec![2]);
    }

    #[test]
    fn zero_weight_frame_counts_but_contributes_nothing() {
        let tape = Tape::new();
        let h = tape.var(Tensor::from_rows(&[vec![5.0f64], vec![7.0]]).unwrap());
        let w = tape.var(Tensor::new(vec![2, 1], vec![0.4, 0.0]).unwrap());
        let info = InfoWeights {
            weights: w,
            threshold: 1.0,
        };
        let seg = info.segmentation();
        let (z, d) = downsample(&h, &info, &seg).unwrap();
        assert_eq!(d, vec![2]);
        assert_eq!(z.value().data(), &[2.0]);
    }

    #[test]
    fn durations_follow_segment_ids() {
        let seg = Segmentation::from_raw(&[0, 1, 1, 2]);
        assert_eq!(seg.durations, vec![1, 2, 1]);
        assert_eq!(seg.ids, vec![0, 1, 1, 2]);
    }

    #[test]
    fn compaction_drops_skipped_ids() {
        // raw markers can skip values when O < max(I)
        let seg = Segmentation::from_raw(&[0, 2, 2, 5]);
        assert_eq!(seg.ids, vec![0, 1, 1, 2]);
        assert_eq!(seg.durations, vec![1, 2, 1]);
    }

    #[test]
    fn length_regulate_worked_example() {
        let zhat = Tensor::from_rows(&[vec![1.0f64], vec![2.0], vec![3.0]]).unwrap();
        let out = length_regulate(&zhat, &[1, 2, 3]).unwrap();
        assert_eq!(out.data(), &[1., 2., 2., 3., 3., 3.]);

        let id = length_regulate(&zhat, &[1, 1, 1]).unwrap();
        assert_eq!(id.data(), zhat.data());

        assert!(matches!(
            length_regulate(&zhat, &[1, 0, 1]),
            Err(Error::Duration(0, 1))
        ));
    }

    #[test]
    fn budget_loss_cases() {
        let tape = Tape::new();
        // sum(I) = 10, T = 48, R = 12 → max(0, 10 − 4) = 6
        let w = tape.var(Tensor::new(vec![10, 1], vec![1.0f64; 10]).unwrap());
        let info = InfoWeights {
            weights: w.clone(),
            threshold: 1.0,
        };
        let loss = budget_loss(&info, 48, 12.0);
        assert_eq!(loss.item(), 6.0);
        loss.backward().unwrap();
        assert!(w.grad().data().iter().all(|&g| g == 1.0));

        // inactive hinge
        let w2 = tape.var(Tensor::new(vec![4, 1], vec![0.1f64; 4]).unwrap());
        let info2 = InfoWeights {
            weights: w2,
            threshold: 1.0,
        };
        assert_eq!(budget_loss(&info2, 48, 12.0).item(), 0.0);
    }

    #[test]
    fn info_weights_zero_params_give_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut mlp = InfoMlp::<f64>::init(&mut rng, 4);
        for t in mlp.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::new();
        let h = tape.var(Tensor::from_rows(&[vec![1., 2., 3., 4.], vec![0.; 4]]).unwrap());
        let info = info_weights(&h, &mlp.lift(&tape), 1.0).unwrap();
        assert!(info.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn info_weights_saturate_with_large_out_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut mlp = InfoMlp::<f64>::init(&mut rng, 4);
        for t in mlp.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        mlp.out.bias.data_mut()[0] = 10.0;
        let tape = Tape::new();
        let h = tape.var(Tensor::zeros(vec![3, 4]));
        let info = info_weights(&h, &mlp.lift(&tape), 1.0).unwrap();
        assert!(info.values().iter().all(|&v| v > 0.9999));
    }

    #[test]
    fn info_weights_gradient_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mlp = InfoMlp::<f64>::init(&mut rng, 8);
        let x = crate::autodiff::nn::normal_init::<f64>(&mut rng, vec![5, 8], 1.0);
        let err = gradcheck::max_rel_error(
            &[x],
            &move |tape, v| {
                let info = info_weights(&v[0], &mlp.lift(tape), 1.0).unwrap();
                info.weights.sum_all()
            },
            gradcheck::DEFAULT_STEP,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn downsample_gradient_matches_finite_differences_with_fixed_segments() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let h = crate::autodiff::nn::normal_init::<f64>(&mut rng, vec![6, 3], 1.0);
        let w_data: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 0.8 + 0.1).collect();
        let w = Tensor::new(vec![6, 1], w_data.clone()).unwrap();
        let seg = Segmentation::from_weights(&w_data, 1.0);

        let err = gradcheck::max_rel_error(
            &[h, w],
            &move |tape, v| {
                let info = InfoWeights {
                    weights: v[1].clone(),
                    threshold: 1.0,
                };
                let (z, _) = downsample(&v[0], &info, &seg).unwrap();
                // weight the output so the root sees every element
                let coeff = tape.constant(Tensor::full(z.shape(), 1.0).map(|_| 0.7));
                z.mul(&coeff).unwrap().sum_all()
            },
            gradcheck::DEFAULT_STEP,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn regulate_of_downsampled_constants_restores_boundaries() {
        // piecewise-constant input: the re-expanded sequence must switch
        // values exactly where the segment ids switch
        let values = [2.0f64, -1.0, 4.0];
        let raw = [0usize, 0, 1, 1, 1, 2];
        let seg = Segmentation::from_raw(&raw);
        let zhat = Tensor::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let out = length_regulate(&zhat, &seg.durations).unwrap();
        for (j, &s) in seg.ids.iter().enumerate() {
            assert_eq!(out.row(j)[0], values[s]);
        }
    }

    proptest! {
        #[test]
        fn durations_always_sum_to_frame_count(
            weights in proptest::collection::vec(0.0005f64..0.9995, 1..60)
        ) {
            let seg = Segmentation::from_weights(&weights, 1.0);
            prop_assert_eq!(seg.durations.iter().sum::<usize>(), weights.len());
            prop_assert!(seg.num_segments() >= 1);
            prop_assert!(seg.num_segments() <= weights.len());
            // non-decreasing dense ids with steps of 0 or 1
            for pair in seg.ids.windows(2) {
                prop_assert!(pair[1] == pair[0] || pair[1] == pair[0] + 1);
            }
        }

        #[test]
        fn raising_one_weight_never_drops_segments(
            weights in proptest::collection::vec(0.01f64..0.95, 2..40),
            pick in 0usize..39,
            bump in 0.001f64..0.04,
        ) {
            let idx = pick % weights.len();
            let before = Segmentation::from_weights(&weights, 1.0).num_segments();
            let mut raised = weights.clone();
            raised[idx] = (raised[idx] + bump).min(0.999);
            let after = Segmentation::from_weights(&raised, 1.0).num_segments();
            prop_assert!(after >= before);
        }

        #[test]
        fn regulate_length_is_duration_sum(
            durations in proptest::collection::vec(1usize..7, 1..30)
        ) {
            let m = durations.len();
            let z = Tensor::<f64>::zeros(vec![m, 3]);
            let out = length_regulate(&z, &durations).unwrap();
            prop_assert_eq!(out.rows(), durations.iter().sum::<usize>());
        }
    }
}
