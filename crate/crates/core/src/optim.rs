//! AdamW with decoupled weight decay, plus warmup + decay schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecaySchedule {
    Cosine,
    Linear,
}

/// Learning-rate schedule: linear warmup to `peak`, then decay to `floor`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: DecaySchedule,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = (step.saturating_sub(self.warmup)).min(span) as f64 / span as f64;
        match self.decay {
            DecaySchedule::Cosine => {
                self.floor
                    + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            DecaySchedule::Linear => self.peak + (self.floor - self.peak) * progress,
        }
    }
}

/// Decoupled-weight-decay adaptive optimizer over a flat parameter list.
/// The parameter order must stay fixed across steps.
pub struct AdamW<S: Scalar> {
    beta1: S,
    beta2: S,
    eps: S,
    weight_decay: S,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(param_shapes: &[Vec<usize>], betas: [f64; 2], weight_decay: f64) -> Self {
        AdamW {
            beta1: S::from_f64(betas[0]),
            beta2: S::from_f64(betas[1]),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: S) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bias1 = S::one() - self.beta1.powi(t);
        let bias2 = S::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (S::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (S::one() - self.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1.0,
            floor: 0.0,
            warmup: 10,
            total: 110,
            decay: DecaySchedule::Cosine,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-12);
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!((s.at(60) - 0.5).abs() < 1e-9); // halfway through cosine
        assert!(s.at(109) < 0.01);

        let lin = LrSchedule {
            decay: DecaySchedule::Linear,
            ..s
        };
        assert!((lin.at(60) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize f(x) = (x - 3)²
        let mut x = Tensor::scalar(0.0f64);
        let mut opt = AdamW::new(&[vec![1]], [0.9, 0.99], 0.0);
        for _ in 0..800 {
            let g = Tensor::scalar(2.0 * (x.item() - 3.0));
            opt.step(&mut [&mut x], &[g], 0.05);
        }
        assert!((x.item() - 3.0).abs() < 1e-3, "got {}", x.item());
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut x = Tensor::scalar(1.0f64);
        let mut opt = AdamW::new(&[vec![1]], [0.9, 0.99], 0.1);
        for _ in 0..10 {
            opt.step(&mut [&mut x], &[Tensor::scalar(0.0)], 0.1);
        }
        assert!(x.item() < 1.0 && x.item() > 0.8);
    }
}
