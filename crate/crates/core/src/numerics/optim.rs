use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor2], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(Tensor2::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor2>, grads: &[Tensor2]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) {
                return Err(Error::Shape(format!(
                    "parameter {i} is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor2::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| !m.same_shape(g))
        {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                pd[i] -= self.lr * self.weight_decay * pd[i];
                pd[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_down_large_norms() {
        let mut g = vec![Tensor2::row_vector(vec![0.6, 0.8])];
        let n = clip_global_norm(&mut g, 0.5);
        assert!((n - 1.0).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.3).abs() < 1e-15 && (g[0].data()[1] - 0.4).abs() < 1e-15);

        let mut small = vec![Tensor2::row_vector(vec![0.06, 0.08])];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0].data(), &[0.06, 0.08]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor2::scalar(1.0);
        let mut opt = Adam::new(0.01, 0.0).unwrap();
        opt.step(vec![&mut p], &[Tensor2::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((1.0 - p.item() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor2::row_vector(vec![0.3, -2.0]);
        let before = p.clone();
        let mut opt = Adam::new(0.1, 0.0).unwrap();
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor2::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_bad_config_and_shapes() {
        assert!(Adam::new(0.0, 0.0).is_err());
        assert!(Adam::new(0.1, -1.0).is_err());
        let mut p = Tensor2::zeros(2, 2);
        let mut opt = Adam::new(0.1, 0.0).unwrap();
        assert!(matches!(
            opt.step(vec![&mut p], &[Tensor2::zeros(1, 2)]),
            Err(Error::Shape(_))
        ));
    }
}
