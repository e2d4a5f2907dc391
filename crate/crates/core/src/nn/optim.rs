use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// First-order optimizer over an ordered list of parameter tensors.
///
/// The parameter list passed to [`Optimizer::step`] must keep the same order
/// and shapes across calls; Adam moments are matched to it by position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        Optimizer {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::ADAM, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forgets accumulated moments for the parameter at `index`.
    pub fn reset_moments(&mut self, index: usize) {
        if let Some(m) = self.first.get_mut(index) {
            m.scale(0.0);
        }
        if let Some(v) = self.second.get_mut(index) {
            v.scale(0.0);
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or misaligned with its parameter.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    layer: "optimizer",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-self.lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != grads.len()
                    || self.first.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
                {
                    self.steps -= 1;
                    return Err(Error::InvalidArgument(
                        "parameter list changed shape between optimizer steps".into(),
                    ));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(vec![&mut p], &[scalar(2.0)]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
            let mut p = scalar(1.25);
            opt.step(vec![&mut p], &[scalar(0.0)]).unwrap();
            assert_eq!(p.data()[0], 1.25);
        }
    }

    #[test]
    fn adam_matches_hand_stepped_recurrence() {
        // reference recurrence written out step by step
        let (lr, b1, b2, eps) = (1e-3, 0.9_f64, 0.999_f64, 1e-8);
        let (mut p_ref, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        for t in 1..=3 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = scalar(0.5);
        let mut opt = Optimizer::adam(lr);
        for _ in 0..3 {
            opt.step(vec![&mut p], &[scalar(1.0)]).unwrap();
        }
        assert!((p.data()[0] - p_ref).abs() < 1e-15);
        // with a constant gradient every bias-corrected step is ~lr
        assert!((0.5 - p.data()[0] - 3e-3).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_halts() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::adam(0.1);
        assert!(opt.step(vec![&mut p], &[scalar(f64::NAN)]).is_err());
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn moments_must_match_parameter_shapes() {
        let mut opt = Optimizer::adam(0.1);
        let mut p = scalar(1.0);
        opt.step(vec![&mut p], &[scalar(1.0)]).unwrap();
        let mut q = Tensor::zeros(&[2]);
        assert!(opt.step(vec![&mut q], &[Tensor::zeros(&[2])]).is_err());
    }
}
